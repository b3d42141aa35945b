#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "savs/image.hpp"

namespace savs {

enum class Split { kTrain, kQuery, kGallery };
std::string to_string(Split s);

struct SampleRecord {
  std::filesystem::path image;
  std::filesystem::path mask;
  int person_id = 0;
  int clothing_id = 0;
  int sequence = 0;
  Split split = Split::kTrain;
};

/// `<pid>_<clothid>_<seq>.png` with zero-padded decimal fields.
std::string sample_filename(int person_id, int clothing_id, int sequence);
struct ParsedName {
  int person_id, clothing_id, sequence;
};
std::optional<ParsedName> parse_sample_filename(const std::string& name);

/// Reads `root/{train,query,gallery}/images/*.png` and the parallel `masks/`
/// directories. Missing split directories are skipped. Records are sorted by
/// split, then image path. Orphans and malformed names are reported together
/// in one std::runtime_error.
std::vector<SampleRecord> scan_dataset(const std::filesystem::path& root);
std::vector<SampleRecord> filter_split(const std::vector<SampleRecord>& records, Split split);

struct SynthSpec {
  int num_ids = 16;
  int clothes_per_id = 2;
  int images_per_combination = 4;
  int image_size = 64;
  std::uint64_t seed = 0;
  /// Probability that a clothing variant takes its colors from the shared
  /// two-color palette instead of a fresh random color.
  double confound_strength = 0.75;
  double train_fraction = 0.8;
  /// Std-dev of per-pixel Gaussian noise added after painting.
  double noise_sigma = 0.02;

  void validate() const;
};

/// Fixed per-identity appearance.
struct IdentityAttributes {
  Rgb head_color;
  Rgb arm_color;
  Rgb leg_color;
  Rgb leg_stripe_color;
  double body_width = 1.0;   // torso width scale
  double body_height = 1.0;  // torso length scale
  int leg_pattern = 0;       // 0 solid, 1 horizontal stripes, 2 vertical stripes, 3 checker
  bool has_marker = false;
  Rgb marker_color;
};

struct ClothingColors {
  Rgb torso;
  Rgb pants;
  bool from_palette = false;
};

/// Everything the generator decided, for tests and reports.
struct SynthManifest {
  SynthSpec spec;
  std::vector<Rgb> palette;
  std::vector<IdentityAttributes> identities;
  std::vector<std::vector<ClothingColors>> clothing;  // [pid][clothing id]
  std::vector<int> train_ids;
  std::vector<int> test_ids;
};

/// The decisions generate_synthetic would make, without touching disk.
SynthManifest plan_synthetic(const SynthSpec& spec);

struct RenderedSample {
  Image image;
  SemanticMap mask;
};

/// Renders one sample; `noise` toggles the additive pixel noise.
RenderedSample render_synthetic_sample(const SynthManifest& manifest, int person_id, int clothing_id, int sequence,
                                       bool noise = true);

/// Writes the dataset tree plus `manifest.json`. Train receives every
/// clothing variant of the training ids; for held-out ids clothing 0 goes to
/// query and the remaining variants to gallery.
SynthManifest generate_synthetic(const SynthSpec& spec, const std::filesystem::path& root);

}  // namespace savs
