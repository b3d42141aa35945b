#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "savs/data.hpp"
#include "savs/decoder.hpp"
#include "savs/losses.hpp"
#include "savs/semantic_encoder.hpp"

namespace savs {

struct TrainConfig {
  int batch_size = 32;
  int images_per_id = 4;
  int epochs = 60;
  double lr0 = 3.5e-3;
  double lr_decay = 0.1;
  int decay_epoch = 40;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int input_size = 64;
  /// Extractor layers; empty selects the preset for input_size.
  std::string layers;
  int reduction = 16;
  std::uint64_t seed = 0;

  double lambda_id = 1.0;
  double lambda_cir = 1.0;
  double lambda_sem = 1.0;
  double gamma = 32.0;
  double margin = 0.25;
  /// Explicit optima; NaN means derive from margin.
  double o_p = std::numeric_limits<double>::quiet_NaN();
  double o_n = std::numeric_limits<double>::quiet_NaN();

  Ablation ablation = Ablation::kHsaVcs;
  SemanticLossKind semantic_loss = SemanticLossKind::kL2;
  CircleGradient circle_gradient = CircleGradient::kDetachedWeights;
  ShieldClasses shield_classes = kDefaultShieldClasses;
  DrawMode draw_mode = DrawMode::kWithReplacement;
  /// Optional `src -> class` file; when set, masks are raw parser labels.
  std::string label_mapping;

  /// Stops after this many SGD steps when positive.
  int max_steps = 0;

  int ids_per_batch() const { return batch_size / images_per_id; }
  CircleLossConfig circle() const;
  LossWeights loss_weights() const;
  ExtractorConfig extractor() const;
  void validate() const;

  /// Applies one `key = value` setting; throws on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  /// Flat `key = value` text, one key per line, loadable by parse().
  std::string to_text() const;
  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);
  static std::vector<std::string> keys();
};

/// Learning rate for a zero-based epoch: lr0 before decay_epoch, then
/// lr0 · lr_decay.
double lr_at(int epoch, const TrainConfig& cfg);

/// Classical momentum: v ← μ·v + g (+ wd·θ); θ ← θ − lr·v. A non-finite
/// gradient aborts before anything is modified.
void sgd_step(std::span<Tensor* const> params, std::span<const Tensor> grads, std::vector<Tensor>& velocity,
              double lr, double momentum, double weight_decay = 0.0);

struct BatchSample {
  int index = 0;  // into the sampler's record list
  int person_id = 0;
  int clothing_id = 0;
};

struct BatchSpec {
  std::vector<BatchSample> samples;
};

/// Identity-balanced P×K sampler. Identities are visited round-robin over
/// a freshly shuffled list so every id appears once per pass before any
/// repeats; an id with fewer than K images is filled with replacement.
class PkSampler {
 public:
  PkSampler(const std::vector<SampleRecord>& records, int batch_size, int images_per_id, std::uint64_t seed);

  BatchSpec next();
  /// ceil(records / batch_size).
  int batches_per_epoch() const;
  int ids_per_batch() const { return ids_per_batch_; }

 private:
  std::vector<int> take_images(int person_id);

  int batch_size_;
  int k_;
  int ids_per_batch_;
  std::size_t num_records_;
  std::mt19937_64 rng_;
  std::vector<int> id_list_;
  std::vector<int> queue_;
  std::map<int, std::vector<int>> images_;
  std::map<int, std::size_t> cursor_;
  std::map<int, int> clothing_of_;
};

BatchSpec pk_sample(PkSampler& sampler);

struct LoadedSample {
  Image image;
  SemanticMap semantic;
  int person_id = 0;
  int clothing_id = 0;
  std::filesystem::path path;
};

/// Decodes image and mask, resizing to input_size when needed (bilinear for
/// pixels, nearest for labels). With a mapping the mask is recombined from
/// raw labels; otherwise it must already be canonical.
LoadedSample load_sample(const SampleRecord& record, int input_size, const LabelMapping* mapping);

struct EpochLoss {
  int epoch = 0;
  double id_loss = 0, cir_loss = 0, sem_loss = 0, total = 0, lr = 0;
};

struct StepInfo {
  int epoch = 0;
  int step = 0;
  std::uint64_t pool_seed = 0;
  std::size_t pool_size = 0;
  double id_loss = 0, cir_loss = 0, sem_loss = 0, total = 0;
};

struct TrainResult {
  ModelConfig model_config;
  SavsModel model;
  std::vector<EpochLoss> trace;
  std::vector<int> class_person_ids;  // class index → person id
  int steps = 0;
};

struct TrainHooks {
  std::function<void(const StepInfo&, const SavsModel&)> on_step;
  std::function<void(const EpochLoss&)> on_epoch;
};

TrainResult train(const std::vector<SampleRecord>& train_records, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

/// Checkpoint = every model parameter plus the config snapshot.
void save_checkpoint(const std::filesystem::path& path, const TrainResult& result, const TrainConfig& cfg);

struct LoadedCheckpoint {
  TrainConfig config;
  ModelConfig model_config;
  SavsModel model;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// `epoch,id_loss,cir_loss,sem_loss,total,lr` with a header row.
std::string loss_trace_csv(const std::vector<EpochLoss>& trace);

}  // namespace savs
