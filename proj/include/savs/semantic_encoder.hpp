#pragma once

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "savs/image.hpp"

namespace savs {

/// Total map from a parser's label space onto the canonical seven classes.
class LabelMapping {
 public:
  LabelMapping() = default;
  /// table[src] is the canonical class for source label src.
  explicit LabelMapping(std::vector<std::uint8_t> table);

  /// Default for the common 20-label human-parsing space (LIP/ATR ordering):
  /// 0 bg, 1 hat, 2 hair, 3 glove, 4 sunglasses, 5 upper-clothes, 6 dress,
  /// 7 coat, 8 socks, 9 pants, 10 jumpsuits, 11 scarf, 12 skirt, 13 face,
  /// 14 left-arm, 15 right-arm, 16 left-leg, 17 right-leg, 18 left-shoe,
  /// 19 right-shoe. Bags are not a separate label in that space, so
  /// sunglasses are the only source of the belongings class.
  static LabelMapping default_human_parsing();
  /// Identity on the canonical space.
  static LabelMapping identity();
  /// Reads `src_label -> canonical_class` lines; blank lines and `#` comments
  /// are skipped. Every label from 0 to the largest listed must be present.
  static LabelMapping load(const std::filesystem::path& path);

  std::size_t label_space_size() const { return table_.size(); }
  std::uint8_t operator[](std::size_t src) const { return table_.at(src); }
  const std::vector<std::uint8_t>& table() const { return table_; }

 private:
  std::vector<std::uint8_t> table_;
};

/// Throws std::domain_error naming the first label outside the mapping.
SemanticMap recombine_labels(const RawLabelMap& raw, const LabelMapping& mapping);

/// Throws std::domain_error if any label is outside {0..6}.
void validate_semantic_map(const SemanticMap& sem);

BinaryMask foreground_mask(const SemanticMap& sem);
Image extract_foreground(const Image& img, const SemanticMap& sem);

using ShieldClasses = std::set<std::uint8_t>;
inline const ShieldClasses kDefaultShieldClasses{kTorso, kPants};

/// Background (class 0) is rejected.
BinaryMask shielding_mask(const SemanticMap& sem, const ShieldClasses& shield_classes = kDefaultShieldClasses);

struct PixelPool {
  std::vector<Rgb> pixels;
  std::size_t source_count = 0;

  bool empty() const { return pixels.empty(); }
};

/// Gathers every masked pixel of the batch (image order, then row-major) and
/// shuffles the result with a seeded generator.
PixelPool build_pixel_pool(std::span<const Image> images, std::span<const BinaryMask> masks,
                           std::uint64_t rng_seed);

enum class DrawMode { kWithReplacement, kWithoutReplacement };

struct RenderedBatch {
  std::vector<Image> images;
  std::vector<BinaryMask> masks;
};

/// Replaces masked pixels with draws from the pool. Without replacement, the
/// batch may not ask for more pixels than the pool holds.
RenderedBatch render_shielded(std::span<const Image> images, std::span<const BinaryMask> masks,
                              const PixelPool& pool, std::uint64_t rng_seed,
                              DrawMode mode = DrawMode::kWithReplacement);

}  // namespace savs
