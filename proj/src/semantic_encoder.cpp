#include "savs/semantic_encoder.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>

namespace savs {

LabelMapping::LabelMapping(std::vector<std::uint8_t> table) : table_(std::move(table)) {
  if (table_.empty()) throw std::invalid_argument("label mapping is empty");
  for (std::size_t src = 0; src < table_.size(); ++src) {
    if (table_[src] >= kNumCanonicalClasses) {
      throw std::domain_error("label mapping sends source label " + std::to_string(src) +
                              " to non-canonical class " + std::to_string(table_[src]));
    }
  }
}

LabelMapping LabelMapping::default_human_parsing() {
  return LabelMapping({
      kBackground,  // 0 background
      kHead,        // 1 hat
      kHead,        // 2 hair
      kArms,        // 3 glove
      kBelongings,  // 4 sunglasses
      kTorso,       // 5 upper-clothes
      kTorso,       // 6 dress
      kTorso,       // 7 coat
      kLegs,        // 8 socks
      kPants,       // 9 pants
      kPants,       // 10 jumpsuits
      kTorso,       // 11 scarf
      kPants,       // 12 skirt
      kHead,        // 13 face
      kArms,        // 14 left-arm
      kArms,        // 15 right-arm
      kLegs,        // 16 left-leg
      kLegs,        // 17 right-leg
      kLegs,        // 18 left-shoe
      kLegs,        // 19 right-shoe
  });
}

LabelMapping LabelMapping::identity() {
  std::vector<std::uint8_t> t(kNumCanonicalClasses);
  for (int i = 0; i < kNumCanonicalClasses; ++i) t[i] = static_cast<std::uint8_t>(i);
  return LabelMapping(std::move(t));
}

LabelMapping LabelMapping::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open label mapping " + path.string());
  std::map<int, int> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto arrow = line.find("->");
    if (arrow == std::string::npos) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected `src -> class`");
    }
    int src = -1, dst = -1;
    std::istringstream lhs(line.substr(0, arrow)), rhs(line.substr(arrow + 2));
    if (!(lhs >> src) || !(rhs >> dst) || src < 0 || src > 255) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": malformed mapping entry");
    }
    if (!entries.emplace(src, dst).second) {
      throw std::runtime_error(path.string() + ": duplicate source label " + std::to_string(src));
    }
  }
  if (entries.empty()) throw std::runtime_error(path.string() + ": no mapping entries");
  std::vector<std::uint8_t> table(static_cast<std::size_t>(entries.rbegin()->first) + 1);
  for (std::size_t src = 0; src < table.size(); ++src) {
    auto it = entries.find(static_cast<int>(src));
    if (it == entries.end()) {
      throw std::domain_error(path.string() + ": source label " + std::to_string(src) + " is unmapped");
    }
    if (it->second < 0 || it->second >= kNumCanonicalClasses) {
      throw std::domain_error(path.string() + ": class " + std::to_string(it->second) + " is not canonical");
    }
    table[src] = static_cast<std::uint8_t>(it->second);
  }
  return LabelMapping(std::move(table));
}

SemanticMap recombine_labels(const RawLabelMap& raw, const LabelMapping& mapping) {
  SemanticMap out(raw.height, raw.width);
  const auto& table = mapping.table();
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto src = raw.values[i];
    if (src >= table.size()) {
      throw std::domain_error("raw label " + std::to_string(src) + " is outside the mapping domain (size " +
                              std::to_string(table.size()) + ")");
    }
    out.values[i] = table[src];
  }
  return out;
}

void validate_semantic_map(const SemanticMap& sem) {
  for (auto v : sem.values) {
    if (v >= kNumCanonicalClasses) {
      throw std::domain_error("semantic map holds non-canonical label " + std::to_string(v));
    }
  }
}

BinaryMask foreground_mask(const SemanticMap& sem) {
  BinaryMask mask(sem.height, sem.width);
  for (std::size_t i = 0; i < sem.size(); ++i) mask.values[i] = sem.values[i] != kBackground ? 1 : 0;
  return mask;
}

Image extract_foreground(const Image& img, const SemanticMap& sem) {
  require_same_shape(img, sem, "extract_foreground");
  Image out(img.height, img.width);
  for (std::size_t i = 0; i < img.num_pixels(); ++i) {
    if (sem.values[i] != kBackground) out.set_pixel(i, img.pixel(i));
  }
  return out;
}

BinaryMask shielding_mask(const SemanticMap& sem, const ShieldClasses& shield_classes) {
  bool member[256] = {};
  for (auto c : shield_classes) {
    if (c == kBackground) throw std::invalid_argument("shielding_mask: background cannot be shielded");
    if (c >= kNumCanonicalClasses) {
      throw std::invalid_argument("shielding_mask: class " + std::to_string(c) + " is not canonical");
    }
    member[c] = true;
  }
  BinaryMask mask(sem.height, sem.width);
  for (std::size_t i = 0; i < sem.size(); ++i) mask.values[i] = member[sem.values[i]] ? 1 : 0;
  return mask;
}

namespace {

void check_batch(std::span<const Image> images, std::span<const BinaryMask> masks, const char* what) {
  if (images.size() != masks.size()) {
    throw std::invalid_argument(std::string(what) + ": " + std::to_string(images.size()) + " images but " +
                                std::to_string(masks.size()) + " masks");
  }
  for (std::size_t b = 0; b < images.size(); ++b) require_same_shape(images[b], masks[b], what);
}

}  // namespace

PixelPool build_pixel_pool(std::span<const Image> images, std::span<const BinaryMask> masks,
                           std::uint64_t rng_seed) {
  check_batch(images, masks, "build_pixel_pool");
  if (images.empty()) throw std::invalid_argument("build_pixel_pool: empty batch");
  PixelPool pool;
  for (std::size_t b = 0; b < images.size(); ++b) {
    for (std::size_t i = 0; i < images[b].num_pixels(); ++i) {
      if (masks[b].values[i]) pool.pixels.push_back(images[b].pixel(i));
    }
  }
  pool.source_count = pool.pixels.size();
  std::mt19937_64 rng(rng_seed);
  std::shuffle(pool.pixels.begin(), pool.pixels.end(), rng);
  return pool;
}

RenderedBatch render_shielded(std::span<const Image> images, std::span<const BinaryMask> masks,
                              const PixelPool& pool, std::uint64_t rng_seed, DrawMode mode) {
  check_batch(images, masks, "render_shielded");
  RenderedBatch out;
  out.images.assign(images.begin(), images.end());
  out.masks.assign(masks.begin(), masks.end());

  std::mt19937_64 rng(rng_seed);
  std::vector<Rgb> remaining;
  if (mode == DrawMode::kWithoutReplacement) {
    remaining = pool.pixels;
    std::shuffle(remaining.begin(), remaining.end(), rng);
  }
  std::uniform_int_distribution<std::size_t> pick(0, pool.empty() ? 0 : pool.pixels.size() - 1);

  // Serial image-then-row-major order keeps the draw sequence reproducible.
  for (std::size_t b = 0; b < images.size(); ++b) {
    Image& img = out.images[b];
    for (std::size_t i = 0; i < img.num_pixels(); ++i) {
      if (!masks[b].values[i]) continue;
      if (pool.empty()) {
        throw std::logic_error("render_shielded: image " + std::to_string(b) +
                               " has shielded pixels but the pixel pool is empty");
      }
      if (mode == DrawMode::kWithReplacement) {
        img.set_pixel(i, pool.pixels[pick(rng)]);
      } else {
        if (remaining.empty()) {
          throw std::logic_error("render_shielded: pool exhausted while drawing without replacement");
        }
        img.set_pixel(i, remaining.back());
        remaining.pop_back();
      }
    }
  }
  return out;
}

}  // namespace savs
