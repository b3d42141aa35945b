#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "savs/tensor.hpp"

namespace savs {

// Layout, all integers little-endian:
//   "SAVS1"
//   u32 entry count
//   per entry: u32 name length, name bytes, u8 element type, u32 rank, u32 dims[rank]
//   payloads in manifest order (float32 LE for kFloat32, raw bytes for kUInt8)
enum class ElementType : std::uint8_t { kFloat32 = 0, kUInt8 = 1 };

struct ArchiveEntry {
  std::string name;
  std::vector<int> shape;
  ElementType type = ElementType::kFloat32;
  std::vector<float> floats;
  std::vector<std::uint8_t> bytes;
};

class Archive {
 public:
  void add(const Tensor& t);
  void add_floats(std::string name, std::vector<int> shape, std::span<const double> values);
  void add_text(std::string name, const std::string& text);

  const std::vector<ArchiveEntry>& entries() const { return entries_; }
  const ArchiveEntry* find(const std::string& name) const;
  /// Float entries widened back to double.
  std::vector<Tensor> tensors() const;
  std::optional<std::string> text(const std::string& name) const;

  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);

 private:
  std::vector<ArchiveEntry> entries_;
};

}  // namespace savs
