#include "savs/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

namespace savs {

namespace {

constexpr char kMagic[5] = {'S', 'A', 'V', 'S', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& data, const std::filesystem::path& path) : data_(data), path_(path) {}

  const char* take(std::size_t n) {
    if (pos_ + n > data_.size()) throw std::runtime_error(path_.string() + ": truncated archive");
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() {
    const auto* p = reinterpret_cast<const unsigned char*>(take(4));
    return p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(*take(1)); }
  bool done() const { return pos_ == data_.size(); }

 private:
  const std::string& data_;
  const std::filesystem::path& path_;
  std::size_t pos_ = 0;
};

}  // namespace

void Archive::add(const Tensor& t) { add_floats(t.name, t.shape, t.data); }

void Archive::add_floats(std::string name, std::vector<int> shape, std::span<const double> values) {
  if (Tensor::element_count(shape) != values.size()) {
    throw std::invalid_argument("archive entry `" + name + "`: shape does not match element count");
  }
  ArchiveEntry e;
  e.name = std::move(name);
  e.shape = std::move(shape);
  e.type = ElementType::kFloat32;
  e.floats.assign(values.begin(), values.end());
  entries_.push_back(std::move(e));
}

void Archive::add_text(std::string name, const std::string& text) {
  ArchiveEntry e;
  e.name = std::move(name);
  e.shape = {static_cast<int>(text.size())};
  e.type = ElementType::kUInt8;
  e.bytes.assign(text.begin(), text.end());
  entries_.push_back(std::move(e));
}

const ArchiveEntry* Archive::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

std::vector<Tensor> Archive::tensors() const {
  std::vector<Tensor> out;
  for (const auto& e : entries_) {
    if (e.type != ElementType::kFloat32) continue;
    Tensor t;
    t.name = e.name;
    t.shape = e.shape;
    t.data.assign(e.floats.begin(), e.floats.end());
    out.push_back(std::move(t));
  }
  return out;
}

std::optional<std::string> Archive::text(const std::string& name) const {
  const auto* e = find(name);
  if (!e || e->type != ElementType::kUInt8) return std::nullopt;
  return std::string(e->bytes.begin(), e->bytes.end());
}

void Archive::save(const std::filesystem::path& path) const {
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    out.push_back(static_cast<char>(e.type));
    put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (int d : e.shape) put_u32(out, static_cast<std::uint32_t>(d));
  }
  for (const auto& e : entries_) {
    if (e.type == ElementType::kFloat32) {
      for (float f : e.floats) put_u32(out, std::bit_cast<std::uint32_t>(f));
    } else {
      out.append(e.bytes.begin(), e.bytes.end());
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write archive " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("failed writing archive " + path.string());
}

Archive Archive::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open archive " + path.string());
  const std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(data, path);
  if (std::memcmp(r.take(sizeof kMagic), kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error(path.string() + ": not a SAVS1 archive");
  }
  Archive a;
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    ArchiveEntry e;
    const std::uint32_t len = r.u32();
    e.name.assign(r.take(len), len);
    const std::uint8_t type = r.u8();
    if (type > 1) throw std::runtime_error(path.string() + ": unknown element type in `" + e.name + "`");
    e.type = static_cast<ElementType>(type);
    const std::uint32_t rank = r.u32();
    for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(static_cast<int>(r.u32()));
    a.entries_.push_back(std::move(e));
  }
  for (auto& e : a.entries_) {
    const std::size_t count = Tensor::element_count(e.shape);
    if (e.type == ElementType::kFloat32) {
      e.floats.resize(count);
      for (auto& v : e.floats) v = std::bit_cast<float>(r.u32());
    } else {
      const char* p = r.take(count);
      e.bytes.assign(p, p + count);
    }
  }
  if (!r.done()) throw std::runtime_error(path.string() + ": trailing bytes after payloads");
  return a;
}

}  // namespace savs
