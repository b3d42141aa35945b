#include "savs/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <regex>
#include <set>
#include <stdexcept>

#include "json.hpp"

#include "savs/png_io.hpp"

namespace fs = std::filesystem;

namespace savs {

std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kQuery: return "query";
    case Split::kGallery: return "gallery";
  }
  return "?";
}

std::string sample_filename(int person_id, int clothing_id, int sequence) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d_%02d_%03d.png", person_id, clothing_id, sequence);
  return buf;
}

std::optional<ParsedName> parse_sample_filename(const std::string& name) {
  static const std::regex pattern(R"(^(\d+)_(\d+)_(\d+)\.png$)");
  std::smatch m;
  if (!std::regex_match(name, m, pattern)) return std::nullopt;
  try {
    return ParsedName{std::stoi(m[1]), std::stoi(m[2]), std::stoi(m[3])};
  } catch (const std::out_of_range&) {
    return std::nullopt;
  }
}

namespace {

std::set<std::string> png_names(const fs::path& dir, std::vector<std::string>& offenders) {
  std::set<std::string> names;
  if (!fs::is_directory(dir)) return names;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (entry.path().extension() != ".png") continue;
    if (!parse_sample_filename(name)) {
      offenders.push_back("malformed name: " + entry.path().string());
      continue;
    }
    names.insert(name);
  }
  return names;
}

}  // namespace

std::vector<SampleRecord> scan_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw std::runtime_error("dataset root " + root.string() + " is not a directory");
  std::vector<SampleRecord> out;
  std::vector<std::string> offenders;
  for (Split split : {Split::kTrain, Split::kQuery, Split::kGallery}) {
    const fs::path dir = root / to_string(split);
    if (!fs::is_directory(dir)) continue;
    const auto images = png_names(dir / "images", offenders);
    const auto masks = png_names(dir / "masks", offenders);
    for (const auto& name : images) {
      if (!masks.contains(name)) {
        offenders.push_back("image without mask: " + (dir / "images" / name).string());
        continue;
      }
      const auto parsed = *parse_sample_filename(name);
      out.push_back({dir / "images" / name, dir / "masks" / name, parsed.person_id, parsed.clothing_id,
                     parsed.sequence, split});
    }
    for (const auto& name : masks) {
      if (!images.contains(name)) offenders.push_back("mask without image: " + (dir / "masks" / name).string());
    }
  }
  if (!offenders.empty()) {
    std::string msg = "dataset " + root.string() + " has " + std::to_string(offenders.size()) + " problem(s):";
    for (const auto& o : offenders) msg += "\n  " + o;
    throw std::runtime_error(msg);
  }
  return out;
}

std::vector<SampleRecord> filter_split(const std::vector<SampleRecord>& records, Split split) {
  std::vector<SampleRecord> out;
  std::copy_if(records.begin(), records.end(), std::back_inserter(out),
               [split](const SampleRecord& r) { return r.split == split; });
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator

void SynthSpec::validate() const {
  if (num_ids < 2) throw std::invalid_argument("synthetic data needs at least 2 identities");
  if (clothes_per_id < 2) throw std::invalid_argument("synthetic data needs at least 2 clothing variants per id");
  if (images_per_combination < 1) throw std::invalid_argument("images_per_combination must be positive");
  if (image_size < 32) throw std::invalid_argument("image_size must be at least 32");
  if (!(confound_strength >= 0.0 && confound_strength <= 1.0)) {
    throw std::invalid_argument("confound_strength must lie in [0,1]");
  }
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw std::invalid_argument("train_fraction must lie in (0,1)");
  if (noise_sigma < 0.0) throw std::invalid_argument("noise_sigma must be non-negative");
}

namespace {

Rgb hsv(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  Rgb rgb{};
  switch (static_cast<int>(hp) % 6) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  const double m = v - c;
  for (double& ch : rgb) ch += m;
  return rgb;
}

// Colors live on the 8-bit grid so noise-free renders survive PNG round trips.
Rgb quantize(Rgb c) {
  for (double& ch : c) ch = std::lround(std::clamp(ch, 0.0, 1.0) * 255.0) / 255.0;
  return c;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Canvas {
  Image& img;
  SemanticMap* mask;

  void fill_rect(int x0, int y0, int x1, int y1, const Rgb& c, std::uint8_t cls) {
    x0 = std::max(x0, 0);
    y0 = std::max(y0, 0);
    x1 = std::min(x1, img.width);
    y1 = std::min(y1, img.height);
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) paint(x, y, c, cls);
    }
  }
  void paint(int x, int y, const Rgb& c, std::uint8_t cls) {
    img.set_pixel(static_cast<std::size_t>(y) * img.width + x, c);
    if (mask) mask->at(y, x) = cls;
  }
};

}  // namespace

SynthManifest plan_synthetic(const SynthSpec& spec) {
  spec.validate();
  SynthManifest m;
  m.spec = spec;
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const double palette_hue = unit(rng);
  m.palette = {quantize(hsv(palette_hue, 0.8, 0.85)), quantize(hsv(palette_hue + 0.5, 0.8, 0.85))};

  const double hue_offset = unit(rng);
  for (int pid = 0; pid < spec.num_ids; ++pid) {
    IdentityAttributes a;
    // Golden-ratio hue spacing keeps head colors of different ids apart.
    const double head_hue = hue_offset + pid * 0.6180339887 + 0.05 * (unit(rng) - 0.5);
    a.head_color = quantize(hsv(head_hue, 0.55 + 0.3 * unit(rng), 0.6 + 0.35 * unit(rng)));
    a.arm_color = quantize(hsv(unit(rng), 0.3 + 0.4 * unit(rng), 0.5 + 0.4 * unit(rng)));
    a.leg_color = quantize(hsv(unit(rng), 0.4 + 0.5 * unit(rng), 0.3 + 0.6 * unit(rng)));
    a.leg_stripe_color = quantize(hsv(unit(rng), 0.4 + 0.5 * unit(rng), 0.3 + 0.6 * unit(rng)));
    a.body_width = 0.75 + 0.5 * unit(rng);
    a.body_height = 0.8 + 0.4 * unit(rng);
    a.leg_pattern = static_cast<int>(unit(rng) * 4.0) % 4;
    a.has_marker = unit(rng) < 0.5;
    a.marker_color = quantize(hsv(unit(rng), 0.9, 0.9));
    m.identities.push_back(a);
  }

  for (int pid = 0; pid < spec.num_ids; ++pid) {
    std::vector<ClothingColors> variants;
    std::set<int> used_combos;
    for (int cid = 0; cid < spec.clothes_per_id; ++cid) {
      ClothingColors c;
      if (unit(rng) < spec.confound_strength) {
        // Prefer a palette combination this id has not worn yet.
        int combo = static_cast<int>(unit(rng) * 4.0) % 4;
        for (int tries = 0; tries < 4 && used_combos.contains(combo); ++tries) combo = (combo + 1) % 4;
        used_combos.insert(combo);
        c.torso = m.palette[combo & 1];
        c.pants = m.palette[(combo >> 1) & 1];
        c.from_palette = true;
      } else {
        c.torso = quantize(hsv(unit(rng), 0.5 + 0.5 * unit(rng), 0.4 + 0.55 * unit(rng)));
        c.pants = quantize(hsv(unit(rng), 0.5 + 0.5 * unit(rng), 0.4 + 0.55 * unit(rng)));
      }
      variants.push_back(c);
    }
    m.clothing.push_back(std::move(variants));
  }

  const int n_train =
      std::clamp(static_cast<int>(std::floor(spec.train_fraction * spec.num_ids)), 1, spec.num_ids - 1);
  for (int pid = 0; pid < spec.num_ids; ++pid) (pid < n_train ? m.train_ids : m.test_ids).push_back(pid);
  return m;
}

RenderedSample render_synthetic_sample(const SynthManifest& m, int pid, int cid, int seq, bool noise) {
  const auto& spec = m.spec;
  const int S = spec.image_size;
  const double u = S / 64.0;
  std::mt19937_64 rng(splitmix64(spec.seed ^ splitmix64((static_cast<std::uint64_t>(pid) << 32) ^
                                                        (static_cast<std::uint64_t>(cid) << 16) ^
                                                        static_cast<std::uint64_t>(seq))));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto& id = m.identities.at(pid);
  const auto& cloth = m.clothing.at(pid).at(cid);

  RenderedSample out{Image(S, S), SemanticMap(S, S)};
  Canvas bg{out.image, nullptr};
  const Rgb base = quantize(hsv(unit(rng), 0.2 * unit(rng), 0.2 + 0.4 * unit(rng)));
  bg.fill_rect(0, 0, S, S, base, kBackground);
  for (int k = 0; k < 3; ++k) {
    const int w = static_cast<int>((4 + 12 * unit(rng)) * u), h = static_cast<int>((4 + 12 * unit(rng)) * u);
    const int x = static_cast<int>(unit(rng) * (S - w)), y = static_cast<int>(unit(rng) * (S - h));
    bg.fill_rect(x, y, x + w, y + h, quantize(hsv(unit(rng), 0.5 * unit(rng), 0.2 + 0.6 * unit(rng))), kBackground);
  }

  Canvas c{out.image, &out.mask};
  auto px = [u](double v) { return static_cast<int>(std::lround(v * u)); };
  const int dx = static_cast<int>(std::lround((unit(rng) * 4.0 - 2.0) * u));
  const int dy = static_cast<int>(std::lround((unit(rng) * 4.0 - 2.0) * u));
  const double cx = S / 2.0 + dx;
  const double hw = 8.0 * id.body_width;  // torso half-width, in 64-px units
  const double top = 13.0 + dy / u;
  const double th = 17.0 * id.body_height;
  const double pants_top = top + th;
  const double pants_h = 11.0;
  const double pants_hw = hw * 0.9;

  // Legs.
  const int leg_y0 = px(pants_top + pants_h), leg_y1 = S - px(1.0);
  const int legs[2][2] = {{static_cast<int>(cx - pants_hw * u), static_cast<int>(cx - 1.0 * u)},
                          {static_cast<int>(cx + 1.0 * u), static_cast<int>(cx + pants_hw * u)}};
  for (const auto& leg : legs) {
    for (int y = std::max(leg_y0, 0); y < std::min(leg_y1, S); ++y) {
      for (int x = std::max(leg[0], 0); x < std::min(leg[1], S); ++x) {
        const int ly = y - leg_y0, lx = x - leg[0];
        const int band = std::max(1, px(3.0));
        bool stripe = false;
        switch (id.leg_pattern) {
          case 1: stripe = (ly / band) % 2 == 1; break;
          case 2: stripe = (lx / std::max(1, px(2.0))) % 2 == 1; break;
          case 3: stripe = ((ly / band) + (lx / std::max(1, px(2.0)))) % 2 == 1; break;
          default: break;
        }
        c.paint(x, y, stripe ? id.leg_stripe_color : id.leg_color, kLegs);
      }
    }
  }
  // Pants, torso, arms, head.
  c.fill_rect(static_cast<int>(cx - pants_hw * u), px(pants_top), static_cast<int>(cx + pants_hw * u),
              px(pants_top + pants_h), cloth.pants, kPants);
  c.fill_rect(static_cast<int>(cx - hw * u), px(top), static_cast<int>(cx + hw * u), px(top + th), cloth.torso, kTorso);
  c.fill_rect(static_cast<int>(cx - (hw + 4.0) * u), px(top + 1.0), static_cast<int>(cx - hw * u), px(top + th + 2.0),
              id.arm_color, kArms);
  c.fill_rect(static_cast<int>(cx + hw * u), px(top + 1.0), static_cast<int>(cx + (hw + 4.0) * u), px(top + th + 2.0),
              id.arm_color, kArms);
  const double hcx = cx, hcy = (7.0 + dy / u) * u, rx = 5.0 * u, ry = 6.0 * u;
  for (int y = std::max(0, static_cast<int>(hcy - ry)); y <= std::min(S - 1, static_cast<int>(hcy + ry)); ++y) {
    for (int x = std::max(0, static_cast<int>(hcx - rx)); x <= std::min(S - 1, static_cast<int>(hcx + rx)); ++x) {
      const double ex = (x + 0.5 - hcx) / rx, ey = (y + 0.5 - hcy) / ry;
      if (ex * ex + ey * ey <= 1.0) c.paint(x, y, id.head_color, kHead);
    }
  }
  if (id.has_marker) {
    c.fill_rect(static_cast<int>(cx + (hw + 4.0) * u), px(top + th - 2.0), static_cast<int>(cx + (hw + 10.0) * u),
                px(top + th + 4.0), id.marker_color, kBelongings);
  }

  if (noise && spec.noise_sigma > 0.0) {
    std::normal_distribution<double> gauss(0.0, spec.noise_sigma);
    for (double& v : out.image.pixels) v = std::clamp(v + gauss(rng), 0.0, 1.0);
  }
  return out;
}

namespace {

nlohmann::json rgb_json(const Rgb& c) { return nlohmann::json::array({c[0], c[1], c[2]}); }

void write_manifest(const SynthManifest& m, const fs::path& path) {
  using nlohmann::json;
  json j;
  j["spec"] = {{"num_ids", m.spec.num_ids},
               {"clothes_per_id", m.spec.clothes_per_id},
               {"images_per_combination", m.spec.images_per_combination},
               {"image_size", m.spec.image_size},
               {"seed", m.spec.seed},
               {"confound_strength", m.spec.confound_strength},
               {"train_fraction", m.spec.train_fraction},
               {"noise_sigma", m.spec.noise_sigma}};
  j["palette"] = json::array({rgb_json(m.palette[0]), rgb_json(m.palette[1])});
  json ids = json::array();
  for (std::size_t pid = 0; pid < m.identities.size(); ++pid) {
    const auto& a = m.identities[pid];
    json clothing = json::array();
    for (const auto& c : m.clothing[pid]) {
      clothing.push_back({{"torso", rgb_json(c.torso)}, {"pants", rgb_json(c.pants)}, {"from_palette", c.from_palette}});
    }
    ids.push_back({{"person_id", pid},
                   {"head_color", rgb_json(a.head_color)},
                   {"body_width", a.body_width},
                   {"body_height", a.body_height},
                   {"leg_pattern", a.leg_pattern},
                   {"has_marker", a.has_marker},
                   {"clothing", clothing}});
  }
  j["identities"] = ids;
  j["train_ids"] = m.train_ids;
  j["test_ids"] = m.test_ids;
  std::ofstream(path) << j.dump(2) << '\n';
}

}  // namespace

SynthManifest generate_synthetic(const SynthSpec& spec, const fs::path& root) {
  SynthManifest m = plan_synthetic(spec);
  for (Split s : {Split::kTrain, Split::kQuery, Split::kGallery}) {
    fs::create_directories(root / to_string(s) / "images");
    fs::create_directories(root / to_string(s) / "masks");
  }
  const std::set<int> train(m.train_ids.begin(), m.train_ids.end());
  for (int pid = 0; pid < spec.num_ids; ++pid) {
    for (int cid = 0; cid < spec.clothes_per_id; ++cid) {
      const Split split = train.contains(pid) ? Split::kTrain : (cid == 0 ? Split::kQuery : Split::kGallery);
      const fs::path dir = root / to_string(split);
      for (int seq = 0; seq < spec.images_per_combination; ++seq) {
        const auto sample = render_synthetic_sample(m, pid, cid, seq);
        const std::string name = sample_filename(pid, cid, seq);
        write_rgb_png(dir / "images" / name, sample.image);
        write_label_png(dir / "masks" / name, sample.mask);
      }
    }
  }
  write_manifest(m, root / "manifest.json");
  return m;
}

}  // namespace savs
