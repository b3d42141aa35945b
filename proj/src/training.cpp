#include "savs/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "savs/archive.hpp"
#include "savs/png_io.hpp"

namespace savs {

// ---------------------------------------------------------------------------
// TrainConfig

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

int to_int(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  long long x = 0;
  try {
    x = std::stoll(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || pos == 0) throw std::invalid_argument("config `" + key + "`: expected an integer, got `" + v + "`");
  return static_cast<int>(x);
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || pos == 0) throw std::invalid_argument("config `" + key + "`: expected a number, got `" + v + "`");
  return x;
}

std::string fmt_double(double v) {
  if (std::isnan(v)) return "auto";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

CircleLossConfig TrainConfig::circle() const {
  CircleLossConfig c = CircleLossConfig::from_margin(gamma, margin);
  if (!std::isnan(o_p)) c.o_p = o_p;
  if (!std::isnan(o_n)) c.o_n = o_n;
  return c;
}

LossWeights TrainConfig::loss_weights() const { return {lambda_id, lambda_cir, lambda_sem}; }

ExtractorConfig TrainConfig::extractor() const {
  if (layers.empty()) return ExtractorConfig::for_input_size(input_size);
  ExtractorConfig c;
  c.input_height = c.input_width = input_size;
  c.layers = ExtractorConfig::parse_layers(layers);
  return c;
}

void TrainConfig::validate() const {
  if (batch_size < 1 || images_per_id < 1 || batch_size % images_per_id != 0) {
    throw std::invalid_argument("batch_size must be a positive multiple of images_per_id");
  }
  if (epochs < 1) throw std::invalid_argument("epochs must be positive");
  if (decay_epoch < 0 || decay_epoch >= epochs) throw std::invalid_argument("decay_epoch must lie in [0, epochs)");
  if (lr0 < 0 || lr_decay < 0) throw std::invalid_argument("learning rate settings must be non-negative");
  if (momentum < 0 || momentum >= 1) throw std::invalid_argument("momentum must lie in [0,1)");
  if (weight_decay < 0) throw std::invalid_argument("weight_decay must be non-negative");
  if (input_size < 1) throw std::invalid_argument("input_size must be positive");
  if (reduction < 1) throw std::invalid_argument("reduction must be positive");
  loss_weights().validate();
  circle().validate();
  for (auto c : shield_classes) {
    if (c == kBackground || c >= kNumCanonicalClasses) {
      throw std::invalid_argument("shield_classes must be canonical non-background classes");
    }
  }
  const auto ex = extractor();
  (void)ex.output_height();
  (void)ex.output_width();
  if (ablation != Ablation::kBaseline && ex.output_channels() % reduction != 0) {
    throw std::invalid_argument("reduction must divide the extractor's output channels");
  }
}

std::vector<std::string> TrainConfig::keys() {
  return {"batch_size",  "images_per_id",  "epochs",     "lr0",           "lr_decay",       "decay_epoch",
          "momentum",    "weight_decay",   "input_size", "layers",        "reduction",      "seed",
          "lambda_id",   "lambda_cir",     "lambda_sem", "gamma",         "margin",         "o_p",
          "o_n",         "ablation",       "semantic_loss", "circle_gradient", "shield_classes", "draw_mode",
          "label_mapping", "max_steps"};
}

void TrainConfig::set(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "batch_size") batch_size = to_int(key, v);
  else if (key == "images_per_id") images_per_id = to_int(key, v);
  else if (key == "epochs") epochs = to_int(key, v);
  else if (key == "lr0") lr0 = to_double(key, v);
  else if (key == "lr_decay") lr_decay = to_double(key, v);
  else if (key == "decay_epoch") decay_epoch = to_int(key, v);
  else if (key == "momentum") momentum = to_double(key, v);
  else if (key == "weight_decay") weight_decay = to_double(key, v);
  else if (key == "input_size") {
    std::string s = v;
    if (auto x = s.find('x'); x != std::string::npos) {
      if (s.substr(0, x) != s.substr(x + 1)) throw std::invalid_argument("input_size must be square");
      s = s.substr(0, x);
    }
    input_size = to_int(key, s);
  } else if (key == "layers") layers = v;
  else if (key == "reduction") reduction = to_int(key, v);
  else if (key == "seed") {
    try {
      std::size_t pos = 0;
      seed = std::stoull(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
    } catch (const std::exception&) {
      throw std::invalid_argument("config `seed`: expected a non-negative integer, got `" + v + "`");
    }
  } else if (key == "lambda_id") lambda_id = to_double(key, v);
  else if (key == "lambda_cir") lambda_cir = to_double(key, v);
  else if (key == "lambda_sem") lambda_sem = to_double(key, v);
  else if (key == "gamma") gamma = to_double(key, v);
  else if (key == "margin") margin = to_double(key, v);
  else if (key == "o_p") o_p = v == "auto" ? std::numeric_limits<double>::quiet_NaN() : to_double(key, v);
  else if (key == "o_n") o_n = v == "auto" ? std::numeric_limits<double>::quiet_NaN() : to_double(key, v);
  else if (key == "ablation") ablation = parse_ablation(v);
  else if (key == "semantic_loss") {
    if (v == "l2") semantic_loss = SemanticLossKind::kL2;
    else if (v == "squared") semantic_loss = SemanticLossKind::kSquaredL2;
    else throw std::invalid_argument("semantic_loss must be l2 or squared");
  } else if (key == "circle_gradient") {
    if (v == "exact") circle_gradient = CircleGradient::kExact;
    else if (v == "detached") circle_gradient = CircleGradient::kDetachedWeights;
    else throw std::invalid_argument("circle_gradient must be exact or detached");
  } else if (key == "shield_classes") {
    shield_classes.clear();
    if (v != "none" && !v.empty()) {
      std::stringstream ss(v);
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        const int c = to_int(key, trim(tok));
        if (c <= 0 || c >= kNumCanonicalClasses) {
          throw std::invalid_argument("shield class " + std::to_string(c) + " is not a non-background canonical class");
        }
        shield_classes.insert(static_cast<std::uint8_t>(c));
      }
    }
  } else if (key == "draw_mode") {
    if (v == "with_replacement") draw_mode = DrawMode::kWithReplacement;
    else if (v == "without_replacement") draw_mode = DrawMode::kWithoutReplacement;
    else throw std::invalid_argument("draw_mode must be with_replacement or without_replacement");
  } else if (key == "label_mapping") label_mapping = v;
  else if (key == "max_steps") max_steps = to_int(key, v);
  else throw std::invalid_argument("unknown config key `" + key + "`");
}

std::string TrainConfig::to_text() const {
  std::ostringstream o;
  auto line = [&o](const char* k, const std::string& v) { o << k << " = " << v << '\n'; };
  line("batch_size", std::to_string(batch_size));
  line("images_per_id", std::to_string(images_per_id));
  line("epochs", std::to_string(epochs));
  line("lr0", fmt_double(lr0));
  line("lr_decay", fmt_double(lr_decay));
  line("decay_epoch", std::to_string(decay_epoch));
  line("momentum", fmt_double(momentum));
  line("weight_decay", fmt_double(weight_decay));
  line("input_size", std::to_string(input_size));
  line("layers", layers.empty() ? extractor().layers_string() : layers);
  line("reduction", std::to_string(reduction));
  line("seed", std::to_string(seed));
  line("lambda_id", fmt_double(lambda_id));
  line("lambda_cir", fmt_double(lambda_cir));
  line("lambda_sem", fmt_double(lambda_sem));
  line("gamma", fmt_double(gamma));
  line("margin", fmt_double(margin));
  line("o_p", fmt_double(o_p));
  line("o_n", fmt_double(o_n));
  line("ablation", to_string(ablation));
  line("semantic_loss", semantic_loss == SemanticLossKind::kL2 ? "l2" : "squared");
  line("circle_gradient", circle_gradient == CircleGradient::kExact ? "exact" : "detached");
  std::string sc;
  for (auto c : shield_classes) sc += (sc.empty() ? "" : ",") + std::to_string(c);
  line("shield_classes", sc.empty() ? "none" : sc);
  line("draw_mode", draw_mode == DrawMode::kWithReplacement ? "with_replacement" : "without_replacement");
  line("label_mapping", label_mapping);
  line("max_steps", std::to_string(max_steps));
  return o.str();
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected `key = value`");
    }
    try {
      cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse(ss.str());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

double lr_at(int epoch, const TrainConfig& cfg) { return epoch < cfg.decay_epoch ? cfg.lr0 : cfg.lr0 * cfg.lr_decay; }

void sgd_step(std::span<Tensor* const> params, std::span<const Tensor> grads, std::vector<Tensor>& velocity,
              double lr, double momentum, double weight_decay) {
  if (params.size() != grads.size()) throw std::invalid_argument("sgd_step: parameter/gradient count mismatch");
  if (velocity.empty()) {
    for (const Tensor* p : params) velocity.emplace_back(p->name, p->shape);
  }
  if (velocity.size() != params.size()) throw std::invalid_argument("sgd_step: velocity count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].data.size() != params[i]->data.size() || velocity[i].data.size() != params[i]->data.size()) {
      throw std::invalid_argument("sgd_step: shape mismatch for `" + params[i]->name + "`");
    }
    for (double g : grads[i].data) {
      if (!std::isfinite(g)) throw std::domain_error("sgd_step: non-finite gradient in `" + params[i]->name + "`");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& theta = params[i]->data;
    auto& v = velocity[i].data;
    const auto& g = grads[i].data;
    for (std::size_t k = 0; k < theta.size(); ++k) {
      v[k] = momentum * v[k] + g[k] + weight_decay * theta[k];
      theta[k] -= lr * v[k];
    }
  }
}

// ---------------------------------------------------------------------------
// PK sampling

PkSampler::PkSampler(const std::vector<SampleRecord>& records, int batch_size, int images_per_id, std::uint64_t seed)
    : batch_size_(batch_size), k_(images_per_id), num_records_(records.size()), rng_(seed) {
  if (images_per_id < 1 || batch_size < images_per_id || batch_size % images_per_id != 0) {
    throw std::invalid_argument("PK sampler: batch size must be a positive multiple of images per id");
  }
  ids_per_batch_ = batch_size / images_per_id;
  for (std::size_t i = 0; i < records.size(); ++i) {
    images_[records[i].person_id].push_back(static_cast<int>(i));
  }
  for (const auto& [pid, idx] : images_) id_list_.push_back(pid);
  if (static_cast<int>(id_list_.size()) < ids_per_batch_) {
    throw std::invalid_argument("PK sampler: dataset has " + std::to_string(id_list_.size()) +
                                " identities, a batch needs " + std::to_string(ids_per_batch_));
  }
  for (auto& [pid, idx] : images_) {
    std::shuffle(idx.begin(), idx.end(), rng_);
    cursor_[pid] = 0;
  }
  for (std::size_t i = 0; i < records.size(); ++i) clothing_of_[static_cast<int>(i)] = records[i].clothing_id;
}

int PkSampler::batches_per_epoch() const {
  return static_cast<int>((num_records_ + batch_size_ - 1) / batch_size_);
}

std::vector<int> PkSampler::take_images(int pid) {
  auto& idx = images_.at(pid);
  auto& cur = cursor_.at(pid);
  std::vector<int> out;
  if (static_cast<int>(idx.size()) < k_) {
    out = idx;
    std::uniform_int_distribution<std::size_t> pick(0, idx.size() - 1);
    while (static_cast<int>(out.size()) < k_) out.push_back(idx[pick(rng_)]);
    return out;
  }
  if (cur + k_ > idx.size()) {
    std::shuffle(idx.begin(), idx.end(), rng_);
    cur = 0;
  }
  out.assign(idx.begin() + static_cast<std::ptrdiff_t>(cur), idx.begin() + static_cast<std::ptrdiff_t>(cur + k_));
  cur += k_;
  return out;
}

BatchSpec PkSampler::next() {
  std::vector<int> chosen;
  std::vector<int> deferred;
  while (static_cast<int>(chosen.size()) < ids_per_batch_) {
    if (queue_.empty()) {
      queue_ = id_list_;
      std::shuffle(queue_.begin(), queue_.end(), rng_);
      std::reverse(queue_.begin(), queue_.end());  // consumed from the back
    }
    const int pid = queue_.back();
    queue_.pop_back();
    if (std::find(chosen.begin(), chosen.end(), pid) != chosen.end()) {
      deferred.push_back(pid);
    } else {
      chosen.push_back(pid);
    }
  }
  // Ids skipped as duplicates go first in the next batch.
  for (auto it = deferred.rbegin(); it != deferred.rend(); ++it) queue_.push_back(*it);

  BatchSpec spec;
  for (int pid : chosen) {
    for (int i : take_images(pid)) spec.samples.push_back({i, pid, clothing_of_.at(i)});
  }
  return spec;
}

BatchSpec pk_sample(PkSampler& sampler) { return sampler.next(); }

// ---------------------------------------------------------------------------
// Loading

namespace {

Image resize_bilinear(const Image& src, int h, int w) {
  if (src.height == h && src.width == w) return src;
  Image out(h, w);
  const double sy = static_cast<double>(src.height) / h, sx = static_cast<double>(src.width) / w;
  for (int y = 0; y < h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, src.height - 1);
    const double ay = fy - y0;
    for (int x = 0; x < w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, src.width - 1);
      const double ax = fx - x0;
      for (int c = 0; c < 3; ++c) {
        auto at = [&](int yy, int xx) { return src.pixels[(static_cast<std::size_t>(yy) * src.width + xx) * 3 + c]; };
        const double top = at(y0, x0) * (1 - ax) + at(y0, x1) * ax;
        const double bot = at(y1, x0) * (1 - ax) + at(y1, x1) * ax;
        out.pixels[(static_cast<std::size_t>(y) * w + x) * 3 + c] = top * (1 - ay) + bot * ay;
      }
    }
  }
  return out;
}

RawLabelMap resize_nearest(const RawLabelMap& src, int h, int w) {
  if (src.height == h && src.width == w) return src;
  RawLabelMap out(h, w);
  for (int y = 0; y < h; ++y) {
    const int sy = std::min(src.height - 1, static_cast<int>((y + 0.5) * src.height / h));
    for (int x = 0; x < w; ++x) {
      const int sx = std::min(src.width - 1, static_cast<int>((x + 0.5) * src.width / w));
      out.at(y, x) = src.at(sy, sx);
    }
  }
  return out;
}

}  // namespace

LoadedSample load_sample(const SampleRecord& record, int input_size, const LabelMapping* mapping) {
  LoadedSample s;
  const Image img = read_rgb_png(record.image);
  const RawLabelMap raw = read_label_png(record.mask);
  if (!raw.same_shape(img.height, img.width)) {
    throw std::runtime_error(record.mask.string() + ": mask size differs from " + record.image.string());
  }
  s.image = resize_bilinear(img, input_size, input_size);
  const RawLabelMap sized = resize_nearest(raw, input_size, input_size);
  if (mapping) {
    s.semantic = recombine_labels(sized, *mapping);
  } else {
    s.semantic.height = sized.height;
    s.semantic.width = sized.width;
    s.semantic.values = sized.values;
    try {
      validate_semantic_map(s.semantic);
    } catch (const std::domain_error& e) {
      throw std::domain_error(record.mask.string() + ": " + e.what() + " (pass a label mapping for raw masks)");
    }
  }
  s.person_id = record.person_id;
  s.clothing_id = record.clothing_id;
  s.path = record.image;
  return s;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::vector<LoadedSample> load_all(const std::vector<SampleRecord>& records, int input_size,
                                   const LabelMapping* mapping) {
  std::vector<LoadedSample> out(records.size());
  std::vector<std::string> errors(records.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < records.size(); ++i) {
    try {
      out[i] = load_sample(records[i], input_size, mapping);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw std::runtime_error(e);
  }
  return out;
}

}  // namespace

TrainResult train(const std::vector<SampleRecord>& records, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  if (records.empty()) throw std::invalid_argument("train: no training samples");
  std::optional<LabelMapping> mapping;
  if (!cfg.label_mapping.empty()) mapping = LabelMapping::load(cfg.label_mapping);
  const auto samples = load_all(records, cfg.input_size, mapping ? &*mapping : nullptr);

  std::set<int> pids;
  for (const auto& r : records) pids.insert(r.person_id);
  std::vector<int> class_person_ids(pids.begin(), pids.end());
  std::map<int, int> class_of;
  for (std::size_t i = 0; i < class_person_ids.size(); ++i) class_of[class_person_ids[i]] = static_cast<int>(i);

  ModelConfig mc{cfg.extractor(), cfg.reduction, static_cast<int>(class_person_ids.size()), cfg.ablation};
  TrainResult result{mc, SavsModel(mc, cfg.seed), {}, class_person_ids, 0};
  SavsModel& model = result.model;

  PkSampler sampler(records, cfg.batch_size, cfg.images_per_id, mix_seed(cfg.seed, 1));
  std::mt19937_64 pool_rng(mix_seed(cfg.seed, 2));
  const auto circle_cfg = cfg.circle();
  const auto weights = cfg.loss_weights();
  std::vector<Tensor> velocity;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    EpochLoss sums{epoch, 0, 0, 0, 0, lr};
    int batches = 0;
    for (int b = 0; b < sampler.batches_per_epoch(); ++b) {
      if (cfg.max_steps > 0 && result.steps >= cfg.max_steps) break;
      const BatchSpec spec = sampler.next();
      // Seeds are drawn for every batch so all ablations consume the same stream.
      const std::uint64_t pool_seed = pool_rng();
      const std::uint64_t render_seed = pool_rng();
      const std::size_t n = spec.samples.size();

      std::vector<Image> originals(n), foregrounds(n);
      std::vector<BinaryMask> shield_masks(n);
      std::vector<int> labels(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& s = samples[spec.samples[i].index];
        originals[i] = s.image;
        labels[i] = class_of.at(s.person_id);
        if (mc.has_hsa()) foregrounds[i] = extract_foreground(s.image, s.semantic);
        if (mc.has_vcs()) shield_masks[i] = shielding_mask(s.semantic, cfg.shield_classes);
      }
      // A fresh pool per batch.
      PixelPool pool;
      RenderedBatch rendered;
      if (mc.has_vcs()) {
        pool = build_pixel_pool(originals, shield_masks, pool_seed);
        rendered = render_shielded(originals, shield_masks, pool, render_seed, cfg.draw_mode);
      }

      std::vector<SampleTrace> traces(n);
#pragma omp parallel for schedule(static)
      for (std::size_t i = 0; i < n; ++i) {
        model.forward_train(originals[i], mc.has_hsa() ? &foregrounds[i] : nullptr,
                            mc.has_vcs() ? &rendered.images[i] : nullptr, &traces[i]);
      }

      std::vector<std::vector<double>> logits(n);
      std::vector<Embedding> enhanced(n), orig(n), shielded(n);
      for (std::size_t i = 0; i < n; ++i) {
        logits[i] = traces[i].outputs.logits;
        enhanced[i] = traces[i].outputs.enhanced;
        orig[i] = traces[i].outputs.original;
        shielded[i] = traces[i].outputs.shielded;
      }
      std::vector<std::vector<double>> d_logits;
      const double l_id = id_loss(logits, labels, &d_logits);
      const MinedSimilarities mined = mine_similarities(enhanced, labels);
      std::vector<SimilarityBundle> d_bundles;
      const double l_cir = circle_loss_batch(mined.bundles, circle_cfg, &d_bundles, cfg.circle_gradient);
      const std::vector<Embedding> d_enh = mine_similarities_backward(enhanced, mined, d_bundles);
      double l_sem = 0.0;
      std::vector<Embedding> d_orig, d_shield;
      const double w_sem = mc.has_vcs() ? weights.sem : 0.0;
      if (mc.has_vcs()) l_sem = semantic_loss(orig, shielded, cfg.semantic_loss, &d_orig, &d_shield);
      double total = 0.0;
      try {
        total = total_loss(l_id, l_cir, l_sem, {weights.id, weights.cir, w_sem});
      } catch (const std::domain_error& e) {
        std::string dump;
        for (const auto& s : spec.samples) dump += "\n  " + samples[s.index].path.string();
        throw std::runtime_error(std::string(e.what()) + " at epoch " + std::to_string(epoch) + " step " +
                                 std::to_string(result.steps) + "; batch:" + dump);
      }

      std::vector<std::vector<Tensor>> sample_grads(n);
#pragma omp parallel for schedule(static)
      for (std::size_t i = 0; i < n; ++i) {
        OutputGrads g;
        g.logits = d_logits[i];
        for (double& v : g.logits) v *= weights.id;
        g.enhanced = d_enh[i];
        for (double& v : g.enhanced) v *= weights.cir;
        if (mc.has_vcs()) {
          g.original = d_orig[i];
          g.shielded = d_shield[i];
          for (double& v : g.original) v *= w_sem;
          for (double& v : g.shielded) v *= w_sem;
        }
        sample_grads[i] = model.zero_grads();
        model.backward(traces[i], g, sample_grads[i]);
      }
      // Serial reduction in sample order keeps the sum independent of threading.
      std::vector<Tensor> grads = std::move(sample_grads[0]);
      for (std::size_t i = 1; i < n; ++i) {
        for (std::size_t p = 0; p < grads.size(); ++p) {
          auto& dst = grads[p].data;
          const auto& src = sample_grads[i][p].data;
          for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
        }
      }
      const auto params = model.parameters();
      sgd_step(params, grads, velocity, lr, cfg.momentum, cfg.weight_decay);

      ++result.steps;
      ++batches;
      sums.id_loss += l_id;
      sums.cir_loss += l_cir;
      sums.sem_loss += l_sem;
      sums.total += total;
      if (hooks.on_step) {
        hooks.on_step({epoch, result.steps, pool_seed, pool.source_count, l_id, l_cir, l_sem, total}, model);
      }
    }
    if (batches == 0) break;
    sums.id_loss /= batches;
    sums.cir_loss /= batches;
    sums.sem_loss /= batches;
    sums.total /= batches;
    result.trace.push_back(sums);
    spdlog::debug("epoch {} lr {:.3g} id {:.4f} cir {:.4f} sem {:.4f} total {:.4f}", epoch, lr, sums.id_loss,
                  sums.cir_loss, sums.sem_loss, sums.total);
    if (hooks.on_epoch) hooks.on_epoch(sums);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints and traces

void save_checkpoint(const std::filesystem::path& path, const TrainResult& result, const TrainConfig& cfg) {
  Archive a;
  a.add_text("config", cfg.to_text());
  std::string meta = "num_classes = " + std::to_string(result.model_config.num_classes) + "\nclass_person_ids =";
  for (int pid : result.class_person_ids) meta += " " + std::to_string(pid);
  a.add_text("model", meta + "\n");
  for (const Tensor* t : result.model.parameters()) a.add(*t);
  a.save(path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const Archive a = Archive::load(path);
  const auto cfg_text = a.text("config");
  const auto meta = a.text("model");
  if (!cfg_text || !meta) throw std::runtime_error(path.string() + ": checkpoint lacks its config snapshot");
  TrainConfig cfg = TrainConfig::parse(*cfg_text);
  int num_classes = 0;
  std::istringstream in(*meta);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("num_classes", 0) == 0) num_classes = std::stoi(line.substr(line.find('=') + 1));
  }
  ModelConfig mc{cfg.extractor(), cfg.reduction, num_classes, cfg.ablation};
  SavsModel model(mc, a.tensors());
  return {cfg, mc, std::move(model)};
}

std::string loss_trace_csv(const std::vector<EpochLoss>& trace) {
  std::string out = "epoch,id_loss,cir_loss,sem_loss,total,lr\n";
  char buf[256];
  for (const auto& e : trace) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.id_loss, e.cir_loss, e.sem_loss,
                  e.total, e.lr);
    out += buf;
  }
  return out;
}

}  // namespace savs
