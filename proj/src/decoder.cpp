#include "savs/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <regex>
#include <sstream>
#include <stdexcept>

namespace savs {

// ---------------------------------------------------------------------------
// ExtractorConfig

ExtractorConfig ExtractorConfig::toy(int size) {
  ExtractorConfig c;
  c.input_height = c.input_width = size;
  c.layers = {{4, 4, 32}, {3, 2, 64}, {1, 1, 128}};
  return c;
}

ExtractorConfig ExtractorConfig::full_scale() {
  ExtractorConfig c;
  c.input_height = c.input_width = 224;
  c.layers = {{4, 4, 96}, {2, 2, 192}, {2, 2, 384}, {2, 2, 1024}};
  return c;
}

ExtractorConfig ExtractorConfig::for_input_size(int size) {
  if (size == 64) return toy(64);
  if (size == 224) return full_scale();
  throw std::invalid_argument("no default extractor layers for input size " + std::to_string(size) +
                              "; set `layers` explicitly");
}

int ExtractorConfig::output_channels() const {
  if (layers.empty()) throw std::invalid_argument("extractor has no layers");
  return layers.back().out_channels;
}

int ExtractorConfig::output_height() const {
  int h = input_height;
  for (const auto& l : layers) h = kernels::conv_output_extent(h, l.kernel, l.stride);
  return h;
}

int ExtractorConfig::output_width() const {
  int w = input_width;
  for (const auto& l : layers) w = kernels::conv_output_extent(w, l.kernel, l.stride);
  return w;
}

std::string ExtractorConfig::layers_string() const {
  std::string out;
  for (const auto& l : layers) {
    if (!out.empty()) out += ',';
    out += "k" + std::to_string(l.kernel) + "s" + std::to_string(l.stride) + "c" + std::to_string(l.out_channels);
  }
  return out;
}

std::vector<ConvLayerSpec> ExtractorConfig::parse_layers(const std::string& text) {
  static const std::regex item(R"(\s*k(\d+)s(\d+)c(\d+)\s*)");
  std::vector<ConvLayerSpec> layers;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::smatch m;
    if (!std::regex_match(tok, m, item)) throw std::invalid_argument("malformed layer spec `" + tok + "`");
    ConvLayerSpec l{std::stoi(m[1]), std::stoi(m[2]), std::stoi(m[3])};
    if (l.kernel < 1 || l.stride < 1 || l.out_channels < 1) {
      throw std::invalid_argument("layer spec `" + tok + "` must be positive");
    }
    layers.push_back(l);
  }
  if (layers.empty()) throw std::invalid_argument("empty layer spec");
  return layers;
}

// ---------------------------------------------------------------------------
// ConvStackExtractor

namespace {

FeatureMap as_feature_map(const Image& img) {
  FeatureMap fm;
  fm.height = img.height;
  fm.width = img.width;
  fm.channels = 3;
  fm.values.resize(img.pixels.size());
  for (std::size_t i = 0; i < fm.values.size(); ++i) fm.values[i] = (img.pixels[i] - kInputMean) / kInputStd;
  return fm;
}

void init_uniform(Tensor& t, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.data) v = dist(rng);
}

void copy_named(std::span<Tensor> dst, const std::map<std::string, const Tensor*>& src) {
  for (Tensor& t : dst) {
    auto it = src.find(t.name);
    if (it == src.end()) throw std::runtime_error("missing parameter `" + t.name + "`");
    if (it->second->shape != t.shape) throw std::runtime_error("shape mismatch for parameter `" + t.name + "`");
    t.data = it->second->data;
  }
}

}  // namespace

ConvStackExtractor::ConvStackExtractor(ExtractorConfig config, std::string prefix, std::uint64_t seed)
    : config_(std::move(config)) {
  // Validates that every layer fits.
  (void)config_.output_height();
  (void)config_.output_width();
  std::mt19937_64 rng(seed);
  int cin = 3;
  for (std::size_t i = 0; i < config_.layers.size(); ++i) {
    const auto& l = config_.layers[i];
    Tensor w(prefix + ".conv" + std::to_string(i) + ".weight", {l.out_channels, l.kernel, l.kernel, cin});
    Tensor b(prefix + ".conv" + std::to_string(i) + ".bias", {l.out_channels});
    init_uniform(w, std::sqrt(6.0 / (l.kernel * l.kernel * cin)), rng);
    params_.push_back(std::move(w));
    params_.push_back(std::move(b));
    cin = l.out_channels;
  }
}

kernels::ConvShape ConvStackExtractor::shape_of(std::size_t layer) const {
  const auto& l = config_.layers[layer];
  const int cin = layer == 0 ? 3 : config_.layers[layer - 1].out_channels;
  return {l.kernel, l.stride, cin, l.out_channels};
}

// Trace layout: activations[2i] is the input of layer i, activations[2i+1]
// its pre-activation output.
FeatureMap ConvStackExtractor::forward(const Image& image, ExtractorTrace* trace) const {
  FeatureMap x = as_feature_map(image);
  if (trace) trace->activations.clear();
  const std::size_t n = config_.layers.size();
  for (std::size_t i = 0; i < n; ++i) {
    FeatureMap z;
    kernels::conv2d_forward(x, params_[2 * i].data, params_[2 * i + 1].data, shape_of(i), z);
    if (trace) {
      trace->activations.push_back(std::move(x));
      trace->activations.push_back(z);
    }
    if (i + 1 < n) kernels::relu_inplace(z.values);
    x = std::move(z);
  }
  return x;
}

void ConvStackExtractor::backward(const ExtractorTrace& trace, const FeatureMap& grad_out,
                                  std::span<Tensor> grads) const {
  const std::size_t n = config_.layers.size();
  if (trace.activations.size() != 2 * n || grads.size() != params_.size()) {
    throw std::invalid_argument("ConvStackExtractor::backward: trace or gradient layout mismatch");
  }
  FeatureMap g = grad_out;
  for (std::size_t i = n; i-- > 0;) {
    const FeatureMap& input = trace.activations[2 * i];
    if (i + 1 < n) kernels::relu_backward(trace.activations[2 * i + 1].values, g.values);
    kernels::conv2d_backward_weight(input, g, shape_of(i), grads[2 * i].data, grads[2 * i + 1].data);
    if (i > 0) {
      FeatureMap din(input.height, input.width, input.channels);
      kernels::conv2d_backward_input(g, params_[2 * i].data, shape_of(i), din);
      g = std::move(din);
    }
  }
}

// ---------------------------------------------------------------------------
// HSA

Embedding gap(const FeatureMap& fm) {
  Embedding out(fm.channels, 0.0);
  const std::size_t n = fm.positions();
  for (std::size_t p = 0; p < n; ++p) {
    const double* v = fm.values.data() + p * fm.channels;
    for (int c = 0; c < fm.channels; ++c) out[c] += v[c];
  }
  for (double& v : out) v /= static_cast<double>(n);
  return out;
}

HsaParams::HsaParams(int c, int r) : channels(c), reduction(r) {
  if (r < 1 || c < 1 || c % r != 0) {
    throw std::invalid_argument("HSA reduction " + std::to_string(r) + " must divide channel count " +
                                std::to_string(c));
  }
  const int h = c / r;
  w1 = Tensor("hsa.w1", {h, c});
  b1 = Tensor("hsa.b1", {h});
  w2 = Tensor("hsa.w2", {c, h});
  b2 = Tensor("hsa.b2", {c});
}

namespace {

// Clamped so saturated weights stay strictly inside (0,1) in double.
double sigmoid(double x) {
  constexpr double kLo = std::numeric_limits<double>::min();
  const double kHi = std::nextafter(1.0, 0.0);
  double s;
  if (x >= 0) {
    s = 1.0 / (1.0 + std::exp(-x));
  } else {
    const double e = std::exp(x);
    s = e / (1.0 + e);
  }
  return std::clamp(s, kLo, kHi);
}

}  // namespace

AttentionWeights hsa_weights(const FeatureMap& attention_map, const HsaParams& p, HsaTrace* trace) {
  if (attention_map.channels != p.channels) {
    throw std::invalid_argument("hsa_weights: map has " + std::to_string(attention_map.channels) +
                                " channels, HSA expects " + std::to_string(p.channels));
  }
  const int c = p.channels, h = p.hidden();
  Embedding pooled = gap(attention_map);
  std::vector<double> pre(h);
  std::vector<double> act(h);
  for (int j = 0; j < h; ++j) {
    double acc = p.b1.data[j];
    for (int i = 0; i < c; ++i) acc += p.w1.data[static_cast<std::size_t>(j) * c + i] * pooled[i];
    pre[j] = acc;
    act[j] = acc > 0.0 ? acc : 0.0;
  }
  AttentionWeights w;
  w.values.resize(c);
  for (int i = 0; i < c; ++i) {
    double acc = p.b2.data[i];
    for (int j = 0; j < h; ++j) acc += p.w2.data[static_cast<std::size_t>(i) * h + j] * act[j];
    w.values[i] = sigmoid(acc);
  }
  if (trace) {
    trace->pooled = std::move(pooled);
    trace->hidden_pre = std::move(pre);
    trace->weights = w;
  }
  return w;
}

Embedding hsa_reweight(const FeatureMap& original_map, const AttentionWeights& weights) {
  if (weights.values.size() != static_cast<std::size_t>(original_map.channels)) {
    throw std::invalid_argument("hsa_reweight: " + std::to_string(weights.values.size()) + " weights for " +
                                std::to_string(original_map.channels) + " channels");
  }
  Embedding out = gap(original_map);
  for (std::size_t c = 0; c < out.size(); ++c) out[c] *= weights.values[c];
  return out;
}

FeatureMap hsa_reweight_spatial(const FeatureMap& original_map, const AttentionWeights& weights) {
  if (weights.values.size() != static_cast<std::size_t>(original_map.channels)) {
    throw std::invalid_argument("hsa_reweight_spatial: channel mismatch");
  }
  FeatureMap out = original_map;
  const int c = out.channels;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] *= weights.values[i % c];
  return out;
}

// ---------------------------------------------------------------------------
// SavsModel

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::kBaseline: return "baseline";
    case Ablation::kHsa: return "hsa";
    case Ablation::kHsaVcs: return "hsa_vcs";
  }
  return "?";
}

Ablation parse_ablation(const std::string& text) {
  if (text == "baseline") return Ablation::kBaseline;
  if (text == "hsa") return Ablation::kHsa;
  if (text == "hsa_vcs") return Ablation::kHsaVcs;
  throw std::invalid_argument("unknown ablation `" + text + "` (expected baseline|hsa|hsa_vcs)");
}

SavsModel::SavsModel(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)), backbone_(config_.extractor, "backbone", seed) {
  const int c = backbone_.output_channels();
  if (config_.num_classes < 1) throw std::invalid_argument("model needs at least one class");
  if (config_.has_hsa()) {
    attention_.emplace(config_.extractor, "attention", seed ^ 0x9e3779b97f4a7c15ULL);
    hsa_.emplace(c, config_.reduction);
    std::mt19937_64 rng(seed ^ 0x5851f42d4c957f2dULL);
    init_uniform(hsa_->w1, 1.0 / std::sqrt(static_cast<double>(c)), rng);
    init_uniform(hsa_->w2, 1.0 / std::sqrt(static_cast<double>(hsa_->hidden())), rng);
  }
  classifier_weight_ = Tensor("classifier.weight", {config_.num_classes, c});
  classifier_bias_ = Tensor("classifier.bias", {config_.num_classes});
  std::mt19937_64 rng(seed ^ 0x2545f4914f6cdd1dULL);
  init_uniform(classifier_weight_, 1.0 / std::sqrt(static_cast<double>(c)), rng);
}

SavsModel::SavsModel(ModelConfig config, const std::vector<Tensor>& tensors) : SavsModel(std::move(config), 0) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  std::vector<Tensor*> params = parameters();
  for (Tensor* p : params) copy_named(std::span<Tensor>(p, 1), by_name);
}

const FeatureExtractor& SavsModel::stream(Stream s) const {
  if (s == Stream::kForeground) {
    if (!attention_) throw std::logic_error("model has no attention branch");
    return *attention_;
  }
  return backbone_;
}

std::vector<Tensor*> SavsModel::parameters() {
  std::vector<Tensor*> out;
  for (Tensor& t : backbone_.parameters()) out.push_back(&t);
  if (attention_) {
    for (Tensor& t : attention_->parameters()) out.push_back(&t);
  }
  if (hsa_) {
    out.push_back(&hsa_->w1);
    out.push_back(&hsa_->b1);
    out.push_back(&hsa_->w2);
    out.push_back(&hsa_->b2);
  }
  out.push_back(&classifier_weight_);
  out.push_back(&classifier_bias_);
  return out;
}

std::vector<const Tensor*> SavsModel::parameters() const {
  auto mut = const_cast<SavsModel*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::vector<Tensor> SavsModel::zero_grads() const {
  std::vector<Tensor> grads;
  for (const Tensor* p : parameters()) grads.emplace_back(p->name, p->shape);
  return grads;
}

std::size_t SavsModel::attention_offset() const { return backbone_.parameters().size(); }
std::size_t SavsModel::hsa_offset() const {
  return attention_offset() + (attention_ ? attention_->parameters().size() : 0);
}
std::size_t SavsModel::classifier_offset() const { return hsa_offset() + (hsa_ ? 4 : 0); }

void SavsModel::check_input(const Image& img, const char* what) const {
  if (img.height != config_.extractor.input_height || img.width != config_.extractor.input_width) {
    throw std::invalid_argument(std::string(what) + " image is " + std::to_string(img.height) + "x" +
                                std::to_string(img.width) + ", model expects " +
                                std::to_string(config_.extractor.input_height) + "x" +
                                std::to_string(config_.extractor.input_width));
  }
}

TrainOutputs SavsModel::forward_train(const Image& original, const Image* foreground, const Image* shielded,
                                      SampleTrace* trace) const {
  check_input(original, "original");
  TrainOutputs out;
  // One backbone pass on the original feeds both F_o' and the reweighting.
  FeatureMap fo = backbone_.forward(original, trace ? &trace->original : nullptr);
  out.original = gap(fo);
  if (hsa_) {
    if (!foreground) throw std::invalid_argument("HSA model needs a foreground image");
    check_input(*foreground, "foreground");
    FeatureMap fa = attention_->forward(*foreground, trace ? &trace->foreground : nullptr);
    out.weights = hsa_weights(fa, *hsa_, trace ? &trace->hsa : nullptr);
    out.enhanced = out.original;
    for (std::size_t c = 0; c < out.enhanced.size(); ++c) out.enhanced[c] *= out.weights.values[c];
  } else {
    out.enhanced = out.original;
  }
  if (config_.has_vcs() && shielded) {
    check_input(*shielded, "shielded");
    FeatureMap fs = backbone_.forward(*shielded, trace ? &trace->shielded : nullptr);
    out.shielded = gap(fs);
    if (trace) trace->shielded_map = std::move(fs);
  }
  const int c = channels();
  out.logits.assign(config_.num_classes, 0.0);
  for (int k = 0; k < config_.num_classes; ++k) {
    double acc = classifier_bias_.data[k];
    for (int i = 0; i < c; ++i) acc += classifier_weight_.data[static_cast<std::size_t>(k) * c + i] * out.enhanced[i];
    out.logits[k] = acc;
  }
  if (trace) {
    trace->original_map = std::move(fo);
    trace->outputs = out;
  }
  return out;
}

Embedding SavsModel::forward_test(const Image& original, const Image* foreground) const {
  return forward_train(original, foreground, nullptr).enhanced;
}

FeatureMap SavsModel::original_map(const Image& original) const {
  check_input(original, "original");
  return backbone_.forward(original);
}

AttentionWeights SavsModel::attention_weights(const Image& foreground) const {
  if (!hsa_) throw std::logic_error("model has no HSA module");
  check_input(foreground, "foreground");
  return hsa_weights(attention_->forward(foreground), *hsa_);
}

void SavsModel::backward(const SampleTrace& trace, const OutputGrads& dout, std::vector<Tensor>& grads) const {
  const int c = channels();
  const auto& out = trace.outputs;

  // Classifier.
  Embedding d_enh = dout.enhanced.empty() ? Embedding(c, 0.0) : dout.enhanced;
  if (!dout.logits.empty()) {
    Tensor& gw = grads[classifier_offset()];
    Tensor& gb = grads[classifier_offset() + 1];
    for (int k = 0; k < config_.num_classes; ++k) {
      const double g = dout.logits[k];
      if (g == 0.0) continue;
      gb.data[k] += g;
      const double* w = classifier_weight_.data.data() + static_cast<std::size_t>(k) * c;
      double* dw = gw.data.data() + static_cast<std::size_t>(k) * c;
      for (int i = 0; i < c; ++i) {
        dw[i] += g * out.enhanced[i];
        d_enh[i] += g * w[i];
      }
    }
  }

  // HSA: F_e' = F_w ⊙ F_o'.
  Embedding d_orig = dout.original.empty() ? Embedding(c, 0.0) : dout.original;
  if (hsa_) {
    const int h = hsa_->hidden();
    const auto& w = out.weights.values;
    std::vector<double> dz2(c);
    for (int i = 0; i < c; ++i) {
      d_orig[i] += d_enh[i] * w[i];
      const double dw = d_enh[i] * out.original[i];
      dz2[i] = dw * w[i] * (1.0 - w[i]);
    }
    const std::size_t off = hsa_offset();
    Tensor& gw1 = grads[off];
    Tensor& gb1 = grads[off + 1];
    Tensor& gw2 = grads[off + 2];
    Tensor& gb2 = grads[off + 3];
    std::vector<double> act(h), dz1(h, 0.0);
    for (int j = 0; j < h; ++j) act[j] = trace.hsa.hidden_pre[j] > 0.0 ? trace.hsa.hidden_pre[j] : 0.0;
    for (int i = 0; i < c; ++i) {
      gb2.data[i] += dz2[i];
      for (int j = 0; j < h; ++j) {
        gw2.data[static_cast<std::size_t>(i) * h + j] += dz2[i] * act[j];
        dz1[j] += dz2[i] * hsa_->w2.data[static_cast<std::size_t>(i) * h + j];
      }
    }
    Embedding d_pooled(c, 0.0);
    for (int j = 0; j < h; ++j) {
      if (!(trace.hsa.hidden_pre[j] > 0.0)) continue;
      gb1.data[j] += dz1[j];
      for (int i = 0; i < c; ++i) {
        gw1.data[static_cast<std::size_t>(j) * c + i] += dz1[j] * trace.hsa.pooled[i];
        d_pooled[i] += dz1[j] * hsa_->w1.data[static_cast<std::size_t>(j) * c + i];
      }
    }
    const auto& fa_out = trace.foreground.activations.back();
    FeatureMap d_fa(fa_out.height, fa_out.width, fa_out.channels);
    const double inv = 1.0 / static_cast<double>(d_fa.positions());
    for (std::size_t i = 0; i < d_fa.values.size(); ++i) d_fa.values[i] = d_pooled[i % c] * inv;
    const std::size_t n_att = attention_->parameters().size();
    attention_->backward(trace.foreground, d_fa, std::span<Tensor>(grads).subspan(attention_offset(), n_att));
  } else {
    for (int i = 0; i < c; ++i) d_orig[i] += d_enh[i];
  }

  const std::size_t n_bb = backbone_.parameters().size();
  auto bb_grads = std::span<Tensor>(grads).subspan(0, n_bb);
  auto spread = [c](const FeatureMap& shape, const Embedding& d) {
    FeatureMap g(shape.height, shape.width, c);
    const double inv = 1.0 / static_cast<double>(g.positions());
    for (std::size_t i = 0; i < g.values.size(); ++i) g.values[i] = d[i % c] * inv;
    return g;
  };
  backbone_.backward(trace.original, spread(trace.original_map, d_orig), bb_grads);
  if (!dout.shielded.empty() && !trace.shielded.activations.empty()) {
    backbone_.backward(trace.shielded, spread(trace.shielded_map, dout.shielded), bb_grads);
  }
}

}  // namespace savs
