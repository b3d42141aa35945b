#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "savs/image.hpp"
#include "savs/kernels.hpp"
#include "savs/tensor.hpp"

namespace savs {

struct ConvLayerSpec {
  int kernel = 1;
  int stride = 1;
  int out_channels = 1;
  bool operator==(const ConvLayerSpec&) const = default;
};

/// Layer stack of the convolutional extractor. Every layer but the last is
/// followed by a ReLU.
struct ExtractorConfig {
  int input_height = 64;
  int input_width = 64;
  std::vector<ConvLayerSpec> layers;

  /// 64×64 → 16×16×32 (4×4 patches) → 7×7×64 → 7×7×128.
  static ExtractorConfig toy(int size = 64);
  /// 224×224 with 4×4 patch embedding down to a 7×7×1024 map.
  static ExtractorConfig full_scale();
  /// toy() for 64, full_scale() for 224, otherwise throws.
  static ExtractorConfig for_input_size(int size);

  int output_channels() const;
  int output_height() const;
  int output_width() const;

  /// Compact form `k4s4c32,k3s2c64,k1s1c128`.
  std::string layers_string() const;
  static std::vector<ConvLayerSpec> parse_layers(const std::string& text);

  bool operator==(const ExtractorConfig&) const = default;
};

/// Cached activations of one extractor pass, laid out by the extractor.
struct ExtractorTrace {
  std::vector<FeatureMap> activations;
};

/// Image → feature map contract. Instances own named parameter arrays; the
/// backbone and the shielded stream are the same instance.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;

  virtual FeatureMap forward(const Image& image, ExtractorTrace* trace = nullptr) const = 0;
  /// Accumulates parameter gradients into grads (aligned with parameters()).
  virtual void backward(const ExtractorTrace& trace, const FeatureMap& grad_out, std::span<Tensor> grads) const = 0;
  virtual std::span<Tensor> parameters() = 0;
  virtual std::span<const Tensor> parameters() const = 0;
  virtual int output_channels() const = 0;
};

/// Pixels enter the first layer standardised as (x − kInputMean) / kInputStd.
constexpr double kInputMean = 0.5;
constexpr double kInputStd = 0.25;

class ConvStackExtractor final : public FeatureExtractor {
 public:
  /// Parameters are named `<prefix>.conv<i>.weight|bias` and drawn uniformly
  /// in ±sqrt(6/fan_in) (biases zero) from seed.
  ConvStackExtractor(ExtractorConfig config, std::string prefix, std::uint64_t seed);

  FeatureMap forward(const Image& image, ExtractorTrace* trace = nullptr) const override;
  void backward(const ExtractorTrace& trace, const FeatureMap& grad_out, std::span<Tensor> grads) const override;
  std::span<Tensor> parameters() override { return params_; }
  std::span<const Tensor> parameters() const override { return params_; }
  int output_channels() const override { return config_.output_channels(); }
  const ExtractorConfig& config() const { return config_; }

 private:
  kernels::ConvShape shape_of(std::size_t layer) const;

  ExtractorConfig config_;
  std::vector<Tensor> params_;
};

/// Global average pooling over the spatial grid.
Embedding gap(const FeatureMap& fm);

/// Two-layer bottleneck producing channel weights from a pooled feature.
struct HsaParams {
  int channels = 0;
  int reduction = 16;
  Tensor w1;  // [channels/reduction, channels]
  Tensor b1;  // [channels/reduction]
  Tensor w2;  // [channels, channels/reduction]
  Tensor b2;  // [channels]

  HsaParams() = default;
  /// Zero-initialised; throws unless reduction divides channels.
  HsaParams(int channels, int reduction);
  int hidden() const { return channels / reduction; }
};

/// Channel weights; values produced by hsa_weights lie strictly in (0,1).
struct AttentionWeights {
  std::vector<double> values;
};

struct HsaTrace {
  Embedding pooled;
  std::vector<double> hidden_pre;
  AttentionWeights weights;
};

AttentionWeights hsa_weights(const FeatureMap& attention_map, const HsaParams& p, HsaTrace* trace = nullptr);
/// Pooled channelwise reweighting: out[c] = w[c] · gap(F_o)[c].
Embedding hsa_reweight(const FeatureMap& original_map, const AttentionWeights& weights);
/// Spatial form F_w ⊗ F_o, used by the attention-map dump.
FeatureMap hsa_reweight_spatial(const FeatureMap& original_map, const AttentionWeights& weights);

enum class Ablation { kBaseline, kHsa, kHsaVcs };
std::string to_string(Ablation a);
Ablation parse_ablation(const std::string& text);

struct ModelConfig {
  ExtractorConfig extractor;
  int reduction = 16;
  int num_classes = 1;
  Ablation ablation = Ablation::kHsaVcs;

  bool has_hsa() const { return ablation != Ablation::kBaseline; }
  bool has_vcs() const { return ablation == Ablation::kHsaVcs; }
};

enum class Stream { kOriginal, kForeground, kShielded };

struct TrainOutputs {
  Embedding original;  // F_o'
  Embedding enhanced;  // F_e' (equals F_o' without HSA)
  Embedding shielded;  // F_s' (empty without VCS)
  std::vector<double> logits;
  AttentionWeights weights;
};

struct SampleTrace {
  ExtractorTrace original, foreground, shielded;
  FeatureMap original_map, shielded_map;
  HsaTrace hsa;
  TrainOutputs outputs;
};

/// Loss gradients with respect to the forward outputs of one sample.
struct OutputGrads {
  Embedding original;
  Embedding shielded;
  std::vector<double> logits;
  /// Direct gradient on F_e' (metric loss); the classifier adds its own.
  Embedding enhanced;
};

class SavsModel {
 public:
  SavsModel(ModelConfig config, std::uint64_t seed);
  /// Builds an uninitialised model from named tensors, e.g. a checkpoint.
  SavsModel(ModelConfig config, const std::vector<Tensor>& tensors);

  const ModelConfig& config() const { return config_; }
  int channels() const { return backbone_.output_channels(); }

  /// Extractor serving a stream. Original and shielded share the backbone.
  const FeatureExtractor& stream(Stream s) const;
  FeatureExtractor& backbone() { return backbone_; }
  const FeatureExtractor& backbone() const { return backbone_; }
  FeatureExtractor* attention() { return attention_ ? &*attention_ : nullptr; }
  const FeatureExtractor* attention() const { return attention_ ? &*attention_ : nullptr; }
  HsaParams* hsa() { return hsa_ ? &*hsa_ : nullptr; }
  const HsaParams* hsa() const { return hsa_ ? &*hsa_ : nullptr; }

  /// Every trainable array in a fixed order: backbone, attention, hsa, classifier.
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  /// Zero tensors aligned with parameters().
  std::vector<Tensor> zero_grads() const;

  /// shielded may be null when VCS is disabled; foreground may be null
  /// without HSA.
  TrainOutputs forward_train(const Image& original, const Image* foreground, const Image* shielded,
                             SampleTrace* trace = nullptr) const;
  /// Retrieval descriptor: F_e' (F_o' without HSA).
  Embedding forward_test(const Image& original, const Image* foreground) const;
  /// Accumulates into grads (aligned with parameters()).
  void backward(const SampleTrace& trace, const OutputGrads& dout, std::vector<Tensor>& grads) const;

  /// Spatial maps for diagnostics.
  FeatureMap original_map(const Image& original) const;
  AttentionWeights attention_weights(const Image& foreground) const;

 private:
  void check_input(const Image& img, const char* what) const;
  std::size_t attention_offset() const;
  std::size_t hsa_offset() const;
  std::size_t classifier_offset() const;

  ModelConfig config_;
  ConvStackExtractor backbone_;
  std::optional<ConvStackExtractor> attention_;
  std::optional<HsaParams> hsa_;
  Tensor classifier_weight_;  // [num_classes, channels]
  Tensor classifier_bias_;    // [num_classes]
};

}  // namespace savs
