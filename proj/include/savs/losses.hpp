#pragma once

#include <span>
#include <vector>

#include "savs/tensor.hpp"

namespace savs {

struct CircleLossConfig {
  double gamma = 32.0;
  double o_p = 1.25;
  double o_n = -0.25;

  /// O_p = 1 + m, O_n = -m.
  static CircleLossConfig from_margin(double gamma, double margin);
  /// Throws unless gamma > 0 and O_p > O_n.
  void validate() const;
};

struct LossWeights {
  double id = 1.0;
  double cir = 1.0;
  double sem = 1.0;

  /// Throws on negative weights or when all three are zero.
  void validate() const;
};

/// Positive (same-identity) and negative similarities seen from one anchor.
struct SimilarityBundle {
  std::vector<double> s_p;
  std::vector<double> s_n;
};

/// Mean cross-entropy over the batch. grad, when given, receives
/// dL/dlogits per sample.
double id_loss(const std::vector<std::vector<double>>& logits, std::span<const int> labels,
               std::vector<std::vector<double>>* grad = nullptr);

/// How the self-paced weights α enter the gradient. kExact differentiates
/// through α; kDetachedWeights holds α constant, the usual circle-loss
/// training convention.
enum class CircleGradient { kExact, kDetachedWeights };

/// Loss of one anchor; requires K ≥ 1 and L ≥ 1.
double circle_loss(const SimilarityBundle& bundle, const CircleLossConfig& cfg, SimilarityBundle* grad = nullptr,
                   CircleGradient mode = CircleGradient::kExact);

/// Mean over anchors with both positives and negatives; other anchors are
/// skipped (zero gradient). Throws if no anchor contributes.
double circle_loss_batch(const std::vector<SimilarityBundle>& bundles, const CircleLossConfig& cfg,
                         std::vector<SimilarityBundle>* grads = nullptr,
                         CircleGradient mode = CircleGradient::kExact);

/// Per-anchor similarity bundles plus the partner index of each entry.
struct MinedSimilarities {
  std::vector<SimilarityBundle> bundles;
  std::vector<std::vector<int>> positive_index;
  std::vector<std::vector<int>> negative_index;
};

double cosine_similarity(const Embedding& a, const Embedding& b);

/// All-pairs cosine mining; an anchor is never its own positive.
MinedSimilarities mine_similarities(const std::vector<Embedding>& embeddings, std::span<const int> labels);

/// Chains bundle gradients back onto the embeddings.
std::vector<Embedding> mine_similarities_backward(const std::vector<Embedding>& embeddings,
                                                  const MinedSimilarities& mined,
                                                  const std::vector<SimilarityBundle>& bundle_grads);

enum class SemanticLossKind {
  kL2,         // (1/b) Σ ‖F_o' − F_s'‖₂
  kSquaredL2,  // (1/b) Σ ‖F_o' − F_s'‖₂²
};

double semantic_loss(const std::vector<Embedding>& original, const std::vector<Embedding>& shielded,
                     SemanticLossKind kind = SemanticLossKind::kL2, std::vector<Embedding>* grad_original = nullptr,
                     std::vector<Embedding>* grad_shielded = nullptr);

/// Weighted sum; a non-finite component raises std::domain_error naming it.
double total_loss(double l_id, double l_cir, double l_sem, const LossWeights& w);

}  // namespace savs
