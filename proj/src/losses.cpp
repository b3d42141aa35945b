#include "savs/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include <spdlog/spdlog.h>

namespace savs {

CircleLossConfig CircleLossConfig::from_margin(double gamma, double margin) {
  return {gamma, 1.0 + margin, -margin};
}

void CircleLossConfig::validate() const {
  if (!(gamma > 0.0)) throw std::invalid_argument("circle loss: gamma must be positive");
  if (!(o_p > o_n)) throw std::invalid_argument("circle loss: O_p must exceed O_n");
}

void LossWeights::validate() const {
  if (id < 0 || cir < 0 || sem < 0) throw std::invalid_argument("loss weights must be non-negative");
  if (id == 0 && cir == 0 && sem == 0) throw std::invalid_argument("loss weights are all zero");
}

namespace {

double log_sum_exp(std::span<const double> x, std::vector<double>* softmax = nullptr) {
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  if (softmax) {
    softmax->resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) (*softmax)[i] = std::exp(x[i] - m) / s;
  }
  return m + std::log(s);
}

double softplus(double t) { return t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t)); }

double sigmoid(double t) {
  if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

}  // namespace

double id_loss(const std::vector<std::vector<double>>& logits, std::span<const int> labels,
               std::vector<std::vector<double>>* grad) {
  if (logits.size() != labels.size() || logits.empty()) {
    throw std::invalid_argument("id_loss: need one label per logit row");
  }
  const double b = static_cast<double>(logits.size());
  if (grad) grad->assign(logits.size(), {});
  double total = 0.0;
  std::vector<double> p;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const auto& row = logits[i];
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= row.size()) {
      throw std::invalid_argument("id_loss: label " + std::to_string(labels[i]) + " outside " +
                                  std::to_string(row.size()) + " classes");
    }
    const double lse = log_sum_exp(row, grad ? &p : nullptr);
    total += lse - row[labels[i]];
    if (grad) {
      auto& g = (*grad)[i];
      g.resize(row.size());
      for (std::size_t k = 0; k < row.size(); ++k) g[k] = (p[k] - (static_cast<int>(k) == labels[i] ? 1.0 : 0.0)) / b;
    }
  }
  return total / b;
}

// The double sum over (i, j) factors: Σ_ij exp(γ a_j − γ b_i) =
// Σ_j exp(γ a_j) · Σ_i exp(−γ b_i) with a = α_n s_n and b = α_p s_p.
double circle_loss(const SimilarityBundle& bundle, const CircleLossConfig& cfg, SimilarityBundle* grad,
                   CircleGradient mode) {
  const auto& sp = bundle.s_p;
  const auto& sn = bundle.s_n;
  if (sp.empty() || sn.empty()) throw std::invalid_argument("circle_loss: anchor needs positives and negatives");
  const double g = cfg.gamma;
  std::vector<double> neg_terms(sn.size()), pos_terms(sp.size());
  for (std::size_t j = 0; j < sn.size(); ++j) neg_terms[j] = g * std::max(0.0, sn[j] - cfg.o_n) * sn[j];
  for (std::size_t i = 0; i < sp.size(); ++i) pos_terms[i] = -g * std::max(0.0, cfg.o_p - sp[i]) * sp[i];
  std::vector<double> soft_n, soft_p;
  const double t = log_sum_exp(neg_terms, grad ? &soft_n : nullptr) + log_sum_exp(pos_terms, grad ? &soft_p : nullptr);
  if (grad) {
    const double dt = sigmoid(t);
    grad->s_n.resize(sn.size());
    grad->s_p.resize(sp.size());
    for (std::size_t j = 0; j < sn.size(); ++j) {
      const double alpha = sn[j] - cfg.o_n;
      double d = 0.0;
      if (alpha > 0) d = mode == CircleGradient::kExact ? 2.0 * sn[j] - cfg.o_n : alpha;
      grad->s_n[j] = dt * soft_n[j] * g * d;
    }
    for (std::size_t i = 0; i < sp.size(); ++i) {
      const double alpha = cfg.o_p - sp[i];
      double d = 0.0;
      if (alpha > 0) d = mode == CircleGradient::kExact ? cfg.o_p - 2.0 * sp[i] : alpha;
      grad->s_p[i] = -dt * soft_p[i] * g * d;
    }
  }
  return softplus(t);
}

double circle_loss_batch(const std::vector<SimilarityBundle>& bundles, const CircleLossConfig& cfg,
                         std::vector<SimilarityBundle>* grads, CircleGradient mode) {
  std::size_t contributing = 0;
  for (const auto& b : bundles) contributing += (!b.s_p.empty() && !b.s_n.empty()) ? 1 : 0;
  if (contributing == 0) throw std::invalid_argument("circle_loss: no anchor has both positives and negatives");
  const double inv = 1.0 / static_cast<double>(contributing);
  if (grads) grads->assign(bundles.size(), {});
  double total = 0.0;
  for (std::size_t a = 0; a < bundles.size(); ++a) {
    const auto& b = bundles[a];
    if (grads) {
      (*grads)[a].s_p.assign(b.s_p.size(), 0.0);
      (*grads)[a].s_n.assign(b.s_n.size(), 0.0);
    }
    if (b.s_p.empty() || b.s_n.empty()) continue;
    total += circle_loss(b, cfg, grads ? &(*grads)[a] : nullptr, mode);
    if (grads) {
      for (double& v : (*grads)[a].s_p) v *= inv;
      for (double& v : (*grads)[a].s_n) v *= inv;
    }
  }
  return total * inv;
}

namespace {

double norm(const Embedding& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

double cosine_similarity(const Embedding& a, const Embedding& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: dimension mismatch");
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

MinedSimilarities mine_similarities(const std::vector<Embedding>& embeddings, std::span<const int> labels) {
  if (embeddings.size() != labels.size()) throw std::invalid_argument("mine_similarities: label count mismatch");
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (norm(embeddings[i]) == 0.0) {
      spdlog::warn("mine_similarities: embedding {} has zero norm; its similarities are set to 0", i);
    }
  }
  const std::size_t n = embeddings.size();
  MinedSimilarities out;
  out.bundles.resize(n);
  out.positive_index.resize(n);
  out.negative_index.resize(n);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      if (a == b) continue;
      const double s = cosine_similarity(embeddings[a], embeddings[b]);
      if (labels[a] == labels[b]) {
        out.bundles[a].s_p.push_back(s);
        out.positive_index[a].push_back(static_cast<int>(b));
      } else {
        out.bundles[a].s_n.push_back(s);
        out.negative_index[a].push_back(static_cast<int>(b));
      }
    }
  }
  return out;
}

std::vector<Embedding> mine_similarities_backward(const std::vector<Embedding>& embeddings,
                                                  const MinedSimilarities& mined,
                                                  const std::vector<SimilarityBundle>& bundle_grads) {
  const std::size_t n = embeddings.size();
  const std::size_t dim = n ? embeddings[0].size() : 0;
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) norms[i] = norm(embeddings[i]);
  std::vector<Embedding> grad(n, Embedding(dim, 0.0));

  // ds/du = (v̂ − s·û)/‖u‖ for s = û·v̂.
  auto accumulate = [&](std::size_t a, std::size_t b, double g) {
    if (g == 0.0 || norms[a] == 0.0 || norms[b] == 0.0) return;
    const double s = cosine_similarity(embeddings[a], embeddings[b]);
    for (std::size_t k = 0; k < dim; ++k) {
      const double ua = embeddings[a][k] / norms[a];
      const double ub = embeddings[b][k] / norms[b];
      grad[a][k] += g * (ub - s * ua) / norms[a];
      grad[b][k] += g * (ua - s * ub) / norms[b];
    }
  };
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t i = 0; i < mined.positive_index[a].size(); ++i) {
      accumulate(a, mined.positive_index[a][i], bundle_grads[a].s_p[i]);
    }
    for (std::size_t j = 0; j < mined.negative_index[a].size(); ++j) {
      accumulate(a, mined.negative_index[a][j], bundle_grads[a].s_n[j]);
    }
  }
  return grad;
}

double semantic_loss(const std::vector<Embedding>& original, const std::vector<Embedding>& shielded,
                     SemanticLossKind kind, std::vector<Embedding>* grad_original,
                     std::vector<Embedding>* grad_shielded) {
  if (original.size() != shielded.size() || original.empty()) {
    throw std::invalid_argument("semantic_loss: batch sizes differ or are empty");
  }
  const double b = static_cast<double>(original.size());
  if (grad_original) grad_original->assign(original.size(), {});
  if (grad_shielded) grad_shielded->assign(original.size(), {});
  double total = 0.0;
  for (std::size_t i = 0; i < original.size(); ++i) {
    if (original[i].size() != shielded[i].size()) {
      throw std::invalid_argument("semantic_loss: feature dimensions differ at sample " + std::to_string(i));
    }
    Embedding d(original[i].size());
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = original[i][k] - shielded[i][k];
    const double n = norm(d);
    double scale = 0.0;
    if (kind == SemanticLossKind::kL2) {
      total += n;
      scale = n > 0.0 ? 1.0 / (b * n) : 0.0;
    } else {
      total += n * n;
      scale = 2.0 / b;
    }
    if (grad_original) {
      auto& g = (*grad_original)[i];
      g.resize(d.size());
      for (std::size_t k = 0; k < d.size(); ++k) g[k] = scale * d[k];
    }
    if (grad_shielded) {
      auto& g = (*grad_shielded)[i];
      g.resize(d.size());
      for (std::size_t k = 0; k < d.size(); ++k) g[k] = -scale * d[k];
    }
  }
  return total / b;
}

double total_loss(double l_id, double l_cir, double l_sem, const LossWeights& w) {
  if (!std::isfinite(l_id)) throw std::domain_error("total_loss: id loss is not finite");
  if (!std::isfinite(l_cir)) throw std::domain_error("total_loss: circle loss is not finite");
  if (!std::isfinite(l_sem)) throw std::domain_error("total_loss: semantic loss is not finite");
  return w.id * l_id + w.cir * l_cir + w.sem * l_sem;
}

}  // namespace savs
