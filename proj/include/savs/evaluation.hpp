#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "savs/data.hpp"
#include "savs/decoder.hpp"
#include "savs/semantic_encoder.hpp"

namespace savs {

enum class Protocol { kStandard, kClothChanging };
std::string to_string(Protocol p);
/// `standard` or `cloth-changing`.
Protocol parse_protocol(const std::string& text);

/// Unit-length copy; a zero vector stays zero.
Embedding l2_normalize(const Embedding& v);

struct RetrievalIndex {
  std::vector<Embedding> rows;  // L2-normalised
  std::vector<int> person_ids;
  std::vector<int> clothing_ids;
  std::vector<std::string> paths;

  std::size_t size() const { return rows.size(); }
};

/// Normalises the rows and checks that the label arrays line up.
RetrievalIndex make_index(const std::vector<Embedding>& embeddings, std::vector<int> person_ids,
                          std::vector<int> clothing_ids, std::vector<std::string> paths = {});

/// Retrieval descriptors (forward_test) of every record, computed in parallel.
std::vector<Embedding> embed_records(const SavsModel& model, const std::vector<SampleRecord>& records,
                                     const LabelMapping* mapping = nullptr);

RetrievalIndex build_index(const SavsModel& model, const std::vector<SampleRecord>& gallery,
                           const LabelMapping* mapping = nullptr);

struct QueryLabels {
  int person_id = 0;
  int clothing_id = 0;
};

struct Ranking {
  std::vector<int> order;  // gallery indices after exclusion, best first
  std::vector<double> similarities;
  /// Set when no true match survives the protocol exclusion.
  bool skipped = false;
};

/// Descending cosine similarity, ties by ascending gallery index.
Ranking rank(const Embedding& query, const RetrievalIndex& index, QueryLabels labels, Protocol protocol);

struct MetricsReport {
  double rank1 = 0, rank5 = 0, rank10 = 0, mAP = 0;
  std::vector<double> cmc;  // cmc[k-1] = CMC@k, one entry per gallery item
  int num_queries = 0;
  int num_skipped = 0;
};

/// Folds rankings in query order; throws if every query was skipped.
MetricsReport compute_metrics(const std::vector<Ranking>& rankings, const std::vector<QueryLabels>& queries,
                              const RetrievalIndex& index);

std::string metrics_json(const MetricsReport& report);
/// `k,cmc` rows for the full curve.
std::string cmc_csv(const MetricsReport& report);

struct EvaluationResult {
  RetrievalIndex index;
  std::vector<QueryLabels> queries;
  std::vector<std::string> query_paths;
  std::vector<Ranking> rankings;
  MetricsReport report;
};

EvaluationResult evaluate(const SavsModel& model, const std::vector<SampleRecord>& query,
                          const std::vector<SampleRecord>& gallery, Protocol protocol,
                          const LabelMapping* mapping = nullptr);

/// `query_path,rank,gallery_path,similarity,correct` rows, top_k per query,
/// skipped queries omitted. Includes a header row.
std::string ranked_lists_csv(const EvaluationResult& result, int top_k = 10);

/// Pairwise cosine similarities.
std::vector<std::vector<double>> similarity_matrix(const std::vector<Embedding>& embeddings);

/// Blue (−1) through white (0) to red (+1).
Rgb diverging_color(double s);
/// Perceptually ordered black → red → yellow → white ramp over [0,1].
Rgb sequential_color(double t);

/// One cell_size×cell_size block per matrix entry.
Image similarity_heatmap(const std::vector<std::vector<double>>& matrix, int cell_size = 8);

struct ScalarGrid {
  int height = 0;
  int width = 0;
  std::vector<double> values;
  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

/// Half-pixel-centred bilinear resize.
ScalarGrid upsample_bilinear(const ScalarGrid& grid, int height, int width);
/// Maps to [0,1]; a constant grid becomes all zeros.
ScalarGrid min_max_normalize(const ScalarGrid& grid);

enum class AttentionStage { kHsa, kHsaVcs };
AttentionStage parse_attention_stage(const std::string& text);

/// Per-location energy at feature resolution.
///   kHsa:    Σ_c |F_w[c] · F_o[y,x,c]|
///   kHsaVcs: Σ_c |F_o[y,x,c] − F_s[y,x,c]|, where the shielded image uses a
///            pool built from this image alone.
/// Throws std::invalid_argument if the model lacks the stage.
ScalarGrid attention_energy(const SavsModel& model, const Image& image, const SemanticMap& semantic,
                            AttentionStage stage, const ShieldClasses& shield_classes = kDefaultShieldClasses,
                            std::uint64_t seed = 0);

/// Energy upsampled to the image size, normalised and colour mapped.
Image attention_heatmap(const ScalarGrid& energy, int height, int width);

}  // namespace savs
