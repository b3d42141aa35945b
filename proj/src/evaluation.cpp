#include "savs/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "savs/training.hpp"

namespace savs {

std::string to_string(Protocol p) { return p == Protocol::kStandard ? "standard" : "cloth-changing"; }

Protocol parse_protocol(const std::string& text) {
  if (text == "standard") return Protocol::kStandard;
  if (text == "cloth-changing") return Protocol::kClothChanging;
  throw std::invalid_argument("unknown protocol `" + text + "` (expected standard or cloth-changing)");
}

Embedding l2_normalize(const Embedding& v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  Embedding out = v;
  if (sq == 0.0) return out;
  const double inv = 1.0 / std::sqrt(sq);
  for (double& x : out) x *= inv;
  return out;
}

RetrievalIndex make_index(const std::vector<Embedding>& embeddings, std::vector<int> person_ids,
                          std::vector<int> clothing_ids, std::vector<std::string> paths) {
  if (person_ids.size() != embeddings.size() || clothing_ids.size() != embeddings.size() ||
      (!paths.empty() && paths.size() != embeddings.size())) {
    throw std::invalid_argument("make_index: label arrays do not match the number of embeddings");
  }
  RetrievalIndex index;
  index.rows.reserve(embeddings.size());
  for (const auto& e : embeddings) {
    if (!index.rows.empty() && e.size() != index.rows.front().size()) {
      throw std::invalid_argument("make_index: embeddings differ in dimension");
    }
    index.rows.push_back(l2_normalize(e));
  }
  index.person_ids = std::move(person_ids);
  index.clothing_ids = std::move(clothing_ids);
  index.paths = std::move(paths);
  if (index.paths.empty()) index.paths.resize(index.rows.size());
  return index;
}

std::vector<Embedding> embed_records(const SavsModel& model, const std::vector<SampleRecord>& records,
                                     const LabelMapping* mapping) {
  const int size = model.config().extractor.input_height;
  std::vector<Embedding> out(records.size());
  std::vector<std::string> errors(records.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < records.size(); ++i) {
    try {
      const LoadedSample s = load_sample(records[i], size, mapping);
      if (model.config().has_hsa()) {
        const Image fg = extract_foreground(s.image, s.semantic);
        out[i] = model.forward_test(s.image, &fg);
      } else {
        out[i] = model.forward_test(s.image, nullptr);
      }
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw std::runtime_error(e);
  }
  return out;
}

RetrievalIndex build_index(const SavsModel& model, const std::vector<SampleRecord>& gallery,
                           const LabelMapping* mapping) {
  if (gallery.empty()) throw std::invalid_argument("build_index: empty gallery");
  std::vector<int> pids, cids;
  std::vector<std::string> paths;
  for (const auto& r : gallery) {
    pids.push_back(r.person_id);
    cids.push_back(r.clothing_id);
    paths.push_back(r.image.string());
  }
  return make_index(embed_records(model, gallery, mapping), std::move(pids), std::move(cids), std::move(paths));
}

Ranking rank(const Embedding& query, const RetrievalIndex& index, QueryLabels labels, Protocol protocol) {
  const Embedding q = l2_normalize(query);
  Ranking r;
  std::vector<double> sim(index.size());
  bool has_match = false;
  for (std::size_t g = 0; g < index.size(); ++g) {
    if (protocol == Protocol::kClothChanging && index.person_ids[g] == labels.person_id &&
        index.clothing_ids[g] == labels.clothing_id) {
      continue;
    }
    if (index.rows[g].size() != q.size()) throw std::invalid_argument("rank: query dimension differs from index");
    double s = 0.0;
    for (std::size_t c = 0; c < q.size(); ++c) s += q[c] * index.rows[g][c];
    sim[g] = s;
    r.order.push_back(static_cast<int>(g));
    has_match = has_match || index.person_ids[g] == labels.person_id;
  }
  std::stable_sort(r.order.begin(), r.order.end(), [&sim](int a, int b) { return sim[a] > sim[b]; });
  for (int g : r.order) r.similarities.push_back(sim[g]);
  r.skipped = !has_match;
  return r;
}

MetricsReport compute_metrics(const std::vector<Ranking>& rankings, const std::vector<QueryLabels>& queries,
                              const RetrievalIndex& index) {
  if (rankings.size() != queries.size()) throw std::invalid_argument("compute_metrics: rankings and queries differ");
  MetricsReport m;
  m.cmc.assign(index.size(), 0.0);
  std::vector<double> hits(index.size(), 0.0);
  double ap_sum = 0.0;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const Ranking& r = rankings[q];
    if (r.skipped) {
      ++m.num_skipped;
      continue;
    }
    ++m.num_queries;
    int relevant = 0;
    double precision_sum = 0.0;
    std::size_t first = r.order.size();
    for (std::size_t pos = 0; pos < r.order.size(); ++pos) {
      if (index.person_ids[r.order[pos]] != queries[q].person_id) continue;
      if (first == r.order.size()) first = pos;
      ++relevant;
      precision_sum += static_cast<double>(relevant) / static_cast<double>(pos + 1);
    }
    ap_sum += precision_sum / relevant;
    for (std::size_t k = first; k < hits.size(); ++k) hits[k] += 1.0;
  }
  if (m.num_queries == 0) throw std::invalid_argument("compute_metrics: every query was skipped");
  for (std::size_t k = 0; k < hits.size(); ++k) m.cmc[k] = hits[k] / m.num_queries;
  auto at = [&m](std::size_t k) { return m.cmc.empty() ? 0.0 : m.cmc[std::min(k, m.cmc.size()) - 1]; };
  m.rank1 = at(1);
  m.rank5 = at(5);
  m.rank10 = at(10);
  m.mAP = ap_sum / m.num_queries;
  return m;
}

std::string metrics_json(const MetricsReport& report) {
  nlohmann::ordered_json j;
  j["rank1"] = report.rank1;
  j["rank5"] = report.rank5;
  j["rank10"] = report.rank10;
  j["mAP"] = report.mAP;
  j["cmc"] = report.cmc;
  j["num_queries"] = report.num_queries;
  j["num_skipped"] = report.num_skipped;
  return j.dump(2) + "\n";
}

std::string cmc_csv(const MetricsReport& report) {
  std::string out = "k,cmc\n";
  char buf[64];
  for (std::size_t k = 0; k < report.cmc.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", k + 1, report.cmc[k]);
    out += buf;
  }
  return out;
}

EvaluationResult evaluate(const SavsModel& model, const std::vector<SampleRecord>& query,
                          const std::vector<SampleRecord>& gallery, Protocol protocol, const LabelMapping* mapping) {
  if (query.empty()) throw std::invalid_argument("evaluate: no query images");
  EvaluationResult res;
  res.index = build_index(model, gallery, mapping);
  const auto q_emb = embed_records(model, query, mapping);
  for (const auto& r : query) {
    res.queries.push_back({r.person_id, r.clothing_id});
    res.query_paths.push_back(r.image.string());
  }
  res.rankings.resize(query.size());
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < query.size(); ++i) {
    res.rankings[i] = rank(q_emb[i], res.index, res.queries[i], protocol);
  }
  res.report = compute_metrics(res.rankings, res.queries, res.index);
  return res;
}

std::string ranked_lists_csv(const EvaluationResult& result, int top_k) {
  std::string out = "query_path,rank,gallery_path,similarity,correct\n";
  char buf[64];
  for (std::size_t q = 0; q < result.rankings.size(); ++q) {
    const Ranking& r = result.rankings[q];
    if (r.skipped) continue;
    const std::size_t n = std::min(r.order.size(), static_cast<std::size_t>(std::max(top_k, 0)));
    for (std::size_t i = 0; i < n; ++i) {
      const int g = r.order[i];
      const bool correct = result.index.person_ids[g] == result.queries[q].person_id;
      std::snprintf(buf, sizeof buf, ",%zu,", i + 1);
      out += result.query_paths[q] + buf + result.index.paths[g];
      std::snprintf(buf, sizeof buf, ",%.9f,%d\n", r.similarities[i], correct ? 1 : 0);
      out += buf;
    }
  }
  return out;
}

std::vector<std::vector<double>> similarity_matrix(const std::vector<Embedding>& embeddings) {
  std::vector<Embedding> unit;
  for (const auto& e : embeddings) unit.push_back(l2_normalize(e));
  const std::size_t n = unit.size();
  std::vector<std::vector<double>> s(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double d = 0.0;
      for (std::size_t c = 0; c < unit[i].size(); ++c) d += unit[i][c] * unit[j][c];
      s[i][j] = s[j][i] = d;
    }
  }
  return s;
}

Rgb diverging_color(double s) {
  s = std::clamp(s, -1.0, 1.0);
  if (s < 0) return {1.0 + s, 1.0 + s, 1.0};
  return {1.0, 1.0 - s, 1.0 - s};
}

Rgb sequential_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return {std::clamp(3.0 * t, 0.0, 1.0), std::clamp(3.0 * t - 1.0, 0.0, 1.0), std::clamp(3.0 * t - 2.0, 0.0, 1.0)};
}

Image similarity_heatmap(const std::vector<std::vector<double>>& matrix, int cell_size) {
  if (cell_size < 1) throw std::invalid_argument("similarity_heatmap: cell size must be positive");
  const int n = static_cast<int>(matrix.size());
  Image img(n * cell_size, n * cell_size);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      img.set_pixel(static_cast<std::size_t>(y) * img.width + x, diverging_color(matrix[y / cell_size][x / cell_size]));
    }
  }
  return img;
}

ScalarGrid upsample_bilinear(const ScalarGrid& grid, int height, int width) {
  ScalarGrid out{height, width, std::vector<double>(static_cast<std::size_t>(height) * width)};
  const double sy = static_cast<double>(grid.height) / height, sx = static_cast<double>(grid.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, grid.height - 1.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, grid.height - 1);
    const double ay = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, grid.width - 1.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, grid.width - 1);
      const double ax = fx - x0;
      const double top = grid.at(y0, x0) * (1 - ax) + grid.at(y0, x1) * ax;
      const double bot = grid.at(y1, x0) * (1 - ax) + grid.at(y1, x1) * ax;
      out.values[static_cast<std::size_t>(y) * width + x] = top * (1 - ay) + bot * ay;
    }
  }
  return out;
}

ScalarGrid min_max_normalize(const ScalarGrid& grid) {
  ScalarGrid out = grid;
  if (grid.values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(grid.values.begin(), grid.values.end());
  const double range = *hi - *lo;
  for (double& v : out.values) v = range > 0 ? (v - *lo) / range : 0.0;
  return out;
}

AttentionStage parse_attention_stage(const std::string& text) {
  if (text == "hsa") return AttentionStage::kHsa;
  if (text == "hsa_vcs") return AttentionStage::kHsaVcs;
  throw std::invalid_argument("unknown attention stage `" + text + "` (expected hsa or hsa_vcs)");
}

ScalarGrid attention_energy(const SavsModel& model, const Image& image, const SemanticMap& semantic,
                            AttentionStage stage, const ShieldClasses& shield_classes, std::uint64_t seed) {
  const FeatureMap fo = model.original_map(image);
  ScalarGrid e{fo.height, fo.width, std::vector<double>(fo.positions(), 0.0)};
  if (stage == AttentionStage::kHsa) {
    if (!model.config().has_hsa()) throw std::invalid_argument("attention stage hsa: model was trained without HSA");
    const AttentionWeights w = model.attention_weights(extract_foreground(image, semantic));
    for (std::size_t p = 0; p < fo.positions(); ++p) {
      double s = 0.0;
      for (int c = 0; c < fo.channels; ++c) s += std::abs(w.values[c] * fo.values[p * fo.channels + c]);
      e.values[p] = s;
    }
    return e;
  }
  if (!model.config().has_vcs()) throw std::invalid_argument("attention stage hsa_vcs: model was trained without VCS");
  const std::vector<Image> imgs{image};
  const std::vector<BinaryMask> masks{shielding_mask(semantic, shield_classes)};
  const PixelPool pool = build_pixel_pool(imgs, masks, seed);
  const RenderedBatch rendered = render_shielded(imgs, masks, pool, seed + 1);
  const FeatureMap fs = model.stream(Stream::kShielded).forward(rendered.images[0]);
  for (std::size_t p = 0; p < fo.positions(); ++p) {
    double s = 0.0;
    for (int c = 0; c < fo.channels; ++c) s += std::abs(fo.values[p * fo.channels + c] - fs.values[p * fo.channels + c]);
    e.values[p] = s;
  }
  return e;
}

Image attention_heatmap(const ScalarGrid& energy, int height, int width) {
  const ScalarGrid norm = min_max_normalize(upsample_bilinear(energy, height, width));
  Image img(height, width);
  for (std::size_t i = 0; i < norm.values.size(); ++i) img.set_pixel(i, sequential_color(norm.values[i]));
  return img;
}

}  // namespace savs
