// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <tuple>

#include "json.hpp"
#include "oracles.hpp"
#include "savs/cli.hpp"
#include "savs/evaluation.hpp"
#include "savs/losses.hpp"
#include "savs/semantic_encoder.hpp"
#include "savs/training.hpp"

using namespace savs;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;
  void fail(const std::string& why) {
    if (pass) detail = why;
    pass = false;
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// 1 ---------------------------------------------------------------------------

Outcome encoder_conservation() {
  Outcome o;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> batch(2, 8), side(4, 20), label(0, 6);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 200 && o.pass; ++trial) {
    const int b = batch(rng), h = side(rng), w = side(rng);
    std::vector<Image> images;
    std::vector<BinaryMask> masks;
    for (int i = 0; i < b; ++i) {
      Image img(h, w);
      // Quantised values make multiset comparisons exact and encourage duplicates.
      for (double& v : img.pixels) v = std::floor(unit(rng) * 8) / 7;
      SemanticMap sem(h, w);
      for (auto& v : sem.values) v = static_cast<std::uint8_t>(label(rng));
      images.push_back(std::move(img));
      masks.push_back(shielding_mask(sem));
    }
    const auto pool = build_pixel_pool(images, masks, rng());
    std::multiset<Rgb> pool_set(pool.pixels.begin(), pool.pixels.end());

    auto check = [&](std::size_t count, DrawMode mode) {
      const std::span<const Image> imgs(images.data(), count);
      const std::span<const BinaryMask> ms(masks.data(), count);
      std::size_t wanted = 0;
      for (std::size_t i = 0; i < count; ++i) {
        for (auto v : masks[i].values) wanted += v;
      }
      if (pool.empty() && wanted > 0) return;  // nothing to draw from
      const auto out = render_shielded(imgs, ms, pool, rng(), mode);
      std::multiset<Rgb> drawn;
      for (std::size_t i = 0; i < count; ++i) {
        for (std::size_t p = 0; p < images[i].num_pixels(); ++p) {
          const Rgb got = out.images[i].pixel(p);
          if (masks[i].values[p] == 0) {
            if (got != images[i].pixel(p)) o.fail("non-clothing pixel changed in trial " + std::to_string(trial));
          } else {
            if (!pool_set.contains(got)) o.fail("rendered pixel outside the pool in trial " + std::to_string(trial));
            drawn.insert(got);
          }
        }
      }
      if (mode == DrawMode::kWithoutReplacement &&
          !std::includes(pool_set.begin(), pool_set.end(), drawn.begin(), drawn.end())) {
        o.fail("draws without replacement are not a sub-multiset in trial " + std::to_string(trial));
      }
    };
    check(images.size(), DrawMode::kWithReplacement);
    check(images.size(), DrawMode::kWithoutReplacement);
    check(images.size() / 2, DrawMode::kWithoutReplacement);  // strict sub-multiset
  }
  const double secs = seconds_since(t0);
  if (o.pass && secs >= 30.0) o.fail("took " + fmt("%.1f", secs) + " s");
  if (o.pass) o.detail = "200 batches in " + fmt("%.2f", secs) + " s";
  return o;
}

// 2 ---------------------------------------------------------------------------

Outcome hsa_algebra() {
  Outcome o;
  auto near = [&](double a, double b, const std::string& what) {
    if (std::abs(a - b) > 1e-6) o.fail(what + ": " + fmt("%.9g", a) + " vs " + fmt("%.9g", b));
  };
  FeatureMap m(2, 2, 1);
  m.values = {1, 2, 3, 5};
  near(gap(m)[0], 2.75, "gap of a 2x2 map");
  near(gap(FeatureMap(3, 4, 5, 2.5))[4], 2.5, "gap of a constant map");
  for (double w : hsa_weights(m, HsaParams(1, 1)).values) near(w, 0.5, "zero-parameter weights");

  HsaParams p(2, 2);
  p.w1.data = {0.7, -0.2};
  p.b1.data = {0.1};
  p.w2.data = {1.5, -0.8};
  p.b2.data = {-0.3, 0.4};
  FeatureMap v(2, 2, 2);
  for (std::size_t i = 0; i < v.values.size(); i += 2) {
    v.values[i] = 1.2;
    v.values[i + 1] = 0.5;
  }
  const double hidden = std::max(0.0, 0.7 * 1.2 - 0.2 * 0.5 + 0.1);
  const auto w = hsa_weights(v, p).values;
  near(w[0], 1 / (1 + std::exp(-(1.5 * hidden - 0.3))), "two-channel weight 0");
  near(w[1], 1 / (1 + std::exp(-(-0.8 * hidden + 0.4))), "two-channel weight 1");

  FeatureMap two(1, 2, 2);
  two.values = {3, 1, 5, 5};
  const auto r = hsa_reweight(two, {{0.5, 2.0}});
  near(r[0], 2.0, "reweight channel 0");
  near(r[1], 6.0, "reweight channel 1");

  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> val(-3, 3), unit(0, 1);
  for (int t = 0; t < 100; ++t) {
    FeatureMap f(7, 7, 32);
    for (double& x : f.values) x = val(rng);
    AttentionWeights aw;
    for (int c = 0; c < 32; ++c) aw.values.push_back(unit(rng));
    const auto lhs = gap(hsa_reweight_spatial(f, aw));
    const auto rhs = hsa_reweight(f, aw);
    for (int c = 0; c < 32; ++c) near(lhs[c], rhs[c], "commutation on map " + std::to_string(t));
  }
  if (o.pass) o.detail = "hand examples and 100 commutation maps within 1e-6";
  return o;
}

// 3 ---------------------------------------------------------------------------

Outcome loss_oracles() {
  Outcome o;
  const CircleLossConfig def{};
  std::mt19937_64 rng(303);
  std::uniform_int_distribution<int> size(1, 6);
  std::uniform_real_distribution<double> sim(-1, 1), gamma(1, 64), margin(0, 0.5);
  double worst_value = 0, worst_grad = 0;
  for (int t = 0; t < 50; ++t) {
    const auto cfg = CircleLossConfig::from_margin(gamma(rng), margin(rng));
    SimilarityBundle b;
    for (int i = size(rng); i > 0; --i) b.s_p.push_back(sim(rng));
    for (int j = size(rng); j > 0; --j) b.s_n.push_back(sim(rng));
    const double want = testing::circle_oracle(b.s_p, b.s_n, cfg.gamma, cfg.o_p, cfg.o_n);
    const double err = std::abs(circle_loss(b, cfg) - want) / std::max(1.0, std::abs(want));
    worst_value = std::max(worst_value, err);
    if (err > 1e-9) o.fail("circle loss off the oracle by " + fmt("%.3g", err));
  }
  int checked = 0;
  while (checked < 20) {
    SimilarityBundle b;
    for (int i = size(rng); i > 0; --i) b.s_p.push_back(sim(rng));
    for (int j = size(rng); j > 0; --j) b.s_n.push_back(sim(rng));
    bool kink = false;
    for (double x : b.s_p) kink = kink || std::abs(x - def.o_p) < 1e-3;
    for (double x : b.s_n) kink = kink || std::abs(x - def.o_n) < 1e-3;
    if (kink) continue;
    ++checked;
    SimilarityBundle g;
    circle_loss(b, def, &g, CircleGradient::kExact);
    auto fd = [&](std::vector<double>& v, std::size_t i) {
      const double keep = v[i];
      v[i] = keep + 1e-5;
      const double up = circle_loss(b, def);
      v[i] = keep - 1e-5;
      const double down = circle_loss(b, def);
      v[i] = keep;
      return (up - down) / 2e-5;
    };
    for (std::size_t i = 0; i < b.s_p.size(); ++i) {
      const double num = fd(b.s_p, i);
      const double rel = std::abs(num - g.s_p[i]) / std::max(1e-3, std::abs(num));
      worst_grad = std::max(worst_grad, rel);
    }
    for (std::size_t j = 0; j < b.s_n.size(); ++j) {
      const double num = fd(b.s_n, j);
      const double rel = std::abs(num - g.s_n[j]) / std::max(1e-3, std::abs(num));
      worst_grad = std::max(worst_grad, rel);
    }
  }
  if (worst_grad > 1e-4) o.fail("gradient relative error " + fmt("%.3g", worst_grad));

  if (std::abs(circle_loss({{1.25}, {-0.25}}, def) - std::log(2.0)) > 1e-12) o.fail("ln 2 at the optima");
  if (std::abs(circle_loss({{1.5}, {-0.5}}, def) - std::log(2.0)) > 1e-12) o.fail("ln 2 past the optima");
  for (int k = 1; k <= 4; ++k) {
    for (int l = 1; l <= 4; ++l) {
      SimilarityBundle b{std::vector<double>(k, 1.3), std::vector<double>(l, -0.6)};
      if (std::abs(circle_loss(b, def) - std::log(1.0 + k * l)) > 1e-12) o.fail("ln(1+KL) saturation");
    }
  }
  if (semantic_loss({{1, 2}}, {{1, 2}}) != 0.0) o.fail("semantic loss of identical batches");
  if (semantic_loss({{0, 1, 0}}, {{0, 0, 0}}) != 1.0) o.fail("semantic loss of a unit difference");
  if (semantic_loss({{1, 0}, {0, 0}}, {{0, 0}, {3, 0}}) != 2.0) o.fail("semantic loss mean of 1 and 3");
  if (o.pass) {
    o.detail = "50 configs (worst " + fmt("%.1e", worst_value) + "), gradients (worst " + fmt("%.1e", worst_grad) +
               "), saturation and semantic examples";
  }
  return o;
}

// 4 ---------------------------------------------------------------------------

Outcome metrics_oracle() {
  Outcome o;
  const std::pair<int, int> combos[4] = {{0, 0}, {0, 1}, {1, 0}, {1, 1}};
  long galleries = 0;
  for (int n = 1; n <= 8 && o.pass; ++n) {
    std::vector<int> digits(n, 0);
    for (;;) {
      std::vector<int> pid(n), cid(n);
      for (int i = 0; i < n; ++i) std::tie(pid[i], cid[i]) = combos[digits[i]];
      std::vector<Embedding> rows;
      for (int i = 0; i < n; ++i) {
        const double a = 0.25 * ((i * 5) % 4);  // includes ties
        rows.push_back({std::cos(a), std::sin(a)});
      }
      const auto idx = make_index(rows, pid, cid);
      for (auto protocol : {Protocol::kStandard, Protocol::kClothChanging}) {
        std::vector<Ranking> ranks;
        std::vector<QueryLabels> qs;
        std::vector<std::vector<double>> sims;
        std::vector<int> qp, qc;
        for (auto [p, c] : combos) {
          ranks.push_back(rank({1.0, 0.0}, idx, {p, c}, protocol));
          qs.push_back({p, c});
          qp.push_back(p);
          qc.push_back(c);
          std::vector<double> row;
          for (const auto& e : idx.rows) row.push_back(e[0]);
          sims.push_back(row);
        }
        const auto want = testing::brute_force_metrics(sims, qp, qc, pid, cid, protocol == Protocol::kClothChanging);
        if (want.queries == 0) continue;
        const auto got = compute_metrics(ranks, qs, idx);
        if (got.cmc != want.cmc || got.mAP != want.mAP) {
          o.fail("mismatch on a gallery of size " + std::to_string(n));
        }
      }
      ++galleries;
      int i = 0;
      while (i < n && ++digits[i] == 4) digits[i++] = 0;
      if (i == n) break;
    }
  }
  if (o.pass) o.detail = std::to_string(galleries) + " galleries, both protocols, exact";
  return o;
}

// 5 ---------------------------------------------------------------------------

Outcome weight_sharing(const fs::path& data) {
  Outcome o;
  TrainConfig cfg;
  cfg.seed = 1;
  cfg.max_steps = 10;
  const auto records = filter_split(scan_dataset(data), Split::kTrain);
  const LoadedSample probe = load_sample(records.front(), cfg.input_size, nullptr);
  int steps = 0;
  TrainHooks hooks;
  hooks.on_step = [&](const StepInfo&, const SavsModel& m) {
    ++steps;
    const auto a = m.stream(Stream::kOriginal).parameters();
    const auto b = m.stream(Stream::kShielded).parameters();
    if (a.size() != b.size()) return o.fail("streams own different parameter counts");
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].data != b[i].data) o.fail("stream parameters diverged at step " + std::to_string(steps));
    }
    if (m.stream(Stream::kOriginal).forward(probe.image) != m.stream(Stream::kShielded).forward(probe.image)) {
      o.fail("streams map the same image differently at step " + std::to_string(steps));
    }
  };
  const auto result = train(records, cfg, hooks);
  if (steps != 10) o.fail("ran " + std::to_string(steps) + " steps");
  if (o.pass) o.detail = "10 steps, original and shielded backbone parameters bitwise identical";
  return o;
}

// 6 and 7 ---------------------------------------------------------------------

struct RunOutput {
  std::string trace_csv;
  std::string metrics_json;
  std::vector<double> epoch_totals;
  double rank1 = 0;
  double mAP = 0;
};

// Kept from the first verified run as regression bounds.
constexpr double kLossRatioBound = 0.5;
constexpr double kRank1Bound = 0.80;

RunOutput train_and_eval(const fs::path& data, const fs::path& work, const std::string& ablation, int seed) {
  const std::string tag = ablation + "_s" + std::to_string(seed);
  const fs::path ckpt = work / (tag + ".ckpt"), trace = work / (tag + "_trace.csv"),
                 metrics = work / (tag + "_metrics.json");
  const int trained = cli::run({"savs", "train", "--data", data.string(), "--out-checkpoint", ckpt.string(),
                                "--trace", trace.string(), "--ablation", ablation, "--seed", std::to_string(seed)});
  if (trained != cli::kExitOk) throw std::runtime_error("train failed for " + tag);
  const int evaluated = cli::run({"savs", "eval", "--checkpoint", ckpt.string(), "--data", data.string(),
                                  "--protocol", "cloth-changing", "--out", metrics.string()});
  if (evaluated != cli::kExitOk) throw std::runtime_error("eval failed for " + tag);
  RunOutput r;
  r.trace_csv = slurp(trace);
  r.metrics_json = slurp(metrics);
  std::istringstream lines(r.trace_csv);
  std::string line;
  std::getline(lines, line);
  while (std::getline(lines, line)) {
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
    r.epoch_totals.push_back(std::stod(cols.at(4)));
  }
  const auto j = nlohmann::json::parse(r.metrics_json);
  r.rank1 = j["rank1"].get<double>();
  r.mAP = j["mAP"].get<double>();
  std::printf("    %-9s seed %d  rank-1 %.4f  mAP %.4f  loss %.4f -> %.4f\n", ablation.c_str(), seed, r.rank1, r.mAP,
              r.epoch_totals.front(), r.epoch_totals.back());
  std::fflush(stdout);
  return r;
}

}  // namespace

int main() {
  std::map<int, Outcome> results;
  auto report = [&](int id, const char* name, const Outcome& o) {
    results[id] = o;
    std::printf("[%s] %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
    std::fflush(stdout);
  };
  auto guarded = [](const std::function<Outcome()>& f) {
    try {
      return f();
    } catch (const std::exception& e) {
      Outcome o;
      o.fail(std::string("exception: ") + e.what());
      return o;
    }
  };

  std::printf("acceptance run, %d OpenMP thread(s)\n", omp_get_max_threads());
  report(1, "encoder conservation", guarded(encoder_conservation));
  report(2, "HSA algebra", guarded(hsa_algebra));
  report(3, "loss oracles", guarded(loss_oracles));
  report(4, "metrics oracle", guarded(metrics_oracle));

  const fs::path work = fs::absolute("acceptance_work");
  fs::remove_all(work);
  fs::create_directories(work);
  const fs::path data = work / "data";
  const auto t_e2e = Clock::now();
  const int generated = cli::run({"savs", "gen-data", "--out", data.string(), "--num-ids", "16", "--clothes-per-id",
                                  "2", "--confound-strength", "0.75", "--image-size", "64",
                                  "--images-per-combination", "8", "--seed", "7"});
  if (generated != cli::kExitOk) {
    std::printf("gen-data failed\n");
    return 1;
  }

  report(5, "weight sharing", guarded([&] { return weight_sharing(data); }));

  std::map<std::string, std::vector<RunOutput>> runs;
  Outcome e2e = guarded([&] {
    Outcome o;
    for (const char* ablation : {"hsa_vcs", "hsa", "baseline"}) {
      for (int seed : {1, 2, 3}) runs[ablation].push_back(train_and_eval(data, work, ablation, seed));
    }
    const double secs = seconds_since(t_e2e);
    const auto& first = runs["hsa_vcs"].front();
    const double ratio = first.epoch_totals.back() / first.epoch_totals.front();
    auto mean_rank1 = [&](const std::string& a) {
      double s = 0;
      for (const auto& r : runs[a]) s += r.rank1;
      return s / runs[a].size();
    };
    const double full = mean_rank1("hsa_vcs"), hsa = mean_rank1("hsa"), base = mean_rank1("baseline");
    std::vector<std::string> failures;
    if (!(ratio < kLossRatioBound)) failures.push_back("(a)");
    if (!(first.rank1 >= kRank1Bound)) failures.push_back("(b)");
    if (!(full >= hsa && hsa >= base)) failures.push_back("(c)");
    if (!(secs <= 900.0)) failures.push_back("(runtime)");
    o.detail = "(a) loss ratio " + fmt("%.3f", ratio) + " (need < " + fmt("%.2f", kLossRatioBound) + "); (b) rank-1 " +
               fmt("%.4f", first.rank1) + " (need >= " + fmt("%.2f", kRank1Bound) + "); (c) mean rank-1 full " +
               fmt("%.4f", full) + ", hsa " + fmt("%.4f", hsa) + ", baseline " + fmt("%.4f", base) + "; " +
               fmt("%.0f", secs) + " s";
    if (!failures.empty()) {
      std::string which;
      for (const auto& f : failures) which += (which.empty() ? "" : " ") + f;
      o.pass = false;
      o.detail = "failed " + which + ". " + o.detail;
    }
    return o;
  });
  report(6, "end-to-end synthetic run", e2e);

  report(7, "determinism", guarded([&] {
           Outcome o;
           if (runs["hsa_vcs"].empty()) {
             o.fail("no reference run");
             return o;
           }
           fs::create_directories(work / "rerun");
           const auto again = train_and_eval(data, work / "rerun", "hsa_vcs", 1);
           const auto& ref = runs["hsa_vcs"].front();
           if (again.trace_csv != ref.trace_csv) o.fail("loss traces differ");
           if (again.metrics_json != ref.metrics_json) o.fail("metrics JSON differs");
           if (o.pass) o.detail = "identical loss trace and metrics JSON across two seeded runs";
           return o;
         }));

  int failed = 0;
  for (const auto& [id, o] : results) failed += o.pass ? 0 : 1;
  std::printf("%d of %zu criteria passed\n", static_cast<int>(results.size()) - failed, results.size());
  return failed == 0 ? 0 : 1;
}
