#include <algorithm>
#include <cmath>
#include <map>
#include <fstream>
#include <set>

#include "doctest.h"
#include "savs/training.hpp"
#include "test_util.hpp"

using namespace savs;

namespace {

std::vector<SampleRecord> fake_records(const std::vector<int>& images_per_id) {
  std::vector<SampleRecord> out;
  for (std::size_t pid = 0; pid < images_per_id.size(); ++pid) {
    for (int s = 0; s < images_per_id[pid]; ++s) {
      SampleRecord r;
      r.person_id = static_cast<int>(pid) + 100;
      r.clothing_id = s % 2;
      r.sequence = s;
      r.image = sample_filename(r.person_id, r.clothing_id, s);
      out.push_back(r);
    }
  }
  return out;
}

void check_batch_shape(const BatchSpec& b, int p, int k) {
  REQUIRE(b.samples.size() == static_cast<std::size_t>(p * k));
  std::map<int, int> count;
  for (const auto& s : b.samples) ++count[s.person_id];
  CHECK(count.size() == static_cast<std::size_t>(p));
  for (const auto& [pid, n] : count) CHECK(n == k);
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.images_per_id = 2;
  cfg.epochs = 2;
  cfg.decay_epoch = 1;
  cfg.layers = "k4s4c8,k3s2c16,k1s1c16";
  cfg.reduction = 4;
  cfg.seed = 3;
  return cfg;
}

// Four training ids, two outfits, two shots each.
struct SmallData {
  testing::TempDir dir{"train"};
  std::vector<SampleRecord> train;
  SmallData() {
    SynthSpec spec;
    spec.num_ids = 5;
    spec.clothes_per_id = 2;
    spec.images_per_combination = 2;
    spec.train_fraction = 0.8;
    spec.seed = 9;
    generate_synthetic(spec, dir.path());
    train = filter_split(scan_dataset(dir.path()), Split::kTrain);
  }
};

SmallData& small_data() {
  static SmallData data;
  return data;
}

std::vector<Tensor> snapshot(const SavsModel& m) {
  std::vector<Tensor> out;
  for (const Tensor* t : m.parameters()) out.push_back(*t);
  return out;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainConfig cfg;
  CHECK(lr_at(0, cfg) == 3.5e-3);
  CHECK(lr_at(39, cfg) == 3.5e-3);
  CHECK(lr_at(40, cfg) == doctest::Approx(3.5e-4).epsilon(1e-12));
  CHECK(lr_at(59, cfg) == doctest::Approx(3.5e-4).epsilon(1e-12));
  cfg.lr_decay = 1.0;
  for (int e = 0; e < cfg.epochs; ++e) CHECK(lr_at(e, cfg) == cfg.lr0);
}

TEST_CASE("momentum SGD") {
  Tensor theta("w", {3});
  theta.data = {1.0, -2.0, 0.5};
  std::vector<Tensor*> params{&theta};
  std::vector<Tensor> velocity;

  SUBCASE("plain step") {
    std::vector<Tensor> g{Tensor("w", {3})};
    g[0].data.assign(3, 1.0);
    sgd_step(params, g, velocity, 1.0, 0.0);
    CHECK(theta.data == std::vector<double>{0.0, -3.0, -0.5});
  }
  SUBCASE("zero gradient decays velocity only") {
    velocity = {Tensor("w", {3})};
    velocity[0].data = {1.0, 2.0, 3.0};
    const auto before = theta.data;
    std::vector<Tensor> g{Tensor("w", {3})};
    sgd_step(params, g, velocity, 0.0, 0.9);
    CHECK(theta.data == before);
    CHECK(velocity[0].data[2] == doctest::Approx(2.7));
  }
  SUBCASE("two steps of the scalar recurrence") {
    std::vector<Tensor> g{Tensor("w", {3})};
    g[0].data = {2.0, -1.0, 4.0};
    const auto start = theta.data;
    sgd_step(params, g, velocity, 0.1, 0.9);
    for (int i = 0; i < 3; ++i) CHECK(theta.data[i] - start[i] == doctest::Approx(-0.1 * g[0].data[i]));
    const auto mid = theta.data;
    sgd_step(params, g, velocity, 0.1, 0.9);
    for (int i = 0; i < 3; ++i) CHECK(theta.data[i] - mid[i] == doctest::Approx(-0.19 * g[0].data[i]));
  }
  SUBCASE("non-finite gradient aborts without touching anything") {
    Tensor other("u", {2});
    other.data = {4.0, 5.0};
    std::vector<Tensor*> two{&theta, &other};
    std::vector<Tensor> g{Tensor("w", {3}), Tensor("u", {2})};
    g[0].data.assign(3, 1.0);
    g[1].data = {1.0, std::nan("")};
    const auto t0 = theta.data;
    CHECK_THROWS_AS(sgd_step(two, g, velocity, 0.1, 0.9), std::domain_error);
    CHECK(theta.data == t0);
    CHECK(other.data == std::vector<double>{4.0, 5.0});
  }
  SUBCASE("shape mismatch") {
    std::vector<Tensor> g{Tensor("w", {2})};
    CHECK_THROWS_AS(sgd_step(params, g, velocity, 0.1, 0.9), std::invalid_argument);
  }
}

TEST_CASE("PK sampler") {
  SUBCASE("exactly P ids with K images make one batch holding everything") {
    const auto recs = fake_records({4, 4, 4, 4});
    PkSampler s(recs, 16, 4, 1);
    CHECK(s.batches_per_epoch() == 1);
    const auto b = s.next();
    check_batch_shape(b, 4, 4);
    std::multiset<int> idx;
    for (const auto& x : b.samples) idx.insert(x.index);
    CHECK(idx == std::multiset<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15});
  }
  SUBCASE("an id with a single image fills its slots with replacement") {
    const auto recs = fake_records({1, 4});
    PkSampler s(recs, 8, 4, 2);
    const auto b = s.next();
    check_batch_shape(b, 2, 4);
    CHECK(std::count_if(b.samples.begin(), b.samples.end(), [](const auto& x) { return x.index == 0; }) == 4);
  }
  SUBCASE("sixteen ids, P = 8: each pair of batches partitions the ids") {
    const auto recs = fake_records(std::vector<int>(16, 4));
    PkSampler s(recs, 32, 4, 3);
    CHECK(s.ids_per_batch() == 8);
    for (int pass = 0; pass < 5; ++pass) {
      std::set<int> a, b;
      for (const auto& x : s.next().samples) a.insert(x.person_id);
      for (const auto& x : s.next().samples) b.insert(x.person_id);
      CHECK(a.size() == 8);
      CHECK(b.size() == 8);
      std::set<int> all = a;
      all.insert(b.begin(), b.end());
      CHECK(all.size() == 16);
    }
  }
  SUBCASE("batch invariants hold on an uneven dataset") {
    const auto recs = fake_records({3, 7, 2, 5, 9, 1, 4});
    PkSampler s(recs, 12, 4, 4);
    CHECK(s.batches_per_epoch() == 3);  // ceil(31 / 12)
    std::map<int, int> seen;
    for (int i = 0; i < 50; ++i) {
      const auto b = s.next();
      check_batch_shape(b, 3, 4);
      for (const auto& x : b.samples) {
        CHECK(recs[x.index].person_id == x.person_id);
        CHECK(recs[x.index].clothing_id == x.clothing_id);
        ++seen[x.index];
      }
    }
    CHECK(seen.size() == recs.size());
  }
  SUBCASE("ids with at least K images give distinct images inside a slot") {
    const auto recs = fake_records({5, 6, 4, 8});
    PkSampler s(recs, 8, 4, 5);
    for (int i = 0; i < 20; ++i) {
      std::map<int, std::set<int>> per_id;
      for (const auto& x : s.next().samples) per_id[x.person_id].insert(x.index);
      for (const auto& [pid, set] : per_id) CHECK(set.size() == 4);
    }
  }
  SUBCASE("same seed, same batches") {
    const auto recs = fake_records({3, 7, 2, 5, 9});
    PkSampler a(recs, 8, 2, 6), b(recs, 8, 2, 6);
    for (int i = 0; i < 10; ++i) {
      const auto x = a.next(), y = b.next();
      for (std::size_t j = 0; j < x.samples.size(); ++j) CHECK(x.samples[j].index == y.samples[j].index);
    }
  }
  CHECK_THROWS_AS(PkSampler(fake_records({4, 4}), 12, 4, 1), std::invalid_argument);
  CHECK_THROWS_AS(PkSampler(fake_records({4, 4}), 6, 4, 1), std::invalid_argument);
}

TEST_CASE("training config text") {
  TrainConfig cfg;
  cfg.set("lr0", "0.01");
  cfg.set("input_size", "64x64");
  cfg.set("shield_classes", "none");
  cfg.set("o_p", "1.4");
  cfg.set("ablation", "hsa");
  cfg.set("semantic_loss", "squared");
  cfg.set("draw_mode", "without_replacement");
  cfg.set("seed", "18446744073709551615");
  CHECK(cfg.lr0 == 0.01);
  CHECK(cfg.shield_classes.empty());
  CHECK(cfg.circle().o_p == 1.4);
  CHECK(cfg.circle().o_n == -0.25);
  CHECK(cfg.seed == 18446744073709551615ull);
  const auto back = TrainConfig::parse(cfg.to_text());
  CHECK(back.to_text() == cfg.to_text());
  CHECK(back.ablation == Ablation::kHsa);
  CHECK(TrainConfig::parse(TrainConfig{}.to_text()).to_text() == TrainConfig{}.to_text());

  const auto parsed = TrainConfig::parse("# comment\nepochs = 5\n\n decay_epoch=2 \n");
  CHECK(parsed.epochs == 5);
  CHECK(parsed.decay_epoch == 2);
  for (const auto& key : TrainConfig::keys()) CHECK(cfg.to_text().find(key + " = ") != std::string::npos);

  CHECK_THROWS_AS(cfg.set("learning_rate", "1"), std::invalid_argument);
  CHECK_THROWS_AS(cfg.set("epochs", "ten"), std::invalid_argument);
  CHECK_THROWS_AS(cfg.set("input_size", "64x32"), std::invalid_argument);
  CHECK_THROWS_AS(cfg.set("shield_classes", "0"), std::invalid_argument);
  CHECK_THROWS_AS(TrainConfig::parse("epochs 5"), std::invalid_argument);

  TrainConfig bad;
  bad.batch_size = 30;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = TrainConfig{};
  bad.decay_epoch = 60;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = TrainConfig{};
  bad.reduction = 48;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK_NOTHROW(TrainConfig{}.validate());
  CHECK(TrainConfig{}.extractor() == ExtractorConfig::toy());
}

TEST_CASE("config files") {
  testing::TempDir dir{"train"};
  const auto path = dir.path() / "run.cfg";
  std::ofstream(path) << "epochs = 7\nbogus = 1\n";
  try {
    TrainConfig::load(path);
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("run.cfg") != std::string::npos);
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(TrainConfig::load(dir.path() / "missing.cfg"), std::runtime_error);
}

TEST_CASE("training with zero learning rate leaves the initial parameters") {
  auto cfg = small_config();
  cfg.lr0 = 0.0;
  cfg.epochs = 1;
  cfg.decay_epoch = 0;
  const auto result = train(small_data().train, cfg);
  CHECK(result.steps == 2);
  ModelConfig mc = result.model_config;
  const SavsModel fresh(mc, cfg.seed);
  CHECK(snapshot(result.model) == snapshot(fresh));
}

TEST_CASE("training is deterministic and records a finite trace") {
  const auto cfg = small_config();
  std::vector<StepInfo> steps;
  TrainHooks hooks;
  hooks.on_step = [&](const StepInfo& s, const SavsModel& m) {
    steps.push_back(s);
    CHECK(&m.stream(Stream::kOriginal) == &m.stream(Stream::kShielded));
  };
  const auto a = train(small_data().train, cfg, hooks);
  const auto b = train(small_data().train, cfg);
  REQUIRE(a.trace.size() == 2);
  CHECK(loss_trace_csv(a.trace) == loss_trace_csv(b.trace));
  CHECK(snapshot(a.model) == snapshot(b.model));
  for (const auto& e : a.trace) {
    CHECK(std::isfinite(e.total));
    CHECK(e.sem_loss > 0.0);
  }
  CHECK(a.trace[0].lr == cfg.lr0);
  CHECK(a.trace[1].lr == doctest::Approx(cfg.lr0 * cfg.lr_decay));
  // A fresh pool per batch: pool seeds never repeat.
  std::set<std::uint64_t> seeds;
  for (const auto& s : steps) seeds.insert(s.pool_seed);
  CHECK(seeds.size() == steps.size());
  CHECK(a.class_person_ids.size() == 4);
  CHECK(std::is_sorted(a.class_person_ids.begin(), a.class_person_ids.end()));

  auto other = cfg;
  other.seed = 4;
  CHECK(loss_trace_csv(train(small_data().train, other).trace) != loss_trace_csv(a.trace));
}

TEST_CASE("no semantic weight and no shielding reduces to the attention-only ablation") {
  auto full = small_config();
  full.lambda_sem = 0.0;
  full.shield_classes.clear();
  auto hsa = small_config();
  hsa.ablation = Ablation::kHsa;
  const auto a = train(small_data().train, full);
  const auto b = train(small_data().train, hsa);
  CHECK(snapshot(a.model) == snapshot(b.model));
  for (std::size_t e = 0; e < a.trace.size(); ++e) {
    CHECK(a.trace[e].sem_loss == 0.0);
    CHECK(a.trace[e].total == b.trace[e].total);
  }
}

TEST_CASE("max_steps stops early") {
  auto cfg = small_config();
  cfg.max_steps = 3;
  int calls = 0;
  TrainHooks hooks;
  hooks.on_step = [&](const StepInfo&, const SavsModel&) { ++calls; };
  CHECK(train(small_data().train, cfg, hooks).steps == 3);
  CHECK(calls == 3);
}

TEST_CASE("checkpoints") {
  testing::TempDir dir{"train"};
  for (Ablation ab : {Ablation::kHsaVcs, Ablation::kBaseline}) {
    auto cfg = small_config();
    cfg.ablation = ab;
    cfg.max_steps = 1;
    const auto result = train(small_data().train, cfg);
    const auto path = dir.path() / (to_string(ab) + ".ckpt");
    save_checkpoint(path, result, cfg);
    const auto loaded = load_checkpoint(path);
    CHECK(loaded.config.to_text() == cfg.to_text());
    CHECK(loaded.model_config.num_classes == result.model_config.num_classes);
    CHECK(loaded.model_config.ablation == ab);
    const auto orig = snapshot(result.model), back = snapshot(loaded.model);
    REQUIRE(orig.size() == back.size());
    for (std::size_t i = 0; i < orig.size(); ++i) {
      CHECK(orig[i].name == back[i].name);
      CHECK(orig[i].shape == back[i].shape);
      for (std::size_t k = 0; k < orig[i].data.size(); ++k) {
        CHECK(back[i].data[k] == static_cast<double>(static_cast<float>(orig[i].data[k])));
      }
    }
    if (ab == Ablation::kBaseline) {
      for (const auto& t : back) CHECK(t.name.find("attention") == std::string::npos);
    }
  }
  CHECK_THROWS(load_checkpoint(dir.path() / "nope.ckpt"));
}

TEST_CASE("loss trace csv") {
  std::vector<EpochLoss> trace{{0, 1.0, 2.0, 0.5, 3.5, 0.0035}, {1, 0.5, 1.0, 0.25, 1.75, 0.00035}};
  const auto csv = loss_trace_csv(trace);
  CHECK(csv.rfind("epoch,id_loss,cir_loss,sem_loss,total,lr\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK(csv.find("\n1,0.5,1,0.25,1.75,") != std::string::npos);
}

TEST_CASE("sample loading") {
  const auto& recs = small_data().train;
  const auto s = load_sample(recs.front(), 64, nullptr);
  CHECK(s.image.height == 64);
  CHECK(s.semantic.height == 64);
  const auto small = load_sample(recs.front(), 32, nullptr);
  CHECK(small.image.width == 32);
  for (std::uint8_t v : small.semantic.values) CHECK(v <= 6);
  // Nearest-neighbour labels take values present in the full-size mask.
  std::set<std::uint8_t> full(s.semantic.values.begin(), s.semantic.values.end());
  for (std::uint8_t v : small.semantic.values) CHECK(full.count(v) == 1);
  SampleRecord missing = recs.front();
  missing.image = "/nonexistent/x.png";
  CHECK_THROWS(load_sample(missing, 64, nullptr));
}
