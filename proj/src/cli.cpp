#include "savs/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "savs/archive.hpp"
#include "savs/data.hpp"
#include "savs/evaluation.hpp"
#include "savs/png_io.hpp"
#include "savs/training.hpp"

namespace fs = std::filesystem;

namespace savs::cli {

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("SAVS_SEED");
  if (!v || !*v) return std::nullopt;
  try {
    std::size_t pos = 0;
    const auto s = std::stoull(v, &pos);
    if (pos == std::string(v).size()) return s;
  } catch (const std::exception&) {
  }
  throw UsageError(std::string("SAVS_SEED is not a non-negative integer: ") + v);
}

std::string flag_name(const std::string& key) {
  std::string dashed = key;
  std::replace(dashed.begin(), dashed.end(), '_', '-');
  return dashed == key ? "--" + key : "--" + dashed + ",--" + key;
}

/// Image files of a directory paired with same-named masks, sorted by path.
std::vector<SampleRecord> image_records(const fs::path& images, const fs::path& masks) {
  if (!fs::is_directory(images)) throw std::runtime_error(images.string() + " is not a directory");
  std::vector<SampleRecord> out;
  std::vector<std::string> missing;
  for (const auto& e : fs::directory_iterator(images)) {
    if (!e.is_regular_file() || e.path().extension() != ".png") continue;
    SampleRecord r;
    r.image = e.path();
    r.mask = masks / e.path().filename();
    if (auto parsed = parse_sample_filename(e.path().filename().string())) {
      r.person_id = parsed->person_id;
      r.clothing_id = parsed->clothing_id;
      r.sequence = parsed->sequence;
    }
    if (!fs::exists(r.mask)) missing.push_back(r.mask.string());
    out.push_back(std::move(r));
  }
  if (!missing.empty()) {
    std::string msg = "missing masks:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw std::runtime_error(msg);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.image < b.image; });
  if (out.empty()) throw std::runtime_error("no .png images in " + images.string());
  return out;
}

bool sets_key(const std::string& config_text, const std::string& key) {
  std::istringstream in(config_text);
  std::string line;
  while (std::getline(in, line)) {
    const auto b = line.find_first_not_of(" \t");
    if (b == std::string::npos || line.compare(b, key.size(), key) != 0) continue;
    const auto e = line.find_first_not_of(" \t", b + key.size());
    if (e != std::string::npos && line[e] == '=') return true;
  }
  return false;
}

fs::path sibling_masks(const fs::path& images) {
  fs::path dir = images;
  if (dir.filename().empty()) dir = dir.parent_path();
  return dir.parent_path() / "masks";
}

std::optional<LabelMapping> mapping_of(const TrainConfig& cfg) {
  if (cfg.label_mapping.empty()) return std::nullopt;
  return LabelMapping::load(cfg.label_mapping);
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Clothing-invariant person re-identification toolkit", args.empty() ? "savs" : args[0]};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic paper-doll dataset");
  SynthSpec synth;
  std::optional<std::uint64_t> gen_seed;
  fs::path gen_out;
  gen->add_option("--out", gen_out, "Dataset root")->required();
  gen->add_option("--num-ids", synth.num_ids);
  gen->add_option("--clothes-per-id", synth.clothes_per_id);
  gen->add_option("--images-per-combination", synth.images_per_combination);
  gen->add_option("--image-size", synth.image_size);
  gen->add_option("--confound-strength", synth.confound_strength);
  gen->add_option("--train-fraction", synth.train_fraction);
  gen->add_option("--noise-sigma", synth.noise_sigma);
  gen->add_option("--seed", gen_seed);

  // train
  auto* tr = app.add_subcommand("train", "Train a model on the train split");
  fs::path tr_data, tr_config, tr_ckpt, tr_trace;
  std::map<std::string, std::string> overrides;
  tr->add_option("--data", tr_data, "Dataset root")->required();
  tr->add_option("--config", tr_config, "key = value config file");
  tr->add_option("--out-checkpoint", tr_ckpt, "Checkpoint path")->required();
  tr->add_option("--trace", tr_trace, "Per-epoch loss CSV");
  for (const auto& key : TrainConfig::keys()) {
    tr->add_option_function<std::string>(
        flag_name(key), [&overrides, key](const std::string& v) { overrides[key] = v; }, "Config override");
  }

  // eval
  auto* ev = app.add_subcommand("eval", "Rank gallery against query and report CMC/mAP");
  fs::path ev_ckpt, ev_data, ev_out, ev_cmc, ev_ranked;
  std::string ev_protocol = "cloth-changing";
  int ev_top_k = 10;
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--protocol", ev_protocol)->check(CLI::IsMember({"standard", "cloth-changing"}));
  ev->add_option("--out", ev_out, "Metrics JSON")->required();
  ev->add_option("--cmc", ev_cmc, "Full CMC curve CSV");
  ev->add_option("--ranked", ev_ranked, "Top-k ranked lists CSV");
  ev->add_option("--top-k", ev_top_k)->check(CLI::PositiveNumber);

  // encode
  auto* en = app.add_subcommand("encode", "Export retrieval embeddings keyed by image path");
  fs::path en_ckpt, en_images, en_masks, en_out;
  en->add_option("--checkpoint", en_ckpt)->required();
  en->add_option("--images", en_images, "Directory of .png images")->required();
  en->add_option("--masks", en_masks, "Mask directory (default: sibling masks/)");
  en->add_option("--out", en_out, "Embedding archive")->required();

  // dump-attention
  auto* da = app.add_subcommand("dump-attention", "Render an attention heat map for one image");
  fs::path da_ckpt, da_image, da_mask, da_out;
  std::string da_stage = "hsa";
  std::optional<std::uint64_t> da_seed;
  da->add_option("--checkpoint", da_ckpt)->required();
  da->add_option("--image", da_image)->required();
  da->add_option("--mask", da_mask, "Canonical mask (default: sibling masks/ directory)");
  da->add_option("--stage", da_stage)->check(CLI::IsMember({"hsa", "hsa_vcs"}));
  da->add_option("--out", da_out, "Heat map PNG")->required();
  da->add_option("--seed", da_seed, "Pool seed for the hsa_vcs stage");

  // similarity
  auto* sm = app.add_subcommand("similarity", "Cosine similarity matrix of a set of images");
  fs::path sm_ckpt, sm_images, sm_masks, sm_out, sm_heatmap;
  int sm_cell = 8;
  sm->add_option("--checkpoint", sm_ckpt)->required();
  sm->add_option("--images", sm_images)->required();
  sm->add_option("--masks", sm_masks);
  sm->add_option("--out", sm_out, "Matrix CSV")->required();
  sm->add_option("--heatmap", sm_heatmap, "Heat map PNG");
  sm->add_option("--cell-size", sm_cell)->check(CLI::PositiveNumber);

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  if (argv.empty()) argv.push_back("savs");
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    if (gen->parsed()) {
      if (gen_seed) synth.seed = *gen_seed;
      else if (auto s = env_seed()) synth.seed = *s;
      const auto manifest = generate_synthetic(synth, gen_out);
      spdlog::info("wrote {} train ids and {} held-out ids to {}", manifest.train_ids.size(), manifest.test_ids.size(),
                   gen_out.string());
    } else if (tr->parsed()) {
      TrainConfig cfg;
      if (auto s = env_seed()) cfg.seed = *s;
      if (!tr_config.empty()) {
        const auto seed = cfg.seed;
        cfg = TrainConfig::load(tr_config);
        std::ifstream in(tr_config);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (!sets_key(text, "seed")) cfg.seed = seed;
      }
      for (const auto& [k, v] : overrides) {
        try {
          cfg.set(k, v);
        } catch (const std::invalid_argument& e) {
          throw UsageError(e.what());
        }
      }
      try {
        cfg.validate();
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      const auto records = filter_split(scan_dataset(tr_data), Split::kTrain);
      TrainHooks hooks;
      hooks.on_epoch = [](const EpochLoss& e) {
        spdlog::info("epoch {:3d}  lr {:.2e}  id {:.4f}  cir {:.4f}  sem {:.4f}  total {:.4f}", e.epoch, e.lr,
                     e.id_loss, e.cir_loss, e.sem_loss, e.total);
      };
      const auto result = train(records, cfg, hooks);
      if (tr_ckpt.has_parent_path()) fs::create_directories(tr_ckpt.parent_path());
      save_checkpoint(tr_ckpt, result, cfg);
      if (!tr_trace.empty()) write_text(tr_trace, loss_trace_csv(result.trace));
      spdlog::info("{} steps; checkpoint written to {}", result.steps, tr_ckpt.string());
    } else if (ev->parsed()) {
      const auto ckpt = load_checkpoint(ev_ckpt);
      const auto mapping = mapping_of(ckpt.config);
      const auto records = scan_dataset(ev_data);
      const auto result = evaluate(ckpt.model, filter_split(records, Split::kQuery),
                                   filter_split(records, Split::kGallery), parse_protocol(ev_protocol),
                                   mapping ? &*mapping : nullptr);
      write_text(ev_out, metrics_json(result.report));
      if (!ev_cmc.empty()) write_text(ev_cmc, cmc_csv(result.report));
      if (!ev_ranked.empty()) write_text(ev_ranked, ranked_lists_csv(result, ev_top_k));
      spdlog::info("rank-1 {:.4f}  rank-5 {:.4f}  mAP {:.4f}  ({} queries, {} skipped)", result.report.rank1,
                   result.report.rank5, result.report.mAP, result.report.num_queries, result.report.num_skipped);
    } else if (en->parsed()) {
      const auto ckpt = load_checkpoint(en_ckpt);
      const auto mapping = mapping_of(ckpt.config);
      const auto records = image_records(en_images, en_masks.empty() ? sibling_masks(en_images) : en_masks);
      const auto emb = embed_records(ckpt.model, records, mapping ? &*mapping : nullptr);
      Archive a;
      for (std::size_t i = 0; i < records.size(); ++i) {
        a.add_floats(records[i].image.string(), {static_cast<int>(emb[i].size())}, l2_normalize(emb[i]));
      }
      if (en_out.has_parent_path()) fs::create_directories(en_out.parent_path());
      a.save(en_out);
      spdlog::info("encoded {} images into {}", records.size(), en_out.string());
    } else if (da->parsed()) {
      const auto ckpt = load_checkpoint(da_ckpt);
      const auto mapping = mapping_of(ckpt.config);
      SampleRecord r;
      r.image = da_image;
      r.mask = da_mask.empty() ? sibling_masks(da_image.parent_path()) / da_image.filename() : da_mask;
      const LoadedSample s = load_sample(r, ckpt.model.config().extractor.input_height, mapping ? &*mapping : nullptr);
      std::uint64_t seed = ckpt.config.seed;
      if (da_seed) seed = *da_seed;
      else if (auto e = env_seed()) seed = *e;
      const auto energy = attention_energy(ckpt.model, s.image, s.semantic, parse_attention_stage(da_stage),
                                           ckpt.config.shield_classes, seed);
      if (da_out.has_parent_path()) fs::create_directories(da_out.parent_path());
      write_rgb_png(da_out, attention_heatmap(energy, s.image.height, s.image.width));
    } else if (sm->parsed()) {
      const auto ckpt = load_checkpoint(sm_ckpt);
      const auto mapping = mapping_of(ckpt.config);
      const auto records = image_records(sm_images, sm_masks.empty() ? sibling_masks(sm_images) : sm_masks);
      if (records.size() < 2) throw UsageError("similarity needs at least two images");
      const auto s = similarity_matrix(embed_records(ckpt.model, records, mapping ? &*mapping : nullptr));
      std::string csv = "image";
      for (const auto& r : records) csv += "," + r.image.filename().string();
      csv += "\n";
      char buf[32];
      for (std::size_t i = 0; i < s.size(); ++i) {
        csv += records[i].image.filename().string();
        for (double v : s[i]) {
          std::snprintf(buf, sizeof buf, ",%.9f", v);
          csv += buf;
        }
        csv += "\n";
      }
      write_text(sm_out, csv);
      if (!sm_heatmap.empty()) {
        if (sm_heatmap.has_parent_path()) fs::create_directories(sm_heatmap.parent_path());
        write_rgb_png(sm_heatmap, similarity_heatmap(s, sm_cell));
      }
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace savs::cli
