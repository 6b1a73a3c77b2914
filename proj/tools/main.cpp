#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <json.hpp>

#include "s2me/autograd.hpp"
#include "s2me/data.hpp"
#include "s2me/selftest.hpp"
#include "s2me/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace s2me;

namespace {

void apply_thread_cap() {
#ifdef _OPENMP
  if (const char* env = std::getenv("S2ME_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) omp_set_num_threads(n);
  }
#endif
}

void ensure_out_dir(const std::string& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir)) {
    throw std::invalid_argument("output path " + dir + " exists and is not a directory");
  }
  if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
    throw std::invalid_argument("output directory " + dir + " is not empty (use --force to reuse it)");
  }
  fs::create_directories(dir);
}

std::vector<std::uint64_t> parse_seeds(const std::string& csv) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoull(item));
  }
  if (out.empty()) throw std::invalid_argument("no seeds given");
  return out;
}

struct KeyValue {
  std::string key, value;
};

std::vector<KeyValue> parse_overrides(const std::vector<std::string>& sets) {
  std::vector<KeyValue> out;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + s + "'");
    out.push_back({s.substr(0, eq), s.substr(eq + 1)});
  }
  return out;
}

// Presets pin the named configurations; clashing explicit overrides are
// rejected rather than silently dropped.
std::map<std::string, std::string> method_pins(const std::string& method) {
  if (method == "s2me") {
    return {{"model_spa", "unet"}, {"model_spe", "ynet"}, {"fusion", "entropy"}, {"loss_terms", "scrib,mt,el"}};
  }
  if (method == "scrib-pce") {
    return {{"loss_terms", "scrib"}};
  }
  if (method == "me-unet-unet") {
    return {{"model_spa", "unet"}, {"model_spe", "unet"}, {"fusion", "entropy"}, {"loss_terms", "scrib,mt,el"}};
  }
  if (method == "me-ynet-ynet") {
    return {{"model_spa", "ynet"}, {"model_spe", "ynet"}, {"fusion", "entropy"}, {"loss_terms", "scrib,mt,el"}};
  }
  throw std::invalid_argument("unknown --method '" + method + "' (want s2me|scrib-pce|me-unet-unet|me-ynet-ynet)");
}

trainer::TrainConfig resolve_config(const std::string& config_path, const std::string& method,
                                    const std::string& fusion, const std::vector<KeyValue>& overrides) {
  trainer::TrainConfig cfg = config_path.empty() ? trainer::TrainConfig{} : trainer::TrainConfig::from_file(config_path);
  std::map<std::string, std::string> pins;
  if (!method.empty()) {
    pins = method_pins(method);
    for (const auto& [k, v] : pins) cfg.apply_override(k, v);
  }
  if (!fusion.empty()) {
    if (auto it = pins.find("fusion"); it != pins.end() && it->second != fusion) {
      throw std::invalid_argument("--fusion " + fusion + " clashes with --method " + method + " (pins fusion=" +
                                  it->second + ")");
    }
    cfg.apply_override("fusion", fusion);
  }
  for (const auto& [k, v] : overrides) {
    if (auto it = pins.find(k); it != pins.end() && it->second != v) {
      throw std::invalid_argument("--set " + k + "=" + v + " clashes with --method " + method + " (pins " + k + "=" +
                                  it->second + ")");
    }
    cfg.apply_override(k, v);
  }
  return cfg;
}

void train_seeds(trainer::TrainConfig cfg, const std::vector<std::uint64_t>& seeds, const std::string& data_dir,
                 const std::string& out_dir) {
  for (std::uint64_t seed : seeds) {
    cfg.seed = seed;
    const std::string run_dir = (fs::path(out_dir) / ("seed" + std::to_string(seed))).string();
    fs::create_directories(run_dir);
    std::cout << "[train] seed " << seed << " -> " << run_dir << "\n";
    trainer::TrainResult r = trainer::train(cfg, data_dir, run_dir);
    std::cout << "[train] seed " << seed << " best val DSC " << r.best_val_dsc << " at iteration " << r.best_iter
              << "\n";
  }
}

eval::SampleMetrics eval_checkpoint(const std::string& ckpt, const std::string& data_dir, const std::string& split,
                                    double percentile) {
  std::ifstream sf(ckpt + ".json");
  if (!sf) throw std::runtime_error("missing checkpoint sidecar " + ckpt + ".json");
  json sidecar = json::parse(sf);
  trainer::TrainConfig cfg = trainer::TrainConfig::parse(sidecar.at("config").get<std::string>());
  trainer::TrainState st = trainer::make_train_state(cfg);
  trainer::checkpoint_load(ckpt, st, cfg);
  const data::Manifest manifest = data::read_manifest(data_dir);
  std::vector<data::Sample> samples = data::load_split(data_dir, manifest, split);
  const eval::SplitMetrics m = trainer::evaluate_split(st.spa, samples, cfg.batch_size, percentile);
  return m.mean;
}

std::string fmt_pm(double mean, double std) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f±%.4f", mean, std);
  return buf;
}

struct CellResult {
  std::string label;
  bool failed = false;
  std::string error;
  std::vector<std::pair<std::uint64_t, eval::SampleMetrics>> per_seed;
  eval::SeedAggregate agg;
};

void write_report(const std::string& out_dir, const std::string& dataset, const std::vector<CellResult>& cells,
                  const std::string& title) {
  std::ofstream csv(fs::path(out_dir) / "report.csv");
  csv << "method,dataset,seed,dsc,iou,precision,hd\n";
  for (const auto& c : cells) {
    for (const auto& [seed, m] : c.per_seed) {
      csv << c.label << "," << dataset << "," << seed << "," << m.dsc << "," << m.iou << "," << m.precision << ","
          << m.hd << "\n";
    }
  }
  json j;
  j["dataset"] = dataset;
  for (const auto& c : cells) {
    json cell;
    cell["failed"] = c.failed;
    if (c.failed) cell["error"] = c.error;
    for (const auto& [seed, m] : c.per_seed) {
      cell["seeds"][std::to_string(seed)] = {{"dsc", m.dsc}, {"iou", m.iou}, {"precision", m.precision}, {"hd", m.hd}};
    }
    if (!c.per_seed.empty()) {
      cell["mean"] = {{"dsc", c.agg.mean.dsc},
                      {"iou", c.agg.mean.iou},
                      {"precision", c.agg.mean.precision},
                      {"hd", c.agg.mean.hd}};
      cell["std"] = {{"dsc", c.agg.stddev.dsc},
                     {"iou", c.agg.stddev.iou},
                     {"precision", c.agg.stddev.precision},
                     {"hd", c.agg.stddev.hd}};
    }
    j["cells"][c.label] = cell;
  }
  std::ofstream jf(fs::path(out_dir) / "report.json");
  jf << j.dump(2) << "\n";

  std::ofstream md(fs::path(out_dir) / "report.md");
  md << "# " << title << "\n\n";
  md << "| Method | DSC ↑ | IoU ↑ | Prec ↑ | HD ↓ |\n";
  md << "|---|---|---|---|---|\n";
  for (const auto& c : cells) {
    if (c.failed) {
      md << "| " << c.label << " | failed: " << c.error << " | | | |\n";
      continue;
    }
    md << "| " << c.label << " | " << fmt_pm(c.agg.mean.dsc, c.agg.stddev.dsc) << " | "
       << fmt_pm(c.agg.mean.iou, c.agg.stddev.iou) << " | " << fmt_pm(c.agg.mean.precision, c.agg.stddev.precision)
       << " | " << fmt_pm(c.agg.mean.hd, c.agg.stddev.hd) << " |\n";
  }
  md << "\nPer-seed rows live in report.csv; machine-readable aggregates in report.json.\n";
}

}  // namespace

int main(int argc, char** argv) {
  apply_thread_cap();
  CLI::App app{"s2me: spatial-spectral mutual teaching for scribble-supervised segmentation"};
  app.require_subcommand(1);

  // ---- gen-data ----
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic scribble-annotated dataset");
  std::string gen_out;
  data::GenConfig gen_cfg;
  bool gen_force = false;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--size", gen_cfg.size, "image side length (>= 32)");
  gen->add_option("--train", gen_cfg.n_train, "training samples");
  gen->add_option("--val", gen_cfg.n_val, "validation samples");
  gen->add_option("--test", gen_cfg.n_test, "test samples");
  gen->add_option("--seed", gen_cfg.seed, "generation seed");
  gen->add_flag("--force", gen_force, "reuse a non-empty output directory");

  // ---- train ----
  auto* tr = app.add_subcommand("train", "train the dual-branch model");
  std::string tr_data, tr_out, tr_config, tr_method, tr_fusion, tr_seeds = "1", tr_resume;
  std::vector<std::string> tr_sets;
  bool tr_force = false;
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_option("--config", tr_config, "config file (key=value lines)");
  tr->add_option("--method", tr_method, "preset: s2me|scrib-pce|me-unet-unet|me-ynet-ynet");
  tr->add_option("--fusion", tr_fusion, "pseudo-label fusion: entropy|equal|random");
  tr->add_option("--seed", tr_seeds, "comma-separated seeds, one run each");
  tr->add_option("--set", tr_sets, "config overrides key=value (repeatable)");
  tr->add_option("--resume", tr_resume, "checkpoint to resume from (single-seed runs)");
  tr->add_flag("--force", tr_force, "reuse a non-empty output directory");

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "evaluate checkpoints on a dataset split");
  std::string ev_data, ev_run, ev_split = "test", ev_out, ev_seeds = "1", ev_method = "s2me";
  double ev_percentile = 95.0;
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--run-dir", ev_run, "training output directory holding seed<N>/ runs")->required();
  ev->add_option("--split", ev_split, "train|val|test");
  ev->add_option("--seeds", ev_seeds, "comma-separated seeds to score");
  ev->add_option("--out", ev_out, "report directory (defaults to --run-dir)");
  ev->add_option("--method", ev_method, "method label for the report");
  ev->add_option("--hd-percentile", ev_percentile, "Hausdorff percentile (default 95)");

  // ---- fuse ----
  auto* fu = app.add_subcommand("fuse", "fuse two probability maps");
  std::string fu_a, fu_b, fu_out, fu_strategy = "entropy";
  std::uint64_t fu_seed = 1;
  fu->add_option("--a", fu_a, "tensor file with the first probability map (entry 'prob')")->required();
  fu->add_option("--b", fu_b, "tensor file with the second probability map")->required();
  fu->add_option("--out", fu_out, "output tensor file")->required();
  fu->add_option("--strategy", fu_strategy, "entropy|equal|random");
  fu->add_option("--seed", fu_seed, "seed for the random strategy");

  // ---- ablate ----
  auto* ab = app.add_subcommand("ablate", "run an ablation grid and write a consolidated report");
  std::string ab_data, ab_out, ab_axis = "loss", ab_seeds = "1,2,3", ab_config;
  std::vector<std::string> ab_sets;
  bool ab_force = false;
  ab->add_option("--data", ab_data, "dataset directory")->required();
  ab->add_option("--out", ab_out, "output directory")->required();
  ab->add_option("--axis", ab_axis, "grid axis: loss|fusion|network");
  ab->add_option("--seeds", ab_seeds, "comma-separated seeds per cell");
  ab->add_option("--config", ab_config, "base config file");
  ab->add_option("--set", ab_sets, "config overrides key=value (repeatable)");
  ab->add_flag("--force", ab_force, "reuse a non-empty output directory");

  // ---- selftest ----
  auto* st = app.add_subcommand("selftest", "run the built-in verification checks");
  std::string st_filter, st_inject;
  st->add_option("--filter", st_filter, "run only checks whose name contains this substring");
  st->add_option("--inject-bug", st_inject, "test fixture: corrupt the named op's gradient")->group("");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      ensure_out_dir(gen_out, gen_force);
      const data::Manifest m = data::generate_synthetic_dataset(gen_out, gen_cfg);
      std::cout << "wrote " << m.train.size() + m.val.size() + m.test.size() << " samples to " << gen_out << "\n"
                << "  size " << m.size << ", seed " << m.seed << "\n"
                << "  mean foreground fraction " << m.fg_fraction_mean << "\n"
                << "  mean scribble coverage " << m.labeled_fraction_mean << "\n"
                << "  samples without foreground scribble: " << m.flagged.size() << "\n";
    } else if (*tr) {
      ensure_out_dir(tr_out, tr_force);
      trainer::TrainConfig cfg = resolve_config(tr_config, tr_method, tr_fusion, parse_overrides(tr_sets));
      const auto seeds = parse_seeds(tr_seeds);
      if (!tr_resume.empty()) {
        if (seeds.size() != 1) throw std::invalid_argument("--resume requires a single seed");
        cfg.seed = seeds[0];
        const std::string run_dir = (fs::path(tr_out) / ("seed" + std::to_string(seeds[0]))).string();
        fs::create_directories(run_dir);
        trainer::TrainResult r = trainer::train(cfg, tr_data, run_dir, tr_resume);
        std::cout << "[train] resumed; best val DSC " << r.best_val_dsc << "\n";
      } else {
        train_seeds(cfg, seeds, tr_data, tr_out);
      }
    } else if (*ev) {
      if (ev_out.empty()) ev_out = ev_run;
      fs::create_directories(ev_out);
      CellResult cell;
      cell.label = ev_method;
      std::vector<eval::SampleMetrics> seed_means;
      for (std::uint64_t seed : parse_seeds(ev_seeds)) {
        const std::string ckpt = (fs::path(ev_run) / ("seed" + std::to_string(seed)) / "best.ckpt").string();
        if (!fs::exists(ckpt)) throw std::runtime_error("missing checkpoint " + ckpt);
        const eval::SampleMetrics m = eval_checkpoint(ckpt, ev_data, ev_split, ev_percentile);
        std::cout << "seed " << seed << ": dsc " << m.dsc << " iou " << m.iou << " prec " << m.precision << " hd "
                  << m.hd << "\n";
        cell.per_seed.emplace_back(seed, m);
        seed_means.push_back(m);
      }
      cell.agg = eval::across_seeds(seed_means);
      write_report(ev_out, ev_split, {cell}, "Evaluation on " + ev_split);
      std::cout << "mean dsc " << cell.agg.mean.dsc << " ± " << cell.agg.stddev.dsc << "\n";
    } else if (*fu) {
      auto load_prob = [](const std::string& path) {
        for (auto& [name, t] : data::tensor_file_read(path)) {
          if (name == "prob") return t;
        }
        throw std::runtime_error("no 'prob' entry in " + path);
      };
      Tensor a = load_prob(fu_a);
      Tensor b = load_prob(fu_b);
      Tensor ha = fusion::entropy_map(a);
      Tensor hb = fusion::entropy_map(b);
      Tensor fused;
      const losses::FusionKind kind = losses::fusion_from_name(fu_strategy);
      if (kind == losses::FusionKind::Entropy) {
        fused = fusion::fuse_entropy(a, b, ha, hb);
      } else if (kind == losses::FusionKind::Equal) {
        fused = fusion::fuse_equal(a, b);
      } else {
        Rng rng(fu_seed);
        fused = fusion::fuse_random(a, b, rng);
      }
      fusion::PseudoLabel label = fusion::pseudo_label(fused);
      Tensor label_t(label.shape);
      for (std::size_t i = 0; i < label.v.size(); ++i) label_t[i] = static_cast<float>(label.v[i]);
      data::tensor_file_write(fu_out,
                              {{"fused", fused}, {"pseudo_label", label_t}, {"entropy_a", ha}, {"entropy_b", hb}});
      std::cout << "wrote fused map (" << fu_strategy << "), pseudo label and entropy maps to " << fu_out << "\n";
    } else if (*ab) {
      ensure_out_dir(ab_out, ab_force);
      trainer::TrainConfig base = resolve_config(ab_config, "", "", parse_overrides(ab_sets));
      const auto seeds = parse_seeds(ab_seeds);
      struct Cell {
        std::string label;
        std::map<std::string, std::string> overrides;
      };
      std::vector<Cell> grid;
      if (ab_axis == "loss") {
        grid = {{"Scrib-pCE", {{"loss_terms", "scrib"}}},
                {"Scrib+MT", {{"loss_terms", "scrib,mt"}}},
                {"Scrib+EL", {{"loss_terms", "scrib,el"}}},
                {"S2ME-full", {{"loss_terms", "scrib,mt,el"}}}};
      } else if (ab_axis == "fusion") {
        grid = {{"Random-Image", {{"fusion", "random"}}},
                {"Equal-Image", {{"fusion", "equal"}}},
                {"Entropy-Pixel", {{"fusion", "entropy"}}}};
      } else if (ab_axis == "network") {
        grid = {{"ME-UNet-UNet", {{"model_spa", "unet"}, {"model_spe", "unet"}}},
                {"ME-YNet-YNet", {{"model_spa", "ynet"}, {"model_spe", "ynet"}}},
                {"S2ME-UNet-YNet", {{"model_spa", "unet"}, {"model_spe", "ynet"}}}};
      } else {
        throw std::invalid_argument("unknown --axis '" + ab_axis + "' (want loss|fusion|network)");
      }
      std::vector<CellResult> cells;
      for (const auto& cell : grid) {
        CellResult res;
        res.label = cell.label;
        try {
          trainer::TrainConfig cfg = base;
          for (const auto& [k, v] : cell.overrides) cfg.apply_override(k, v);
          const std::string cell_dir = (fs::path(ab_out) / cell.label).string();
          fs::create_directories(cell_dir);
          std::vector<eval::SampleMetrics> seed_means;
          for (std::uint64_t seed : seeds) {
            cfg.seed = seed;
            const std::string run_dir = (fs::path(cell_dir) / ("seed" + std::to_string(seed))).string();
            fs::create_directories(run_dir);
            std::cout << "[ablate] " << cell.label << " seed " << seed << "\n";
            trainer::train(cfg, ab_data, run_dir);
            const eval::SampleMetrics m =
                eval_checkpoint((fs::path(run_dir) / "best.ckpt").string(), ab_data, "test", 95.0);
            std::cout << "[ablate] " << cell.label << " seed " << seed << " test dsc " << m.dsc << "\n";
            res.per_seed.emplace_back(seed, m);
            seed_means.push_back(m);
          }
          res.agg = eval::across_seeds(seed_means);
        } catch (const std::exception& e) {
          res.failed = true;
          res.error = e.what();
          std::cerr << "[ablate] cell " << cell.label << " failed: " << e.what() << "\n";
        }
        cells.push_back(std::move(res));
      }
      write_report(ab_out, "synthetic-test", cells, "Ablation (" + ab_axis + " axis)");
      for (const auto& c : cells) {
        if (c.failed) return 2;
      }
    } else if (*st) {
      if (!st_inject.empty()) ad::g_inject_grad_bug = st_inject.c_str();
      const auto results = selftest::run_checks(st_filter);
      ad::g_inject_grad_bug = nullptr;
      if (results.empty()) {
        std::cerr << "no checks match filter '" << st_filter << "'\n";
        return 1;
      }
      for (const auto& r : results) {
        std::cout << (r.passed ? "[PASS] " : "[FAIL] ") << r.name << ": " << r.detail << "\n";
      }
      if (!selftest::all_passed(results)) return 2;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
