#include "s2me/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace s2me::trainer {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  if (iterations <= 0) throw std::invalid_argument("config: iterations must be positive");
  if (batch_size <= 0) throw std::invalid_argument("config: batch_size must be positive");
  if (!(lr0 > 0)) throw std::invalid_argument("config: lr0 must be positive");
  if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("config: momentum must lie in [0, 1)");
  if (!(poly_power > 0)) throw std::invalid_argument("config: poly_power must be positive");
  if (weight_decay < 0) throw std::invalid_argument("config: weight_decay must be nonnegative");
  if (ramp_iters <= 0) throw std::invalid_argument("config: ramp_iters must be positive");
  if (!(lambda_max > 0)) throw std::invalid_argument("config: lambda_max must be positive");
  if (eval_every <= 0) throw std::invalid_argument("config: eval_every must be positive");
  if (!terms.scrib) throw std::invalid_argument("config: scribble supervision is the anchor term and cannot be disabled");
  if (crop_max < 0) throw std::invalid_argument("config: crop_max must be nonnegative");
  if (!(flip_p >= 0 && flip_p <= 1)) throw std::invalid_argument("config: flip_p must lie in [0, 1]");
  if (depth < 2) throw std::invalid_argument("config: depth must be >= 2");
  if (base_width < 2) throw std::invalid_argument("config: base_width must be >= 2");
}

namespace {

std::string terms_to_string(const losses::LossTerms& t) {
  std::string s = "scrib";
  if (t.mt) s += ",mt";
  if (t.el) s += ",el";
  return s;
}

losses::LossTerms terms_from_string(const std::string& s) {
  losses::LossTerms t{false, false, false};
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "scrib") {
      t.scrib = true;
    } else if (item == "mt") {
      t.mt = true;
    } else if (item == "el") {
      t.el = true;
    } else if (!item.empty()) {
      throw std::invalid_argument("config: unknown loss term '" + item + "' (want scrib|mt|el)");
    }
  }
  return t;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

std::string TrainConfig::serialize() const {
  std::ostringstream os;
  os << "iterations=" << iterations << "\n";
  os << "batch_size=" << batch_size << "\n";
  os << "lr0=" << lr0 << "\n";
  os << "momentum=" << momentum << "\n";
  os << "weight_decay=" << weight_decay << "\n";
  os << "poly_power=" << poly_power << "\n";
  os << "ramp_iters=" << ramp_iters << "\n";
  os << "lambda_max=" << lambda_max << "\n";
  os << "seed=" << seed << "\n";
  os << "model_spa=" << models::model_name(model_spa) << "\n";
  os << "model_spe=" << models::model_name(model_spe) << "\n";
  os << "fusion=" << losses::fusion_name(fusion) << "\n";
  os << "loss_terms=" << terms_to_string(terms) << "\n";
  os << "eval_every=" << eval_every << "\n";
  os << "base_width=" << base_width << "\n";
  os << "depth=" << depth << "\n";
  os << "norm=" << models::norm_name(norm) << "\n";
  os << "local_ratio=" << local_ratio << "\n";
  os << "crop_max=" << crop_max << "\n";
  os << "flip_p=" << flip_p << "\n";
  os << "select=" << (select_last ? "last" : "best") << "\n";
  return os.str();
}

void TrainConfig::apply_override(const std::string& key, const std::string& value) {
  if (key == "iterations") {
    iterations = std::stoll(value);
  } else if (key == "batch_size") {
    batch_size = std::stoi(value);
  } else if (key == "lr0") {
    lr0 = std::stod(value);
  } else if (key == "momentum") {
    momentum = std::stod(value);
  } else if (key == "weight_decay") {
    weight_decay = std::stod(value);
  } else if (key == "poly_power") {
    poly_power = std::stod(value);
  } else if (key == "ramp_iters") {
    ramp_iters = std::stoll(value);
  } else if (key == "lambda_max") {
    lambda_max = std::stod(value);
  } else if (key == "seed") {
    seed = std::stoull(value);
  } else if (key == "model_spa") {
    model_spa = models::model_from_name(value);
  } else if (key == "model_spe") {
    model_spe = models::model_from_name(value);
  } else if (key == "fusion") {
    fusion = losses::fusion_from_name(value);
  } else if (key == "loss_terms") {
    terms = terms_from_string(value);
  } else if (key == "eval_every") {
    eval_every = std::stoll(value);
  } else if (key == "base_width") {
    base_width = std::stoi(value);
  } else if (key == "depth") {
    depth = std::stoi(value);
  } else if (key == "norm") {
    norm = models::norm_from_name(value);
  } else if (key == "local_ratio") {
    local_ratio = std::stod(value);
  } else if (key == "crop_max") {
    crop_max = std::stoi(value);
  } else if (key == "flip_p") {
    flip_p = std::stod(value);
  } else if (key == "select") {
    if (value == "best") {
      select_last = false;
    } else if (value == "last") {
      select_last = true;
    } else {
      throw std::invalid_argument("config: select must be best|last, got '" + value + "'");
    }
  } else {
    throw std::invalid_argument("config: unknown key '" + key + "'");
  }
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig cfg;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    }
    cfg.apply_override(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

TrainConfig TrainConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

std::uint64_t TrainConfig::hash() const {
  const std::string text = serialize();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

double poly_lr(long long iter, long long max_iter, double lr0, double power) {
  if (max_iter <= 0) throw std::invalid_argument("poly_lr: max_iter must be positive");
  if (iter < 0 || iter > max_iter) throw std::invalid_argument("poly_lr: iter outside [0, max_iter]");
  return lr0 * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

bool sgd_step(std::span<ad::Parameter> params, SgdState& state, double lr, double momentum, double weight_decay) {
  if (state.velocity.empty()) {
    state.velocity.reserve(params.size());
    for (auto& p : params) state.velocity.emplace_back(p.value().shape());
  }
  if (state.velocity.size() != params.size()) throw std::invalid_argument("sgd_step: state/parameter mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].grad().all_finite()) {
      std::cerr << "[sgd] non-finite gradient in " << params[i].name << "; step rejected\n";
      return false;
    }
  }
  const float lrf = static_cast<float>(lr);
  const float mf = static_cast<float>(momentum);
  const float wdf = static_cast<float>(weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& theta = params[i].value();
    Tensor& g = params[i].grad();
    Tensor& v = state.velocity[i];
    for (std::size_t k = 0; k < theta.size(); ++k) {
      v[k] = mf * v[k] + (g[k] + wdf * theta[k]);
      theta[k] -= lrf * v[k];
    }
  }
  return true;
}

eval::SplitMetrics evaluate_split(models::BranchModel& model, const std::vector<data::Sample>& samples,
                                  int batch_size, double hd_percentile) {
  std::vector<eval::SampleMetrics> per_sample;
  per_sample.reserve(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<int> idx;
    for (std::size_t i = start; i < std::min(samples.size(), start + static_cast<std::size_t>(batch_size)); ++i) {
      idx.push_back(static_cast<int>(i));
    }
    data::Batch b = data::make_batch(samples, idx);
    ad::Var logits = model.forward(b.images, /*training=*/false);
    Tensor probs = ops::softmax_channels(logits).value();
    fusion::PseudoLabel pred = fusion::pseudo_label(probs);
    const int h = pred.shape[1], w = pred.shape[2];
    for (std::size_t i = 0; i < idx.size(); ++i) {
      LabelMap p1(Shape{1, h, w}), g1(Shape{1, h, w});
      std::memcpy(p1.v.data(), pred.v.data() + i * p1.v.size(), p1.v.size());
      g1.v = samples[start + i].mask.v;
      const auto cm = eval::confusion_metrics(p1, g1);
      per_sample.push_back({cm.dsc, cm.iou, cm.precision, eval::hausdorff(p1, g1, hd_percentile)});
    }
  }
  return eval::aggregate(per_sample);
}

TrainState make_train_state(const TrainConfig& cfg) {
  cfg.validate();
  models::ModelConfig spa;
  spa.kind = cfg.model_spa;
  spa.base_width = cfg.base_width;
  spa.depth = cfg.depth;
  spa.norm = cfg.norm;
  spa.local_ratio = cfg.local_ratio;
  spa.seed = mix_seed(cfg.seed, 0xa);
  models::ModelConfig spe = spa;
  spe.kind = cfg.model_spe;
  spe.seed = mix_seed(cfg.seed, 0xb);
  TrainState st{models::build_model(spa), models::build_model(spe), {}, {}, 0, -1.0, -1};
  // materialize velocity buffers so checkpoints always carry them
  for (auto& p : st.spa.params()) st.opt_spa.velocity.emplace_back(p.value().shape());
  for (auto& p : st.spe.params()) st.opt_spe.velocity.emplace_back(p.value().shape());
  return st;
}

namespace {

constexpr const char* kMetaIter = "meta/iteration";
constexpr const char* kMetaBestDsc = "meta/best_val_dsc";
constexpr const char* kMetaBestIter = "meta/best_iter";

}  // namespace

void checkpoint_save(const std::string& path, TrainState& st, const TrainConfig& cfg) {
  if (path.empty()) throw std::invalid_argument("checkpoint_save: empty path");
  std::vector<std::pair<std::string, Tensor>> entries;
  entries.emplace_back(kMetaIter, Tensor({1}, {static_cast<float>(st.iteration)}));
  entries.emplace_back(kMetaBestDsc, Tensor({1}, {static_cast<float>(st.best_val_dsc)}));
  entries.emplace_back(kMetaBestIter, Tensor({1}, {static_cast<float>(st.best_iter)}));
  for (auto& [name, t] : st.spa.state_entries()) entries.emplace_back("spa/" + name, *t);
  for (auto& [name, t] : st.spe.state_entries()) entries.emplace_back("spe/" + name, *t);
  auto spa_params = st.spa.params();
  for (std::size_t i = 0; i < spa_params.size(); ++i) {
    entries.emplace_back("opt/spa/" + spa_params[i].name, st.opt_spa.velocity[i]);
  }
  auto spe_params = st.spe.params();
  for (std::size_t i = 0; i < spe_params.size(); ++i) {
    entries.emplace_back("opt/spe/" + spe_params[i].name, st.opt_spe.velocity[i]);
  }
  data::tensor_file_write(path, entries);

  json sidecar;
  sidecar["config"] = cfg.serialize();
  sidecar["config_hash"] = cfg.hash();
  sidecar["iteration"] = st.iteration;
  sidecar["best_val_dsc"] = st.best_val_dsc;
  sidecar["best_iter"] = st.best_iter;
  std::ofstream f(path + ".json");
  if (!f) throw std::runtime_error("checkpoint_save: cannot write sidecar for " + path);
  f << sidecar.dump(2) << "\n";
}

void checkpoint_load(const std::string& path, TrainState& st, const TrainConfig& cfg, bool force) {
  std::ifstream sf(path + ".json");
  if (!sf) throw std::runtime_error("checkpoint_load: missing sidecar " + path + ".json");
  json sidecar = json::parse(sf);
  const std::uint64_t saved_hash = sidecar.at("config_hash").get<std::uint64_t>();
  if (saved_hash != cfg.hash() && !force) {
    throw std::runtime_error("checkpoint_load: config hash mismatch (checkpoint " + std::to_string(saved_hash) +
                             " vs current " + std::to_string(cfg.hash()) + "); pass force to override");
  }

  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : data::tensor_file_read(path)) by_name.emplace(name, std::move(t));
  auto fetch = [&by_name, &path](const std::string& name) -> Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint_load: " + path + " lacks entry " + name);
    return it->second;
  };
  auto restore = [&fetch](const std::string& prefix, std::vector<std::pair<std::string, Tensor*>> slots) {
    for (auto& [name, dst] : slots) {
      Tensor& src = fetch(prefix + name);
      if (!(src.shape() == dst->shape())) {
        throw std::runtime_error("checkpoint_load: shape mismatch for " + prefix + name + ": " +
                                 shape_str(src.shape()) + " vs " + shape_str(dst->shape()));
      }
      *dst = src;
    }
  };
  restore("spa/", st.spa.state_entries());
  restore("spe/", st.spe.state_entries());
  auto spa_params = st.spa.params();
  for (std::size_t i = 0; i < spa_params.size(); ++i) st.opt_spa.velocity[i] = fetch("opt/spa/" + spa_params[i].name);
  auto spe_params = st.spe.params();
  for (std::size_t i = 0; i < spe_params.size(); ++i) st.opt_spe.velocity[i] = fetch("opt/spe/" + spe_params[i].name);
  st.iteration = static_cast<long long>(fetch(kMetaIter)[0]);
  st.best_val_dsc = fetch(kMetaBestDsc)[0];
  st.best_iter = static_cast<long long>(fetch(kMetaBestIter)[0]);
}

TrainResult train(const TrainConfig& cfg, const std::string& data_dir, const std::string& out_dir,
                  const std::string& resume_from) {
  cfg.validate();
  const data::Manifest manifest = data::read_manifest(data_dir);
  std::vector<data::Sample> train_set = data::load_split(data_dir, manifest, "train");
  std::vector<data::Sample> val_set = data::load_split(data_dir, manifest, "val");
  if (train_set.empty() || val_set.empty()) throw std::invalid_argument("train: dataset splits must be nonempty");
  const int div = 1 << cfg.depth;
  if (manifest.size % div != 0) {
    throw std::invalid_argument("train: image size " + std::to_string(manifest.size) + " not divisible by 2^depth=" +
                                std::to_string(div));
  }

  fs::create_directories(out_dir);
  TrainResult res;
  res.best_ckpt = (fs::path(out_dir) / "best.ckpt").string();
  res.last_ckpt = (fs::path(out_dir) / "last.ckpt").string();
  res.log_path = (fs::path(out_dir) / "train_log.jsonl").string();

  TrainState st = make_train_state(cfg);
  if (!resume_from.empty()) checkpoint_load(resume_from, st, cfg);

  {
    std::ofstream cf(fs::path(out_dir) / "config.txt");
    cf << cfg.serialize();
  }
  std::ofstream log(res.log_path, resume_from.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("train: cannot open log " + res.log_path);

  for (long long iter = st.iteration; iter < cfg.iterations; ++iter) {
    // batch assembly: one derived stream per iteration keeps resume and
    // replay bit-compatible
    Rng it_rng = Rng::derive(cfg.seed, 0x10000 + static_cast<std::uint64_t>(iter));
    std::vector<int> idx(static_cast<std::size_t>(cfg.batch_size));
    for (auto& i : idx) i = it_rng.uniform_int(0, static_cast<int>(train_set.size()) - 1);
    std::vector<data::Sample> batch_samples;
    batch_samples.reserve(idx.size());
    for (int i : idx) {
      batch_samples.push_back(data::augment(train_set[static_cast<std::size_t>(i)], it_rng, cfg.crop_max,
                                            manifest.size, cfg.flip_p));
    }
    std::vector<int> all(idx.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    data::Batch batch = data::make_batch(batch_samples, all);

    const double lambda = losses::lambda_rampup(iter, cfg.ramp_iters, cfg.lambda_max);
    const double lr = poly_lr(iter, cfg.iterations, cfg.lr0, cfg.poly_power);

    ad::zero_grad(st.spa.params());
    ad::zero_grad(st.spe.params());
    ad::Var l_spa = st.spa.forward(batch.images, /*training=*/true);
    ad::Var l_spe = st.spe.forward(batch.images, /*training=*/true);
    std::vector<double> alphas(static_cast<std::size_t>(cfg.batch_size));
    for (auto& a : alphas) a = it_rng.uniform();
    losses::HybridLoss loss = losses::hybrid_loss(l_spa, l_spe, batch.scribbles, {lambda, lambda}, cfg.terms,
                                                  cfg.fusion, alphas);

    const double total = loss.total.scalar();
    if (!std::isfinite(total)) {
      std::cerr << "[train] non-finite loss at iteration " << iter << "; aborting with last-good checkpoint\n";
      res.aborted_nonfinite = true;
      break;
    }
    ad::backward(loss.total);
    const bool ok_spa = sgd_step(st.spa.params(), st.opt_spa, lr, cfg.momentum, cfg.weight_decay);
    const bool ok_spe = sgd_step(st.spe.params(), st.opt_spe, lr, cfg.momentum, cfg.weight_decay);
    if (!ok_spa || !ok_spe) {
      std::cerr << "[train] rejected step at iteration " << iter << "\n";
    }
    st.iteration = iter + 1;

    res.loss_total_history.push_back(total);
    res.loss_scrib_history.push_back(loss.scrib);

    json line;
    line["iter"] = iter;
    line["lr"] = lr;
    line["lambda"] = lambda;
    line["loss_total"] = total;
    line["loss_scrib"] = loss.scrib;
    line["loss_mt"] = loss.mt;
    line["loss_el"] = loss.el;

    if ((iter + 1) % cfg.eval_every == 0 || iter + 1 == cfg.iterations) {
      const eval::SplitMetrics vm = evaluate_split(st.spa, val_set, cfg.batch_size);
      line["val_dsc"] = vm.mean.dsc;
      res.final_val_dsc = vm.mean.dsc;
      if (vm.mean.dsc > st.best_val_dsc) {
        st.best_val_dsc = vm.mean.dsc;
        st.best_iter = iter + 1;
        checkpoint_save(res.best_ckpt, st, cfg);
      }
      checkpoint_save(res.last_ckpt, st, cfg);
    }
    log << line.dump() << "\n";
  }

  checkpoint_save(res.last_ckpt, st, cfg);
  if (cfg.select_last || !fs::exists(res.best_ckpt)) {
    fs::copy_file(res.last_ckpt, res.best_ckpt, fs::copy_options::overwrite_existing);
    fs::copy_file(res.last_ckpt + ".json", res.best_ckpt + ".json", fs::copy_options::overwrite_existing);
  }
  res.best_val_dsc = st.best_val_dsc;
  res.best_iter = st.best_iter;
  log.flush();
  return res;
}

}  // namespace s2me::trainer
