#pragma once

#include <span>
#include <string>
#include <vector>

#include "s2me/data.hpp"
#include "s2me/eval.hpp"
#include "s2me/losses.hpp"
#include "s2me/models.hpp"

namespace s2me::trainer {

// Every knob of the training recipe. serialize() is the canonical key=value
// form used for config files, hashing, and checkpoint sidecars.
struct TrainConfig {
  long long iterations = 3000;
  int batch_size = 8;
  double lr0 = 0.03;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double poly_power = 0.9;
  long long ramp_iters = 2500;
  double lambda_max = 5.0;
  std::uint64_t seed = 1;
  models::ModelKind model_spa = models::ModelKind::Unet;
  models::ModelKind model_spe = models::ModelKind::Ynet;
  losses::FusionKind fusion = losses::FusionKind::Entropy;
  losses::LossTerms terms;
  long long eval_every = 100;
  int base_width = 16;
  int depth = 3;
  models::NormKind norm = models::NormKind::Batch;
  double local_ratio = 0.5;
  int crop_max = 7;
  double flip_p = 0.5;
  bool select_last = false;  // default: best validation DSC of the spatial branch

  void validate() const;
  std::string serialize() const;
  std::uint64_t hash() const;
  void apply_override(const std::string& key, const std::string& value);
  static TrainConfig parse(const std::string& text);
  static TrainConfig from_file(const std::string& path);
};

// lr0 · (1 − iter/max_iter)^power
double poly_lr(long long iter, long long max_iter, double lr0, double power);

struct SgdState {
  std::vector<Tensor> velocity;
};

// v ← momentum·v + (grad + weight_decay·θ); θ ← θ − lr·v.
// Returns false (parameters untouched) when a gradient is non-finite.
bool sgd_step(std::span<ad::Parameter> params, SgdState& state, double lr, double momentum, double weight_decay);

// Dense forward of one branch over a sample list (eval mode), scoring the
// argmax prediction against the ground-truth masks.
eval::SplitMetrics evaluate_split(models::BranchModel& model, const std::vector<data::Sample>& samples,
                                  int batch_size, double hd_percentile = 95.0);

struct TrainState {
  models::BranchModel spa;
  models::BranchModel spe;
  SgdState opt_spa;
  SgdState opt_spe;
  long long iteration = 0;
  double best_val_dsc = -1.0;
  long long best_iter = -1;
};

TrainState make_train_state(const TrainConfig& cfg);

void checkpoint_save(const std::string& path, TrainState& st, const TrainConfig& cfg);
// Rejects a config-hash mismatch unless force; the state must have been
// built from a config of the same architecture.
void checkpoint_load(const std::string& path, TrainState& st, const TrainConfig& cfg, bool force = false);

struct TrainResult {
  double best_val_dsc = -1.0;
  long long best_iter = -1;
  double final_val_dsc = -1.0;
  bool aborted_nonfinite = false;
  std::string best_ckpt;
  std::string last_ckpt;
  std::string log_path;
  std::vector<double> loss_total_history;
  std::vector<double> loss_scrib_history;
};

// The full optimization loop; writes train_log.jsonl, best.ckpt and
// last.ckpt under out_dir. resume_from restarts from a saved checkpoint.
TrainResult train(const TrainConfig& cfg, const std::string& data_dir, const std::string& out_dir,
                  const std::string& resume_from = {});

}  // namespace s2me::trainer
