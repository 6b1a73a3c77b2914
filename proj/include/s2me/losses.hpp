#pragma once

#include "s2me/fusion.hpp"
#include "s2me/ops.hpp"

namespace s2me::losses {

using ad::Var;
using fusion::PseudoLabel;

// Scribble annotations: 0 background, 1 foreground, 2 unlabeled.
using ScribbleMask = LabelMap;

void validate_scribbles(const ScribbleMask& m);

enum class FusionKind { Entropy, Equal, Random };
const char* fusion_name(FusionKind k);
FusionKind fusion_from_name(const std::string& name);

struct LossWeights {
  double lambda_mt = 0.0;
  double lambda_el = 0.0;
};

// Which terms participate; scribble supervision is always on.
struct LossTerms {
  bool scrib = true;
  bool mt = true;
  bool el = true;
};

// Cross-entropy over labeled pixels only; 0 when nothing is labeled.
Var partial_cross_entropy(Var logits, const ScribbleMask& scribbles);

// Dense cross-entropy / soft dice against a detached pseudo label.
Var cross_entropy(Var logits, const PseudoLabel& target);
Var dice_loss(Var probs, const PseudoLabel& target, double eps_d = 1e-5);

// {CE(l_spa, ŷ_spe) + Dice(p_spa, ŷ_spe)} + {CE(l_spe, ŷ_spa) + Dice(p_spe, ŷ_spa)}
Var mutual_teaching_loss(Var l_spa, Var p_spa, Var l_spe, Var p_spe, const PseudoLabel& y_spa,
                         const PseudoLabel& y_spe);

// {CE(l_spa, ŷ) + Dice(p_spa, ŷ)} + {CE(l_spe, ŷ) + Dice(p_spe, ŷ)}
Var ensemble_loss(Var l_spa, Var p_spa, Var l_spe, Var p_spe, const PseudoLabel& y_fused);

struct HybridLoss {
  Var total;
  double scrib = 0.0;
  double mt = 0.0;
  double el = 0.0;
  fusion::DualPrediction preds;
};

// Full supervision: L_scrib + λ_mt·L_mt + λ_el·L_el. Pseudo labels, entropy
// maps and the fused map are derived internally from detached probabilities;
// no gradient flows through them. `alphas` feed the random-fusion arm and
// are ignored otherwise.
HybridLoss hybrid_loss(Var l_spa, Var l_spe, const ScribbleMask& scribbles, const LossWeights& weights,
                       const LossTerms& terms = {}, FusionKind fusion = FusionKind::Entropy,
                       std::span<const double> alphas = {});

// λ(t) = λ_max·exp(−5·(1 − min(t/T, 1))²); reaches λ_max exactly at t = T.
double lambda_rampup(long long iter, long long ramp_iters, double lambda_max);

}  // namespace s2me::losses
