#include "s2me/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace s2me::losses {

void validate_scribbles(const ScribbleMask& m) {
  for (std::uint8_t l : m.v) {
    if (l > 2) throw std::invalid_argument("scribble label " + std::to_string(int(l)) + " outside {0, 1, 2}");
  }
}

const char* fusion_name(FusionKind k) {
  switch (k) {
    case FusionKind::Entropy: return "entropy";
    case FusionKind::Equal: return "equal";
    case FusionKind::Random: return "random";
  }
  return "?";
}

FusionKind fusion_from_name(const std::string& name) {
  if (name == "entropy") return FusionKind::Entropy;
  if (name == "equal") return FusionKind::Equal;
  if (name == "random") return FusionKind::Random;
  throw std::invalid_argument("unknown fusion strategy '" + name + "' (want entropy|equal|random)");
}

Var partial_cross_entropy(Var logits, const ScribbleMask& scribbles) {
  validate_scribbles(scribbles);
  return ops::cross_entropy_masked(logits, scribbles, kUnlabeled);
}

Var cross_entropy(Var logits, const PseudoLabel& target) {
  return ops::cross_entropy_masked(logits, target, std::nullopt);
}

Var dice_loss(Var probs, const PseudoLabel& target, double eps_d) {
  return ops::dice_vs_label(probs, target, eps_d);
}

Var mutual_teaching_loss(Var l_spa, Var p_spa, Var l_spe, Var p_spe, const PseudoLabel& y_spa,
                         const PseudoLabel& y_spe) {
  Var a = ops::add(cross_entropy(l_spa, y_spe), dice_loss(p_spa, y_spe));
  Var b = ops::add(cross_entropy(l_spe, y_spa), dice_loss(p_spe, y_spa));
  return ops::add(a, b);
}

Var ensemble_loss(Var l_spa, Var p_spa, Var l_spe, Var p_spe, const PseudoLabel& y_fused) {
  Var a = ops::add(cross_entropy(l_spa, y_fused), dice_loss(p_spa, y_fused));
  Var b = ops::add(cross_entropy(l_spe, y_fused), dice_loss(p_spe, y_fused));
  return ops::add(a, b);
}

HybridLoss hybrid_loss(Var l_spa, Var l_spe, const ScribbleMask& scribbles, const LossWeights& weights,
                       const LossTerms& terms, FusionKind fusion, std::span<const double> alphas) {
  if (!terms.scrib) throw std::invalid_argument("hybrid_loss: scribble supervision is the anchor term and cannot be dropped");
  if (weights.lambda_mt < 0 || weights.lambda_el < 0) throw std::invalid_argument("hybrid_loss: negative loss weight");

  HybridLoss out;
  Var p_spa = ops::softmax_channels(l_spa);
  Var p_spe = ops::softmax_channels(l_spe);

  // detached view of the branch outputs; supervision targets are labels,
  // not differentiable paths
  out.preds.p_spa = p_spa.value();
  out.preds.p_spe = p_spe.value();
  out.preds.y_spa = fusion::pseudo_label(out.preds.p_spa);
  out.preds.y_spe = fusion::pseudo_label(out.preds.p_spe);
  out.preds.h_spa = fusion::entropy_map(out.preds.p_spa);
  out.preds.h_spe = fusion::entropy_map(out.preds.p_spe);
  switch (fusion) {
    case FusionKind::Entropy:
      out.preds.p_fused = fusion::fuse_entropy(out.preds.p_spa, out.preds.p_spe, out.preds.h_spa, out.preds.h_spe);
      break;
    case FusionKind::Equal:
      out.preds.p_fused = fusion::fuse_equal(out.preds.p_spa, out.preds.p_spe);
      break;
    case FusionKind::Random:
      out.preds.p_fused = fusion::fuse_random(out.preds.p_spa, out.preds.p_spe, alphas);
      break;
  }
  out.preds.y_fused = fusion::pseudo_label(out.preds.p_fused);

  Var scrib = ops::add(partial_cross_entropy(l_spa, scribbles), partial_cross_entropy(l_spe, scribbles));
  out.scrib = scrib.scalar();
  Var total = scrib;
  if (terms.mt) {
    Var mt = mutual_teaching_loss(l_spa, p_spa, l_spe, p_spe, out.preds.y_spa, out.preds.y_spe);
    out.mt = mt.scalar();
    total = ops::add(total, ops::scale(mt, weights.lambda_mt));
  }
  if (terms.el) {
    Var el = ensemble_loss(l_spa, p_spa, l_spe, p_spe, out.preds.y_fused);
    out.el = el.scalar();
    total = ops::add(total, ops::scale(el, weights.lambda_el));
  }
  out.total = total;
  return out;
}

double lambda_rampup(long long iter, long long ramp_iters, double lambda_max) {
  if (lambda_max <= 0) throw std::invalid_argument("lambda_rampup: lambda_max must be positive");
  if (ramp_iters <= 0) throw std::invalid_argument("lambda_rampup: ramp_iters must be positive");
  if (iter < 0) throw std::invalid_argument("lambda_rampup: negative iteration");
  const double t = std::min(static_cast<double>(iter) / static_cast<double>(ramp_iters), 1.0);
  return lambda_max * std::exp(-5.0 * (1.0 - t) * (1.0 - t));
}

}  // namespace s2me::losses
