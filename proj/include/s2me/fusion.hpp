#pragma once

#include <span>

#include "s2me/tensor.hpp"

namespace s2me::fusion {

// Argmax class map of a probability tensor; ties break toward the lower
// class index.
using PseudoLabel = LabelMap;

inline constexpr double kEpsLog = 1e-8;

// Per-pixel Shannon entropy (nats) of an N×C×H×W probability map → N×H×W.
// Exactly zero at one-hot pixels: the clamp sits inside the log only, so
// 0·log 0 evaluates to 0.
Tensor entropy_map(const Tensor& p);

// Entropy-guided pixel-wise fusion: the weight on p_spa is
// H_spe/(H_spa+H_spe), so the lower-entropy branch dominates. The
// both-entropies-zero pixel degenerates to equal mixing.
Tensor fuse_entropy(const Tensor& p_spa, const Tensor& p_spe, const Tensor& h_spa, const Tensor& h_spe);

// Image-level random mixing p = α·p1 + (1−α)·p2, one α per batch item.
Tensor fuse_random(const Tensor& p1, const Tensor& p2, Rng& rng);
Tensor fuse_random(const Tensor& p1, const Tensor& p2, std::span<const double> alphas);

Tensor fuse_equal(const Tensor& p1, const Tensor& p2);

PseudoLabel pseudo_label(const Tensor& p);

// All branch-pair artifacts of one forward pass, detached from the tape.
struct DualPrediction {
  Tensor p_spa, p_spe;
  Tensor h_spa, h_spe;
  Tensor p_fused;
  PseudoLabel y_spa, y_spe, y_fused;
};

}  // namespace s2me::fusion
