#pragma once

#include <optional>

#include "s2me/autograd.hpp"
#include "s2me/fft.hpp"

namespace s2me::ops {

using ad::Var;

// ---- elementwise ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var relu(Var a);
// log(max(x, eps)); the clamp keeps one-hot probability maps out of -inf
Var log_clamped(Var a, double eps_log = 1e-8);

// ---- reductions (double accumulation so finite differences stay clean) ----
Var sum(Var a);
Var mean(Var a);
// Σ aᵢ·wᵢ with a fixed projection; gives grad checks a generic upstream grad
Var dot(Var a, const Tensor& w);

// ---- structure ----
Var concat_channels(Var a, Var b);
Var slice_channels(Var a, int c_begin, int c_end);
Var maxpool2(Var a);
Var upsample_nearest2(Var a);
Var upsample_bilinear2(Var a);

// ---- convolution / normalization / softmax ----
// input N×Cin×H×W, weight Cout×Cin×k×k (k odd), bias Cout or empty Var
Var conv2d(Var input, Var weight, Var bias, int padding, int stride);
Var softmax_channels(Var logits);

// Running statistics owned by the model; updated only in training mode.
struct NormStats {
  Tensor running_mean;
  Tensor running_var;
};

Var batch_norm(Var x, Var gamma, Var beta, NormStats* stats, bool training, double momentum = 0.1,
               double eps = 1e-5);
Var instance_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

// ---- spectral ----
struct SpectrumVar {
  Var real;
  Var imag;
};
SpectrumVar rfft2(Var x);
Var irfft2(SpectrumVar s, int out_width);

// ---- fused loss primitives ----
// Mean of −log softmax(logits)[label] over pixels whose label != ignore.
// Returns 0 (and contributes no gradient) when nothing is labeled; the
// gradient at ignored pixels is exactly zero by construction.
Var cross_entropy_masked(Var logits, const LabelMap& labels, std::optional<std::uint8_t> ignore);

// 1 − mean over (batch, class) of (2·Σ p·g + ε)/(Σ p + Σ g + ε) with g the
// one-hot target; sums run over the pixels of one image.
Var dice_vs_label(Var probs, const LabelMap& labels, double eps_d = 1e-5);

}  // namespace s2me::ops
