#pragma once

#include "s2me/tensor.hpp"

namespace s2me::fft {

// Real-input half spectrum of a 2-D DFT, layout N×C×H×(⌊W/2⌋+1).
// Forward transform is unnormalized; the inverse carries the 1/(H·W).
struct ComplexSpectrum {
  Tensor real;
  Tensor imag;
};

inline int half_width(int w) { return w / 2 + 1; }

// Number of times a stored half-spectrum column participates in the full
// spectrum: 1 for self-conjugate columns (2·kw ≡ 0 mod W), else 2.
inline int column_multiplicity(int kw, int w) { return (2 * kw) % w == 0 ? 1 : 2; }

// Single-plane transforms. x is H×W row-major; spectra are H×half_width(W).
void rfft2_plane(const float* x, int h, int w, float* out_re, float* out_im);
void irfft2_plane(const float* re, const float* im, int h, int w, float* out);

// Batched over N×C.
ComplexSpectrum rfft2(const Tensor& x);
Tensor irfft2(const ComplexSpectrum& s, int out_width);

}  // namespace s2me::fft
