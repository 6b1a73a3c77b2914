#include "s2me/fft.hpp"

#include <cmath>
#include <complex>
#include <stdexcept>
#include <vector>

namespace s2me::fft {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

using cd = std::complex<double>;

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// In-place iterative radix-2 FFT. sign = -1 forward, +1 inverse (unscaled).
void fft_pow2(cd* a, int n, int sign) {
  for (int i = 1, j = 0; i < n; ++i) {
    int bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (int len = 2; len <= n; len <<= 1) {
    double ang = sign * kTwoPi / len;
    cd wl(std::cos(ang), std::sin(ang));
    for (int i = 0; i < n; i += len) {
      cd w(1.0, 0.0);
      for (int k = 0; k < len / 2; ++k) {
        cd u = a[i + k];
        cd v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

// Direct O(n²) DFT for the odd lengths the contract tests exercise.
void dft_direct(const cd* in, cd* out, int n, int sign) {
  std::vector<cd> tw(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    double ang = sign * kTwoPi * k / n;
    tw[static_cast<std::size_t>(k)] = cd(std::cos(ang), std::sin(ang));
  }
  for (int k = 0; k < n; ++k) {
    cd acc(0.0, 0.0);
    for (int t = 0; t < n; ++t) acc += in[t] * tw[static_cast<std::size_t>((static_cast<long long>(k) * t) % n)];
    out[k] = acc;
  }
}

void dft(cd* a, int n, int sign, std::vector<cd>& scratch) {
  if (is_pow2(n)) {
    fft_pow2(a, n, sign);
    return;
  }
  scratch.assign(a, a + n);
  dft_direct(scratch.data(), a, n, sign);
}

}  // namespace

void rfft2_plane(const float* x, int h, int w, float* out_re, float* out_im) {
  const int wh = half_width(w);
  std::vector<cd> row(static_cast<std::size_t>(w));
  std::vector<cd> col(static_cast<std::size_t>(h));
  std::vector<cd> scratch;
  std::vector<cd> half(static_cast<std::size_t>(h) * wh);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) row[static_cast<std::size_t>(c)] = cd(x[static_cast<std::size_t>(r) * w + c], 0.0);
    dft(row.data(), w, -1, scratch);
    for (int k = 0; k < wh; ++k) half[static_cast<std::size_t>(r) * wh + k] = row[static_cast<std::size_t>(k)];
  }
  for (int k = 0; k < wh; ++k) {
    for (int r = 0; r < h; ++r) col[static_cast<std::size_t>(r)] = half[static_cast<std::size_t>(r) * wh + k];
    dft(col.data(), h, -1, scratch);
    for (int r = 0; r < h; ++r) {
      out_re[static_cast<std::size_t>(r) * wh + k] = static_cast<float>(col[static_cast<std::size_t>(r)].real());
      out_im[static_cast<std::size_t>(r) * wh + k] = static_cast<float>(col[static_cast<std::size_t>(r)].imag());
    }
  }
}

void irfft2_plane(const float* re, const float* im, int h, int w, float* out) {
  const int wh = half_width(w);
  std::vector<cd> col(static_cast<std::size_t>(h));
  std::vector<cd> row(static_cast<std::size_t>(w));
  std::vector<cd> scratch;
  std::vector<cd> half(static_cast<std::size_t>(h) * wh);
  for (int k = 0; k < wh; ++k) {
    for (int r = 0; r < h; ++r) {
      col[static_cast<std::size_t>(r)] = cd(re[static_cast<std::size_t>(r) * wh + k], im[static_cast<std::size_t>(r) * wh + k]);
    }
    dft(col.data(), h, +1, scratch);
    for (int r = 0; r < h; ++r) half[static_cast<std::size_t>(r) * wh + k] = col[static_cast<std::size_t>(r)];
  }
  const double inv = 1.0 / (static_cast<double>(h) * w);
  for (int r = 0; r < h; ++r) {
    for (int k = 0; k < wh; ++k) row[static_cast<std::size_t>(k)] = half[static_cast<std::size_t>(r) * wh + k];
    // remaining columns by conjugate symmetry of a real signal's row spectrum
    for (int k = wh; k < w; ++k) row[static_cast<std::size_t>(k)] = std::conj(row[static_cast<std::size_t>(w - k)]);
    dft(row.data(), w, +1, scratch);
    for (int c = 0; c < w; ++c) out[static_cast<std::size_t>(r) * w + c] = static_cast<float>(row[static_cast<std::size_t>(c)].real() * inv);
  }
}

ComplexSpectrum rfft2(const Tensor& x) {
  if (x.rank() != 4) throw std::invalid_argument("rfft2 expects N×C×H×W input, got " + shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < 2 || w < 2) {
    throw std::invalid_argument("rfft2 needs H, W >= 2, got " + shape_str(x.shape()));
  }
  const int wh = half_width(w);
  ComplexSpectrum s{Tensor({n, c, h, wh}), Tensor({n, c, h, wh})};
  const std::size_t in_plane = static_cast<std::size_t>(h) * w;
  const std::size_t out_plane = static_cast<std::size_t>(h) * wh;
  for (int i = 0; i < n * c; ++i) {
    rfft2_plane(x.data() + i * in_plane, h, w, s.real.data() + i * out_plane, s.imag.data() + i * out_plane);
  }
  return s;
}

Tensor irfft2(const ComplexSpectrum& s, int out_width) {
  if (!s.real.same_shape(s.imag)) {
    throw std::invalid_argument("spectrum real/imag shapes differ: " + shape_str(s.real.shape()) + " vs " +
                                shape_str(s.imag.shape()));
  }
  if (s.real.rank() != 4) throw std::invalid_argument("irfft2 expects N×C×H×Wh spectrum");
  const int n = s.real.dim(0), c = s.real.dim(1), h = s.real.dim(2), wh = s.real.dim(3);
  if (half_width(out_width) != wh) {
    throw std::invalid_argument("irfft2: out_width " + std::to_string(out_width) + " incompatible with spectrum width " +
                                std::to_string(wh));
  }
  Tensor out({n, c, h, out_width});
  const std::size_t in_plane = static_cast<std::size_t>(h) * wh;
  const std::size_t out_plane = static_cast<std::size_t>(h) * out_width;
  for (int i = 0; i < n * c; ++i) {
    irfft2_plane(s.real.data() + i * in_plane, s.imag.data() + i * in_plane, h, out_width, out.data() + i * out_plane);
  }
  return out;
}

}  // namespace s2me::fft
