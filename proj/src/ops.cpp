#include "s2me/ops.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace s2me::ops {

namespace {

using ad::Node;
using ad::NodePtr;

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapC = Eigen::Map<const MatRM>;

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

void check_rank4(const char* op, const Tensor& t) {
  if (t.rank() != 4) {
    throw std::invalid_argument(std::string(op) + ": expected N×C×H×W, got " + shape_str(t.shape()));
  }
}

void accum(Tensor& dst, const Tensor& src) {
  float* d = dst.data();
  const float* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace

Var add(Var a, Var b) {
  check_same_shape("add", a.value(), b.value());
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return ad::make_op("add", std::move(out), {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad) accum(n.parents[0]->ensure_grad(), n.grad);
    if (n.parents[1]->requires_grad) accum(n.parents[1]->ensure_grad(), n.grad);
  });
}

Var sub(Var a, Var b) {
  check_same_shape("sub", a.value(), b.value());
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return ad::make_op("sub", std::move(out), {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad) accum(n.parents[0]->ensure_grad(), n.grad);
    if (n.parents[1]->requires_grad) {
      Tensor& g = n.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

Var mul(Var a, Var b) {
  check_same_shape("mul", a.value(), b.value());
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return ad::make_op("mul", std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.parents[0]->value;
    const Tensor& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor& g = n.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = n.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out(a.shape());
  const float sf = static_cast<float>(s);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * sf;
  return ad::make_op("scale", std::move(out), {a}, [sf](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * sf;
  });
}

Var add_scalar(Var a, double s) {
  Tensor out(a.shape());
  const float sf = static_cast<float>(s);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + sf;
  return ad::make_op("add_scalar", std::move(out), {a}, [](Node& n) {
    if (n.parents[0]->requires_grad) accum(n.parents[0]->ensure_grad(), n.grad);
  });
}

Var relu(Var a) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] > 0.0f ? a.value()[i] : 0.0f;
  return ad::make_op("relu", std::move(out), {a}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    const Tensor& x = n.parents[0]->value;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0f) g[i] += n.grad[i];
    }
  });
}

Var log_clamped(Var a, double eps_log) {
  Tensor out(a.shape());
  const float e = static_cast<float>(eps_log);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(a.value()[i], e));
  return ad::make_op("log", std::move(out), {a}, [e](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    const Tensor& x = n.parents[0]->value;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > e) g[i] += n.grad[i] / x[i];
    }
  });
}

Var sum(Var a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) acc += a.value()[i];
  Tensor out({1});
  out[0] = static_cast<float>(acc);
  return ad::make_op("sum", std::move(out), {a}, [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    const float up = n.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up;
  });
}

Var mean(Var a) {
  const std::size_t m = a.value().size();
  double acc = 0.0;
  for (std::size_t i = 0; i < m; ++i) acc += a.value()[i];
  Tensor out({1});
  out[0] = static_cast<float>(acc / static_cast<double>(m));
  return ad::make_op("mean", std::move(out), {a}, [m](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    const float up = n.grad[0] / static_cast<float>(m);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up;
  });
}

Var dot(Var a, const Tensor& w) {
  check_same_shape("dot", a.value(), w);
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) acc += static_cast<double>(a.value()[i]) * w[i];
  Tensor out({1});
  out[0] = static_cast<float>(acc);
  return ad::make_op("dot", std::move(out), {a}, [w](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    Tensor& g = n.parents[0]->ensure_grad();
    const float up = n.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * w[i];
  });
}

Var concat_channels(Var a, Var b) {
  check_rank4("concat_channels", a.value());
  check_rank4("concat_channels", b.value());
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3]) {
    throw std::invalid_argument("concat_channels: incompatible shapes " + shape_str(sa) + " vs " + shape_str(sb));
  }
  const int n = sa[0], ca = sa[1], cb = sb[1], hw = sa[2] * sa[3];
  Tensor out({n, ca + cb, sa[2], sa[3]});
  for (int i = 0; i < n; ++i) {
    std::memcpy(out.data() + static_cast<std::size_t>(i) * (ca + cb) * hw,
                a.value().data() + static_cast<std::size_t>(i) * ca * hw, sizeof(float) * ca * hw);
    std::memcpy(out.data() + (static_cast<std::size_t>(i) * (ca + cb) + ca) * hw,
                b.value().data() + static_cast<std::size_t>(i) * cb * hw, sizeof(float) * cb * hw);
  }
  return ad::make_op("concat_channels", std::move(out), {a, b}, [n, ca, cb, hw](Node& nd) {
    for (int side = 0; side < 2; ++side) {
      NodePtr& p = nd.parents[static_cast<std::size_t>(side)];
      if (!p->requires_grad) continue;
      Tensor& g = p->ensure_grad();
      const int cs = side == 0 ? ca : cb;
      const int off = side == 0 ? 0 : ca;
      for (int i = 0; i < n; ++i) {
        const float* src = nd.grad.data() + (static_cast<std::size_t>(i) * (ca + cb) + off) * hw;
        float* dst = g.data() + static_cast<std::size_t>(i) * cs * hw;
        for (int k = 0; k < cs * hw; ++k) dst[k] += src[k];
      }
    }
  });
}

Var slice_channels(Var a, int c_begin, int c_end) {
  check_rank4("slice_channels", a.value());
  const Shape& s = a.shape();
  if (c_begin < 0 || c_end > s[1] || c_begin >= c_end) {
    throw std::invalid_argument("slice_channels: bad range [" + std::to_string(c_begin) + ", " +
                                std::to_string(c_end) + ") for " + shape_str(s));
  }
  const int n = s[0], c = s[1], cs = c_end - c_begin, hw = s[2] * s[3];
  Tensor out({n, cs, s[2], s[3]});
  for (int i = 0; i < n; ++i) {
    std::memcpy(out.data() + static_cast<std::size_t>(i) * cs * hw,
                a.value().data() + (static_cast<std::size_t>(i) * c + c_begin) * hw, sizeof(float) * cs * hw);
  }
  return ad::make_op("slice_channels", std::move(out), {a}, [n, c, cs, c_begin, hw](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Tensor& g = nd.parents[0]->ensure_grad();
    for (int i = 0; i < n; ++i) {
      const float* src = nd.grad.data() + static_cast<std::size_t>(i) * cs * hw;
      float* dst = g.data() + (static_cast<std::size_t>(i) * c + c_begin) * hw;
      for (int k = 0; k < cs * hw; ++k) dst[k] += src[k];
    }
  });
}

Var maxpool2(Var a) {
  check_rank4("maxpool2", a.value());
  const Shape& s = a.shape();
  const int n = s[0], c = s[1], h = s[2], w = s[3];
  if (h % 2 != 0) throw std::invalid_argument("maxpool2: H=" + std::to_string(h) + " not divisible by 2");
  if (w % 2 != 0) throw std::invalid_argument("maxpool2: W=" + std::to_string(w) + " not divisible by 2");
  const int ho = h / 2, wo = w / 2;
  Tensor out({n, c, ho, wo});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  const Tensor& x = a.value();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int nc = 0; nc < n * c; ++nc) {
    const float* xp = x.data() + static_cast<std::size_t>(nc) * h * w;
    float* op = out.data() + static_cast<std::size_t>(nc) * ho * wo;
    std::uint32_t* am = argmax->data() + static_cast<std::size_t>(nc) * ho * wo;
    for (int i = 0; i < ho; ++i) {
      for (int j = 0; j < wo; ++j) {
        std::uint32_t best = static_cast<std::uint32_t>((2 * i) * w + 2 * j);
        float bv = xp[best];
        const int cand[3] = {(2 * i) * w + 2 * j + 1, (2 * i + 1) * w + 2 * j, (2 * i + 1) * w + 2 * j + 1};
        for (int idx : cand) {
          if (xp[idx] > bv) {
            bv = xp[idx];
            best = static_cast<std::uint32_t>(idx);
          }
        }
        op[i * wo + j] = bv;
        am[i * wo + j] = best;
      }
    }
  }
  return ad::make_op("maxpool2", std::move(out), {a}, [n, c, h, w, ho, wo, argmax](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Tensor& g = nd.parents[0]->ensure_grad();
    for (int nc = 0; nc < n * c; ++nc) {
      const float* gy = nd.grad.data() + static_cast<std::size_t>(nc) * ho * wo;
      float* gx = g.data() + static_cast<std::size_t>(nc) * h * w;
      const std::uint32_t* am = argmax->data() + static_cast<std::size_t>(nc) * ho * wo;
      for (int k = 0; k < ho * wo; ++k) gx[am[k]] += gy[k];
    }
  });
}

Var upsample_nearest2(Var a) {
  check_rank4("upsample_nearest2", a.value());
  const Shape& s = a.shape();
  const int n = s[0], c = s[1], h = s[2], w = s[3];
  Tensor out({n, c, 2 * h, 2 * w});
  const Tensor& x = a.value();
  for (int nc = 0; nc < n * c; ++nc) {
    const float* xp = x.data() + static_cast<std::size_t>(nc) * h * w;
    float* op = out.data() + static_cast<std::size_t>(nc) * 4 * h * w;
    for (int i = 0; i < 2 * h; ++i) {
      for (int j = 0; j < 2 * w; ++j) op[i * 2 * w + j] = xp[(i / 2) * w + j / 2];
    }
  }
  return ad::make_op("upsample_nearest2", std::move(out), {a}, [n, c, h, w](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Tensor& g = nd.parents[0]->ensure_grad();
    for (int nc = 0; nc < n * c; ++nc) {
      const float* gy = nd.grad.data() + static_cast<std::size_t>(nc) * 4 * h * w;
      float* gx = g.data() + static_cast<std::size_t>(nc) * h * w;
      for (int i = 0; i < 2 * h; ++i) {
        for (int j = 0; j < 2 * w; ++j) gx[(i / 2) * w + j / 2] += gy[i * 2 * w + j];
      }
    }
  });
}

namespace {

// 2× bilinear taps, half-pixel centers: out i samples source at i/2 − 0.25.
struct BilinearAxis {
  std::vector<int> lo, hi;
  std::vector<float> t;
  explicit BilinearAxis(int n_in) {
    const int n_out = 2 * n_in;
    lo.resize(n_out);
    hi.resize(n_out);
    t.resize(n_out);
    for (int i = 0; i < n_out; ++i) {
      const double src = 0.5 * i - 0.25;
      const int f = static_cast<int>(std::floor(src));
      t[i] = static_cast<float>(src - f);
      lo[i] = std::clamp(f, 0, n_in - 1);
      hi[i] = std::clamp(f + 1, 0, n_in - 1);
    }
  }
};

}  // namespace

Var upsample_bilinear2(Var a) {
  check_rank4("upsample_bilinear2", a.value());
  const Shape& s = a.shape();
  const int n = s[0], c = s[1], h = s[2], w = s[3];
  auto ay = std::make_shared<BilinearAxis>(h);
  auto ax = std::make_shared<BilinearAxis>(w);
  Tensor out({n, c, 2 * h, 2 * w});
  const Tensor& x = a.value();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int nc = 0; nc < n * c; ++nc) {
    const float* xp = x.data() + static_cast<std::size_t>(nc) * h * w;
    float* op = out.data() + static_cast<std::size_t>(nc) * 4 * h * w;
    for (int i = 0; i < 2 * h; ++i) {
      const float ty = ay->t[i];
      const int y0 = ay->lo[i], y1 = ay->hi[i];
      for (int j = 0; j < 2 * w; ++j) {
        const float tx = ax->t[j];
        const int x0 = ax->lo[j], x1 = ax->hi[j];
        op[i * 2 * w + j] = (1 - ty) * ((1 - tx) * xp[y0 * w + x0] + tx * xp[y0 * w + x1]) +
                            ty * ((1 - tx) * xp[y1 * w + x0] + tx * xp[y1 * w + x1]);
      }
    }
  }
  return ad::make_op("upsample_bilinear2", std::move(out), {a}, [n, c, h, w, ay, ax](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Tensor& g = nd.parents[0]->ensure_grad();
    for (int nc = 0; nc < n * c; ++nc) {
      const float* gy = nd.grad.data() + static_cast<std::size_t>(nc) * 4 * h * w;
      float* gx = g.data() + static_cast<std::size_t>(nc) * h * w;
      for (int i = 0; i < 2 * h; ++i) {
        const float ty = ay->t[i];
        const int y0 = ay->lo[i], y1 = ay->hi[i];
        for (int j = 0; j < 2 * w; ++j) {
          const float tx = ax->t[j];
          const int x0 = ax->lo[j], x1 = ax->hi[j];
          const float u = gy[i * 2 * w + j];
          gx[y0 * w + x0] += (1 - ty) * (1 - tx) * u;
          gx[y0 * w + x1] += (1 - ty) * tx * u;
          gx[y1 * w + x0] += ty * (1 - tx) * u;
          gx[y1 * w + x1] += ty * tx * u;
        }
      }
    }
  });
}

namespace {

struct ConvDims {
  int n, cin, h, w, cout, k, pad, stride, ho, wo;
};

ConvDims conv_dims(const Tensor& input, const Tensor& weight, const Tensor* bias, int padding, int stride) {
  check_rank4("conv2d", input);
  check_rank4("conv2d", weight);
  ConvDims d;
  d.n = input.dim(0);
  d.cin = input.dim(1);
  d.h = input.dim(2);
  d.w = input.dim(3);
  d.cout = weight.dim(0);
  d.k = weight.dim(2);
  d.pad = padding;
  d.stride = stride;
  if (weight.dim(1) != d.cin || weight.dim(2) != weight.dim(3)) {
    throw std::invalid_argument("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                                shape_str(input.shape()));
  }
  if (d.k % 2 == 0) throw std::invalid_argument("conv2d: kernel size must be odd, got " + std::to_string(d.k));
  if (padding < 0 || stride < 1) throw std::invalid_argument("conv2d: bad padding/stride");
  const int num_h = d.h + 2 * padding - d.k;
  const int num_w = d.w + 2 * padding - d.k;
  if (num_h < 0 || num_h % stride != 0 || num_w < 0 || num_w % stride != 0) {
    throw std::invalid_argument("conv2d: output size not integral for input " + shape_str(input.shape()) +
                                " kernel " + std::to_string(d.k) + " pad " + std::to_string(padding) + " stride " +
                                std::to_string(stride));
  }
  d.ho = num_h / stride + 1;
  d.wo = num_w / stride + 1;
  if (bias && !bias->empty() && (bias->rank() != 1 || bias->dim(0) != d.cout)) {
    throw std::invalid_argument("conv2d: bias " + shape_str(bias->shape()) + " incompatible with weight " +
                                shape_str(weight.shape()));
  }
  return d;
}

// Scatter one image into patch-major layout: col[(ci·k+r)·k+s][oh·Wo+ow].
void im2col(const float* x, const ConvDims& d, float* col) {
  const int kk = d.k * d.k;
  for (int ci = 0; ci < d.cin; ++ci) {
    for (int r = 0; r < d.k; ++r) {
      for (int s = 0; s < d.k; ++s) {
        float* dst = col + (static_cast<std::size_t>(ci) * kk + r * d.k + s) * d.ho * d.wo;
        for (int oh = 0; oh < d.ho; ++oh) {
          const int ih = oh * d.stride - d.pad + r;
          if (ih < 0 || ih >= d.h) {
            std::memset(dst + static_cast<std::size_t>(oh) * d.wo, 0, sizeof(float) * d.wo);
            continue;
          }
          const float* src = x + (static_cast<std::size_t>(ci) * d.h + ih) * d.w;
          for (int ow = 0; ow < d.wo; ++ow) {
            const int iw = ow * d.stride - d.pad + s;
            dst[static_cast<std::size_t>(oh) * d.wo + ow] = (iw >= 0 && iw < d.w) ? src[iw] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im_accum(const float* col, const ConvDims& d, float* gx) {
  const int kk = d.k * d.k;
  for (int ci = 0; ci < d.cin; ++ci) {
    for (int r = 0; r < d.k; ++r) {
      for (int s = 0; s < d.k; ++s) {
        const float* src = col + (static_cast<std::size_t>(ci) * kk + r * d.k + s) * d.ho * d.wo;
        for (int oh = 0; oh < d.ho; ++oh) {
          const int ih = oh * d.stride - d.pad + r;
          if (ih < 0 || ih >= d.h) continue;
          float* dst = gx + (static_cast<std::size_t>(ci) * d.h + ih) * d.w;
          for (int ow = 0; ow < d.wo; ++ow) {
            const int iw = ow * d.stride - d.pad + s;
            if (iw >= 0 && iw < d.w) dst[iw] += src[static_cast<std::size_t>(oh) * d.wo + ow];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Var input, Var weight, Var bias, int padding, int stride) {
  const bool has_bias = bias.defined() && !bias.value().empty();
  const Tensor* bias_t = has_bias ? &bias.value() : nullptr;
  const ConvDims d = conv_dims(input.value(), weight.value(), bias_t, padding, stride);
  const int kcols = d.cin * d.k * d.k;
  const int m = d.ho * d.wo;

  Tensor out({d.n, d.cout, d.ho, d.wo});
  const Tensor& x = input.value();
  MapC wmat(weight.value().data(), d.cout, kcols);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int i = 0; i < d.n; ++i) {
    std::vector<float> col(static_cast<std::size_t>(kcols) * m);
    im2col(x.data() + static_cast<std::size_t>(i) * d.cin * d.h * d.w, d, col.data());
    MapC cmat(col.data(), kcols, m);
    MapM omat(out.data() + static_cast<std::size_t>(i) * d.cout * m, d.cout, m);
    omat.noalias() = wmat * cmat;
    if (bias_t) {
      for (int co = 0; co < d.cout; ++co) omat.row(co).array() += (*bias_t)[static_cast<std::size_t>(co)];
    }
  }

  std::vector<Var> inputs = has_bias ? std::vector<Var>{input, weight, bias} : std::vector<Var>{input, weight};
  return ad::make_op("conv2d", std::move(out), std::move(inputs), [d, kcols, m, has_bias](Node& nd) {
    const Tensor& x = nd.parents[0]->value;
    const Tensor& wv = nd.parents[1]->value;
    const bool need_dx = nd.parents[0]->requires_grad;
    const bool need_dw = nd.parents[1]->requires_grad;
    const bool need_db = has_bias && nd.parents[2]->requires_grad;

    // per-item weight-gradient partials, reduced serially afterwards so the
    // result does not depend on thread count
    std::vector<float> dw_part;
    if (need_dw) dw_part.assign(static_cast<std::size_t>(d.n) * d.cout * kcols, 0.0f);
    float* gx_base = need_dx ? nd.parents[0]->ensure_grad().data() : nullptr;
    MapC wmat(wv.data(), d.cout, kcols);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int i = 0; i < d.n; ++i) {
      MapC gy(nd.grad.data() + static_cast<std::size_t>(i) * d.cout * m, d.cout, m);
      if (need_dw) {
        std::vector<float> col(static_cast<std::size_t>(kcols) * m);
        im2col(x.data() + static_cast<std::size_t>(i) * d.cin * d.h * d.w, d, col.data());
        MapC cmat(col.data(), kcols, m);
        MapM dwp(dw_part.data() + static_cast<std::size_t>(i) * d.cout * kcols, d.cout, kcols);
        dwp.noalias() = gy * cmat.transpose();
      }
      if (need_dx) {
        std::vector<float> dcol(static_cast<std::size_t>(kcols) * m);
        MapM dcmat(dcol.data(), kcols, m);
        dcmat.noalias() = wmat.transpose() * gy;
        // each item scatters into its own slice of dx
        col2im_accum(dcol.data(), d, gx_base + static_cast<std::size_t>(i) * d.cin * d.h * d.w);
      }
    }
    if (need_dw) {
      Tensor& gw = nd.parents[1]->ensure_grad();
      for (int i = 0; i < d.n; ++i) {
        const float* part = dw_part.data() + static_cast<std::size_t>(i) * d.cout * kcols;
        float* dst = gw.data();
        for (int k = 0; k < d.cout * kcols; ++k) dst[k] += part[k];
      }
    }
    if (need_db) {
      Tensor& gb = nd.parents[2]->ensure_grad();
      for (int i = 0; i < d.n; ++i) {
        for (int co = 0; co < d.cout; ++co) {
          const float* gy = nd.grad.data() + (static_cast<std::size_t>(i) * d.cout + co) * m;
          double acc = 0.0;
          for (int k = 0; k < m; ++k) acc += gy[k];
          gb[static_cast<std::size_t>(co)] += static_cast<float>(acc);
        }
      }
    }
  });
}

Var softmax_channels(Var logits) {
  check_rank4("softmax_channels", logits.value());
  const Shape& s = logits.shape();
  const int n = s[0], c = s[1], hw = s[2] * s[3];
  if (c < 2) throw std::invalid_argument("softmax_channels: needs C >= 2, got " + shape_str(s));
  Tensor out(s);
  const Tensor& x = logits.value();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int i = 0; i < n; ++i) {
    const float* xp = x.data() + static_cast<std::size_t>(i) * c * hw;
    float* op = out.data() + static_cast<std::size_t>(i) * c * hw;
    for (int p = 0; p < hw; ++p) {
      float mx = xp[p];
      for (int ch = 1; ch < c; ++ch) mx = std::max(mx, xp[ch * hw + p]);
      double z = 0.0;
      for (int ch = 0; ch < c; ++ch) z += std::exp(static_cast<double>(xp[ch * hw + p]) - mx);
      for (int ch = 0; ch < c; ++ch) {
        op[ch * hw + p] = static_cast<float>(std::exp(static_cast<double>(xp[ch * hw + p]) - mx) / z);
      }
    }
  }
  auto probs = std::make_shared<Tensor>(out);
  return ad::make_op("softmax_channels", std::move(out), {logits}, [n, c, hw, probs](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Tensor& g = nd.parents[0]->ensure_grad();
    for (int i = 0; i < n; ++i) {
      const float* pp = probs->data() + static_cast<std::size_t>(i) * c * hw;
      const float* gy = nd.grad.data() + static_cast<std::size_t>(i) * c * hw;
      float* gx = g.data() + static_cast<std::size_t>(i) * c * hw;
      for (int p = 0; p < hw; ++p) {
        double inner = 0.0;
        for (int ch = 0; ch < c; ++ch) inner += static_cast<double>(gy[ch * hw + p]) * pp[ch * hw + p];
        for (int ch = 0; ch < c; ++ch) {
          gx[ch * hw + p] += pp[ch * hw + p] * static_cast<float>(gy[ch * hw + p] - inner);
        }
      }
    }
  });
}

namespace {

struct NormShape {
  int n, c, hw;
};

NormShape norm_shape(const char* op, const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  check_rank4(op, x);
  NormShape s{x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
  if (gamma.rank() != 1 || gamma.dim(0) != s.c || !gamma.same_shape(beta)) {
    throw std::invalid_argument(std::string(op) + ": gamma/beta " + shape_str(gamma.shape()) + "," +
                                shape_str(beta.shape()) + " incompatible with x " + shape_str(x.shape()));
  }
  return s;
}

}  // namespace

Var batch_norm(Var x, Var gamma, Var beta, NormStats* stats, bool training, double momentum, double eps) {
  const NormShape s = norm_shape("batch_norm", x.value(), gamma.value(), beta.value());
  const std::size_t plane = static_cast<std::size_t>(s.hw);
  const double m = static_cast<double>(s.n) * s.hw;

  auto mean_c = std::make_shared<std::vector<double>>(static_cast<std::size_t>(s.c));
  auto invstd_c = std::make_shared<std::vector<double>>(static_cast<std::size_t>(s.c));
  const Tensor& xv = x.value();
  for (int c = 0; c < s.c; ++c) {
    double mu, var;
    if (training) {
      double acc = 0.0, acc2 = 0.0;
      for (int i = 0; i < s.n; ++i) {
        const float* xp = xv.data() + (static_cast<std::size_t>(i) * s.c + c) * plane;
        for (int k = 0; k < s.hw; ++k) {
          acc += xp[k];
          acc2 += static_cast<double>(xp[k]) * xp[k];
        }
      }
      mu = acc / m;
      var = std::max(acc2 / m - mu * mu, 0.0);
      if (stats) {
        stats->running_mean[static_cast<std::size_t>(c)] =
            static_cast<float>((1.0 - momentum) * stats->running_mean[static_cast<std::size_t>(c)] + momentum * mu);
        stats->running_var[static_cast<std::size_t>(c)] =
            static_cast<float>((1.0 - momentum) * stats->running_var[static_cast<std::size_t>(c)] + momentum * var);
      }
    } else {
      if (!stats) throw std::invalid_argument("batch_norm: eval mode requires running stats");
      mu = stats->running_mean[static_cast<std::size_t>(c)];
      var = stats->running_var[static_cast<std::size_t>(c)];
    }
    (*mean_c)[static_cast<std::size_t>(c)] = mu;
    (*invstd_c)[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + eps);
  }

  Tensor out(x.shape());
  for (int i = 0; i < s.n; ++i) {
    for (int c = 0; c < s.c; ++c) {
      const float* xp = xv.data() + (static_cast<std::size_t>(i) * s.c + c) * plane;
      float* op = out.data() + (static_cast<std::size_t>(i) * s.c + c) * plane;
      const float gm = gamma.value()[static_cast<std::size_t>(c)];
      const float bt = beta.value()[static_cast<std::size_t>(c)];
      const float mu = static_cast<float>((*mean_c)[static_cast<std::size_t>(c)]);
      const float is = static_cast<float>((*invstd_c)[static_cast<std::size_t>(c)]);
      for (int k = 0; k < s.hw; ++k) op[k] = (xp[k] - mu) * is * gm + bt;
    }
  }

  return ad::make_op("batch_norm", std::move(out), {x, gamma, beta},
                     [s, plane, m, training, mean_c, invstd_c](Node& nd) {
                       const Tensor& xv = nd.parents[0]->value;
                       const Tensor& gv = nd.parents[1]->value;
                       const bool need_dx = nd.parents[0]->requires_grad;
                       const bool need_dg = nd.parents[1]->requires_grad;
                       const bool need_db = nd.parents[2]->requires_grad;
                       float* gx_base = need_dx ? nd.parents[0]->ensure_grad().data() : nullptr;
                       float* gg_base = need_dg ? nd.parents[1]->ensure_grad().data() : nullptr;
                       float* gb_base = need_db ? nd.parents[2]->ensure_grad().data() : nullptr;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
                       for (int c = 0; c < s.c; ++c) {
                         const double mu = (*mean_c)[static_cast<std::size_t>(c)];
                         const double is = (*invstd_c)[static_cast<std::size_t>(c)];
                         const double gm = gv[static_cast<std::size_t>(c)];
                         double sum_dy = 0.0, sum_dy_xhat = 0.0;
                         for (int i = 0; i < s.n; ++i) {
                           const float* xp = xv.data() + (static_cast<std::size_t>(i) * s.c + c) * plane;
                           const float* gy = nd.grad.data() + (static_cast<std::size_t>(i) * s.c + c) * plane;
                           for (int k = 0; k < s.hw; ++k) {
                             sum_dy += gy[k];
                             sum_dy_xhat += static_cast<double>(gy[k]) * (xp[k] - mu) * is;
                           }
                         }
                         if (need_dg) gg_base[c] += static_cast<float>(sum_dy_xhat);
                         if (need_db) gb_base[c] += static_cast<float>(sum_dy);
                         if (need_dx) {
                           for (int i = 0; i < s.n; ++i) {
                             const float* xp = xv.data() + (static_cast<std::size_t>(i) * s.c + c) * plane;
                             const float* gy = nd.grad.data() + (static_cast<std::size_t>(i) * s.c + c) * plane;
                             float* gp = gx_base + (static_cast<std::size_t>(i) * s.c + c) * plane;
                             for (int k = 0; k < s.hw; ++k) {
                               const double xhat = (xp[k] - mu) * is;
                               double d;
                               if (training) {
                                 d = gm * is * (gy[k] - sum_dy / m - xhat * sum_dy_xhat / m);
                               } else {
                                 d = gm * is * gy[k];
                               }
                               gp[k] += static_cast<float>(d);
                             }
                           }
                         }
                       }
                     });
}

Var instance_norm(Var x, Var gamma, Var beta, double eps) {
  const NormShape s = norm_shape("instance_norm", x.value(), gamma.value(), beta.value());
  const std::size_t plane = static_cast<std::size_t>(s.hw);
  const double m = static_cast<double>(s.hw);

  auto mean_nc = std::make_shared<std::vector<double>>(static_cast<std::size_t>(s.n) * s.c);
  auto invstd_nc = std::make_shared<std::vector<double>>(static_cast<std::size_t>(s.n) * s.c);
  const Tensor& xv = x.value();
  Tensor out(x.shape());
  for (int nc = 0; nc < s.n * s.c; ++nc) {
    const float* xp = xv.data() + static_cast<std::size_t>(nc) * plane;
    double acc = 0.0, acc2 = 0.0;
    for (int k = 0; k < s.hw; ++k) {
      acc += xp[k];
      acc2 += static_cast<double>(xp[k]) * xp[k];
    }
    const double mu = acc / m;
    const double var = std::max(acc2 / m - mu * mu, 0.0);
    (*mean_nc)[static_cast<std::size_t>(nc)] = mu;
    (*invstd_nc)[static_cast<std::size_t>(nc)] = 1.0 / std::sqrt(var + eps);
    const int c = nc % s.c;
    const float gm = gamma.value()[static_cast<std::size_t>(c)];
    const float bt = beta.value()[static_cast<std::size_t>(c)];
    float* op = out.data() + static_cast<std::size_t>(nc) * plane;
    const float muf = static_cast<float>(mu);
    const float isf = static_cast<float>((*invstd_nc)[static_cast<std::size_t>(nc)]);
    for (int k = 0; k < s.hw; ++k) op[k] = (xp[k] - muf) * isf * gm + bt;
  }

  return ad::make_op("instance_norm", std::move(out), {x, gamma, beta}, [s, plane, m, mean_nc, invstd_nc](Node& nd) {
    const Tensor& xv = nd.parents[0]->value;
    const Tensor& gv = nd.parents[1]->value;
    const bool need_dx = nd.parents[0]->requires_grad;
    for (int nc = 0; nc < s.n * s.c; ++nc) {
      const int c = nc % s.c;
      const double mu = (*mean_nc)[static_cast<std::size_t>(nc)];
      const double is = (*invstd_nc)[static_cast<std::size_t>(nc)];
      const double gm = gv[static_cast<std::size_t>(c)];
      const float* xp = xv.data() + static_cast<std::size_t>(nc) * plane;
      const float* gy = nd.grad.data() + static_cast<std::size_t>(nc) * plane;
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int k = 0; k < s.hw; ++k) {
        sum_dy += gy[k];
        sum_dy_xhat += static_cast<double>(gy[k]) * (xp[k] - mu) * is;
      }
      if (nd.parents[1]->requires_grad) {
        nd.parents[1]->ensure_grad()[static_cast<std::size_t>(c)] += static_cast<float>(sum_dy_xhat);
      }
      if (nd.parents[2]->requires_grad) {
        nd.parents[2]->ensure_grad()[static_cast<std::size_t>(c)] += static_cast<float>(sum_dy);
      }
      if (need_dx) {
        float* gp = nd.parents[0]->ensure_grad().data() + static_cast<std::size_t>(nc) * plane;
        for (int k = 0; k < s.hw; ++k) {
          const double xhat = (xp[k] - mu) * is;
          gp[k] += static_cast<float>(gm * is * (gy[k] - sum_dy / m - xhat * sum_dy_xhat / m));
        }
      }
    }
  });
}

SpectrumVar rfft2(Var x) {
  fft::ComplexSpectrum sp = fft::rfft2(x.value());
  const Shape xs = x.shape();
  const int h = xs[2], w = xs[3];
  // the adjoint of the half-spectrum transform undoes the implicit conjugate
  // duplication by 1/mult before the inverse transform
  auto backprop = [h, w](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    // nd corresponds to one leg (real or imag); the sibling leg accumulates
    // independently, so each leg backprops with the other set to zero.
    const bool is_real = std::strcmp(nd.op, "rfft2_re") == 0;
    const Shape& ss = nd.value.shape();
    const int wh = ss[3];
    Tensor gre(ss), gim(ss);
    Tensor& target = is_real ? gre : gim;
    const std::size_t plane = static_cast<std::size_t>(ss[2]) * wh;
    for (int i = 0; i < ss[0] * ss[1]; ++i) {
      for (int r = 0; r < ss[2]; ++r) {
        for (int k = 0; k < wh; ++k) {
          const float mult = static_cast<float>(fft::column_multiplicity(k, w));
          target.data()[i * plane + static_cast<std::size_t>(r) * wh + k] =
              nd.grad.data()[i * plane + static_cast<std::size_t>(r) * wh + k] / mult;
        }
      }
    }
    Tensor gx = fft::irfft2({gre, gim}, w);
    Tensor& dst = nd.parents[0]->ensure_grad();
    const float hw = static_cast<float>(h) * w;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gx[i] * hw;
  };
  Var re = ad::make_op("rfft2_re", std::move(sp.real), {x}, backprop);
  Var im = ad::make_op("rfft2_im", std::move(sp.imag), {x}, backprop);
  return {re, im};
}

Var irfft2(SpectrumVar s, int out_width) {
  Tensor out = fft::irfft2({s.real.value(), s.imag.value()}, out_width);
  const int h = out.dim(2), w = out.dim(3);
  return ad::make_op("irfft2", std::move(out), {s.real, s.imag}, [h, w](Node& nd) {
    fft::ComplexSpectrum g = fft::rfft2(nd.grad);
    const int wh = g.real.dim(3);
    const double inv_hw = 1.0 / (static_cast<double>(h) * w);
    const std::size_t plane = static_cast<std::size_t>(g.real.dim(2)) * wh;
    for (int side = 0; side < 2; ++side) {
      NodePtr& p = nd.parents[static_cast<std::size_t>(side)];
      if (!p->requires_grad) continue;
      Tensor& dst = p->ensure_grad();
      const Tensor& src = side == 0 ? g.real : g.imag;
      for (int i = 0; i < g.real.dim(0) * g.real.dim(1); ++i) {
        for (int r = 0; r < g.real.dim(2); ++r) {
          for (int k = 0; k < wh; ++k) {
            const double mult = fft::column_multiplicity(k, w);
            const std::size_t idx = i * plane + static_cast<std::size_t>(r) * wh + k;
            dst[idx] += static_cast<float>(src[idx] * mult * inv_hw);
          }
        }
      }
    }
  });
}

Var cross_entropy_masked(Var logits, const LabelMap& labels, std::optional<std::uint8_t> ignore) {
  check_rank4("cross_entropy", logits.value());
  const Shape& s = logits.shape();
  const int n = s[0], c = s[1], hw = s[2] * s[3];
  if (labels.shape != Shape{n, s[2], s[3]}) {
    throw std::invalid_argument("cross_entropy: labels " + shape_str(labels.shape) + " incompatible with logits " +
                                shape_str(s));
  }
  for (std::uint8_t l : labels.v) {
    if (l >= c && !(ignore && l == *ignore)) {
      throw std::invalid_argument("cross_entropy: label value " + std::to_string(int(l)) + " outside [0, " +
                                  std::to_string(c) + ") and not the ignore value");
    }
  }

  const Tensor& x = logits.value();
  double acc = 0.0;
  std::size_t labeled = 0;
  for (int i = 0; i < n; ++i) {
    const float* xp = x.data() + static_cast<std::size_t>(i) * c * hw;
    const std::uint8_t* lp = labels.v.data() + static_cast<std::size_t>(i) * hw;
    for (int p = 0; p < hw; ++p) {
      if (ignore && lp[p] == *ignore) continue;
      float mx = xp[p];
      for (int ch = 1; ch < c; ++ch) mx = std::max(mx, xp[ch * hw + p]);
      double z = 0.0;
      for (int ch = 0; ch < c; ++ch) z += std::exp(static_cast<double>(xp[ch * hw + p]) - mx);
      acc += std::log(z) + mx - xp[lp[p] * hw + p];
      ++labeled;
    }
  }
  Tensor out({1});
  out[0] = labeled ? static_cast<float>(acc / static_cast<double>(labeled)) : 0.0f;

  auto lab = std::make_shared<LabelMap>(labels);
  return ad::make_op("cross_entropy", std::move(out), {logits}, [n, c, hw, ignore, lab, labeled](Node& nd) {
    if (!nd.parents[0]->requires_grad || labeled == 0) return;
    const Tensor& x = nd.parents[0]->value;
    Tensor& g = nd.parents[0]->ensure_grad();
    const double up = nd.grad[0] / static_cast<double>(labeled);
    for (int i = 0; i < n; ++i) {
      const float* xp = x.data() + static_cast<std::size_t>(i) * c * hw;
      float* gp = g.data() + static_cast<std::size_t>(i) * c * hw;
      const std::uint8_t* lp = lab->v.data() + static_cast<std::size_t>(i) * hw;
      for (int p = 0; p < hw; ++p) {
        if (ignore && lp[p] == *ignore) continue;
        float mx = xp[p];
        for (int ch = 1; ch < c; ++ch) mx = std::max(mx, xp[ch * hw + p]);
        double z = 0.0;
        for (int ch = 0; ch < c; ++ch) z += std::exp(static_cast<double>(xp[ch * hw + p]) - mx);
        for (int ch = 0; ch < c; ++ch) {
          const double soft = std::exp(static_cast<double>(xp[ch * hw + p]) - mx) / z;
          gp[ch * hw + p] += static_cast<float>(up * (soft - (ch == lp[p] ? 1.0 : 0.0)));
        }
      }
    }
  });
}

Var dice_vs_label(Var probs, const LabelMap& labels, double eps_d) {
  check_rank4("dice", probs.value());
  const Shape& s = probs.shape();
  const int n = s[0], c = s[1], hw = s[2] * s[3];
  if (labels.shape != Shape{n, s[2], s[3]}) {
    throw std::invalid_argument("dice: labels " + shape_str(labels.shape) + " incompatible with probs " + shape_str(s));
  }
  for (std::uint8_t l : labels.v) {
    if (l >= c) throw std::invalid_argument("dice: label value " + std::to_string(int(l)) + " outside [0, " + std::to_string(c) + ")");
  }

  const Tensor& p = probs.value();
  auto numer = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * c);
  auto denom = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * c);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const std::uint8_t* lp = labels.v.data() + static_cast<std::size_t>(i) * hw;
    for (int ch = 0; ch < c; ++ch) {
      const float* pp = p.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
      double sp = 0.0, sg = 0.0, spg = 0.0;
      for (int k = 0; k < hw; ++k) {
        sp += pp[k];
        if (lp[k] == ch) {
          sg += 1.0;
          spg += pp[k];
        }
      }
      const double nu = 2.0 * spg + eps_d;
      const double de = sp + sg + eps_d;
      (*numer)[static_cast<std::size_t>(i) * c + ch] = nu;
      (*denom)[static_cast<std::size_t>(i) * c + ch] = de;
      total += nu / de;
    }
  }
  Tensor out({1});
  out[0] = static_cast<float>(1.0 - total / (static_cast<double>(n) * c));

  auto lab = std::make_shared<LabelMap>(labels);
  return ad::make_op("dice", std::move(out), {probs}, [n, c, hw, lab, numer, denom](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Tensor& g = nd.parents[0]->ensure_grad();
    const double up = nd.grad[0] / (static_cast<double>(n) * c);
    for (int i = 0; i < n; ++i) {
      const std::uint8_t* lp = lab->v.data() + static_cast<std::size_t>(i) * hw;
      for (int ch = 0; ch < c; ++ch) {
        float* gp = g.data() + (static_cast<std::size_t>(i) * c + ch) * hw;
        const double nu = (*numer)[static_cast<std::size_t>(i) * c + ch];
        const double de = (*denom)[static_cast<std::size_t>(i) * c + ch];
        for (int k = 0; k < hw; ++k) {
          const double gk = lp[k] == ch ? 1.0 : 0.0;
          gp[k] += static_cast<float>(-up * (2.0 * gk * de - nu) / (de * de));
        }
      }
    }
  });
}

}  // namespace s2me::ops
