#include "s2me/fusion.hpp"

#include <cmath>
#include <stdexcept>

namespace s2me::fusion {

namespace {

void check_prob_shape(const char* op, const Tensor& p) {
  if (p.rank() != 4) throw std::invalid_argument(std::string(op) + ": expected N×C×H×W, got " + shape_str(p.shape()));
}

void check_pair(const char* op, const Tensor& a, const Tensor& b) {
  check_prob_shape(op, a);
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

}  // namespace

Tensor entropy_map(const Tensor& p) {
  check_prob_shape("entropy_map", p);
  const int n = p.dim(0), c = p.dim(1), hw = p.dim(2) * p.dim(3);
  Tensor out({n, p.dim(2), p.dim(3)});
  for (int i = 0; i < n; ++i) {
    const float* pp = p.data() + static_cast<std::size_t>(i) * c * hw;
    float* op = out.data() + static_cast<std::size_t>(i) * hw;
    for (int k = 0; k < hw; ++k) {
      double sum = 0.0, ent = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        const double v = pp[ch * hw + k];
        sum += v;
        ent -= v * std::log(std::min(std::max(v, kEpsLog), 1.0));
      }
      if (std::abs(sum - 1.0) > 1e-4 || !(sum == sum)) {
        throw std::invalid_argument("entropy_map: input is not a probability map (pixel sum " + std::to_string(sum) +
                                    ")");
      }
      op[k] = static_cast<float>(ent);
    }
  }
  return out;
}

Tensor fuse_entropy(const Tensor& p_spa, const Tensor& p_spe, const Tensor& h_spa, const Tensor& h_spe) {
  check_pair("fuse_entropy", p_spa, p_spe);
  const Shape hshape{p_spa.dim(0), p_spa.dim(2), p_spa.dim(3)};
  if (h_spa.shape() != hshape || h_spe.shape() != hshape) {
    throw std::invalid_argument("fuse_entropy: entropy maps " + shape_str(h_spa.shape()) + "," +
                                shape_str(h_spe.shape()) + " incompatible with probs " + shape_str(p_spa.shape()));
  }
  const int n = p_spa.dim(0), c = p_spa.dim(1), hw = p_spa.dim(2) * p_spa.dim(3);
  Tensor out(p_spa.shape());
  for (int i = 0; i < n; ++i) {
    const float* ha = h_spa.data() + static_cast<std::size_t>(i) * hw;
    const float* hb = h_spe.data() + static_cast<std::size_t>(i) * hw;
    for (int k = 0; k < hw; ++k) {
      const double sum = static_cast<double>(ha[k]) + hb[k];
      double wa, wb;
      if (sum <= 0.0) {
        wa = wb = 0.5;  // both branches fully confident
      } else {
        wa = hb[k] / sum;
        wb = ha[k] / sum;
      }
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t idx = (static_cast<std::size_t>(i) * c + ch) * hw + k;
        out[idx] = static_cast<float>(wa * p_spa[idx] + wb * p_spe[idx]);
      }
    }
  }
  return out;
}

Tensor fuse_random(const Tensor& p1, const Tensor& p2, Rng& rng) {
  check_pair("fuse_random", p1, p2);
  std::vector<double> alphas(static_cast<std::size_t>(p1.dim(0)));
  for (double& a : alphas) a = rng.uniform();
  return fuse_random(p1, p2, alphas);
}

Tensor fuse_random(const Tensor& p1, const Tensor& p2, std::span<const double> alphas) {
  check_pair("fuse_random", p1, p2);
  const int n = p1.dim(0);
  if (alphas.size() != static_cast<std::size_t>(n)) {
    throw std::invalid_argument("fuse_random: need one alpha per batch item");
  }
  const std::size_t item = p1.size() / static_cast<std::size_t>(n);
  Tensor out(p1.shape());
  for (int i = 0; i < n; ++i) {
    const double a = alphas[static_cast<std::size_t>(i)];
    for (std::size_t k = 0; k < item; ++k) {
      const std::size_t idx = static_cast<std::size_t>(i) * item + k;
      out[idx] = static_cast<float>(a * p1[idx] + (1.0 - a) * p2[idx]);
    }
  }
  return out;
}

Tensor fuse_equal(const Tensor& p1, const Tensor& p2) {
  check_pair("fuse_equal", p1, p2);
  Tensor out(p1.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5f * (p1[i] + p2[i]);
  return out;
}

PseudoLabel pseudo_label(const Tensor& p) {
  check_prob_shape("pseudo_label", p);
  const int n = p.dim(0), c = p.dim(1), hw = p.dim(2) * p.dim(3);
  PseudoLabel out(Shape{n, p.dim(2), p.dim(3)});
  for (int i = 0; i < n; ++i) {
    const float* pp = p.data() + static_cast<std::size_t>(i) * c * hw;
    std::uint8_t* lp = out.v.data() + static_cast<std::size_t>(i) * hw;
    for (int k = 0; k < hw; ++k) {
      int best = 0;
      float bv = pp[k];
      for (int ch = 1; ch < c; ++ch) {
        if (pp[ch * hw + k] > bv) {
          bv = pp[ch * hw + k];
          best = ch;
        }
      }
      lp[k] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

}  // namespace s2me::fusion
