#include "s2me/selftest.hpp"

#include <cmath>
#include <functional>
#include <sstream>

#include "s2me/eval.hpp"
#include "s2me/fusion.hpp"
#include "s2me/losses.hpp"
#include "s2me/models.hpp"
#include "s2me/trainer.hpp"

namespace s2me::selftest {

namespace {

using ad::GradCheckOptions;
using ad::Parameter;
using ad::Var;

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

LabelMap random_labels(Shape shape, Rng& rng, int num_values) {
  LabelMap m(std::move(shape));
  for (auto& v : m.v) v = static_cast<std::uint8_t>(rng.uniform_int(0, num_values - 1));
  return m;
}

struct Suite {
  std::vector<CheckResult> results;
  const std::string& filter;

  void run(const std::string& name, const std::function<std::pair<bool, std::string>()>& body) {
    if (!filter.empty() && name.find(filter) == std::string::npos) return;
    CheckResult r;
    r.name = name;
    try {
      auto [ok, detail] = body();
      r.passed = ok;
      r.detail = detail;
    } catch (const std::exception& e) {
      r.passed = false;
      r.detail = std::string("exception: ") + e.what();
    }
    results.push_back(std::move(r));
  }

  // One operator, three shapes: the loss is a fixed random projection of the
  // op output so every output coordinate gets a generic upstream gradient.
  void grad_op(const std::string& name, const std::vector<std::function<std::pair<std::vector<Parameter>, std::function<Var(std::vector<Parameter>&)>>(Rng&)>>& cases,
               GradCheckOptions opts = {}) {
    run("grad/" + name, [&cases, opts]() -> std::pair<bool, std::string> {
      std::ostringstream detail;
      bool ok = true;
      int idx = 0;
      for (const auto& make : cases) {
        Rng rng(mix_seed(0x9ad, static_cast<std::uint64_t>(idx)));
        auto [params, fn] = make(rng);
        auto rep = ad::grad_check([&]() { return fn(params); }, params, opts);
        if (!rep.passed) {
          ok = false;
          detail << "shape case " << idx << ": " << rep.to_string() << "; ";
        }
        ++idx;
      }
      if (ok) detail << idx << " shape cases";
      return {ok, detail.str()};
    });
  }
};

using CaseFn = std::function<std::pair<std::vector<Parameter>, std::function<Var(std::vector<Parameter>&)>>(Rng&)>;

CaseFn unary_case(Shape shape, const std::function<Var(Var)>& op, double lo = -1.0, double hi = 1.0) {
  return [shape, op, lo, hi](Rng& rng) {
    std::vector<Parameter> params;
    params.emplace_back("x", random_tensor(shape, rng, lo, hi));
    Tensor w;
    auto fn = [op, &rng, w](std::vector<Parameter>& ps) mutable -> Var {
      Var out = op(ps[0].var);
      if (w.empty()) w = random_tensor(out.value().shape(), rng);
      return ops::dot(out, w);
    };
    return std::make_pair(std::move(params), std::function<Var(std::vector<Parameter>&)>(fn));
  };
}

CaseFn binary_case(Shape shape, const std::function<Var(Var, Var)>& op) {
  return [shape, op](Rng& rng) {
    std::vector<Parameter> params;
    params.emplace_back("a", random_tensor(shape, rng));
    params.emplace_back("b", random_tensor(shape, rng));
    Tensor w;
    auto fn = [op, &rng, w](std::vector<Parameter>& ps) mutable -> Var {
      Var out = op(ps[0].var, ps[1].var);
      if (w.empty()) w = random_tensor(out.value().shape(), rng);
      return ops::dot(out, w);
    };
    return std::make_pair(std::move(params), std::function<Var(std::vector<Parameter>&)>(fn));
  };
}

void add_grad_checks(Suite& s) {
  s.grad_op("add", {binary_case({2, 2, 3, 3}, ops::add), binary_case({1, 4, 2, 5}, ops::add),
                    binary_case({3, 2, 4, 4}, ops::add)});
  s.grad_op("sub", {binary_case({2, 2, 3, 3}, ops::sub), binary_case({1, 4, 2, 5}, ops::sub),
                    binary_case({3, 2, 4, 4}, ops::sub)});
  s.grad_op("mul", {binary_case({2, 2, 3, 3}, ops::mul), binary_case({1, 4, 2, 5}, ops::mul),
                    binary_case({3, 2, 4, 4}, ops::mul)});
  s.grad_op("scale", {unary_case({2, 2, 3, 3}, [](Var x) { return ops::scale(x, 1.7); }),
                      unary_case({1, 3, 4, 4}, [](Var x) { return ops::scale(x, -0.3); }),
                      unary_case({2, 1, 5, 2}, [](Var x) { return ops::scale(x, 0.01); })});
  s.grad_op("relu", {unary_case({2, 2, 3, 3}, [](Var x) { return ops::relu(x); }),
                     unary_case({1, 3, 4, 4}, [](Var x) { return ops::relu(x); }),
                     unary_case({2, 1, 5, 2}, [](Var x) { return ops::relu(x); })});
  s.grad_op("log", {unary_case({2, 2, 3, 3}, [](Var x) { return ops::log_clamped(x); }, 0.2, 2.0),
                    unary_case({1, 3, 4, 4}, [](Var x) { return ops::log_clamped(x); }, 0.2, 2.0),
                    unary_case({2, 1, 5, 2}, [](Var x) { return ops::log_clamped(x); }, 0.2, 2.0)});
  s.grad_op("sum_mean", {unary_case({2, 2, 3, 3}, [](Var x) { return ops::sum(x); }),
                         unary_case({1, 3, 4, 4}, [](Var x) { return ops::mean(x); }),
                         unary_case({2, 1, 5, 2}, [](Var x) { return ops::sum(x); })});
  s.grad_op("concat_slice",
            {binary_case({2, 2, 3, 3}, [](Var a, Var b) { return ops::concat_channels(a, b); }),
             unary_case({2, 4, 3, 3}, [](Var x) { return ops::slice_channels(x, 1, 3); }),
             binary_case({1, 3, 4, 4}, [](Var a, Var b) { return ops::slice_channels(ops::concat_channels(a, b), 2, 5); })});
  s.grad_op("maxpool2", {unary_case({1, 2, 4, 4}, [](Var x) { return ops::maxpool2(x); }, -2.0, 2.0),
                         unary_case({2, 3, 6, 4}, [](Var x) { return ops::maxpool2(x); }, -2.0, 2.0),
                         unary_case({1, 1, 8, 8}, [](Var x) { return ops::maxpool2(x); }, -2.0, 2.0)},
            GradCheckOptions{1e-3, 1e-3, 1e-4, 32, 0});
  s.grad_op("upsample_nearest2", {unary_case({1, 2, 3, 3}, [](Var x) { return ops::upsample_nearest2(x); }),
                                  unary_case({2, 1, 4, 2}, [](Var x) { return ops::upsample_nearest2(x); }),
                                  unary_case({1, 3, 5, 5}, [](Var x) { return ops::upsample_nearest2(x); })});
  s.grad_op("upsample_bilinear2", {unary_case({1, 2, 3, 3}, [](Var x) { return ops::upsample_bilinear2(x); }),
                                   unary_case({2, 1, 4, 2}, [](Var x) { return ops::upsample_bilinear2(x); }),
                                   unary_case({1, 3, 5, 5}, [](Var x) { return ops::upsample_bilinear2(x); })});
  s.grad_op("softmax_channels", {unary_case({1, 2, 3, 3}, [](Var x) { return ops::softmax_channels(x); }, -2.0, 2.0),
                                 unary_case({2, 3, 4, 4}, [](Var x) { return ops::softmax_channels(x); }, -2.0, 2.0),
                                 unary_case({1, 4, 2, 5}, [](Var x) { return ops::softmax_channels(x); }, -2.0, 2.0)});

  auto conv_case = [](Shape in, int cout, int k, int pad, int stride, bool bias) -> CaseFn {
    return [in, cout, k, pad, stride, bias](Rng& rng) {
      std::vector<Parameter> params;
      params.emplace_back("input", random_tensor(in, rng));
      params.emplace_back("weight", random_tensor({cout, in[1], k, k}, rng));
      if (bias) params.emplace_back("bias", random_tensor({cout}, rng));
      Tensor w;
      auto fn = [pad, stride, bias, &rng, w](std::vector<Parameter>& ps) mutable -> Var {
        Var out = ops::conv2d(ps[0].var, ps[1].var, bias ? ps[2].var : Var(), pad, stride);
        if (w.empty()) w = random_tensor(out.value().shape(), rng);
        return ops::dot(out, w);
      };
      return std::make_pair(std::move(params), std::function<Var(std::vector<Parameter>&)>(fn));
    };
  };
  s.grad_op("conv2d", {conv_case({1, 2, 5, 5}, 3, 3, 1, 1, true), conv_case({2, 2, 7, 7}, 2, 3, 1, 2, true),
                       conv_case({1, 3, 4, 6}, 4, 1, 0, 1, false)});

  auto norm_case = [](Shape in, bool batch, bool training) -> CaseFn {
    return [in, batch, training](Rng& rng) {
      std::vector<Parameter> params;
      params.emplace_back("x", random_tensor(in, rng));
      params.emplace_back("gamma", random_tensor({in[1]}, rng, 0.5, 1.5));
      params.emplace_back("beta", random_tensor({in[1]}, rng, -0.5, 0.5));
      auto stats = std::make_shared<ops::NormStats>();
      stats->running_mean = random_tensor({in[1]}, rng, -0.2, 0.2);
      stats->running_var = random_tensor({in[1]}, rng, 0.5, 1.5);
      Tensor w;
      auto fn = [batch, training, stats, &rng, w](std::vector<Parameter>& ps) mutable -> Var {
        ops::NormStats local = *stats;  // keep f pure under repeated calls
        Var out = batch ? ops::batch_norm(ps[0].var, ps[1].var, ps[2].var, &local, training)
                        : ops::instance_norm(ps[0].var, ps[1].var, ps[2].var);
        if (w.empty()) w = random_tensor(out.value().shape(), rng);
        return ops::dot(out, w);
      };
      return std::make_pair(std::move(params), std::function<Var(std::vector<Parameter>&)>(fn));
    };
  };
  s.grad_op("batch_norm",
            {norm_case({4, 2, 3, 3}, true, true), norm_case({2, 3, 4, 4}, true, true), norm_case({3, 2, 2, 5}, true, false)},
            GradCheckOptions{3e-3, 1e-3, 3e-4, 32, 0});
  s.grad_op("instance_norm",
            {norm_case({2, 2, 3, 5}, false, true), norm_case({1, 3, 4, 4}, false, true), norm_case({2, 1, 6, 3}, false, true)},
            GradCheckOptions{3e-3, 1e-3, 3e-4, 32, 0});

  s.grad_op("rfft2", {unary_case({1, 1, 4, 4},
                                 [](Var x) {
                                   auto sp = ops::rfft2(x);
                                   return ops::concat_channels(sp.real, sp.imag);
                                 }),
                      unary_case({2, 2, 3, 5},
                                 [](Var x) {
                                   auto sp = ops::rfft2(x);
                                   return ops::concat_channels(sp.real, sp.imag);
                                 }),
                      unary_case({1, 3, 8, 6},
                                 [](Var x) {
                                   auto sp = ops::rfft2(x);
                                   return ops::concat_channels(sp.real, sp.imag);
                                 })});
  auto irfft_case = [](Shape x_shape) -> CaseFn {
    return [x_shape](Rng& rng) {
      std::vector<Parameter> params;
      const int wh = fft::half_width(x_shape[3]);
      params.emplace_back("re", random_tensor({x_shape[0], x_shape[1], x_shape[2], wh}, rng));
      params.emplace_back("im", random_tensor({x_shape[0], x_shape[1], x_shape[2], wh}, rng));
      const int out_w = x_shape[3];
      Tensor w;
      auto fn = [out_w, &rng, w](std::vector<Parameter>& ps) mutable -> Var {
        Var out = ops::irfft2({ps[0].var, ps[1].var}, out_w);
        if (w.empty()) w = random_tensor(out.value().shape(), rng);
        return ops::dot(out, w);
      };
      return std::make_pair(std::move(params), std::function<Var(std::vector<Parameter>&)>(fn));
    };
  };
  s.grad_op("irfft2", {irfft_case({1, 1, 4, 4}), irfft_case({2, 2, 3, 5}), irfft_case({1, 3, 8, 6})});

  auto ce_case = [](Shape logits_shape, bool with_ignore) -> CaseFn {
    return [logits_shape, with_ignore](Rng& rng) {
      std::vector<Parameter> params;
      params.emplace_back("logits", random_tensor(logits_shape, rng, -2.0, 2.0));
      auto labels = std::make_shared<LabelMap>(
          random_labels({logits_shape[0], logits_shape[2], logits_shape[3]}, rng, with_ignore ? 3 : 2));
      auto fn = [labels, with_ignore](std::vector<Parameter>& ps) -> Var {
        return ops::cross_entropy_masked(ps[0].var, *labels,
                                         with_ignore ? std::optional<std::uint8_t>(kUnlabeled) : std::nullopt);
      };
      return std::make_pair(std::move(params), std::function<Var(std::vector<Parameter>&)>(fn));
    };
  };
  s.grad_op("cross_entropy", {ce_case({1, 2, 4, 4}, false), ce_case({2, 2, 3, 5}, true), ce_case({1, 2, 6, 6}, true)});

  auto dice_case = [](Shape logits_shape) -> CaseFn {
    return [logits_shape](Rng& rng) {
      std::vector<Parameter> params;
      params.emplace_back("logits", random_tensor(logits_shape, rng, -1.5, 1.5));
      auto labels = std::make_shared<LabelMap>(random_labels({logits_shape[0], logits_shape[2], logits_shape[3]}, rng, 2));
      auto fn = [labels](std::vector<Parameter>& ps) -> Var {
        return ops::dice_vs_label(ops::softmax_channels(ps[0].var), *labels);
      };
      return std::make_pair(std::move(params), std::function<Var(std::vector<Parameter>&)>(fn));
    };
  };
  s.grad_op("dice", {dice_case({1, 2, 4, 4}), dice_case({2, 2, 3, 5}), dice_case({1, 2, 6, 6})});

  auto ffc_case = [](int channels, int hw) -> CaseFn {
    return [channels, hw](Rng& rng) {
      auto block = std::make_shared<models::FfcBlock>(
          models::build_ffc_block({channels, 0.5}, models::NormKind::Batch, rng.next_u64()));
      std::vector<Parameter> params;
      params.emplace_back("x", random_tensor({1, channels, hw, hw}, rng));
      params.push_back(block->local.w);
      params.push_back(block->spectral.w);
      params.push_back(block->norm.gamma);
      Tensor w;
      auto fn = [block, &rng, w](std::vector<Parameter>& ps) mutable -> Var {
        Var out = models::ffc_forward(ps[0].var, *block, /*training=*/true);
        if (w.empty()) w = random_tensor(out.value().shape(), rng);
        return ops::dot(out, w);
      };
      return std::make_pair(std::move(params), std::function<Var(std::vector<Parameter>&)>(fn));
    };
  };
  s.grad_op("ffc_block", {ffc_case(4, 4), ffc_case(6, 8), ffc_case(4, 6)},
            GradCheckOptions{3e-3, 1e-3, 3e-4, 24, 0});

  // full hybrid objective through both branches on a 1×3×16×16 input
  s.run("grad/hybrid_end_to_end", []() -> std::pair<bool, std::string> {
    Rng rng(0x42);
    models::ModelConfig mc;
    mc.base_width = 4;
    mc.depth = 2;
    mc.seed = 7;
    mc.kind = models::ModelKind::Unet;
    auto spa = std::make_shared<models::BranchModel>(models::build_model(mc));
    mc.kind = models::ModelKind::Ynet;
    mc.seed = 8;
    auto spe = std::make_shared<models::BranchModel>(models::build_model(mc));
    auto x = std::make_shared<Tensor>(random_tensor({1, 3, 16, 16}, rng, 0.0, 1.0));
    auto scrib = std::make_shared<LabelMap>(random_labels({1, 16, 16}, rng, 3));

    // random subsample of both branches' parameters
    std::vector<Parameter> probe;
    auto pick = [&rng, &probe](std::span<Parameter> ps, int count) {
      for (int i = 0; i < count; ++i) {
        probe.push_back(ps[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(ps.size()) - 1))]);
      }
    };
    pick(spa->params(), 3);
    pick(spe->params(), 3);

    // The pseudo labels are detached supervision: they are held at their
    // unperturbed values so the finite differences probe the differentiable
    // path rather than label-flip discontinuities.
    auto frozen = std::make_shared<fusion::DualPrediction>();
    {
      Var l_spa = spa->forward(*x, /*training=*/true);
      Var l_spe = spe->forward(*x, /*training=*/true);
      *frozen = losses::hybrid_loss(l_spa, l_spe, *scrib, {1.0, 1.0}).preds;
    }
    auto fn = [spa, spe, x, scrib, frozen]() -> Var {
      Var l_spa = spa->forward(*x, /*training=*/true);
      Var l_spe = spe->forward(*x, /*training=*/true);
      Var p_spa = ops::softmax_channels(l_spa);
      Var p_spe = ops::softmax_channels(l_spe);
      Var scrib_term = ops::add(losses::partial_cross_entropy(l_spa, *scrib),
                                losses::partial_cross_entropy(l_spe, *scrib));
      Var mt = losses::mutual_teaching_loss(l_spa, p_spa, l_spe, p_spe, frozen->y_spa, frozen->y_spe);
      Var el = losses::ensemble_loss(l_spa, p_spa, l_spe, p_spe, frozen->y_fused);
      return ops::add(scrib_term, ops::add(ops::scale(mt, 1.0), ops::scale(el, 1.0)));
    };
    GradCheckOptions opts;
    opts.eps = 5e-3;
    opts.max_coords_per_param = 8;
    opts.atol = 3e-4;
    auto all = ad::grad_check(fn, probe, opts);
    return {all.passed, all.to_string()};
  });
}

void add_fft_checks(Suite& s) {
  s.run("fft/roundtrip", []() -> std::pair<bool, std::string> {
    Rng rng(0xf17);
    double worst = 0.0;
    for (int h = 2; h <= 16; ++h) {
      for (int w = 2; w <= 16; ++w) {
        Tensor x = random_tensor({1, 1, h, w}, rng);
        Tensor y = fft::irfft2(fft::rfft2(x), w);
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
          num += (y[i] - x[i]) * (y[i] - x[i]);
          den += x[i] * x[i];
        }
        worst = std::max(worst, std::sqrt(num / std::max(den, 1e-30)));
      }
    }
    return {worst < 1e-4, "worst relative roundtrip error " + std::to_string(worst)};
  });
  s.run("fft/parseval", []() -> std::pair<bool, std::string> {
    Rng rng(0xf18);
    double worst = 0.0;
    for (int h = 2; h <= 16; ++h) {
      for (int w = 2; w <= 16; ++w) {
        Tensor x = random_tensor({1, 1, h, w}, rng);
        fft::ComplexSpectrum sp = fft::rfft2(x);
        const int wh = fft::half_width(w);
        double spec = 0.0, spat = 0.0;
        for (int r = 0; r < h; ++r) {
          for (int k = 0; k < wh; ++k) {
            const std::size_t i = static_cast<std::size_t>(r) * wh + k;
            spec += fft::column_multiplicity(k, w) *
                    (static_cast<double>(sp.real[i]) * sp.real[i] + static_cast<double>(sp.imag[i]) * sp.imag[i]);
          }
        }
        for (std::size_t i = 0; i < x.size(); ++i) spat += static_cast<double>(x[i]) * x[i];
        worst = std::max(worst, std::abs(spec - h * w * spat) / std::max(h * w * spat, 1e-30));
      }
    }
    return {worst < 1e-4, "worst Parseval mismatch " + std::to_string(worst)};
  });
  s.run("fft/spectrum_roundtrip", []() -> std::pair<bool, std::string> {
    Rng rng(0xf19);
    double worst = 0.0;
    for (int h : {3, 4, 8}) {
      for (int w : {5, 6, 8}) {
        fft::ComplexSpectrum sp = fft::rfft2(random_tensor({1, 2, h, w}, rng));
        fft::ComplexSpectrum back = fft::rfft2(fft::irfft2(sp, w));
        for (std::size_t i = 0; i < sp.real.size(); ++i) {
          worst = std::max(worst, static_cast<double>(std::abs(back.real[i] - sp.real[i])));
          worst = std::max(worst, static_cast<double>(std::abs(back.imag[i] - sp.imag[i])));
        }
      }
    }
    return {worst < 1e-3, "worst spectrum roundtrip deviation " + std::to_string(worst)};
  });
}

void add_fusion_checks(Suite& s) {
  s.run("fusion/algebra", []() -> std::pair<bool, std::string> {
    Rng rng(0xfa1);
    const int cases = 10000;
    Tensor p1({cases, 2, 1, 1}), p2({cases, 2, 1, 1});
    for (int i = 0; i < cases; ++i) {
      const float a = static_cast<float>(rng.uniform(0.0, 1.0));
      const float b = static_cast<float>(rng.uniform(0.0, 1.0));
      p1.at(i, 0, 0, 0) = a;
      p1.at(i, 1, 0, 0) = 1.0f - a;
      p2.at(i, 0, 0, 0) = b;
      p2.at(i, 1, 0, 0) = 1.0f - b;
    }
    Tensor h1 = fusion::entropy_map(p1);
    Tensor h2 = fusion::entropy_map(p2);
    Tensor fused = fusion::fuse_entropy(p1, p2, h1, h2);
    Tensor swapped = fusion::fuse_entropy(p2, p1, h2, h1);
    double worst_sum = 0.0;
    for (int i = 0; i < cases; ++i) {
      const double hs = static_cast<double>(h1[static_cast<std::size_t>(i)]) + h2[static_cast<std::size_t>(i)];
      if (hs > 0) {
        const double w1 = h2[static_cast<std::size_t>(i)] / hs;
        const double w2 = h1[static_cast<std::size_t>(i)] / hs;
        worst_sum = std::max(worst_sum, std::abs(w1 + w2 - 1.0));
      }
      for (int c = 0; c < 2; ++c) {
        if (fused.at(i, c, 0, 0) != swapped.at(i, c, 0, 0)) {
          return {false, "swap symmetry broken at case " + std::to_string(i)};
        }
        const float lo = std::min(p1.at(i, c, 0, 0), p2.at(i, c, 0, 0));
        const float hi = std::max(p1.at(i, c, 0, 0), p2.at(i, c, 0, 0));
        if (fused.at(i, c, 0, 0) < lo - 1e-6f || fused.at(i, c, 0, 0) > hi + 1e-6f) {
          return {false, "fused value escapes the [min, max] envelope at case " + std::to_string(i)};
        }
      }
    }
    if (worst_sum > 1e-6) return {false, "weights sum deviates by " + std::to_string(worst_sum)};

    // equal entropies → arithmetic mean
    Tensor mean = fusion::fuse_entropy(p1, p2, h1, h1);
    Tensor eq = fusion::fuse_equal(p1, p2);
    for (std::size_t i = 0; i < mean.size(); ++i) {
      if (std::abs(mean[i] - eq[i]) > 1e-6f) return {false, "equal-entropy fusion is not the mean"};
    }
    // a zero-entropy branch is taken verbatim
    Tensor onehot({1, 2, 1, 1});
    onehot[0] = 1.0f;
    onehot[1] = 0.0f;
    Tensor soft({1, 2, 1, 1});
    soft[0] = 0.3f;
    soft[1] = 0.7f;
    Tensor f2 = fusion::fuse_entropy(onehot, soft, fusion::entropy_map(onehot), fusion::entropy_map(soft));
    if (f2[0] != 1.0f || f2[1] != 0.0f) return {false, "confident branch is not reproduced exactly"};
    return {true, "10000 cases"};
  });

  s.run("fusion/oracle_cases", []() -> std::pair<bool, std::string> {
    // constructed pixels: one branch confident and correct, the other
    // near-uniform with a random lean
    Rng rng(0xfa2);
    int n = 0;
    double acc_entropy = 0.0, acc_equal = 0.0, acc_random = 0.0;
    for (double conf : {0.75, 0.85, 0.95, 0.99}) {
      for (double lean : {0.40, 0.45, 0.48, 0.52, 0.55, 0.60}) {
        for (int truth = 0; truth < 2; ++truth) {
          for (int which = 0; which < 2; ++which) {
            Tensor pc({1, 2, 1, 1}), pu({1, 2, 1, 1});
            pc[static_cast<std::size_t>(truth)] = static_cast<float>(conf);
            pc[static_cast<std::size_t>(1 - truth)] = static_cast<float>(1.0 - conf);
            pu[static_cast<std::size_t>(truth)] = static_cast<float>(lean);
            pu[static_cast<std::size_t>(1 - truth)] = static_cast<float>(1.0 - lean);
            const Tensor& p1 = which == 0 ? pc : pu;
            const Tensor& p2 = which == 0 ? pu : pc;
            Tensor h1 = fusion::entropy_map(p1);
            Tensor h2 = fusion::entropy_map(p2);
            auto correct = [truth](const Tensor& p) {
              return fusion::pseudo_label(p).v[0] == static_cast<std::uint8_t>(truth) ? 1.0 : 0.0;
            };
            acc_entropy += correct(fusion::fuse_entropy(p1, p2, h1, h2));
            acc_equal += correct(fusion::fuse_equal(p1, p2));
            // expected accuracy of image-level random mixing, exact in α
            const double m1 = 2.0 * p1[static_cast<std::size_t>(truth)] - 1.0;
            const double m2 = 2.0 * p2[static_cast<std::size_t>(truth)] - 1.0;
            if (m1 > 0 && m2 > 0) {
              acc_random += 1.0;
            } else if (m1 < 0 && m2 < 0) {
              acc_random += 0.0;
            } else {
              const double hi = std::max(m1, m2), lo = std::min(m1, m2);
              acc_random += hi / (hi - lo);
            }
            ++n;
          }
        }
      }
    }
    acc_entropy /= n;
    acc_equal /= n;
    acc_random /= n;
    std::ostringstream os;
    os << "accuracy entropy=" << acc_entropy << " equal=" << acc_equal << " random=" << acc_random << " over " << n
       << " cases";
    const bool ok = acc_entropy >= acc_equal && acc_entropy >= acc_random;
    return {ok, os.str()};
  });
}

void add_loss_checks(Suite& s) {
  s.run("losses/hand_values", []() -> std::pair<bool, std::string> {
    std::ostringstream os;
    bool ok = true;
    auto expect = [&ok, &os](const char* what, double got, double want, double tol) {
      if (std::abs(got - want) > tol) {
        ok = false;
        os << what << ": got " << got << " want " << want << "; ";
      }
    };

    // one labeled pixel, y = 1, logits (0, 0)
    {
      Var logits(Tensor({1, 2, 1, 1}), false);
      LabelMap scrib(Shape{1, 1, 1});
      scrib.v[0] = 1;
      expect("pce_ln2", losses::partial_cross_entropy(logits, scrib).scalar(), std::log(2.0), 1e-5);
    }
    // two pixels with p(correct) = 0.9 and 0.5
    {
      Tensor l({1, 2, 1, 2});
      l.at(0, 0, 0, 0) = std::log(0.9f);
      l.at(0, 1, 0, 0) = std::log(0.1f);
      l.at(0, 0, 0, 1) = 0.0f;
      l.at(0, 1, 0, 1) = 0.0f;
      LabelMap t(Shape{1, 1, 2});
      t.v = {0, 1};
      const double want = (-std::log(0.9) - std::log(0.5)) / 2.0;
      expect("ce_two_pixel", losses::cross_entropy(Var(l, false), t).scalar(), want, 1e-5);
    }
    // four pixels, uniform foreground probability 0.5
    {
      Tensor p({1, 2, 1, 4});
      for (int i = 0; i < 4; ++i) {
        p.at(0, 0, 0, i) = 0.5f;
        p.at(0, 1, 0, i) = 0.5f;
      }
      LabelMap t(Shape{1, 1, 4});
      t.v = {1, 1, 0, 0};
      expect("dice_half", losses::dice_loss(Var(p, false), t).scalar(), 0.5, 1e-5);
    }
    // composed hybrid objective on a single pixel, weights (5, 5)
    {
      Tensor la({1, 2, 1, 1});
      la.at(0, 0, 0, 0) = std::log(0.9f);
      la.at(0, 1, 0, 0) = std::log(0.1f);
      Tensor lb({1, 2, 1, 1});  // zeros → p = (0.5, 0.5)
      LabelMap scrib(Shape{1, 1, 1});
      scrib.v[0] = 1;
      auto hl = losses::hybrid_loss(Var(la, false), Var(lb, false), scrib, {5.0, 5.0});

      const double eps_d = 1e-5;
      const double p_spa0 = 0.9, p_spe0 = 0.5;
      const double scrib_want = -std::log(0.1) + std::log(2.0);
      auto dice_single = [eps_d](double p0) {
        const double c0 = (2.0 * p0 + eps_d) / (p0 + 1.0 + eps_d);
        const double c1 = (0.0 + eps_d) / ((1.0 - p0) + 0.0 + eps_d);
        return 1.0 - 0.5 * (c0 + c1);
      };
      // every pseudo label is class 0 here (0.9 wins; 0.5/0.5 ties toward 0)
      const double mt_want = -std::log(p_spa0) + dice_single(p_spa0) - std::log(p_spe0) + dice_single(p_spe0);
      const double el_want = mt_want;
      const double total_want = scrib_want + 5.0 * mt_want + 5.0 * el_want;
      expect("hybrid_scrib", hl.scrib, scrib_want, 1e-5);
      expect("hybrid_mt", hl.mt, mt_want, 1e-5);
      expect("hybrid_el", hl.el, el_want, 1e-5);
      expect("hybrid_total", hl.total.scalar(), total_want, 1e-5);
    }
    if (ok) os << "pce/ce/dice/hybrid hand values match";
    return {ok, os.str()};
  });

  s.run("losses/pce_masking", []() -> std::pair<bool, std::string> {
    Rng rng(0x9ce);
    for (int trial = 0; trial < 100; ++trial) {
      const int h = 3 + trial % 4, w = 2 + trial % 5;
      Parameter logits("logits", random_tensor({1, 2, h, w}, rng, -2.0, 2.0));
      LabelMap scrib = random_labels({1, h, w}, rng, 3);
      ad::zero_grad(std::span(&logits, 1));
      Var loss = losses::partial_cross_entropy(logits.var, scrib);
      ad::backward(loss);
      const Tensor& g = logits.var.grad();
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          if (scrib.at(0, y, x) == kUnlabeled) {
            for (int c = 0; c < 2; ++c) {
              if (g.at(0, c, y, x) != 0.0f) {
                return {false, "nonzero gradient at unlabeled pixel in trial " + std::to_string(trial)};
              }
            }
          }
        }
      }
    }
    return {true, "100 random samples, unlabeled-pixel gradients exactly zero"};
  });
}

void add_schedule_checks(Suite& s) {
  s.run("schedules/poly_lr", []() -> std::pair<bool, std::string> {
    std::ostringstream os;
    bool ok = true;
    const double v0 = trainer::poly_lr(0, 30000, 0.03, 0.9);
    const double vh = trainer::poly_lr(15000, 30000, 0.03, 0.9);
    const double v1 = trainer::poly_lr(30000, 30000, 0.03, 0.9);
    if (std::abs(v0 - 0.03) > 1e-6) { ok = false; os << "lr(0)=" << v0 << "; "; }
    if (std::abs(vh - 0.03 * std::pow(0.5, 0.9)) > 1e-6) { ok = false; os << "lr(half)=" << vh << "; "; }
    if (std::abs(v1) > 1e-6) { ok = false; os << "lr(max)=" << v1 << "; "; }
    if (ok) os << "endpoints and midpoint match";
    return {ok, os.str()};
  });
  s.run("schedules/lambda_rampup", []() -> std::pair<bool, std::string> {
    std::ostringstream os;
    bool ok = true;
    if (std::abs(losses::lambda_rampup(25000, 25000, 5.0) - 5.0) > 1e-9) { ok = false; os << "λ(T) != λ_max; "; }
    if (std::abs(losses::lambda_rampup(0, 25000, 5.0) - 5.0 * std::exp(-5.0)) > 1e-9) { ok = false; os << "λ(0) off; "; }
    if (std::abs(losses::lambda_rampup(50000, 25000, 5.0) - 5.0) > 1e-12) { ok = false; os << "plateau off; "; }
    double prev = -1.0;
    for (int i = 0; i <= 100; ++i) {
      const double t = losses::lambda_rampup(i * 500, 25000, 5.0);
      if (t + 1e-12 < prev) { ok = false; os << "not monotone at sample " << i << "; "; }
      prev = t;
    }
    if (ok) os << "ramp endpoints and monotonicity hold";
    return {ok, os.str()};
  });
}

void add_metric_checks(Suite& s) {
  s.run("metrics/confusion_worked_example", []() -> std::pair<bool, std::string> {
    LabelMap pred(Shape{1, 4, 4}), gt(Shape{1, 4, 4});
    // gt: 8 pixels; pred: 4 inside, 4 outside
    for (int i = 0; i < 8; ++i) gt.v[static_cast<std::size_t>(i)] = 1;
    for (int i = 0; i < 4; ++i) pred.v[static_cast<std::size_t>(i)] = 1;
    for (int i = 8; i < 12; ++i) pred.v[static_cast<std::size_t>(i)] = 1;
    const auto m = eval::confusion_metrics(pred, gt);
    const bool ok = m.dsc == 0.5 && std::abs(m.iou - 1.0 / 3.0) < 1e-12 && m.precision == 0.5;
    return {ok, "dsc=" + std::to_string(m.dsc) + " iou=" + std::to_string(m.iou) + " prec=" + std::to_string(m.precision)};
  });
  s.run("metrics/dsc_iou_identity", []() -> std::pair<bool, std::string> {
    Rng rng(0x3e7);
    for (int t = 0; t < 200; ++t) {
      LabelMap pred = random_labels({1, 6, 6}, rng, 2);
      LabelMap gt = random_labels({1, 6, 6}, rng, 2);
      const auto m = eval::confusion_metrics(pred, gt);
      if (m.iou > 0 || m.dsc > 0) {
        if (std::abs(m.dsc - 2.0 * m.iou / (1.0 + m.iou)) > 1e-9) {
          return {false, "identity broken at trial " + std::to_string(t)};
        }
      }
    }
    return {true, "dsc = 2·iou/(1+iou) over 200 random maps"};
  });
  s.run("metrics/hausdorff_oracle", []() -> std::pair<bool, std::string> {
    Rng rng(0x3e8);
    // brute force over the point sets themselves; with ≤6 scattered pixels
    // every foreground pixel is its own boundary
    auto oracle = [](const LabelMap& a, const LabelMap& b) {
      std::vector<std::pair<int, int>> pa, pb;
      const int h = a.shape[1], w = a.shape[2];
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          if (a.at(0, y, x)) pa.emplace_back(y, x);
          if (b.at(0, y, x)) pb.emplace_back(y, x);
        }
      }
      auto dir = [](const auto& from, const auto& to) {
        double worst = 0.0;
        for (auto& f : from) {
          double best = 1e300;
          for (auto& t : to) {
            const double dy = f.first - t.first, dx = f.second - t.second;
            best = std::min(best, dy * dy + dx * dx);
          }
          worst = std::max(worst, best);
        }
        return std::sqrt(worst);
      };
      return std::max(dir(pa, pb), dir(pb, pa));
    };
    // exhaustive one- and two-pixel sets on a 5×5 grid
    std::vector<LabelMap> sets;
    for (int i = 0; i < 25; ++i) {
      LabelMap m(Shape{1, 5, 5});
      m.v[static_cast<std::size_t>(i)] = 1;
      sets.push_back(m);
    }
    for (int i = 0; i < 25; ++i) {
      for (int j = i + 1; j < 25; ++j) {
        LabelMap m(Shape{1, 5, 5});
        m.v[static_cast<std::size_t>(i)] = 1;
        m.v[static_cast<std::size_t>(j)] = 1;
        sets.push_back(m);
      }
    }
    for (std::size_t a = 0; a < sets.size(); a += 7) {
      for (std::size_t b = 0; b < sets.size(); b += 11) {
        const double got = eval::hausdorff(sets[a], sets[b], 100.0);
        const double want = oracle(sets[a], sets[b]);
        if (std::abs(got - want) > 1e-9) return {false, "exhaustive pair mismatch"};
      }
    }
    // random sparse instances up to 12×12 with ≤6 pixels per set
    for (int t = 0; t < 2000; ++t) {
      const int h = rng.uniform_int(2, 12), w = rng.uniform_int(2, 12);
      LabelMap a(Shape{1, h, w}), b(Shape{1, h, w});
      const int na = rng.uniform_int(1, 6), nb = rng.uniform_int(1, 6);
      for (int i = 0; i < na; ++i) a.v[static_cast<std::size_t>(rng.uniform_int(0, h * w - 1))] = 1;
      for (int i = 0; i < nb; ++i) b.v[static_cast<std::size_t>(rng.uniform_int(0, h * w - 1))] = 1;
      const double got = eval::hausdorff(a, b, 100.0);
      const double want = oracle(a, b);
      if (std::abs(got - want) > 1e-9) return {false, "random instance mismatch at trial " + std::to_string(t)};
    }
    return {true, "exhaustive 5×5 pairs plus 2000 random sparse instances"};
  });
}

}  // namespace

std::vector<CheckResult> run_checks(const std::string& filter) {
  Suite s{{}, filter};
  add_grad_checks(s);
  add_fft_checks(s);
  add_fusion_checks(s);
  add_loss_checks(s);
  add_schedule_checks(s);
  add_metric_checks(s);
  return std::move(s.results);
}

bool all_passed(const std::vector<CheckResult>& results) {
  for (const auto& r : results) {
    if (!r.passed) return false;
  }
  return true;
}

}  // namespace s2me::selftest
