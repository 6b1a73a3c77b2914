#include "s2me/eval.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace s2me::eval {

namespace {

void check_pair(const LabelMap& pred, const LabelMap& gt) {
  if (pred.shape != gt.shape) {
    throw std::invalid_argument("metrics: shape mismatch between prediction and ground truth");
  }
  for (std::uint8_t v : pred.v) {
    if (v > 1) throw std::invalid_argument("metrics: prediction must be binary");
  }
  for (std::uint8_t v : gt.v) {
    if (v > 1) throw std::invalid_argument("metrics: ground truth must be binary");
  }
}

std::vector<std::pair<int, int>> boundary(const LabelMap& m) {
  const int h = m.shape[m.shape.size() - 2], w = m.shape.back();
  std::vector<std::pair<int, int>> out;
  auto fg = [&](int y, int x) { return m.v[static_cast<std::size_t>(y) * w + x] != 0; };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!fg(y, x)) continue;
      if (y == 0 || x == 0 || y == h - 1 || x == w - 1 || !fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) ||
          !fg(y, x + 1)) {
        out.emplace_back(y, x);
      }
    }
  }
  return out;
}

// Nearest-rank percentile of the directed nearest-neighbour distances.
double directed_percentile(const std::vector<std::pair<int, int>>& from, const std::vector<std::pair<int, int>>& to,
                           double percentile) {
  std::vector<double> d;
  d.reserve(from.size());
  for (const auto& [ay, ax] : from) {
    double best = 1e300;
    for (const auto& [by, bx] : to) {
      const double dy = ay - by, dx = ax - bx;
      best = std::min(best, dy * dy + dx * dx);
    }
    d.push_back(std::sqrt(best));
  }
  std::sort(d.begin(), d.end());
  const std::size_t rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * static_cast<double>(d.size())));
  return d[std::min(d.size() - 1, std::max<std::size_t>(rank, 1) - 1)];
}

}  // namespace

ConfusionMetrics confusion_metrics(const LabelMap& pred, const LabelMap& gt) {
  check_pair(pred, gt);
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.v.size(); ++i) {
    tp += pred.v[i] && gt.v[i];
    fp += pred.v[i] && !gt.v[i];
    fn += !pred.v[i] && gt.v[i];
  }
  ConfusionMetrics m;
  if (tp + fp + fn == 0) {
    m.dsc = m.iou = m.precision = 1.0;  // both empty: perfect agreement
    return m;
  }
  m.dsc = 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
  m.iou = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
  m.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  return m;
}

double hausdorff(const LabelMap& pred, const LabelMap& gt, double percentile) {
  check_pair(pred, gt);
  if (!(percentile > 0.0 && percentile <= 100.0)) {
    throw std::invalid_argument("hausdorff: percentile must lie in (0, 100]");
  }
  const auto bp = boundary(pred);
  const auto bg = boundary(gt);
  const int h = pred.shape[pred.shape.size() - 2], w = pred.shape.back();
  if (bp.empty() && bg.empty()) return 0.0;
  if (bp.empty() || bg.empty()) {
    return std::sqrt(static_cast<double>(h - 1) * (h - 1) + static_cast<double>(w - 1) * (w - 1));
  }
  return std::max(directed_percentile(bp, bg, percentile), directed_percentile(bg, bp, percentile));
}

namespace {

SampleMetrics apply2(const std::vector<SampleMetrics>& xs, bool stddev, const SampleMetrics& mean) {
  SampleMetrics out;
  if (xs.empty()) return out;
  for (const auto& x : xs) {
    auto acc = [&](double SampleMetrics::*f) {
      if (!stddev) {
        out.*f += x.*f;
      } else {
        const double d = x.*f - mean.*f;
        out.*f += d * d;
      }
    };
    acc(&SampleMetrics::dsc);
    acc(&SampleMetrics::iou);
    acc(&SampleMetrics::precision);
    acc(&SampleMetrics::hd);
  }
  const double n = static_cast<double>(xs.size());
  for (auto f : {&SampleMetrics::dsc, &SampleMetrics::iou, &SampleMetrics::precision, &SampleMetrics::hd}) {
    out.*f = stddev ? std::sqrt(out.*f / n) : out.*f / n;
  }
  return out;
}

}  // namespace

SplitMetrics aggregate(const std::vector<SampleMetrics>& per_sample) {
  SplitMetrics out;
  out.per_sample = per_sample;
  out.mean = apply2(per_sample, false, {});
  out.stddev = apply2(per_sample, true, out.mean);
  return out;
}

SeedAggregate across_seeds(const std::vector<SampleMetrics>& seed_means) {
  SeedAggregate out;
  out.mean = apply2(seed_means, false, {});
  out.stddev = apply2(seed_means, true, out.mean);
  return out;
}

}  // namespace s2me::eval
