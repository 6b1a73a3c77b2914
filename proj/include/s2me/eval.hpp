#pragma once

#include <vector>

#include "s2me/tensor.hpp"

namespace s2me::eval {

struct ConfusionMetrics {
  double dsc = 0.0;
  double iou = 0.0;
  double precision = 0.0;
};

// Overlap metrics from the confusion counts. Empty/empty scores perfect;
// a single empty side scores zero overlap.
ConfusionMetrics confusion_metrics(const LabelMap& pred, const LabelMap& gt);

// Symmetric boundary Hausdorff distance at the given percentile (nearest
// rank), Euclidean pixel units. Boundaries are foreground pixels 4-adjacent
// to background or the image edge. One empty side yields the image
// diagonal.
double hausdorff(const LabelMap& pred, const LabelMap& gt, double percentile = 95.0);

struct SampleMetrics {
  double dsc = 0.0, iou = 0.0, precision = 0.0, hd = 0.0;
};

struct SplitMetrics {
  std::vector<SampleMetrics> per_sample;
  SampleMetrics mean;
  SampleMetrics stddev;
};

SplitMetrics aggregate(const std::vector<SampleMetrics>& per_sample);

// Mean ± stddev across per-seed means (the reporting shape of the result
// tables).
struct SeedAggregate {
  SampleMetrics mean;
  SampleMetrics stddev;
};
SeedAggregate across_seeds(const std::vector<SampleMetrics>& seed_means);

}  // namespace s2me::eval
