#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "s2me/tensor.hpp"

namespace s2me::data {

// One annotated image: dense ground truth plus its sparse scribbles.
// Scribble labels agree with the mask wherever they are placed.
struct Sample {
  Tensor image;       // 3×H×W, values in [0, 1]
  LabelMap mask;      // 1×H×W, {0, 1}
  LabelMap scribble;  // 1×H×W, {0, 1, 2}
  bool fg_missing = false;
};

struct GenConfig {
  int size = 64;
  int n_train = 200;
  int n_val = 50;
  int n_test = 50;
  std::uint64_t seed = 1;
  double max_scribble_fraction = 0.05;
};

struct Manifest {
  int size = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> train, val, test;
  std::vector<std::string> flagged;  // samples without a foreground scribble
  double fg_fraction_mean = 0.0;
  double labeled_fraction_mean = 0.0;

  const std::vector<std::string>& split(const std::string& name) const;
};

// In-memory generation; deterministic in (seed, id).
Sample generate_sample(int size, std::uint64_t seed, std::uint64_t id);

// Skeleton random walk inside the foreground plus a background walk kept
// ≥ 3 px away from the foreground, everything else unlabeled.
LabelMap generate_scribbles(const LabelMap& mask, Rng& rng, double max_fraction = 0.05,
                            bool* fg_missing = nullptr);

// Writes manifest.json plus one S2TF file per sample into dir.
Manifest generate_synthetic_dataset(const std::string& dir, const GenConfig& cfg);

Manifest read_manifest(const std::string& dir);
void write_manifest(const std::string& dir, const Manifest& m);

// Border crop of up to crop_max px per side, resize to out_size (bilinear
// image, nearest labels), then independent horizontal/vertical flips.
Sample augment(const Sample& s, Rng& rng, int crop_max, int out_size, double flip_p);

enum class CorruptionKind { Blur, Specular, BrightnessShift };
CorruptionKind corruption_from_name(const std::string& name);
// Image-only perturbation; mask and scribble pass through untouched.
Sample corrupt(const Sample& s, CorruptionKind kind, int severity, Rng& rng);

// Plain-tensor resampling shared with the ops-level upsamplers' conventions
// (half-pixel centers).
Tensor resize_bilinear(const Tensor& chw, int out_h, int out_w);
LabelMap resize_nearest(const LabelMap& map, int out_h, int out_w);

// --- S2TF tensor container ---
// "S2TF" magic, u16 version, u32 entry count; per entry: u16 name length,
// UTF-8 name, u8 rank, u32 extents, f32 little-endian payload.
void tensor_file_write(const std::string& path, const std::vector<std::pair<std::string, Tensor>>& entries);
std::vector<std::pair<std::string, Tensor>> tensor_file_read(const std::string& path);

void write_sample(const std::string& path, const Sample& s);
Sample read_sample(const std::string& path);
std::vector<Sample> load_split(const std::string& dir, const Manifest& m, const std::string& split);

// Batched views for the trainer.
struct Batch {
  Tensor images;      // N×3×H×W
  LabelMap masks;     // N×H×W
  LabelMap scribbles; // N×H×W
};
Batch make_batch(const std::vector<Sample>& pool, const std::vector<int>& indices);

double foreground_fraction(const LabelMap& mask);
double labeled_fraction(const LabelMap& scribble);

}  // namespace s2me::data
