#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace s2me {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense N-dimensional float32 array, row-major. The universal value type:
// images, logits, probability maps, entropy maps, parameters all live here.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor full(Shape shape, float value);
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  const Shape& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& vec() { return data_; }
  const std::vector<float>& vec() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // N×C×H×W accessor (rank-4 only).
  float& at(int n, int c, int h, int w) {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  float at(int n, int c, int h, int w) const {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  void fill(float v);

 private:
  Shape shape_;
  std::vector<float> data_;
};

// Integer label map (N×H×W or H×W). Carries scribble annotations
// {0 = background, 1 = foreground, 2 = unlabeled} and pseudo labels {0, 1}.
struct LabelMap {
  Shape shape;
  std::vector<std::uint8_t> v;

  LabelMap() = default;
  explicit LabelMap(Shape s) : shape(std::move(s)), v(shape_numel(shape), 0) {}

  std::size_t size() const { return v.size(); }
  std::uint8_t& at(int n, int h, int w) {
    return v[(static_cast<std::size_t>(n) * shape[1] + h) * shape[2] + w];
  }
  std::uint8_t at(int n, int h, int w) const {
    return v[(static_cast<std::size_t>(n) * shape[1] + h) * shape[2] + w];
  }
  bool operator==(const LabelMap& o) const { return shape == o.shape && v == o.v; }
};

inline constexpr std::uint8_t kUnlabeled = 2;

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

// Deterministic RNG. The mt19937_64 engine sequence is pinned by the
// standard; the distributions are written out explicitly because the
// stdlib ones are implementation-defined and would break bit-level
// reproducibility across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // Independent stream for (seed, id); used to key samples/iterations so
  // parallel generation cannot reorder draws.
  static Rng derive(std::uint64_t seed, std::uint64_t stream) {
    return Rng(mix_seed(seed, stream));
  }

  std::uint64_t next_u64() { return eng_(); }
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int uniform_int(int lo, int hi);  // inclusive on both ends
  double normal();                  // standard normal, Box-Muller
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace s2me
