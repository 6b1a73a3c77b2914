#include "s2me/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <set>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace s2me::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Grid {
  int h = 0, w = 0;
  std::vector<std::uint8_t> v;
  std::uint8_t at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
  std::uint8_t& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
};

Grid mask_to_grid(const LabelMap& m) {
  Grid g;
  g.h = m.shape[m.shape.size() - 2];
  g.w = m.shape.back();
  g.v = m.v;
  return g;
}

// Largest 8-connected foreground component.
Grid largest_component(const Grid& g) {
  Grid out{g.h, g.w, std::vector<std::uint8_t>(g.v.size(), 0)};
  std::vector<int> comp(g.v.size(), -1);
  int best_id = -1;
  std::size_t best_size = 0;
  int next = 0;
  std::vector<std::size_t> stack;
  for (std::size_t s = 0; s < g.v.size(); ++s) {
    if (!g.v[s] || comp[s] >= 0) continue;
    std::size_t size = 0;
    stack.assign(1, s);
    comp[s] = next;
    while (!stack.empty()) {
      const std::size_t cur = stack.back();
      stack.pop_back();
      ++size;
      const int y = static_cast<int>(cur) / g.w, x = static_cast<int>(cur) % g.w;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int ny = y + dy, nx = x + dx;
          if (ny < 0 || ny >= g.h || nx < 0 || nx >= g.w) continue;
          const std::size_t ni = static_cast<std::size_t>(ny) * g.w + nx;
          if (g.v[ni] && comp[ni] < 0) {
            comp[ni] = next;
            stack.push_back(ni);
          }
        }
      }
    }
    if (size > best_size) {
      best_size = size;
      best_id = next;
    }
    ++next;
  }
  if (best_id >= 0) {
    for (std::size_t i = 0; i < g.v.size(); ++i) out.v[i] = comp[i] == best_id ? 1 : 0;
  }
  return out;
}

// Zhang-Suen thinning to a 1-px-wide skeleton.
Grid skeletonize(const Grid& in) {
  Grid g = in;
  auto p = [&g](int y, int x) -> int {
    if (y < 0 || y >= g.h || x < 0 || x >= g.w) return 0;
    return g.at(y, x) ? 1 : 0;
  };
  bool changed = true;
  std::vector<std::size_t> kill;
  while (changed) {
    changed = false;
    for (int phase = 0; phase < 2; ++phase) {
      kill.clear();
      for (int y = 0; y < g.h; ++y) {
        for (int x = 0; x < g.w; ++x) {
          if (!g.at(y, x)) continue;
          const int p2 = p(y - 1, x), p3 = p(y - 1, x + 1), p4 = p(y, x + 1), p5 = p(y + 1, x + 1);
          const int p6 = p(y + 1, x), p7 = p(y + 1, x - 1), p8 = p(y, x - 1), p9 = p(y - 1, x - 1);
          const int b = p2 + p3 + p4 + p5 + p6 + p7 + p8 + p9;
          if (b < 2 || b > 6) continue;
          int a = 0;
          const int seq[9] = {p2, p3, p4, p5, p6, p7, p8, p9, p2};
          for (int i = 0; i < 8; ++i) {
            if (seq[i] == 0 && seq[i + 1] == 1) ++a;
          }
          if (a != 1) continue;
          if (phase == 0) {
            if (p2 * p4 * p6 != 0 || p4 * p6 * p8 != 0) continue;
          } else {
            if (p2 * p4 * p8 != 0 || p2 * p6 * p8 != 0) continue;
          }
          kill.push_back(static_cast<std::size_t>(y) * g.w + x);
        }
      }
      if (!kill.empty()) changed = true;
      for (std::size_t i : kill) g.v[i] = 0;
    }
  }
  return g;
}

std::vector<std::pair<int, int>> boundary_pixels(const Grid& g) {
  std::vector<std::pair<int, int>> out;
  for (int y = 0; y < g.h; ++y) {
    for (int x = 0; x < g.w; ++x) {
      if (!g.at(y, x)) continue;
      const bool edge = (y == 0 || !g.at(y - 1, x)) || (y == g.h - 1 || !g.at(y + 1, x)) ||
                        (x == 0 || !g.at(y, x - 1)) || (x == g.w - 1 || !g.at(y, x + 1));
      if (edge) out.emplace_back(y, x);
    }
  }
  return out;
}

// Euclidean distance of every pixel to the nearest foreground pixel.
std::vector<float> distance_from_fg(const Grid& g) {
  std::vector<float> d(g.v.size(), 1e9f);
  const auto bnd = boundary_pixels(g);
  if (bnd.empty()) return d;
  for (int y = 0; y < g.h; ++y) {
    for (int x = 0; x < g.w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * g.w + x;
      if (g.v[i]) {
        d[i] = 0.0f;
        continue;
      }
      float best = 1e18f;
      for (const auto& [by, bx] : bnd) {
        const float dy = static_cast<float>(y - by), dx = static_cast<float>(x - bx);
        best = std::min(best, dy * dy + dx * dx);
      }
      d[i] = std::sqrt(best);
    }
  }
  return d;
}

struct WalkTarget {
  const std::vector<std::uint8_t>* allowed;
  int h, w;
  bool ok(int y, int x) const {
    return y >= 0 && y < h && x >= 0 && x < w && (*allowed)[static_cast<std::size_t>(y) * w + x];
  }
};

// Direction-persistent random walk over an allowed set; marks visited cells.
std::size_t random_walk(const WalkTarget& t, Rng& rng, std::size_t budget, std::vector<std::uint8_t>& visited) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < t.allowed->size(); ++i) {
    if ((*t.allowed)[i]) candidates.push_back(i);
  }
  if (candidates.empty() || budget == 0) return 0;
  std::size_t start = candidates[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(candidates.size()) - 1))];
  int y = static_cast<int>(start) / t.w, x = static_cast<int>(start) % t.w;
  static const int dy8[8] = {-1, -1, 0, 1, 1, 1, 0, -1};
  static const int dx8[8] = {0, 1, 1, 1, 0, -1, -1, -1};
  int dir = rng.uniform_int(0, 7);
  std::size_t placed = 0;
  visited[static_cast<std::size_t>(y) * t.w + x] = 1;
  ++placed;
  while (placed < budget) {
    const double u = rng.uniform();
    int want = dir;
    if (u > 0.85) {
      want = rng.uniform_int(0, 7);
    } else if (u > 0.60) {
      want = (dir + (rng.bernoulli(0.5) ? 1 : 7)) % 8;
    }
    bool moved = false;
    for (int attempt = 0; attempt < 8 && !moved; ++attempt) {
      const int d = (want + attempt * (attempt % 2 ? 1 : 7)) % 8;
      const int ny = y + dy8[d], nx = x + dx8[d];
      if (!t.ok(ny, nx)) continue;
      const std::size_t ni = static_cast<std::size_t>(ny) * t.w + nx;
      if (visited[ni]) continue;
      y = ny;
      x = nx;
      dir = d;
      visited[ni] = 1;
      ++placed;
      moved = true;
    }
    if (!moved) break;
  }
  return placed;
}

}  // namespace

double foreground_fraction(const LabelMap& mask) {
  std::size_t fg = 0;
  for (std::uint8_t v : mask.v) fg += v == 1;
  return static_cast<double>(fg) / static_cast<double>(mask.v.size());
}

double labeled_fraction(const LabelMap& scribble) {
  std::size_t n = 0;
  for (std::uint8_t v : scribble.v) n += v != kUnlabeled;
  return static_cast<double>(n) / static_cast<double>(scribble.v.size());
}

LabelMap generate_scribbles(const LabelMap& mask, Rng& rng, double max_fraction, bool* fg_missing) {
  for (std::uint8_t v : mask.v) {
    if (v > 1) throw std::invalid_argument("generate_scribbles: mask must be binary");
  }
  Grid g = mask_to_grid(mask);
  LabelMap out(mask.shape);
  std::fill(out.v.begin(), out.v.end(), kUnlabeled);
  const std::size_t total = g.v.size();
  const std::size_t per_walk_cap = static_cast<std::size_t>(max_fraction * 0.5 * static_cast<double>(total));

  bool missing = true;
  Grid comp = largest_component(g);
  bool any_fg = false;
  for (std::uint8_t v : comp.v) any_fg |= v != 0;
  if (any_fg) {
    Grid skel = skeletonize(comp);
    bool any_skel = false;
    for (std::uint8_t v : skel.v) any_skel |= v != 0;
    if (!any_skel) skel = comp;  // degenerate tiny region: thinning ate it
    std::vector<std::uint8_t> visited(total, 0);
    WalkTarget t{&skel.v, g.h, g.w};
    std::size_t budget = std::min<std::size_t>(per_walk_cap, std::max<std::size_t>(5, total / 80));
    if (random_walk(t, rng, budget, visited) > 0) {
      missing = false;
      for (std::size_t i = 0; i < total; ++i) {
        if (visited[i]) out.v[i] = 1;
      }
    }
  }

  // background stroke well clear of the object
  std::vector<float> dist = distance_from_fg(g);
  std::vector<std::uint8_t> allowed(total, 0);
  bool any_allowed = false;
  for (std::size_t i = 0; i < total; ++i) {
    allowed[i] = (!g.v[i] && dist[i] >= 3.0f) ? 1 : 0;
    any_allowed |= allowed[i] != 0;
  }
  if (any_allowed) {
    std::vector<std::uint8_t> visited(total, 0);
    WalkTarget t{&allowed, g.h, g.w};
    std::size_t budget = std::min<std::size_t>(per_walk_cap, static_cast<std::size_t>(rng.uniform_int(
                                                                 static_cast<int>(total / 100),
                                                                 static_cast<int>(total / 50))));
    random_walk(t, rng, std::max<std::size_t>(budget, 4), visited);
    for (std::size_t i = 0; i < total; ++i) {
      if (visited[i]) out.v[i] = 0;
    }
  }

  if (fg_missing) *fg_missing = missing;
  return out;
}

namespace {

struct BlobSpec {
  double cy, cx, r0;
  double amp[3];
  double phase[3];
};

double blob_radius(const BlobSpec& b, double theta) {
  double r = b.r0;
  for (int k = 0; k < 3; ++k) r += b.amp[k] * std::cos((k + 2) * theta + b.phase[k]);
  return r;
}

}  // namespace

Sample generate_sample(int size, std::uint64_t seed, std::uint64_t id) {
  if (size < 32) throw std::invalid_argument("generate_sample: size must be >= 32, got " + std::to_string(size));
  Rng rng = Rng::derive(seed, id);
  const int s = size;

  // blob geometry, re-drawn until the foreground fraction is reasonable
  LabelMap mask(Shape{1, s, s});
  for (int attempt = 0; attempt < 64; ++attempt) {
    std::fill(mask.v.begin(), mask.v.end(), 0);
    const int n_blobs = rng.bernoulli(0.35) ? 2 : 1;
    std::vector<BlobSpec> blobs;
    for (int b = 0; b < n_blobs; ++b) {
      BlobSpec spec;
      spec.cy = rng.uniform(0.28, 0.72) * s;
      spec.cx = rng.uniform(0.28, 0.72) * s;
      spec.r0 = rng.uniform(0.11, n_blobs == 1 ? 0.24 : 0.17) * s;
      for (int k = 0; k < 3; ++k) {
        spec.amp[k] = rng.uniform(-0.22, 0.22) * spec.r0 / (k + 1);
        spec.phase[k] = rng.uniform(0.0, 2.0 * kPi);
      }
      blobs.push_back(spec);
    }
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        for (const BlobSpec& b : blobs) {
          const double dy = y - b.cy, dx = x - b.cx;
          const double r = std::sqrt(dy * dy + dx * dx);
          if (r <= blob_radius(b, std::atan2(dy, dx))) {
            mask.at(0, y, x) = 1;
            break;
          }
        }
      }
    }
    const double frac = foreground_fraction(mask);
    if (frac >= 0.02 && frac <= 0.40) break;
  }

  // appearance: textured background, offset+textured object, shared noise
  const double base = rng.uniform(0.38, 0.58);
  double chan_off[3];
  for (double& c : chan_off) c = rng.uniform(-0.05, 0.05);
  struct Wave {
    double amp, ky, kx, phase;
  };
  std::vector<Wave> bg_waves, fg_waves;
  for (int i = 0; i < 3; ++i) {
    bg_waves.push_back({rng.uniform(0.02, 0.07), rng.uniform(0.5, 3.5) * 2.0 * kPi / s,
                        rng.uniform(0.5, 3.5) * 2.0 * kPi / s, rng.uniform(0.0, 2.0 * kPi)});
  }
  for (int i = 0; i < 2; ++i) {
    fg_waves.push_back({rng.uniform(0.02, 0.06), rng.uniform(4.0, 9.0) * 2.0 * kPi / s,
                        rng.uniform(4.0, 9.0) * 2.0 * kPi / s, rng.uniform(0.0, 2.0 * kPi)});
  }
  const double delta = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.09, 0.18);
  double tint[3];
  for (double& t : tint) t = rng.uniform(-0.04, 0.04);
  const double noise_sigma = rng.uniform(0.02, 0.05);

  Grid g = mask_to_grid(mask);
  std::vector<float> edge_dist = distance_from_fg(g);
  // signed distance for a soft photometric edge; mask itself stays hard
  std::vector<float> inside_dist(g.v.size(), 0.0f);
  {
    Grid inv{g.h, g.w, std::vector<std::uint8_t>(g.v.size())};
    for (std::size_t i = 0; i < g.v.size(); ++i) inv.v[i] = g.v[i] ? 0 : 1;
    inside_dist = distance_from_fg(inv);
  }

  Sample out;
  out.image = Tensor({3, s, s});
  out.mask = mask;
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      double bg = base;
      for (const Wave& w : bg_waves) bg += w.amp * std::sin(w.ky * y + w.kx * x + w.phase);
      double fg = base + delta;
      for (const Wave& w : fg_waves) fg += w.amp * std::sin(w.ky * y + w.kx * x + w.phase);
      const std::size_t i = static_cast<std::size_t>(y) * s + x;
      const double sd = g.v[i] ? inside_dist[i] : -static_cast<double>(edge_dist[i]);
      const double alpha = std::clamp(0.5 + sd / 3.0, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) {
        double v = bg + chan_off[c] + alpha * (fg + tint[c] - bg);
        v += noise_sigma * rng.normal();
        out.image[(static_cast<std::size_t>(c) * s + y) * s + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  out.scribble = generate_scribbles(out.mask, rng, 0.05, &out.fg_missing);
  return out;
}

// ---------------- resizing / augmentation ----------------

Tensor resize_bilinear(const Tensor& chw, int out_h, int out_w) {
  if (chw.rank() != 3) throw std::invalid_argument("resize_bilinear expects C×H×W");
  const int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  Tensor out({c, out_h, out_w});
  const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
  for (int ch = 0; ch < c; ++ch) {
    const float* src = chw.data() + static_cast<std::size_t>(ch) * h * w;
    float* dst = out.data() + static_cast<std::size_t>(ch) * out_h * out_w;
    for (int i = 0; i < out_h; ++i) {
      const double fy = (i + 0.5) * sy - 0.5;
      const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, h - 1);
      const int y1 = std::min(y0 + 1, h - 1);
      const double ty = std::clamp(fy - std::floor(fy), 0.0, 1.0);
      for (int j = 0; j < out_w; ++j) {
        const double fx = (j + 0.5) * sx - 0.5;
        const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, w - 1);
        const int x1 = std::min(x0 + 1, w - 1);
        const double tx = std::clamp(fx - std::floor(fx), 0.0, 1.0);
        const double v = (1 - ty) * ((1 - tx) * src[y0 * w + x0] + tx * src[y0 * w + x1]) +
                         ty * ((1 - tx) * src[y1 * w + x0] + tx * src[y1 * w + x1]);
        dst[i * out_w + j] = static_cast<float>(v);
      }
    }
  }
  return out;
}

LabelMap resize_nearest(const LabelMap& map, int out_h, int out_w) {
  if (map.shape.size() != 3) throw std::invalid_argument("resize_nearest expects 1×H×W labels");
  const int h = map.shape[1], w = map.shape[2];
  LabelMap out(Shape{map.shape[0], out_h, out_w});
  const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
  for (int n = 0; n < map.shape[0]; ++n) {
    for (int i = 0; i < out_h; ++i) {
      const int y = std::clamp(static_cast<int>(std::floor((i + 0.5) * sy)), 0, h - 1);
      for (int j = 0; j < out_w; ++j) {
        const int x = std::clamp(static_cast<int>(std::floor((j + 0.5) * sx)), 0, w - 1);
        out.at(n, i, j) = map.at(n, y, x);
      }
    }
  }
  return out;
}

namespace {

Tensor crop_image(const Tensor& chw, int top, int bottom, int left, int right) {
  const int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  const int nh = h - top - bottom, nw = w - left - right;
  Tensor out({c, nh, nw});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < nh; ++y) {
      std::memcpy(out.data() + (static_cast<std::size_t>(ch) * nh + y) * nw,
                  chw.data() + (static_cast<std::size_t>(ch) * h + y + top) * w + left, sizeof(float) * nw);
    }
  }
  return out;
}

LabelMap crop_labels(const LabelMap& m, int top, int bottom, int left, int right) {
  const int h = m.shape[1], w = m.shape[2];
  const int nh = h - top - bottom, nw = w - left - right;
  LabelMap out(Shape{m.shape[0], nh, nw});
  for (int n = 0; n < m.shape[0]; ++n) {
    for (int y = 0; y < nh; ++y) {
      for (int x = 0; x < nw; ++x) out.at(n, y, x) = m.at(n, y + top, x + left);
    }
  }
  return out;
}

void flip_image(Tensor& chw, bool horizontal) {
  const int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  for (int ch = 0; ch < c; ++ch) {
    float* p = chw.data() + static_cast<std::size_t>(ch) * h * w;
    if (horizontal) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w / 2; ++x) std::swap(p[y * w + x], p[y * w + (w - 1 - x)]);
      }
    } else {
      for (int y = 0; y < h / 2; ++y) {
        for (int x = 0; x < w; ++x) std::swap(p[y * w + x], p[(h - 1 - y) * w + x]);
      }
    }
  }
}

void flip_labels(LabelMap& m, bool horizontal) {
  const int h = m.shape[1], w = m.shape[2];
  for (int n = 0; n < m.shape[0]; ++n) {
    if (horizontal) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w / 2; ++x) std::swap(m.at(n, y, x), m.at(n, y, w - 1 - x));
      }
    } else {
      for (int y = 0; y < h / 2; ++y) {
        for (int x = 0; x < w; ++x) std::swap(m.at(n, y, x), m.at(n, h - 1 - y, x));
      }
    }
  }
}

}  // namespace

Sample augment(const Sample& s, Rng& rng, int crop_max, int out_size, double flip_p) {
  const int h = s.image.dim(1), w = s.image.dim(2);
  if (crop_max < 0 || crop_max >= std::min(h, w) / 4) {
    throw std::invalid_argument("augment: crop_max " + std::to_string(crop_max) + " too large for " +
                                std::to_string(h) + "×" + std::to_string(w));
  }
  // fixed draw order: top, bottom, left, right, then the two flips
  const int top = rng.uniform_int(0, crop_max);
  const int bottom = rng.uniform_int(0, crop_max);
  const int left = rng.uniform_int(0, crop_max);
  const int right = rng.uniform_int(0, crop_max);
  const bool hflip = rng.bernoulli(flip_p);
  const bool vflip = rng.bernoulli(flip_p);

  Sample out;
  out.fg_missing = s.fg_missing;
  Tensor img = crop_image(s.image, top, bottom, left, right);
  LabelMap mask = crop_labels(s.mask, top, bottom, left, right);
  LabelMap scr = crop_labels(s.scribble, top, bottom, left, right);
  out.image = resize_bilinear(img, out_size, out_size);
  out.mask = resize_nearest(mask, out_size, out_size);
  out.scribble = resize_nearest(scr, out_size, out_size);
  if (hflip) {
    flip_image(out.image, true);
    flip_labels(out.mask, true);
    flip_labels(out.scribble, true);
  }
  if (vflip) {
    flip_image(out.image, false);
    flip_labels(out.mask, false);
    flip_labels(out.scribble, false);
  }
  return out;
}

CorruptionKind corruption_from_name(const std::string& name) {
  if (name == "blur") return CorruptionKind::Blur;
  if (name == "specular") return CorruptionKind::Specular;
  if (name == "brightness-shift") return CorruptionKind::BrightnessShift;
  throw std::invalid_argument("unknown corruption '" + name + "' (want blur|specular|brightness-shift)");
}

Sample corrupt(const Sample& s, CorruptionKind kind, int severity, Rng& rng) {
  if (severity < 1 || severity > 3) throw std::invalid_argument("corrupt: severity must be 1..3");
  Sample out = s;
  const int c = s.image.dim(0), h = s.image.dim(1), w = s.image.dim(2);
  switch (kind) {
    case CorruptionKind::Blur: {
      const double sigma = 0.7 * severity;
      const int radius = std::max(1, static_cast<int>(std::ceil(2.5 * sigma)));
      std::vector<double> kern(static_cast<std::size_t>(2 * radius + 1));
      double ksum = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        kern[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        ksum += kern[static_cast<std::size_t>(i + radius)];
      }
      for (double& k : kern) k /= ksum;
      Tensor tmp = out.image;
      for (int ch = 0; ch < c; ++ch) {
        float* src = out.image.data() + static_cast<std::size_t>(ch) * h * w;
        float* mid = tmp.data() + static_cast<std::size_t>(ch) * h * w;
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
              acc += kern[static_cast<std::size_t>(i + radius)] * src[y * w + std::clamp(x + i, 0, w - 1)];
            }
            mid[y * w + x] = static_cast<float>(acc);
          }
        }
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
              acc += kern[static_cast<std::size_t>(i + radius)] * mid[std::clamp(y + i, 0, h - 1) * w + x];
            }
            src[y * w + x] = static_cast<float>(acc);
          }
        }
      }
      break;
    }
    case CorruptionKind::Specular: {
      const double cy = rng.uniform(0.2, 0.8) * h, cx = rng.uniform(0.2, 0.8) * w;
      const double ry = rng.uniform(0.04, 0.08) * h * (1.0 + 0.6 * (severity - 1));
      const double rx = rng.uniform(0.04, 0.08) * w * (1.0 + 0.6 * (severity - 1));
      const double gain = 0.5 + 0.3 * severity;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double dy = (y - cy) / ry, dx = (x - cx) / rx;
          const double d2 = dy * dy + dx * dx;
          if (d2 >= 1.0) continue;
          const double add = gain * (1.0 - d2);
          for (int ch = 0; ch < c; ++ch) {
            float& v = out.image[(static_cast<std::size_t>(ch) * h + y) * w + x];
            v = static_cast<float>(std::min(1.0, v + add));
          }
        }
      }
      break;
    }
    case CorruptionKind::BrightnessShift: {
      const double a = 1.0 + (rng.bernoulli(0.5) ? 1.0 : -1.0) * 0.12 * severity;
      const double b = (rng.bernoulli(0.5) ? 1.0 : -1.0) * 0.08 * severity;
      for (std::size_t i = 0; i < out.image.size(); ++i) {
        out.image[i] = static_cast<float>(std::clamp(a * out.image[i] + b, 0.0, 1.0));
      }
      break;
    }
  }
  return out;
}

// ---------------- S2TF container ----------------

namespace {

void put_u16(std::string& buf, std::uint16_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw std::runtime_error("tensor file: " + what + " at byte " + std::to_string(pos));
  }
  void need(std::size_t n) const {
    if (pos + n > buf.size()) {
      throw std::runtime_error("tensor file: truncated (need " + std::to_string(n) + " bytes) at byte " +
                               std::to_string(pos));
    }
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint8_t>(buf[pos]) | (static_cast<std::uint16_t>(static_cast<std::uint8_t>(buf[pos + 1])) << 8);
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
};

constexpr std::uint16_t kFormatVersion = 1;

}  // namespace

void tensor_file_write(const std::string& path, const std::vector<std::pair<std::string, Tensor>>& entries) {
  if (path.empty()) throw std::invalid_argument("tensor_file_write: empty path");
  std::set<std::string> seen;
  std::string buf;
  buf += "S2TF";
  put_u16(buf, kFormatVersion);
  put_u32(buf, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    if (!seen.insert(name).second) throw std::invalid_argument("tensor_file_write: duplicate entry name " + name);
    if (name.size() > 0xffff) throw std::invalid_argument("tensor_file_write: name too long");
    put_u16(buf, static_cast<std::uint16_t>(name.size()));
    buf += name;
    buf.push_back(static_cast<char>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put_u32(buf, static_cast<std::uint32_t>(t.dim(i)));
    const std::size_t base = buf.size();
    buf.resize(base + t.size() * 4);
    static_assert(sizeof(float) == 4);
    std::memcpy(buf.data() + base, t.data(), t.size() * 4);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("tensor_file_write: cannot open " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("tensor_file_write: write failed for " + path);
}

std::vector<std::pair<std::string, Tensor>> tensor_file_read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("tensor_file_read: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r{buf};
  r.need(4);
  if (buf.compare(0, 4, "S2TF") != 0) r.fail("bad magic");
  r.pos = 4;
  const std::uint16_t version = r.u16();
  if (version != kFormatVersion) r.fail("unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(count);
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint16_t name_len = r.u16();
    r.need(name_len);
    std::string name = buf.substr(r.pos, name_len);
    r.pos += name_len;
    const std::uint8_t rank = r.u8();
    Shape shape(rank);
    std::size_t numel = 1;
    for (int i = 0; i < rank; ++i) {
      shape[static_cast<std::size_t>(i)] = static_cast<int>(r.u32());
      if (shape[static_cast<std::size_t>(i)] <= 0) r.fail("bad extent in entry " + name);
      numel *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
    }
    r.need(numel * 4);
    std::vector<float> data(numel);
    std::memcpy(data.data(), buf.data() + r.pos, numel * 4);
    r.pos += numel * 4;
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.pos != buf.size()) r.fail("trailing bytes");
  return out;
}

// ---------------- dataset directory ----------------

namespace {

Tensor labels_to_tensor(const LabelMap& m) {
  Tensor t({m.shape[1], m.shape[2]});
  for (std::size_t i = 0; i < m.v.size(); ++i) t[i] = static_cast<float>(m.v[i]);
  return t;
}

LabelMap tensor_to_labels(const Tensor& t, int max_value) {
  if (t.rank() != 2) throw std::runtime_error("label entry must be rank 2, got " + shape_str(t.shape()));
  LabelMap m(Shape{1, t.dim(0), t.dim(1)});
  for (std::size_t i = 0; i < t.size(); ++i) {
    const float v = t[i];
    const int iv = static_cast<int>(v);
    if (v != static_cast<float>(iv) || iv < 0 || iv > max_value) {
      throw std::runtime_error("label entry holds non-label value " + std::to_string(v));
    }
    m.v[i] = static_cast<std::uint8_t>(iv);
  }
  return m;
}

}  // namespace

void write_sample(const std::string& path, const Sample& s) {
  tensor_file_write(path, {{"image", s.image}, {"mask", labels_to_tensor(s.mask)}, {"scribble", labels_to_tensor(s.scribble)}});
}

Sample read_sample(const std::string& path) {
  auto entries = tensor_file_read(path);
  Sample s;
  bool have_image = false, have_mask = false, have_scribble = false;
  for (auto& [name, t] : entries) {
    if (name == "image") {
      s.image = std::move(t);
      have_image = true;
    } else if (name == "mask") {
      s.mask = tensor_to_labels(t, 1);
      have_mask = true;
    } else if (name == "scribble") {
      s.scribble = tensor_to_labels(t, 2);
      have_scribble = true;
    }
  }
  if (!have_image || !have_mask || !have_scribble) {
    throw std::runtime_error("sample file " + path + " is missing image/mask/scribble entries");
  }
  return s;
}

const std::vector<std::string>& Manifest::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw std::invalid_argument("unknown split '" + name + "' (want train|val|test)");
}

void write_manifest(const std::string& dir, const Manifest& m) {
  json j;
  j["format"] = "s2me-dataset";
  j["version"] = 1;
  j["seed"] = m.seed;
  j["size"] = m.size;
  j["splits"] = {{"train", m.train}, {"val", m.val}, {"test", m.test}};
  j["flagged"] = m.flagged;
  j["stats"] = {{"fg_fraction_mean", m.fg_fraction_mean}, {"labeled_fraction_mean", m.labeled_fraction_mean}};
  std::ofstream f(fs::path(dir) / "manifest.json");
  if (!f) throw std::runtime_error("cannot write manifest in " + dir);
  f << j.dump(2) << "\n";
}

Manifest read_manifest(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "manifest.json");
  if (!f) throw std::runtime_error("no manifest.json in " + dir);
  json j = json::parse(f);
  Manifest m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.size = j.at("size").get<int>();
  m.train = j.at("splits").at("train").get<std::vector<std::string>>();
  m.val = j.at("splits").at("val").get<std::vector<std::string>>();
  m.test = j.at("splits").at("test").get<std::vector<std::string>>();
  if (j.contains("flagged")) m.flagged = j.at("flagged").get<std::vector<std::string>>();
  if (j.contains("stats")) {
    m.fg_fraction_mean = j["stats"].value("fg_fraction_mean", 0.0);
    m.labeled_fraction_mean = j["stats"].value("labeled_fraction_mean", 0.0);
  }
  return m;
}

Manifest generate_synthetic_dataset(const std::string& dir, const GenConfig& cfg) {
  if (cfg.size < 32) throw std::invalid_argument("dataset size must be >= 32, got " + std::to_string(cfg.size));
  if (cfg.n_train <= 0 || cfg.n_val <= 0 || cfg.n_test <= 0) {
    throw std::invalid_argument("all splits need at least one sample");
  }
  fs::create_directories(dir);
  Manifest m;
  m.size = cfg.size;
  m.seed = cfg.seed;
  const int total = cfg.n_train + cfg.n_val + cfg.n_test;
  double fg_acc = 0.0, lab_acc = 0.0;
  for (int id = 0; id < total; ++id) {
    Sample s = generate_sample(cfg.size, cfg.seed, static_cast<std::uint64_t>(id));
    char name[32];
    std::snprintf(name, sizeof(name), "s%05d.s2tf", id);
    write_sample((fs::path(dir) / name).string(), s);
    if (id < cfg.n_train) {
      m.train.push_back(name);
    } else if (id < cfg.n_train + cfg.n_val) {
      m.val.push_back(name);
    } else {
      m.test.push_back(name);
    }
    if (s.fg_missing) m.flagged.push_back(name);
    fg_acc += foreground_fraction(s.mask);
    lab_acc += labeled_fraction(s.scribble);
  }
  m.fg_fraction_mean = fg_acc / total;
  m.labeled_fraction_mean = lab_acc / total;
  write_manifest(dir, m);
  return m;
}

std::vector<Sample> load_split(const std::string& dir, const Manifest& m, const std::string& split) {
  std::vector<Sample> out;
  for (const std::string& name : m.split(split)) {
    out.push_back(read_sample((fs::path(dir) / name).string()));
  }
  return out;
}

Batch make_batch(const std::vector<Sample>& pool, const std::vector<int>& indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty index list");
  const Sample& first = pool[static_cast<std::size_t>(indices[0])];
  const int c = first.image.dim(0), h = first.image.dim(1), w = first.image.dim(2);
  Batch b{Tensor({static_cast<int>(indices.size()), c, h, w}),
          LabelMap(Shape{static_cast<int>(indices.size()), h, w}),
          LabelMap(Shape{static_cast<int>(indices.size()), h, w})};
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Sample& s = pool[static_cast<std::size_t>(indices[i])];
    if (s.image.dim(1) != h || s.image.dim(2) != w) {
      throw std::invalid_argument("make_batch: mixed sample sizes");
    }
    std::memcpy(b.images.data() + i * first.image.size(), s.image.data(), sizeof(float) * s.image.size());
    std::memcpy(b.masks.v.data() + i * s.mask.v.size(), s.mask.v.data(), s.mask.v.size());
    std::memcpy(b.scribbles.v.data() + i * s.scribble.v.size(), s.scribble.v.data(), s.scribble.v.size());
  }
  return b;
}

}  // namespace s2me::data
