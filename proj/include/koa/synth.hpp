#pragma once

// Synthetic bilateral knee radiographs with known boxes and grades.
// Each knee is a femur/tibia pair separated by a dark joint gap whose
// height falls linearly with grade; marginal bumps grow with grade. A
// per-knee severity offset blurs the boundary between adjacent grades.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <vector>

#include "koa/errors.hpp"
#include "koa/image.hpp"
#include "koa/localization.hpp"
#include "koa/ops.hpp"

namespace koa {

inline constexpr int kGrades = 5;

struct SynthConfig {
  std::size_t n = 10;
  std::size_t size = 256;
  std::uint64_t seed = 0;
  std::array<double, kGrades> grade_weights{1, 1, 1, 1, 1};
  double noise_sigma = 0.025;
  double severity_spread = 0.75;  // severity offset ~ U(-s, s), in grade units
  double gap_spread = 0.15;      // gap_factor ~ U(1 - s, 1 + s)
  double bump_spread = 0.25;     // bump_factor ~ U(1 - s, 1 + s)
};

// Geometry of one knee in unit coordinates of a square radiograph.
struct KneeAnatomy {
  double cx = 0.27, cy = 0.5;  // joint centre
  double width = 0.27;         // condyle width
  double aspect = 1.0;         // box height multiplier around width / 1.6
  double gap_factor = 1.0;     // individual joint-space scale
  double bump_factor = 1.0;    // individual osteophyte scale
  double gain = 1.0;           // bone brightness scale
  double severity = 0.0;       // offset of the latent severity from the grade
};

inline constexpr double kGapStep = 0.24;  // fractional gap loss per grade

inline double latent_severity(const KneeAnatomy& k, int grade) { return std::max(0.0, grade + k.severity); }

// Annotated box of a knee: 1.1 x condyle width, height from aspect 1.6.
inline NormRect knee_box(const KneeAnatomy& k) {
  const double bw = 1.1 * k.width;
  const double bh = bw / 1.6 * k.aspect;
  return {k.cx - bw / 2, k.cy - bh / 2, bw, bh};
}

// Joint-space height in unit coordinates.
inline double knee_gap(const KneeAnatomy& k, int grade) {
  const double s = grade + k.severity;
  return 0.2 * knee_box(k).h * k.gap_factor * std::max(0.03, 1.0 - kGapStep * s);
}

namespace detail {

struct KneeShape {
  KneeAnatomy k;
  int grade;
  double bw, bh, top, bottom, gap, half_w, shaft_half, taper, bump_len, bump_h, radius;

  KneeShape(const KneeAnatomy& a, int g) : k(a), grade(g) {
    const NormRect box = knee_box(a);
    bw = box.w;
    bh = box.h;
    top = box.y;
    bottom = box.y + box.h;
    gap = knee_gap(a, g);
    half_w = a.width / 2;
    shaft_half = 0.28 * a.width;
    taper = 0.3 * bh;
    bump_len = 0.014 * a.width * latent_severity(a, g) * a.bump_factor;
    bump_h = 0.12 * bh;
    radius = 0.12 * a.width;
  }

  // Half-width of bone at vertical distance d (>= 0) from the box edge
  // towards the joint; shaft outside the box, flaring to full width.
  double bone_half_width(double d) const {
    if (d <= 0) return shaft_half;
    if (d >= taper) return half_w;
    const double t = d / taper;
    return shaft_half + (half_w - shaft_half) * t * t * (3 - 2 * t);
  }

  bool in_bone(double x, double y) const {
    const double dx = std::abs(x - k.cx);
    const double g2 = gap / 2;
    if (y < k.cy - g2) {
      // femur: box top is where the flare starts
      const double d = y - top;
      const double edge = k.cy - g2 - y;  // distance to articular surface
      double hw = bone_half_width(d);
      if (edge < radius) hw -= radius - std::sqrt(std::max(0.0, radius * radius - (radius - edge) * (radius - edge)));
      if (edge < bump_h) hw += bump_len * (1.0 - edge / bump_h);
      return dx <= hw;
    }
    if (y > k.cy + g2) {
      const double d = bottom - y;
      const double edge = y - (k.cy + g2);
      double hw = bone_half_width(d);
      if (edge < radius * 0.6)
        hw -= radius * 0.6 - std::sqrt(std::max(0.0, 0.36 * radius * radius - (0.6 * radius - edge) * (0.6 * radius - edge)));
      if (edge < bump_h) hw += bump_len * (1.0 - edge / bump_h);
      return dx <= hw;
    }
    return false;
  }

  bool in_tissue(double x) const { return std::abs(x - k.cx) <= 0.8 * k.width; }
};

inline constexpr float kBackground = 0.08f;
inline constexpr float kTissue = 0.28f;
inline constexpr float kBone = 0.74f;

inline double sample_intensity(const std::array<KneeShape, 2>& knees, double x, double y) {
  double v = kBackground;
  for (const auto& k : knees) {
    if (k.in_tissue(x)) v = std::max<double>(v, kTissue);
    if (k.in_bone(x, y)) {
      // mild vertical shading inside the bone
      const double shade = 1.0 - 0.08 * std::abs(y - k.k.cy) / std::max(1e-9, k.bh);
      return kBone * k.k.gain * shade;
    }
  }
  return v;
}

inline Image box_blur3(const Image& img) {
  Image out(img.height, img.width);
  const long h = static_cast<long>(img.height), w = static_cast<long>(img.width);
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double s = 0, wsum = 0;
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) {
          const long yy = std::clamp(y + dy, 0L, h - 1), xx = std::clamp(x + dx, 0L, w - 1);
          const double wt = (dy == 0 ? 2.0 : 1.0) * (dx == 0 ? 2.0 : 1.0);
          s += wt * img.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
          wsum += wt;
        }
      out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = static_cast<float>(s / wsum);
    }
  return out;
}

}  // namespace detail

// Renders a square radiograph with the two knees. noise_sigma = 0 gives a
// clean image; `rng` is only drawn from when noise is on.
inline Image render_radiograph(const std::array<KneeAnatomy, 2>& knees, const std::array<int, 2>& grades,
                               std::size_t size, double noise_sigma, Rng& rng) {
  for (int g : grades)
    if (g < 0 || g >= kGrades) throw ArgumentError("render_radiograph: grade out of range");
  const std::array<detail::KneeShape, 2> shapes{detail::KneeShape(knees[0], grades[0]),
                                                detail::KneeShape(knees[1], grades[1])};
  Image img(size, size);
  const double inv = 1.0 / static_cast<double>(size);
  for (std::size_t py = 0; py < size; ++py)
    for (std::size_t px = 0; px < size; ++px) {
      double acc = 0;
      for (double oy : {0.25, 0.75})
        for (double ox : {0.25, 0.75})
          acc += detail::sample_intensity(shapes, (static_cast<double>(px) + ox) * inv, (static_cast<double>(py) + oy) * inv);
      img.at(py, px) = static_cast<float>(acc / 4);
    }
  img = detail::box_blur3(img);
  if (noise_sigma > 0) {
    std::normal_distribution<double> noise(0.0, noise_sigma);
    for (auto& p : img.pixels) p = static_cast<float>(std::clamp(p + noise(rng), 0.0, 1.0));
  }
  return img;
}

inline KneeAnatomy sample_anatomy(Rng& rng, bool right, double severity_spread = 0.75, double gap_spread = 0.15,
                                  double bump_spread = 0.25) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  KneeAnatomy k;
  k.cx = (right ? 0.73 : 0.27) + uni(-0.025, 0.025);
  k.cy = 0.5 + uni(-0.05, 0.05);
  k.width = uni(0.24, 0.30);
  k.aspect = uni(0.92, 1.08);
  k.gap_factor = uni(1 - gap_spread, 1 + gap_spread);
  k.bump_factor = uni(1 - bump_spread, 1 + bump_spread);
  k.gain = uni(0.9, 1.1);
  k.severity = uni(-severity_spread, severity_spread);
  return k;
}

// Integer per-grade counts for `total` knees by largest remainder.
inline std::array<std::size_t, kGrades> grade_counts(std::size_t total, const std::array<double, kGrades>& weights) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(sum > 0) || std::any_of(weights.begin(), weights.end(), [](double w) { return w < 0; }))
    throw ArgumentError("grade weights must be non-negative with a positive sum");
  std::array<std::size_t, kGrades> counts{};
  std::array<double, kGrades> rem{};
  std::size_t assigned = 0;
  for (int g = 0; g < kGrades; ++g) {
    const double exact = static_cast<double>(total) * weights[g] / sum;
    counts[g] = static_cast<std::size_t>(std::floor(exact));
    rem[g] = exact - static_cast<double>(counts[g]);
    assigned += counts[g];
  }
  std::array<int, kGrades> order{0, 1, 2, 3, 4};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (std::size_t i = 0; assigned < total; ++i, ++assigned) ++counts[order[i % kGrades]];
  return counts;
}

struct SynthRadiograph {
  AnnotatedRadiograph radiograph;
  std::array<KneeAnatomy, 2> anatomy{};
};

inline std::vector<SynthRadiograph> synth_generate(const SynthConfig& cfg) {
  if (cfg.n == 0) throw ArgumentError("synth_generate: n must be >= 1");
  if (cfg.size < 16) throw ArgumentError("synth_generate: size must be >= 16");
  if (cfg.gap_spread < 0 || cfg.gap_spread >= 1 || cfg.bump_spread < 0 || cfg.bump_spread >= 1 ||
      cfg.severity_spread < 0 || cfg.severity_spread > 1)
    throw ArgumentError("synth_generate: spread out of range");
  Rng rng(cfg.seed);
  const auto counts = grade_counts(2 * cfg.n, cfg.grade_weights);
  std::vector<int> grades;
  for (int g = 0; g < kGrades; ++g) grades.insert(grades.end(), counts[g], g);
  std::shuffle(grades.begin(), grades.end(), rng);

  std::vector<SynthRadiograph> out(cfg.n);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    auto& s = out[i];
    s.anatomy = {sample_anatomy(rng, false, cfg.severity_spread, cfg.gap_spread, cfg.bump_spread),
                 sample_anatomy(rng, true, cfg.severity_spread, cfg.gap_spread, cfg.bump_spread)};
    s.radiograph.grades = {grades[2 * i], grades[2 * i + 1]};
    s.radiograph.boxes = {knee_box(s.anatomy[0]), knee_box(s.anatomy[1])};
    s.radiograph.image = render_radiograph(s.anatomy, s.radiograph.grades, cfg.size, cfg.noise_sigma, rng);
  }
  return out;
}

}  // namespace koa
