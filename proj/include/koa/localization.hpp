#pragma once

// Knee-joint localization: masks from annotations, FCN training and
// inference, connected-component box extraction, Jaccard evaluation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "koa/batching.hpp"
#include "koa/errors.hpp"
#include "koa/image.hpp"
#include "koa/losses.hpp"
#include "koa/model.hpp"
#include "koa/optim.hpp"

namespace koa {

// Pixel box inside a frame of frame_w x frame_h.
struct BBox {
  long x = 0, y = 0, w = 0, h = 0;
  long frame_w = 0, frame_h = 0;

  long area() const noexcept { return w * h; }
  double center_x() const noexcept { return static_cast<double>(x) + static_cast<double>(w) / 2.0; }
  double center_y() const noexcept { return static_cast<double>(y) + static_cast<double>(h) / 2.0; }

  friend bool operator==(const BBox&, const BBox&) = default;
};

inline std::ostream& operator<<(std::ostream& os, const BBox& b) {
  return os << "(" << b.x << "," << b.y << "," << b.w << "," << b.h << " in " << b.frame_w << "x" << b.frame_h << ")";
}

inline void validate(const BBox& b) {
  if (b.frame_w <= 0 || b.frame_h <= 0) throw ArgumentError("bbox frame must be positive");
  if (b.w <= 0 || b.h <= 0) throw ArgumentError("bbox must have positive width and height");
  if (b.x < 0 || b.y < 0 || b.x + b.w > b.frame_w || b.y + b.h > b.frame_h) {
    std::ostringstream os;
    os << "bbox " << b << " leaves its frame";
    throw ArgumentError(os.str());
  }
}

inline BBox make_bbox(long x, long y, long w, long h, long frame_w, long frame_h) {
  BBox b{x, y, w, h, frame_w, frame_h};
  validate(b);
  return b;
}

// Rectangle in unit coordinates (fractions of image width/height).
struct NormRect {
  double x = 0, y = 0, w = 0, h = 0;
  friend bool operator==(const NormRect&, const NormRect&) = default;
};

inline constexpr double kUnitSlack = 1e-9;

inline void validate(const NormRect& r) {
  auto in_unit = [](double v) { return v >= -kUnitSlack && v <= 1.0 + kUnitSlack; };
  if (!in_unit(r.x) || !in_unit(r.y) || !in_unit(r.w) || !in_unit(r.h) || !in_unit(r.x + r.w) ||
      !in_unit(r.y + r.h))
    throw ArgumentError("normalized rectangle leaves the unit square");
  if (r.w <= 0 || r.h <= 0) throw ArgumentError("normalized rectangle has zero area");
}

// Both knees of one radiograph. Rectangle 0 is the left knee.
struct AnnotatedRadiograph {
  Image image;
  std::array<NormRect, 2> boxes{};
  std::array<int, 2> grades{-1, -1};  // -1 when ungraded
};

namespace detail {
inline long round_half_up(double v) { return static_cast<long>(std::floor(v + 0.5)); }

struct Span1 {
  long lo, hi;  // [lo, hi)
};

inline Span1 scaled_span(double start, double extent, long size) {
  const long lo = std::clamp(round_half_up(start * static_cast<double>(size)), 0L, size);
  const long hi = std::clamp(round_half_up((start + extent) * static_cast<double>(size)), 0L, size);
  return {lo, hi};
}
}  // namespace detail

// Pixel box covered by a normalized rectangle in a given frame.
inline BBox to_bbox(const NormRect& r, long frame_w, long frame_h) {
  validate(r);
  const auto xs = detail::scaled_span(r.x, r.w, frame_w);
  const auto ys = detail::scaled_span(r.y, r.h, frame_h);
  if (xs.hi <= xs.lo || ys.hi <= ys.lo) throw ArgumentError("rectangle vanishes at this frame size");
  return make_bbox(xs.lo, ys.lo, xs.hi - xs.lo, ys.hi - ys.lo, frame_w, frame_h);
}

// Binary mask (0/1) of the union of the rectangles at size x size.
inline Image rasterize_mask(std::span<const NormRect> rects, std::size_t size = 256) {
  if (rects.empty()) throw ArgumentError("rasterize_mask: annotation has no rectangles");
  if (size == 0) throw ArgumentError("rasterize_mask: size must be positive");
  Image mask(size, size, 0.f);
  const long s = static_cast<long>(size);
  for (const auto& r : rects) {
    const BBox b = to_bbox(r, s, s);
    for (long y = b.y; y < b.y + b.h; ++y)
      for (long x = b.x; x < b.x + b.w; ++x) mask.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1.f;
  }
  return mask;
}

inline Image rasterize_mask(const std::array<NormRect, 2>& rects, std::size_t size = 256) {
  return rasterize_mask(std::span<const NormRect>(rects), size);
}

// Intersection over union by pixel area.
inline double jaccard(const BBox& a, const BBox& b) {
  if (a.frame_w != b.frame_w || a.frame_h != b.frame_h)
    throw ArgumentError("jaccard: boxes live in different frames");
  const long ix = std::max(0L, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const long iy = std::max(0L, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const long inter = ix * iy;
  const long uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

struct Component {
  std::size_t pixels = 0;
  BBox bounds;
};

// 4-connected foreground components (value >= threshold), in raster order
// of their first pixel.
inline std::vector<Component> label_components(const Image& map, double threshold = 0.5) {
  const std::size_t h = map.height, w = map.width;
  std::vector<int> label(h * w, -1);
  std::vector<Component> comps;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (label[start] >= 0 || map.pixels[start] < threshold) continue;
    const int id = static_cast<int>(comps.size());
    long x0 = static_cast<long>(w), y0 = static_cast<long>(h), x1 = -1, y1 = -1;
    std::size_t count = 0;
    label[start] = id;
    stack.assign(1, start);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const long y = static_cast<long>(i / w), x = static_cast<long>(i % w);
      ++count;
      x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
      auto visit = [&](std::size_t j) {
        if (label[j] < 0 && map.pixels[j] >= threshold) {
          label[j] = id;
          stack.push_back(j);
        }
      };
      if (x > 0) visit(i - 1);
      if (x + 1 < static_cast<long>(w)) visit(i + 1);
      if (y > 0) visit(i - w);
      if (y + 1 < static_cast<long>(h)) visit(i + w);
    }
    comps.push_back({count, BBox{x0, y0, x1 - x0 + 1, y1 - y0 + 1, static_cast<long>(w), static_cast<long>(h)}});
  }
  return comps;
}

// Tight boxes of the two largest components, left one first.
inline std::array<BBox, 2> extract_bboxes(const Image& prob, double threshold = 0.5) {
  if (prob.empty()) throw DimensionError("extract_bboxes: empty probability map");
  auto comps = label_components(prob, threshold);
  if (comps.size() < 2) throw DetectionError(comps.size());
  std::stable_sort(comps.begin(), comps.end(), [](const Component& a, const Component& b) { return a.pixels > b.pixels; });
  std::array<BBox, 2> out{comps[0].bounds, comps[1].bounds};
  if (out[1].center_x() < out[0].center_x()) std::swap(out[0], out[1]);
  return out;
}

// Maps a box into a frame of original_w x original_h, scaling each axis
// independently and rounding to the nearest pixel.
inline BBox upscale_bbox(const BBox& b, long original_w, long original_h) {
  validate(b);
  if (original_w <= 0 || original_h <= 0) throw ArgumentError("upscale_bbox: target frame must be positive");
  const double sx = static_cast<double>(original_w) / static_cast<double>(b.frame_w);
  const double sy = static_cast<double>(original_h) / static_cast<double>(b.frame_h);
  BBox out{};
  out.frame_w = original_w;
  out.frame_h = original_h;
  out.x = std::clamp(detail::round_half_up(static_cast<double>(b.x) * sx), 0L, original_w - 1);
  out.y = std::clamp(detail::round_half_up(static_cast<double>(b.y) * sy), 0L, original_h - 1);
  out.w = std::clamp(detail::round_half_up(static_cast<double>(b.w) * sx), 1L, original_w - out.x);
  out.h = std::clamp(detail::round_half_up(static_cast<double>(b.h) * sy), 1L, original_h - out.y);
  return out;
}

// Crop at the image's own resolution, then bilinear resize.
inline Image crop_and_resize(const Image& img, const BBox& b, std::size_t out_h = 200, std::size_t out_w = 300) {
  if (static_cast<long>(img.width) != b.frame_w || static_cast<long>(img.height) != b.frame_h)
    throw ArgumentError("crop_and_resize: bbox frame does not match the image");
  validate(b);
  Image crop(static_cast<std::size_t>(b.h), static_cast<std::size_t>(b.w));
  for (long y = 0; y < b.h; ++y)
    for (long x = 0; x < b.w; ++x)
      crop.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
          img.at(static_cast<std::size_t>(b.y + y), static_cast<std::size_t>(b.x + x));
  return resize_bilinear(crop, out_h, out_w);
}

struct DetectionReport {
  std::size_t knees = 0;
  double rate_025 = 0, rate_050 = 0, rate_075 = 0;  // percent of knees
  double mean = 0, std_dev = 0;                      // population std

  std::string to_csv() const {
    std::ostringstream os;
    os << std::setprecision(6) << std::fixed;
    os << "knees,j_ge_0.25,j_ge_0.5,j_ge_0.75,mean,std\n";
    os << knees << ',' << rate_025 << ',' << rate_050 << ',' << rate_075 << ',' << mean << ',' << std_dev << '\n';
    return os.str();
  }

  std::string to_json() const {
    std::ostringstream os;
    os << std::setprecision(6) << std::fixed;
    os << "{\n  \"knees\": " << knees << ",\n  \"j_ge_0.25\": " << rate_025 << ",\n  \"j_ge_0.5\": " << rate_050
       << ",\n  \"j_ge_0.75\": " << rate_075 << ",\n  \"mean\": " << mean << ",\n  \"std\": " << std_dev << "\n}\n";
    return os.str();
  }
};

inline DetectionReport detection_report(std::span<const double> scores) {
  if (scores.empty()) throw ArgumentError("detection_report: no detections");
  DetectionReport r;
  r.knees = scores.size();
  const double n = static_cast<double>(scores.size());
  auto pct = [&](double t) {
    return 100.0 * static_cast<double>(std::count_if(scores.begin(), scores.end(), [t](double j) { return j >= t; })) / n;
  };
  r.rate_025 = pct(0.25);
  r.rate_050 = pct(0.5);
  r.rate_075 = pct(0.75);
  r.mean = std::accumulate(scores.begin(), scores.end(), 0.0) / n;
  double ss = 0;
  for (double j : scores) ss += (j - r.mean) * (j - r.mean);
  r.std_dev = std::sqrt(ss / n);
  return r;
}

inline DetectionReport detection_report(std::span<const std::pair<BBox, BBox>> pairs) {
  std::vector<double> scores;
  scores.reserve(pairs.size());
  for (const auto& [pred, truth] : pairs) scores.push_back(jaccard(pred, truth));
  return detection_report(std::span<const double>(scores));
}

// ---- FCN training / inference ----

struct MaskSample {
  Image image;  // model input size, [0,1]
  Image mask;   // same size, 0/1
};

struct FcnTrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  double lr = 0.001;
  double val_fraction = 0.15;
};

struct FcnHistoryRow {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
};

struct FcnTrainResult {
  std::vector<FcnHistoryRow> history;
  std::size_t best_epoch = 0;
  double best_val_loss = 0;
};

template <std::floating_point T>
double fcn_loss(const ModelGraph<T>& model, std::span<const MaskSample> data, std::span<const std::size_t> idx,
                std::size_t batch_size) {
  double total = 0;
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const auto chunk = idx.subspan(start, std::min(batch_size, idx.size() - start));
    auto x = image_batch<T>(data, chunk, [](const MaskSample& s) -> const Image& { return s.image; });
    auto y = image_batch<T>(data, chunk, [](const MaskSample& s) -> const Image& { return s.mask; });
    auto p = forward(model, x, Mode::Infer)[0];
    total += static_cast<double>(bce_pixelwise(p, y)->item()) * static_cast<double>(chunk.size());
  }
  return total / static_cast<double>(idx.size());
}

// Adam on mean pixel-wise BCE. A seeded 85/15 split of `data` drives
// model selection; the best-validation weights are restored at the end.
template <std::floating_point T>
FcnTrainResult train_fcn(ModelGraph<T>& model, std::span<const MaskSample> data, const FcnTrainConfig& cfg, Rng& rng) {
  if (data.empty()) throw ArgumentError("train_fcn: empty dataset");
  if (cfg.epochs == 0 || cfg.batch_size == 0) throw ArgumentError("train_fcn: epochs and batch size must be positive");
  auto [train_idx, val_idx] = holdout_split(data.size(), cfg.val_fraction, rng);
  const auto& select_idx = val_idx.empty() ? train_idx : val_idx;

  const auto params = model.parameter_tensors();
  AdamState<T> adam;
  adam.init(params, cfg.lr);
  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;

  FcnTrainResult result;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  auto best = model.snapshot();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double seen = 0, loss_sum = 0;
    for (std::size_t start = 0; start < train_idx.size(); start += cfg.batch_size) {
      const auto chunk = std::span<const std::size_t>(train_idx).subspan(start, std::min(cfg.batch_size, train_idx.size() - start));
      auto x = image_batch<T>(data, chunk, [](const MaskSample& s) -> const Image& { return s.image; });
      auto y = image_batch<T>(data, chunk, [](const MaskSample& s) -> const Image& { return s.mask; });
      Tape<T> tape;
      auto p = forward(model, x, Mode::Train, &rng, &tape)[0];
      auto loss = bce_pixelwise(p, y, &tape);
      zero_grads(params);
      tape.backward(loss);
      adam_step(params, adam, adam_cfg);
      loss_sum += static_cast<double>(loss->item()) * static_cast<double>(chunk.size());
      seen += static_cast<double>(chunk.size());
    }
    FcnHistoryRow row{epoch, loss_sum / seen, fcn_loss(model, data, select_idx, cfg.batch_size)};
    result.history.push_back(row);
    if (row.val_loss < result.best_val_loss) {
      result.best_val_loss = row.val_loss;
      result.best_epoch = epoch;
      best = model.snapshot();
    }
  }
  for (const auto& p : params) p->clear_grad();
  model.restore(best);
  return result;
}

// Sigmoid probability map for one image at the model's input size.
template <std::floating_point T>
Image predict_mask(const ModelGraph<T>& model, const Image& image) {
  const Shape& want = model.input_shape;
  if (want.size() != 3 || image.height != want[1] || image.width != want[2])
    throw DimensionError("predict_mask: image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         " does not match model input " + shape_string(want));
  auto x = make_tensor<T>({1, 1, image.height, image.width});
  std::copy(image.pixels.begin(), image.pixels.end(), x->data().begin());
  auto p = forward(model, x, Mode::Infer)[0];
  Image out(image.height, image.width);
  std::copy(p->data().begin(), p->data().end(), out.pixels.begin());
  return out;
}

// Full detection path for a radiograph of any size: resize to the model,
// predict, extract, and map the boxes back to the radiograph's frame.
template <std::floating_point T>
std::array<BBox, 2> detect_knees(const ModelGraph<T>& model, const Image& radiograph, double threshold = 0.5) {
  const std::size_t s = model.input_shape.at(1);
  const Image small = (radiograph.height == s && radiograph.width == model.input_shape.at(2))
                          ? radiograph
                          : resize_bilinear(radiograph, s, model.input_shape.at(2));
  auto boxes = extract_bboxes(predict_mask(model, small), threshold);
  for (auto& b : boxes)
    b = upscale_bbox(b, static_cast<long>(radiograph.width), static_cast<long>(radiograph.height));
  return boxes;
}

}  // namespace koa
