#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "koa/errors.hpp"
#include "koa/image.hpp"
#include "koa/ops.hpp"
#include "koa/tensor.hpp"

namespace koa {

// Stacks the images picked by `idx` into an [B,1,H,W] tensor.
template <std::floating_point T, typename Sample, typename Get>
TensorPtr<T> image_batch(std::span<const Sample> data, std::span<const std::size_t> idx, Get&& get) {
  if (idx.empty()) throw ArgumentError("image_batch: empty batch");
  const Image& first = get(data[idx[0]]);
  const std::size_t h = first.height, w = first.width;
  auto out = make_tensor<T>({idx.size(), 1, h, w});
  T* dst = out->data().data();
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Image& img = get(data[idx[b]]);
    if (img.height != h || img.width != w)
      throw DimensionError("image_batch: images in one batch differ in size");
    std::copy(img.pixels.begin(), img.pixels.end(), dst + b * h * w);
  }
  return out;
}

// Shuffled (train, held-out) index sets; held-out gets floor(n * frac).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_split(std::size_t n, double frac, Rng& rng) {
  if (frac < 0 || frac >= 1) throw ArgumentError("holdout fraction must be in [0,1)");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto held = static_cast<std::size_t>(std::floor(static_cast<double>(n) * frac));
  std::vector<std::size_t> val(idx.end() - static_cast<std::ptrdiff_t>(held), idx.end());
  idx.resize(n - held);
  return {std::move(idx), std::move(val)};
}

}  // namespace koa
