#pragma once

// Differentiable operators on NCHW / NxD tensors. Every op is a pure function
// of its inputs; passing a tape records the backward closure, passing nullptr
// runs inference only.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "koa/tensor.hpp"

namespace koa {

using Rng = std::mt19937_64;

enum class Mode { Train, Infer };
enum class Padding { Same, Valid };

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
void accumulate(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

inline void require_rank(const char* op, const Shape& shape, std::size_t rank, const char* what) {
  if (shape.size() != rank)
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                         ", got " + shape_string(shape));
}

inline std::string axis_mismatch(const char* op, const char* lhs, std::size_t lhs_axis, std::size_t lhs_dim,
                                 const char* rhs, std::size_t rhs_axis, std::size_t rhs_dim) {
  return std::string(op) + ": " + lhs + " axis " + std::to_string(lhs_axis) + " (" + std::to_string(lhs_dim) +
         ") does not match " + rhs + " axis " + std::to_string(rhs_axis) + " (" + std::to_string(rhs_dim) + ")";
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel_h, kernel_w, stride;
  std::size_t out_h, out_w;
  std::ptrdiff_t pad_top, pad_left;

  std::size_t col_rows() const { return channels * kernel_h * kernel_w; }
  std::size_t col_cols() const { return out_h * out_w; }
  bool is_pointwise() const { return kernel_h == 1 && kernel_w == 1 && stride == 1 && pad_top == 0 && pad_left == 0; }
};

// Output extent and leading pad; "same" follows the usual
// ceil(in/stride) rule with the odd pixel of padding placed after.
inline void conv_extent(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding, std::size_t& out,
                        std::ptrdiff_t& pad_before) {
  if (padding == Padding::Same) {
    out = (in + stride - 1) / stride;
    const std::ptrdiff_t needed = static_cast<std::ptrdiff_t>((out - 1) * stride + kernel) - static_cast<std::ptrdiff_t>(in);
    pad_before = std::max<std::ptrdiff_t>(needed, 0) / 2;
  } else {
    if (in < kernel) throw DimensionError("conv2d: valid padding needs input extent >= kernel extent");
    out = (in - kernel) / stride + 1;
    pad_before = 0;
  }
}

template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
  const std::size_t plane = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* src = image + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        T* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - g.pad_top;
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          const T* line = src + iy * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - g.pad_left;
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) ? T{0} : line[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* image) {
  const std::size_t plane = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* dst = image + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        const T* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - g.pad_top;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* line = dst + iy * g.width;
          const T* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) - g.pad_left;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) line[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-D cross-correlation. input [N,C,H,W], kernel [O,C,Kh,Kw], bias [O].
template <std::floating_point T>
TensorPtr<T> conv2d(const TensorPtr<T>& input, const TensorPtr<T>& kernel, const TensorPtr<T>& bias,
                    Padding padding = Padding::Same, std::size_t stride = 1, Tape<T>* tape = nullptr) {
  using namespace detail;
  if (stride == 0) throw ArgumentError("conv2d: stride must be >= 1");
  require_rank("conv2d", input->shape(), 4, "input");
  require_rank("conv2d", kernel->shape(), 4, "kernel");
  require_rank("conv2d", bias->shape(), 1, "bias");
  if (input->dim(1) != kernel->dim(1))
    throw DimensionError(axis_mismatch("conv2d", "input", 1, input->dim(1), "kernel", 1, kernel->dim(1)));
  if (bias->dim(0) != kernel->dim(0))
    throw DimensionError(axis_mismatch("conv2d", "bias", 0, bias->dim(0), "kernel", 0, kernel->dim(0)));

  ConvGeometry g{};
  const std::size_t batch = input->dim(0);
  const std::size_t out_c = kernel->dim(0);
  g.channels = input->dim(1);
  g.height = input->dim(2);
  g.width = input->dim(3);
  g.kernel_h = kernel->dim(2);
  g.kernel_w = kernel->dim(3);
  g.stride = stride;
  conv_extent(g.height, g.kernel_h, stride, padding, g.out_h, g.pad_top);
  conv_extent(g.width, g.kernel_w, stride, padding, g.out_w, g.pad_left);

  auto out = make_tensor<T>({batch, out_c, g.out_h, g.out_w});
  const std::size_t rows = g.col_rows(), cols = g.col_cols();
  const std::size_t in_plane = g.channels * g.height * g.width;
  const std::size_t out_plane = out_c * cols;

  Buffer<T> col(g.is_pointwise() ? 0 : rows * cols);
  ConstMatMap<T> w(kernel->data().data(), out_c, rows);
  for (std::size_t n = 0; n < batch; ++n) {
    const T* x = input->data().data() + n * in_plane;
    if (!g.is_pointwise()) im2col(x, g, col.data());
    ConstMatMap<T> cm(g.is_pointwise() ? x : col.data(), rows, cols);
    MatMap<T> y(out->data().data() + n * out_plane, out_c, cols);
    y.noalias() = w * cm;
    for (std::size_t o = 0; o < out_c; ++o) y.row(o).array() += (*bias)[o];
  }

  if (tape) {
    tape->record("conv2d", [input, kernel, bias, out, g, batch, out_c] {
      if (!out->has_grad()) return;
      const std::size_t rows = g.col_rows(), cols = g.col_cols();
      const std::size_t in_plane = g.channels * g.height * g.width;
      const std::size_t out_plane = out_c * cols;
      auto dk = kernel->ensure_grad();
      auto db = bias->ensure_grad();
      auto dx = input->ensure_grad();
      MatMap<T> dw(dk.data(), out_c, rows);
      ConstMatMap<T> w(kernel->data().data(), out_c, rows);
      Buffer<T> col(g.is_pointwise() ? 0 : rows * cols);
      Buffer<T> dcol(rows * cols);
      for (std::size_t n = 0; n < batch; ++n) {
        const T* x = input->data().data() + n * in_plane;
        ConstMatMap<T> dy(out->grad().data() + n * out_plane, out_c, cols);
        if (!g.is_pointwise()) im2col(x, g, col.data());
        ConstMatMap<T> cm(g.is_pointwise() ? x : col.data(), rows, cols);
        dw.noalias() += dy * cm.transpose();
        for (std::size_t o = 0; o < out_c; ++o) db[o] += dy.row(o).sum();
        if (g.is_pointwise()) {
          MatMap<T> dxm(dx.data() + n * in_plane, rows, cols);
          dxm.noalias() += w.transpose() * dy;
        } else {
          MatMap<T> dc(dcol.data(), rows, cols);
          dc.noalias() = w.transpose() * dy;
          col2im(dcol.data(), g, dx.data() + n * in_plane);
        }
      }
    });
  }
  return out;
}

// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
// Ties go to the first element of the window in row-major order.
template <std::floating_point T>
TensorPtr<T> maxpool2(const TensorPtr<T>& input, Tape<T>* tape = nullptr) {
  detail::require_rank("maxpool2", input->shape(), 4, "input");
  const std::size_t n = input->dim(0), c = input->dim(1), h = input->dim(2), w = input->dim(3);
  if (h < 2 || w < 2)
    throw DimensionError("maxpool2: spatial dims must be >= 2, got " + shape_string(input->shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  auto out = make_tensor<T>({n, c, oh, ow});
  std::vector<std::size_t> argmax(out->size());
  const auto& x = input->storage();
  std::size_t k = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++k) {
        std::size_t best = base + (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = base + (2 * oy + dy) * w + 2 * ox + dx;
            if (x[idx] > x[best]) best = idx;
          }
        argmax[k] = best;
        (*out)[k] = x[best];
      }
    }
  }
  if (tape) {
    tape->record("maxpool2", [input, out, argmax = std::move(argmax)] {
      if (!out->has_grad()) return;
      auto dx = input->ensure_grad();
      auto dy = out->grad();
      for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += dy[i];
    });
  }
  return out;
}

// Nearest-neighbour upsampling: each pixel becomes a factor x factor block.
template <std::floating_point T>
TensorPtr<T> upsample_nn(const TensorPtr<T>& input, std::size_t factor, Tape<T>* tape = nullptr) {
  if (factor == 0) throw ArgumentError("upsample_nn: factor must be >= 1");
  detail::require_rank("upsample_nn", input->shape(), 4, "input");
  const std::size_t n = input->dim(0), c = input->dim(1), h = input->dim(2), w = input->dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  auto out = make_tensor<T>({n, c, oh, ow});
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = input->data().data() + plane * h * w;
    T* dst = out->data().data() + plane * oh * ow;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) dst[y * ow + x] = src[(y / factor) * w + x / factor];
  }
  if (tape) {
    tape->record("upsample_nn", [input, out, factor] {
      if (!out->has_grad()) return;
      const std::size_t planes = input->dim(0) * input->dim(1), h = input->dim(2), w = input->dim(3);
      const std::size_t oh = h * factor, ow = w * factor;
      auto dx = input->ensure_grad();
      for (std::size_t plane = 0; plane < planes; ++plane) {
        const T* dy = out->grad().data() + plane * oh * ow;
        T* d = dx.data() + plane * h * w;
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t x = 0; x < ow; ++x) d[(y / factor) * w + x / factor] += dy[y * ow + x];
      }
    });
  }
  return out;
}

namespace detail {
struct LerpTap {
  std::size_t i0, i1;
  double a;  // weight of i1
};

// Half-pixel-centred sampling positions, clamped at the borders.
inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t factor) {
  std::vector<LerpTap> taps(in * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    const double src = std::max(0.0, (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5);
    const auto i0 = std::min(static_cast<std::size_t>(src), in - 1);
    taps[o] = {i0, std::min(i0 + 1, in - 1), src - static_cast<double>(i0)};
  }
  return taps;
}
}  // namespace detail

// Bilinear upsampling by an integer factor (half-pixel centres, edge clamp).
template <std::floating_point T>
TensorPtr<T> upsample_bilinear(const TensorPtr<T>& input, std::size_t factor, Tape<T>* tape = nullptr) {
  if (factor == 0) throw ArgumentError("upsample_bilinear: factor must be >= 1");
  detail::require_rank("upsample_bilinear", input->shape(), 4, "input");
  const std::size_t n = input->dim(0), c = input->dim(1), h = input->dim(2), w = input->dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  const auto ty = detail::lerp_taps(h, factor), tx = detail::lerp_taps(w, factor);
  auto out = make_tensor<T>({n, c, oh, ow});
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = input->data().data() + plane * h * w;
    T* dst = out->data().data() + plane * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      const T* r0 = src + ty[y].i0 * w;
      const T* r1 = src + ty[y].i1 * w;
      const T ay = static_cast<T>(ty[y].a);
      for (std::size_t x = 0; x < ow; ++x) {
        const T ax = static_cast<T>(tx[x].a);
        const T top = r0[tx[x].i0] + ax * (r0[tx[x].i1] - r0[tx[x].i0]);
        const T bot = r1[tx[x].i0] + ax * (r1[tx[x].i1] - r1[tx[x].i0]);
        dst[y * ow + x] = top + ay * (bot - top);
      }
    }
  }
  if (tape) {
    tape->record("upsample_bilinear", [input, out, ty, tx] {
      if (!out->has_grad()) return;
      const std::size_t planes = input->dim(0) * input->dim(1), h = input->dim(2), w = input->dim(3);
      const std::size_t oh = ty.size(), ow = tx.size();
      auto dx = input->ensure_grad();
      for (std::size_t plane = 0; plane < planes; ++plane) {
        const T* dy = out->grad().data() + plane * oh * ow;
        T* d = dx.data() + plane * h * w;
        for (std::size_t y = 0; y < oh; ++y) {
          const T ay = static_cast<T>(ty[y].a);
          T* d0 = d + ty[y].i0 * w;
          T* d1 = d + ty[y].i1 * w;
          for (std::size_t x = 0; x < ow; ++x) {
            const T g = dy[y * ow + x];
            const T ax = static_cast<T>(tx[x].a);
            d0[tx[x].i0] += (1 - ay) * (1 - ax) * g;
            d0[tx[x].i1] += (1 - ay) * ax * g;
            d1[tx[x].i0] += ay * (1 - ax) * g;
            d1[tx[x].i1] += ay * ax * g;
          }
        }
      }
    });
  }
  return out;
}

// Per-channel batch normalization over [N,C,H,W] or [N,C].
// Running statistics are updated in train mode as
// running = momentum * running + (1 - momentum) * batch.
template <std::floating_point T>
TensorPtr<T> batchnorm(const TensorPtr<T>& input, const TensorPtr<T>& gamma, const TensorPtr<T>& beta, Mode mode,
                       const TensorPtr<T>& running_mean, const TensorPtr<T>& running_var, T momentum = T(0.99),
                       T epsilon = T(1e-5), Tape<T>* tape = nullptr) {
  if (!(epsilon > 0)) throw ArgumentError("batchnorm: epsilon must be > 0");
  if (input->rank() != 4 && input->rank() != 2)
    throw DimensionError("batchnorm: input must be [N,C,H,W] or [N,C], got " + shape_string(input->shape()));
  const std::size_t n = input->dim(0), c = input->dim(1);
  const std::size_t spatial = input->size() / (n * c);
  for (const auto* p : {&gamma, &beta, &running_mean, &running_var})
    if ((*p)->size() != c)
      throw DimensionError(detail::axis_mismatch("batchnorm", "input", 1, c, "parameter", 0, (*p)->size()));

  const std::size_t count = n * spatial;
  std::vector<T> mean(c), inv_std(c);
  if (mode == Mode::Train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = input->data().data() + (b * c + ch) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = input->data().data() + (b * c + ch) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) v += (p[i] - mu) * (p[i] - mu);
      }
      v /= static_cast<double>(count);
      mean[ch] = static_cast<T>(mu);
      inv_std[ch] = static_cast<T>(1.0 / std::sqrt(v + static_cast<double>(epsilon)));
      (*running_mean)[ch] = momentum * (*running_mean)[ch] + (T{1} - momentum) * static_cast<T>(mu);
      (*running_var)[ch] = momentum * (*running_var)[ch] + (T{1} - momentum) * static_cast<T>(v);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = (*running_mean)[ch];
      inv_std[ch] = T{1} / std::sqrt((*running_var)[ch] + epsilon);
    }
  }

  auto out = make_tensor<T>(input->shape());
  std::vector<T> xhat(input->size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        const T xh = ((*input)[off + i] - mean[ch]) * inv_std[ch];
        xhat[off + i] = xh;
        (*out)[off + i] = (*gamma)[ch] * xh + (*beta)[ch];
      }
    }

  if (tape) {
    tape->record("batchnorm", [input, gamma, beta, out, mode, inv_std, xhat = std::move(xhat), n, c, spatial] {
      if (!out->has_grad()) return;
      auto dy = out->grad();
      auto dx = input->ensure_grad();
      auto dg = gamma->ensure_grad();
      auto dbt = beta->ensure_grad();
      const T m = static_cast<T>(n * spatial);
      for (std::size_t ch = 0; ch < c; ++ch) {
        T sum_dy = 0, sum_dy_xhat = 0;
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t off = (b * c + ch) * spatial;
          for (std::size_t i = 0; i < spatial; ++i) {
            sum_dy += dy[off + i];
            sum_dy_xhat += dy[off + i] * xhat[off + i];
          }
        }
        dg[ch] += sum_dy_xhat;
        dbt[ch] += sum_dy;
        const T scale = (*gamma)[ch] * inv_std[ch];
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t off = (b * c + ch) * spatial;
          for (std::size_t i = 0; i < spatial; ++i) {
            if (mode == Mode::Train)
              dx[off + i] += scale / m * (m * dy[off + i] - sum_dy - xhat[off + i] * sum_dy_xhat);
            else
              dx[off + i] += scale * dy[off + i];
          }
        }
      }
    });
  }
  return out;
}

template <std::floating_point T>
TensorPtr<T> relu(const TensorPtr<T>& input, Tape<T>* tape = nullptr) {
  auto out = make_tensor<T>(input->shape());
  for (std::size_t i = 0; i < input->size(); ++i) (*out)[i] = std::max((*input)[i], T{0});
  if (tape) {
    tape->record("relu", [input, out] {
      if (!out->has_grad()) return;
      auto dx = input->ensure_grad();
      auto dy = out->grad();
      for (std::size_t i = 0; i < dx.size(); ++i)
        if ((*input)[i] > T{0}) dx[i] += dy[i];
    });
  }
  return out;
}

template <std::floating_point T>
TensorPtr<T> sigmoid(const TensorPtr<T>& input, Tape<T>* tape = nullptr) {
  auto out = make_tensor<T>(input->shape());
  for (std::size_t i = 0; i < input->size(); ++i) {
    const T x = (*input)[i];
    // Split by sign so exp never overflows.
    (*out)[i] = x >= 0 ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x));
  }
  if (tape) {
    tape->record("sigmoid", [input, out] {
      if (!out->has_grad()) return;
      auto dx = input->ensure_grad();
      auto dy = out->grad();
      for (std::size_t i = 0; i < dx.size(); ++i) {
        const T s = (*out)[i];
        dx[i] += dy[i] * s * (T{1} - s);
      }
    });
  }
  return out;
}

// Row-wise softmax over a [N,K] tensor.
template <std::floating_point T>
TensorPtr<T> softmax(const TensorPtr<T>& input, Tape<T>* tape = nullptr) {
  detail::require_rank("softmax", input->shape(), 2, "input");
  const std::size_t n = input->dim(0), k = input->dim(1);
  auto out = make_tensor<T>(input->shape());
  for (std::size_t r = 0; r < n; ++r) {
    const T* x = input->data().data() + r * k;
    T* y = out->data().data() + r * k;
    const T mx = *std::max_element(x, x + k);
    T sum = 0;
    for (std::size_t j = 0; j < k; ++j) sum += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < k; ++j) y[j] /= sum;
  }
  if (tape) {
    tape->record("softmax", [input, out, n, k] {
      if (!out->has_grad()) return;
      auto dx = input->ensure_grad();
      auto dy = out->grad();
      for (std::size_t r = 0; r < n; ++r) {
        T dot = 0;
        for (std::size_t j = 0; j < k; ++j) dot += dy[r * k + j] * (*out)[r * k + j];
        for (std::size_t j = 0; j < k; ++j) dx[r * k + j] += (*out)[r * k + j] * (dy[r * k + j] - dot);
      }
    });
  }
  return out;
}

// input [N,D] x weight [D,U] + bias [U].
template <std::floating_point T>
TensorPtr<T> dense(const TensorPtr<T>& input, const TensorPtr<T>& weight, const TensorPtr<T>& bias,
                   Tape<T>* tape = nullptr) {
  using namespace detail;
  require_rank("dense", input->shape(), 2, "input");
  require_rank("dense", weight->shape(), 2, "weight");
  require_rank("dense", bias->shape(), 1, "bias");
  if (input->dim(1) != weight->dim(0))
    throw DimensionError(axis_mismatch("dense", "input", 1, input->dim(1), "weight", 0, weight->dim(0)));
  if (bias->dim(0) != weight->dim(1))
    throw DimensionError(axis_mismatch("dense", "bias", 0, bias->dim(0), "weight", 1, weight->dim(1)));
  const std::size_t n = input->dim(0), d = input->dim(1), u = weight->dim(1);
  auto out = make_tensor<T>({n, u});
  ConstMatMap<T> x(input->data().data(), n, d);
  ConstMatMap<T> w(weight->data().data(), d, u);
  MatMap<T> y(out->data().data(), n, u);
  y.noalias() = x * w;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < u; ++j) y(r, j) += (*bias)[j];
  if (tape) {
    tape->record("dense", [input, weight, bias, out, n, d, u] {
      if (!out->has_grad()) return;
      ConstMatMap<T> dy(out->grad().data(), n, u);
      ConstMatMap<T> x(input->data().data(), n, d);
      ConstMatMap<T> w(weight->data().data(), d, u);
      MatMap<T> dx(input->ensure_grad().data(), n, d);
      MatMap<T> dw(weight->ensure_grad().data(), d, u);
      auto db = bias->ensure_grad();
      dx.noalias() += dy * w.transpose();
      dw.noalias() += x.transpose() * dy;
      for (std::size_t j = 0; j < u; ++j) db[j] += dy.col(j).sum();
    });
  }
  return out;
}

// Inverted dropout: survivors are scaled by 1/(1-p); inference is identity.
template <std::floating_point T>
TensorPtr<T> dropout(const TensorPtr<T>& input, double p, Mode mode, Rng& rng, Tape<T>* tape = nullptr) {
  if (!(p >= 0.0) || p >= 1.0) throw ArgumentError("dropout: probability must be in [0, 1), got " + std::to_string(p));
  if (mode == Mode::Infer || p == 0.0) return input;
  auto out = make_tensor<T>(input->shape());
  std::vector<T> mask(input->size());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = u(rng) < p ? T{0} : keep_scale;
    (*out)[i] = (*input)[i] * mask[i];
  }
  if (tape) {
    tape->record("dropout", [input, out, mask = std::move(mask)] {
      if (!out->has_grad()) return;
      auto dx = input->ensure_grad();
      auto dy = out->grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * mask[i];
    });
  }
  return out;
}

// [N, ...] -> [N, prod(...)]
template <std::floating_point T>
TensorPtr<T> flatten(const TensorPtr<T>& input, Tape<T>* tape = nullptr) {
  const std::size_t n = input->dim(0);
  auto out = std::make_shared<Tensor<T>>(Shape{n, input->size() / n}, input->storage());
  if (tape) {
    tape->record("flatten", [input, out] {
      if (!out->has_grad()) return;
      detail::accumulate<T>(input->ensure_grad(), out->grad());
    });
  }
  return out;
}

// a + b for equal shapes.
template <std::floating_point T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b, Tape<T>* tape = nullptr) {
  if (a->shape() != b->shape())
    throw DimensionError("add: shapes " + shape_string(a->shape()) + " and " + shape_string(b->shape()) + " differ");
  auto out = make_tensor<T>(a->shape());
  for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = (*a)[i] + (*b)[i];
  if (tape) {
    tape->record("add", [a, b, out] {
      if (!out->has_grad()) return;
      detail::accumulate<T>(a->ensure_grad(), out->grad());
      detail::accumulate<T>(b->ensure_grad(), out->grad());
    });
  }
  return out;
}

template <std::floating_point T>
TensorPtr<T> scale(const TensorPtr<T>& a, T factor, Tape<T>* tape = nullptr) {
  auto out = make_tensor<T>(a->shape());
  for (std::size_t i = 0; i < out->size(); ++i) (*out)[i] = (*a)[i] * factor;
  if (tape) {
    tape->record("scale", [a, out, factor] {
      if (!out->has_grad()) return;
      auto da = a->ensure_grad();
      auto dy = out->grad();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i] * factor;
    });
  }
  return out;
}

}  // namespace koa
