#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "koa/tensor.hpp"

namespace koa {

inline constexpr double kLossClamp = 1e-7;

// Mean pixel-wise binary cross entropy. Predictions are clamped to
// [1e-7, 1 - 1e-7]; the gradient is zero where the clamp is active.
template <std::floating_point T>
TensorPtr<T> bce_pixelwise(const TensorPtr<T>& pred, const TensorPtr<T>& target, Tape<T>* tape = nullptr) {
  if (pred->shape() != target->shape())
    throw DimensionError("bce_pixelwise: prediction " + shape_string(pred->shape()) + " vs target " +
                         shape_string(target->shape()));
  const T lo = static_cast<T>(kLossClamp), hi = T{1} - static_cast<T>(kLossClamp);
  double total = 0.0;
  for (std::size_t i = 0; i < pred->size(); ++i) {
    const double p = std::clamp((*pred)[i], lo, hi);
    const double t = (*target)[i];
    total -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
  }
  auto out = make_scalar<T>(static_cast<T>(total / static_cast<double>(pred->size())));
  if (tape) {
    tape->record("bce_pixelwise", [pred, target, out, lo, hi] {
      if (!out->has_grad()) return;
      const T g = out->grad()[0] / static_cast<T>(pred->size());
      auto dp = pred->ensure_grad();
      for (std::size_t i = 0; i < dp.size(); ++i) {
        const T p = (*pred)[i];
        if (p < lo || p > hi) continue;
        const T t = (*target)[i];
        dp[i] += g * (-t / p + (T{1} - t) / (T{1} - p));
      }
    });
  }
  return out;
}

// Mean categorical cross entropy of probability rows [N,K] against integer labels.
template <std::floating_point T>
TensorPtr<T> cce(const TensorPtr<T>& probs, std::span<const int> labels, Tape<T>* tape = nullptr) {
  if (probs->rank() != 2) throw DimensionError("cce: probabilities must be [N,K], got " + shape_string(probs->shape()));
  const std::size_t n = probs->dim(0), k = probs->dim(1);
  if (labels.size() != n)
    throw DimensionError("cce: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  for (int label : labels)
    if (label < 0 || static_cast<std::size_t>(label) >= k)
      throw ArgumentError("cce: label " + std::to_string(label) + " outside [0, " + std::to_string(k - 1) + "]");
  const T lo = static_cast<T>(kLossClamp);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) total -= std::log(std::max((*probs)[r * k + labels[r]], lo));
  auto out = make_scalar<T>(static_cast<T>(total / static_cast<double>(n)));
  if (tape) {
    tape->record("cce", [probs, labels = std::vector<int>(labels.begin(), labels.end()), out, n, k, lo] {
      if (!out->has_grad()) return;
      const T g = out->grad()[0] / static_cast<T>(n);
      auto dp = probs->ensure_grad();
      for (std::size_t r = 0; r < n; ++r) {
        const T p = (*probs)[r * k + labels[r]];
        if (p >= lo) dp[r * k + labels[r]] -= g / p;
      }
    });
  }
  return out;
}

// Mean squared error between N predictions (any shape with N elements) and N targets.
template <std::floating_point T>
TensorPtr<T> mse(const TensorPtr<T>& pred, std::span<const T> target, Tape<T>* tape = nullptr) {
  if (target.empty()) throw ArgumentError("mse: empty input");
  if (pred->size() != target.size())
    throw DimensionError("mse: " + std::to_string(pred->size()) + " predictions for " +
                         std::to_string(target.size()) + " targets");
  double total = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double d = static_cast<double>((*pred)[i]) - static_cast<double>(target[i]);
    total += d * d;
  }
  auto out = make_scalar<T>(static_cast<T>(total / static_cast<double>(target.size())));
  if (tape) {
    tape->record("mse", [pred, target = std::vector<T>(target.begin(), target.end()), out] {
      if (!out->has_grad()) return;
      const T g = out->grad()[0] * T{2} / static_cast<T>(target.size());
      auto dp = pred->ensure_grad();
      for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += g * ((*pred)[i] - target[i]);
    });
  }
  return out;
}

// Plain-value mean squared error, for metrics.
inline double mean_squared_error(std::span<const double> pred, std::span<const double> target) {
  if (pred.empty()) throw ArgumentError("mean_squared_error: empty input");
  if (pred.size() != target.size()) throw ArgumentError("mean_squared_error: length mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) total += (pred[i] - target[i]) * (pred[i] - target[i]);
  return total / static_cast<double>(pred.size());
}

// Weighted joint objective: cce + weight * mse.
inline double joint_loss(double cce_value, double mse_value, double weight) {
  if (cce_value < 0 || mse_value < 0 || weight < 0)
    throw ArgumentError("joint_loss: components and weight must be non-negative");
  return cce_value + weight * mse_value;
}

template <std::floating_point T>
TensorPtr<T> joint_loss(const TensorPtr<T>& cce_value, const TensorPtr<T>& mse_value, T weight,
                        Tape<T>* tape = nullptr) {
  if (!cce_value->is_scalar() || !mse_value->is_scalar()) throw ArgumentError("joint_loss: scalar inputs required");
  if (cce_value->item() < 0 || mse_value->item() < 0 || weight < 0)
    throw ArgumentError("joint_loss: components and weight must be non-negative");
  auto out = make_scalar<T>(cce_value->item() + weight * mse_value->item());
  if (tape) {
    tape->record("joint_loss", [cce_value, mse_value, out, weight] {
      if (!out->has_grad()) return;
      const T g = out->grad()[0];
      cce_value->ensure_grad()[0] += g;
      mse_value->ensure_grad()[0] += g * weight;
    });
  }
  return out;
}

// lambda * sum of squared weights over the given tensors.
template <std::floating_point T>
TensorPtr<T> l2_penalty(const std::vector<TensorPtr<T>>& params, T lambda, Tape<T>* tape = nullptr) {
  if (lambda < 0) throw ArgumentError("l2_penalty: lambda must be >= 0");
  double total = 0.0;
  for (const auto& p : params)
    for (T w : p->data()) total += static_cast<double>(w) * static_cast<double>(w);
  auto out = make_scalar<T>(static_cast<T>(lambda * total));
  if (tape && lambda > 0) {
    tape->record("l2_penalty", [params, out, lambda] {
      if (!out->has_grad()) return;
      const T g = out->grad()[0] * T{2} * lambda;
      for (const auto& p : params) {
        auto dw = p->ensure_grad();
        for (std::size_t i = 0; i < dw.size(); ++i) dw[i] += g * (*p)[i];
      }
    });
  }
  return out;
}

}  // namespace koa
