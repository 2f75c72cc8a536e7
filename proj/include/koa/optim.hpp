#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "koa/tensor.hpp"

namespace koa {

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Per-parameter first/second moments; slot i mirrors parameter i.
template <std::floating_point T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::size_t step = 0;
  double lr = 0.001;
  bool initialized = false;

  void init(const std::vector<TensorPtr<T>>& params, double learning_rate) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p->size(), T{0});
      v.emplace_back(p->size(), T{0});
    }
    step = 0;
    lr = learning_rate;
    initialized = true;
  }
};

namespace detail {
template <typename T, typename Slots>
void check_slots(const char* op, const std::vector<TensorPtr<T>>& params, const Slots& slots, bool initialized) {
  if (!initialized) throw StateError(std::string(op) + ": optimizer state is not initialized");
  if (slots.size() != params.size())
    throw StateError(std::string(op) + ": state has " + std::to_string(slots.size()) + " slots for " +
                     std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (slots[i].size() != params[i]->size())
      throw DimensionError(std::string(op) + ": slot " + std::to_string(i) + " does not mirror its parameter");
}
}  // namespace detail

// Bias-corrected Adam update in place. Parameters without a gradient
// buffer are treated as having zero gradient.
template <std::floating_point T>
void adam_step(const std::vector<TensorPtr<T>>& params, AdamState<T>& state, const AdamConfig& cfg = {}) {
  detail::check_slots("adam_step", params, state.m, state.initialized);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = mj / c1, vhat = vj / c2;
      p[j] = static_cast<T>(p[j] - state.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

template <std::floating_point T>
struct NesterovState {
  std::vector<std::vector<T>> velocity;
  std::size_t step = 0;
  double lr = 0.001;
  double momentum = 0.9;
  bool initialized = false;

  void init(const std::vector<TensorPtr<T>>& params, double learning_rate, double mu = 0.9) {
    velocity.clear();
    for (const auto& p : params) velocity.emplace_back(p->size(), T{0});
    step = 0;
    lr = learning_rate;
    momentum = mu;
    initialized = true;
  }
};

// Reformulated Nesterov momentum:
//   v <- mu v - lr g
//   w <- w + mu v - lr g
template <std::floating_point T>
void sgd_nesterov_step(const std::vector<TensorPtr<T>>& params, NesterovState<T>& state) {
  detail::check_slots("sgd_nesterov_step", params, state.velocity, state.initialized);
  ++state.step;
  const double mu = state.momentum, lr = state.lr;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto& v = state.velocity[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double vj = mu * v[j] - lr * g[j];
      v[j] = static_cast<T>(vj);
      p[j] = static_cast<T>(p[j] + mu * vj - lr * g[j]);
    }
  }
}

// Divides the learning rate by `factor` once the validation loss has not
// strictly improved for `patience` consecutive epochs.
struct PlateauScheduler {
  double lr = 0.001;
  double factor = 10.0;
  std::size_t patience = 4;
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;

  // Returns true when this call reduced the rate.
  bool update(double val_loss) {
    if (val_loss < best) {
      best = val_loss;
      bad_epochs = 0;
      return false;
    }
    if (++bad_epochs >= patience) {
      lr /= factor;
      bad_epochs = 0;
      return true;
    }
    return false;
  }
};

template <std::floating_point T>
void zero_grads(const std::vector<TensorPtr<T>>& params) {
  for (const auto& p : params) p->zero_grad();
}

}  // namespace koa
