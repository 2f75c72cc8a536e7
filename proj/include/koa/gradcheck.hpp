#pragma once

// Central finite-difference checks for every differentiable operator.
// Each case draws random small shapes in f64, reduces the op output to a
// scalar with a fixed random projection, and compares the tape gradient of
// every input element against (f(x+h) - f(x-h)) / 2h.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "koa/losses.hpp"
#include "koa/model.hpp"
#include "koa/ops.hpp"

namespace koa {

struct GradCheckResult {
  std::string op;
  std::size_t cases = 0;
  double max_rel_error = 0.0;
  bool passed(double tol = 1e-4) const { return max_rel_error < tol; }
};

using GradFn = std::function<TensorPtr<double>(Tape<double>*)>;

namespace detail {

// sum_i r_i * out_i, differentiable.
inline TensorPtr<double> project(const TensorPtr<double>& out, const std::vector<double>& r, Tape<double>* tape) {
  double s = 0.0;
  for (std::size_t i = 0; i < out->size(); ++i) s += r[i] * (*out)[i];
  auto loss = make_scalar<double>(s);
  if (tape) {
    tape->record("project", [out, r, loss] {
      auto d = out->ensure_grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += r[i] * loss->grad()[0];
    });
  }
  return loss;
}

inline TensorPtr<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  auto t = make_tensor<double>(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t->data()) v = u(rng);
  return t;
}

// Values bounded away from zero so relu's kink is never straddled.
inline TensorPtr<double> random_nonzero(Shape shape, Rng& rng) {
  auto t = random_tensor(std::move(shape), rng);
  for (auto& v : t->data())
    if (std::abs(v) < 0.05) v = v < 0 ? v - 0.05 : v + 0.05;
  return t;
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace detail

// Max relative error |analytic - numeric| / max(1, |analytic|) over every
// element of every input. `fn` must be deterministic across calls.
inline double check_gradients(const std::vector<TensorPtr<double>>& inputs, const GradFn& fn, Rng& rng,
                              double h = 1e-6) {
  auto out = fn(nullptr);
  std::vector<double> r(out->size());
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& v : r) v = u(rng);

  for (const auto& t : inputs) t->zero_grad();
  Tape<double> tape;
  auto loss = detail::project(fn(&tape), r, &tape);
  tape.backward(loss);

  double worst = 0.0;
  for (const auto& t : inputs) {
    for (std::size_t i = 0; i < t->size(); ++i) {
      const double saved = (*t)[i];
      (*t)[i] = saved + h;
      const double up = detail::project(fn(nullptr), r, nullptr)->item();
      (*t)[i] = saved - h;
      const double down = detail::project(fn(nullptr), r, nullptr)->item();
      (*t)[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = t->grad()[i];
      worst = std::max(worst, std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic)));
    }
  }
  return worst;
}

// Runs `cases` random instances of every operator check.
inline std::vector<GradCheckResult> run_gradient_suite(std::uint64_t seed = 7, std::size_t cases = 20) {
  using detail::pick;
  using detail::random_nonzero;
  using detail::random_tensor;
  Rng rng(seed);
  std::vector<GradCheckResult> results;

  auto run = [&](const std::string& name, const std::function<double(Rng&)>& one_case) {
    GradCheckResult res{name, cases, 0.0};
    for (std::size_t c = 0; c < cases; ++c) res.max_rel_error = std::max(res.max_rel_error, one_case(rng));
    results.push_back(res);
  };

  run("conv2d_same", [](Rng& g) {
    const std::size_t n = pick(g, 1, 2), c = pick(g, 1, 3), o = pick(g, 1, 3), h = pick(g, 3, 6), w = pick(g, 3, 6);
    const std::size_t k = pick(g, 0, 1) ? 3 : 1;
    auto x = random_tensor({n, c, h, w}, g), kern = random_tensor({o, c, k, k}, g), b = random_tensor({o}, g);
    return check_gradients({x, kern, b}, [=](Tape<double>* t) { return conv2d(x, kern, b, Padding::Same, 1, t); }, g);
  });
  run("conv2d_valid_strided", [](Rng& g) {
    const std::size_t n = pick(g, 1, 2), c = pick(g, 1, 3), o = pick(g, 1, 3), h = pick(g, 4, 7), w = pick(g, 4, 7);
    const std::size_t kh = pick(g, 1, 3), kw = pick(g, 1, 3), s = pick(g, 1, 2);
    auto x = random_tensor({n, c, h, w}, g), kern = random_tensor({o, c, kh, kw}, g), b = random_tensor({o}, g);
    return check_gradients({x, kern, b}, [=](Tape<double>* t) { return conv2d(x, kern, b, Padding::Valid, s, t); }, g);
  });
  run("maxpool2", [](Rng& g) {
    auto x = random_tensor({pick(g, 1, 2), pick(g, 1, 3), pick(g, 2, 7), pick(g, 2, 7)}, g);
    return check_gradients({x}, [=](Tape<double>* t) { return maxpool2(x, t); }, g);
  });
  run("upsample_nn", [](Rng& g) {
    auto x = random_tensor({pick(g, 1, 2), pick(g, 1, 2), pick(g, 1, 4), pick(g, 1, 4)}, g);
    const std::size_t f = pick(g, 1, 3);
    return check_gradients({x}, [=](Tape<double>* t) { return upsample_nn(x, f, t); }, g);
  });
  run("upsample_bilinear", [](Rng& g) {
    auto x = random_tensor({pick(g, 1, 2), pick(g, 1, 2), pick(g, 1, 4), pick(g, 1, 4)}, g);
    const std::size_t f = pick(g, 1, 4);
    return check_gradients({x}, [=](Tape<double>* t) { return upsample_bilinear(x, f, t); }, g);
  });
  run("batchnorm_train", [](Rng& g) {
    const std::size_t c = pick(g, 1, 3);
    auto x = random_tensor({pick(g, 2, 3), c, pick(g, 1, 4), pick(g, 1, 4)}, g);
    auto gamma = random_tensor({c}, g, 0.5, 1.5), beta = random_tensor({c}, g);
    auto rm = make_tensor<double>({c}), rv = make_tensor<double>({c}, 1.0);
    return check_gradients({x, gamma, beta}, [=](Tape<double>* t) {
      return batchnorm(x, gamma, beta, Mode::Train, rm, rv, 0.99, 1e-5, t);
    }, g);
  });
  run("batchnorm_infer", [](Rng& g) {
    const std::size_t c = pick(g, 1, 3);
    auto x = random_tensor({pick(g, 1, 3), c, pick(g, 1, 4), pick(g, 1, 4)}, g);
    auto gamma = random_tensor({c}, g, 0.5, 1.5), beta = random_tensor({c}, g);
    auto rm = random_tensor({c}, g), rv = random_tensor({c}, g, 0.5, 2.0);
    return check_gradients({x, gamma, beta}, [=](Tape<double>* t) {
      return batchnorm(x, gamma, beta, Mode::Infer, rm, rv, 0.99, 1e-5, t);
    }, g);
  });
  run("relu", [](Rng& g) {
    auto x = random_nonzero({pick(g, 1, 4), pick(g, 1, 5)}, g);
    return check_gradients({x}, [=](Tape<double>* t) { return relu(x, t); }, g);
  });
  run("sigmoid", [](Rng& g) {
    auto x = random_tensor({pick(g, 1, 4), pick(g, 1, 5)}, g, -4.0, 4.0);
    return check_gradients({x}, [=](Tape<double>* t) { return sigmoid(x, t); }, g);
  });
  run("softmax", [](Rng& g) {
    auto x = random_tensor({pick(g, 1, 4), pick(g, 2, 6)}, g, -3.0, 3.0);
    return check_gradients({x}, [=](Tape<double>* t) { return softmax(x, t); }, g);
  });
  run("dense", [](Rng& g) {
    const std::size_t n = pick(g, 1, 4), d = pick(g, 1, 5), u = pick(g, 1, 5);
    auto x = random_tensor({n, d}, g), w = random_tensor({d, u}, g), b = random_tensor({u}, g);
    return check_gradients({x, w, b}, [=](Tape<double>* t) { return dense(x, w, b, t); }, g);
  });
  run("dropout", [](Rng& g) {
    auto x = random_tensor({pick(g, 1, 4), pick(g, 2, 8)}, g);
    const double p = std::uniform_real_distribution<double>(0.1, 0.7)(g);
    const std::uint64_t mask_seed = g();
    return check_gradients({x}, [=](Tape<double>* t) {
      Rng local(mask_seed);
      return dropout(x, p, Mode::Train, local, t);
    }, g);
  });
  run("flatten", [](Rng& g) {
    auto x = random_tensor({pick(g, 1, 3), pick(g, 1, 3), pick(g, 1, 3), pick(g, 1, 3)}, g);
    return check_gradients({x}, [=](Tape<double>* t) { return flatten(x, t); }, g);
  });
  run("add_scale", [](Rng& g) {
    const Shape s{pick(g, 1, 3), pick(g, 1, 4)};
    auto a = random_tensor(s, g), b = random_tensor(s, g);
    const double k = std::uniform_real_distribution<double>(-2.0, 2.0)(g);
    return check_gradients({a, b}, [=](Tape<double>* t) { return scale(add(a, b, t), k, t); }, g);
  });
  run("bce_pixelwise", [](Rng& g) {
    const Shape s{pick(g, 1, 2), 1, pick(g, 2, 5), pick(g, 2, 5)};
    auto p = random_tensor(s, g, 0.05, 0.95), y = make_tensor<double>(s);
    for (auto& v : y->data()) v = static_cast<double>(pick(g, 0, 1));
    return check_gradients({p}, [=](Tape<double>* t) { return bce_pixelwise(p, y, t); }, g);
  });
  run("cce", [](Rng& g) {
    const std::size_t n = pick(g, 1, 5);
    auto p = random_tensor({n, 5}, g, 0.05, 1.0);
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) s += (*p)[r * 5 + k];
      for (std::size_t k = 0; k < 5; ++k) (*p)[r * 5 + k] /= s;
    }
    std::vector<int> labels(n);
    for (auto& l : labels) l = static_cast<int>(pick(g, 0, 4));
    return check_gradients({p}, [=](Tape<double>* t) { return cce<double>(p, labels, t); }, g);
  });
  run("mse", [](Rng& g) {
    const std::size_t n = pick(g, 1, 6);
    auto p = random_tensor({n, 1}, g, 0.0, 4.0);
    std::vector<double> target(n);
    for (auto& v : target) v = static_cast<double>(pick(g, 0, 4));
    return check_gradients({p}, [=](Tape<double>* t) { return mse<double>(p, target, t); }, g);
  });
  run("joint_loss", [](Rng& g) {
    auto c = random_tensor({1}, g, 0.1, 2.0), m = random_tensor({1}, g, 0.1, 2.0);
    const double w = std::uniform_real_distribution<double>(0.0, 1.0)(g);
    return check_gradients({c, m}, [=](Tape<double>* t) { return joint_loss(c, m, w, t); }, g);
  });
  run("l2_penalty", [](Rng& g) {
    auto a = random_tensor({pick(g, 1, 3), pick(g, 1, 3)}, g), b = random_tensor({pick(g, 1, 4)}, g);
    const double lambda = std::uniform_real_distribution<double>(0.0, 0.1)(g);
    return check_gradients({a, b}, [=](Tape<double>* t) { return l2_penalty<double>({a, b}, lambda, t); }, g);
  });
  run("composite_network", [](Rng& g) {
    // conv -> BN -> ReLU -> pool -> flatten -> dense -> softmax -> joint(cce, mse) + L2
    ModelBuilder<double> b("probe", {1, 4 + 2 * pick(g, 0, 1), 4 + 2 * pick(g, 0, 1)});
    b.conv("c1", 2, 3, true).batchnorm("bn").activation("act", Activation::Relu).pool("pool").flatten("flat");
    b.dense("fc", 3, true).head("class", 5, Activation::Softmax).head("grade", 1, Activation::Linear);
    auto model = std::move(b).build();
    init_weights(model, g);
    for (const auto& p : model.params())
      if (!p.name.ends_with(".weight"))
        for (auto& v : p.tensor->data()) v += std::uniform_real_distribution<double>(-0.3, 0.3)(g);
    const std::size_t n = 3;
    auto x = random_tensor({n, model.input_shape[0], model.input_shape[1], model.input_shape[2]}, g);
    std::vector<int> labels(n);
    std::vector<double> grades(n);
    for (std::size_t i = 0; i < n; ++i) grades[i] = labels[i] = static_cast<int>(pick(g, 0, 4));
    auto inputs = model.parameter_tensors();
    inputs.push_back(x);
    return check_gradients(inputs, [model, x, labels, grades](Tape<double>* t) {
      auto out = forward(model, x, Mode::Train, nullptr, t);
      auto loss = joint_loss(cce<double>(out[0], labels, t), mse<double>(out[1], grades, t), 0.5, t);
      return add(loss, l2_penalty(model.regularized_weights(), 0.01, t), t);
    }, g);
  });
  return results;
}

}  // namespace koa
