#pragma once

// KL-grade quantification: classifier-only and joint classification +
// regression training, flip augmentation and grade prediction.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "koa/batching.hpp"
#include "koa/errors.hpp"
#include "koa/image.hpp"
#include "koa/losses.hpp"
#include "koa/manifest.hpp"
#include "koa/model.hpp"
#include "koa/optim.hpp"

namespace koa {

struct KneeSample {
  Image image;  // contracted crop size, [0,1]
  Side side = Side::Left;
  int kl_grade = 0;
  Split split = Split::Train;
  bool flipped = false;
};

inline void validate(const KneeSample& s, std::size_t h, std::size_t w) {
  if (s.kl_grade < 0 || s.kl_grade > 4) throw ArgumentError("knee sample grade out of range");
  if (s.image.height != h || s.image.width != w)
    throw DimensionError("knee sample is " + std::to_string(s.image.height) + "x" + std::to_string(s.image.width) +
                         ", expected " + std::to_string(h) + "x" + std::to_string(w));
}

// Originals followed by their mirror images. Training split only.
inline std::vector<KneeSample> augment_flip(std::span<const KneeSample> samples) {
  std::vector<KneeSample> out(samples.begin(), samples.end());
  for (const auto& s : samples) {
    if (s.split != Split::Train)
      throw ArgumentError(std::string("augment_flip: sample from the ") + to_string(s.split) + " split");
    KneeSample m = s;
    m.image = flip_horizontal(s.image);
    m.flipped = !s.flipped;
    out.push_back(std::move(m));
  }
  return out;
}

struct GradePrediction {
  std::array<double, 5> class_probs{};
  int predicted_class = 0;
  double continuous_grade = 0;  // clipped to [0,4]
  int rounded_grade = 0;        // continuous grade rounded half-up
};

inline GradePrediction make_prediction(const std::array<double, 5>& probs, std::optional<double> regression = std::nullopt) {
  GradePrediction p;
  p.class_probs = probs;
  p.predicted_class = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  double g = 0;
  if (regression) {
    g = *regression;
  } else {
    for (int k = 0; k < 5; ++k) g += k * probs[static_cast<std::size_t>(k)];
  }
  p.continuous_grade = std::clamp(g, 0.0, 4.0);
  p.rounded_grade = static_cast<int>(std::floor(p.continuous_grade + 0.5));
  return p;
}

struct QuantTrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double lr = 0.001;
  double loss_weight = 0.5;  // joint only
  double momentum = 0.9;     // joint only
};

struct QuantHistoryRow {
  std::size_t epoch = 0;
  double lr = 0;
  double train_cce = 0, train_mse = 0, train_total = 0;
  double val_cce = 0, val_mse = 0, val_total = 0;
  double train_acc = 0, val_acc = 0;
  double l2_penalty = 0;  // penalty at the end of the epoch
  double loss_weight = 0;
};

struct QuantTrainResult {
  std::vector<QuantHistoryRow> history;
  std::size_t best_epoch = 0;
};

inline std::string history_csv(const std::vector<QuantHistoryRow>& rows) {
  std::ostringstream os;
  os << "epoch,lr,train_cce,train_mse,train_total,val_cce,val_mse,val_total,train_acc,val_acc,l2_penalty\n";
  os << std::setprecision(9);
  for (const auto& r : rows)
    os << r.epoch << ',' << r.lr << ',' << r.train_cce << ',' << r.train_mse << ',' << r.train_total << ','
       << r.val_cce << ',' << r.val_mse << ',' << r.val_total << ',' << r.train_acc << ',' << r.val_acc << ','
       << r.l2_penalty << '\n';
  return os.str();
}

namespace detail {

struct EvalSums {
  double cce = 0, mse = 0, correct = 0, n = 0;
};

// Class-head output is always head 0; a second head is the grade head.
template <typename T>
EvalSums evaluate_split(const ModelGraph<T>& model, std::span<const KneeSample> data, std::size_t batch_size) {
  EvalSums s;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const auto chunk = std::span<const std::size_t>(idx).subspan(start, std::min(batch_size, idx.size() - start));
    auto x = image_batch<T>(data, chunk, [](const KneeSample& k) -> const Image& { return k.image; });
    std::vector<int> labels;
    std::vector<T> targets;
    for (auto i : chunk) {
      labels.push_back(data[i].kl_grade);
      targets.push_back(static_cast<T>(data[i].kl_grade));
    }
    auto out = forward(model, x, Mode::Infer);
    const double b = static_cast<double>(chunk.size());
    s.cce += static_cast<double>(cce(out[0], std::span<const int>(labels))->item()) * b;
    if (out.size() > 1) s.mse += static_cast<double>(mse(out[1], std::span<const T>(targets))->item()) * b;
    const std::size_t k = out[0]->dim(1);
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      const T* row = out[0]->data().data() + r * k;
      if (std::max_element(row, row + k) - row == labels[r]) s.correct += 1;
    }
    s.n += b;
  }
  return s;
}

template <typename T>
double l2_value(const ModelGraph<T>& model) {
  const auto w = model.regularized_weights();
  if (w.empty() || model.l2_lambda == 0) return 0.0;
  return static_cast<double>(l2_penalty(w, static_cast<T>(model.l2_lambda))->item());
}

// One shuffled pass. `step` applies the optimizer after backward.
template <typename T, typename Step>
void train_epoch(ModelGraph<T>& model, std::span<const KneeSample> data, std::size_t batch_size, double w, Rng& rng,
                 QuantHistoryRow& row, Step&& step) {
  const auto params = model.parameter_tensors();
  const auto reg = model.regularized_weights();
  const bool joint = model.head_count() > 1;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  double n = 0, cce_sum = 0, mse_sum = 0, total_sum = 0, correct = 0;
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const auto chunk = std::span<const std::size_t>(idx).subspan(start, std::min(batch_size, idx.size() - start));
    auto x = image_batch<T>(data, chunk, [](const KneeSample& k) -> const Image& { return k.image; });
    std::vector<int> labels;
    std::vector<T> targets;
    for (auto i : chunk) {
      labels.push_back(data[i].kl_grade);
      targets.push_back(static_cast<T>(data[i].kl_grade));
    }
    Tape<T> tape;
    auto out = forward(model, x, Mode::Train, &rng, &tape);
    auto c = cce(out[0], std::span<const int>(labels), &tape);
    TensorPtr<T> loss = c;
    double m = 0;
    if (joint) {
      auto e = mse(out[1], std::span<const T>(targets), &tape);
      m = static_cast<double>(e->item());
      loss = joint_loss(c, e, static_cast<T>(w), &tape);
    }
    double pen = 0;
    if (!reg.empty() && model.l2_lambda > 0) {
      auto p = l2_penalty(reg, static_cast<T>(model.l2_lambda), &tape);
      pen = static_cast<double>(p->item());
      loss = add(loss, p, &tape);
    }
    zero_grads(params);
    tape.backward(loss);
    step(params);
    const double b = static_cast<double>(chunk.size());
    const double cv = static_cast<double>(c->item());
    cce_sum += cv * b;
    mse_sum += m * b;
    total_sum += (cv + w * m + pen) * b;
    const std::size_t k = out[0]->dim(1);
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      const T* rowp = out[0]->data().data() + r * k;
      if (std::max_element(rowp, rowp + k) - rowp == labels[r]) correct += 1;
    }
    n += b;
  }
  for (const auto& p : params) p->clear_grad();
  row.train_cce = cce_sum / n;
  row.train_mse = mse_sum / n;
  row.train_total = total_sum / n;
  row.train_acc = correct / n;
}

template <typename T>
void fill_validation(const ModelGraph<T>& model, std::span<const KneeSample> val, std::size_t batch_size, double w,
                     QuantHistoryRow& row) {
  const auto s = evaluate_split(model, val, batch_size);
  row.l2_penalty = l2_value(model);
  row.val_cce = s.cce / s.n;
  row.val_mse = s.mse / s.n;
  row.val_total = row.val_cce + w * row.val_mse;
  row.val_acc = s.correct / s.n;
  row.loss_weight = w;
}

template <typename T>
void check_inputs(const ModelGraph<T>& model, std::span<const KneeSample> train, std::span<const KneeSample> val,
                  const QuantTrainConfig& cfg) {
  if (train.empty() || val.empty()) throw ArgumentError("training needs non-empty train and validation splits");
  if (cfg.epochs == 0 || cfg.batch_size == 0) throw ArgumentError("epochs and batch size must be positive");
  const std::size_t h = model.input_shape.at(1), w = model.input_shape.at(2);
  for (const auto& s : train) validate(s, h, w);
  for (const auto& s : val) validate(s, h, w);
}

}  // namespace detail

// Adam on categorical cross entropy plus the model's L2 terms; keeps the
// weights of the epoch with the best validation accuracy.
template <std::floating_point T>
QuantTrainResult train_classifier(ModelGraph<T>& model, std::span<const KneeSample> train,
                                  std::span<const KneeSample> val, const QuantTrainConfig& cfg, Rng& rng) {
  detail::check_inputs(model, train, val, cfg);
  const auto params = model.parameter_tensors();
  AdamState<T> adam;
  adam.init(params, cfg.lr);
  AdamConfig acfg;
  acfg.lr = cfg.lr;
  QuantTrainResult res;
  double best_acc = -1;
  auto best = model.snapshot();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    QuantHistoryRow row;
    row.epoch = epoch;
    row.lr = adam.lr;
    detail::train_epoch(model, train, cfg.batch_size, 0.0, rng, row,
                        [&](const std::vector<TensorPtr<T>>& p) { adam_step(p, adam, acfg); });
    detail::fill_validation(model, val, cfg.batch_size, 0.0, row);
    res.history.push_back(row);
    if (row.val_acc > best_acc) {
      best_acc = row.val_acc;
      res.best_epoch = epoch;
      best = model.snapshot();
    }
  }
  model.restore(best);
  return res;
}

// SGD with Nesterov momentum on cce + w * mse + L2, learning rate divided
// by 10 after 4 epochs without a lower validation cce + w * mse; keeps the
// weights with the lowest validation cce + w * mse.
template <std::floating_point T>
QuantTrainResult train_joint(ModelGraph<T>& model, std::span<const KneeSample> train, std::span<const KneeSample> val,
                             const QuantTrainConfig& cfg, Rng& rng) {
  if (!(cfg.loss_weight >= 0.0 && cfg.loss_weight <= 1.0))
    throw ArgumentError("train_joint: loss weight must be in [0,1], got " + std::to_string(cfg.loss_weight));
  if (model.head_count() != 2) throw ArgumentError("train_joint: model needs a class head and a grade head");
  detail::check_inputs(model, train, val, cfg);
  const auto params = model.parameter_tensors();
  NesterovState<T> sgd;
  sgd.init(params, cfg.lr, cfg.momentum);
  PlateauScheduler sched;
  sched.lr = cfg.lr;
  QuantTrainResult res;
  double best_total = std::numeric_limits<double>::infinity();
  auto best = model.snapshot();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    QuantHistoryRow row;
    row.epoch = epoch;
    row.lr = sgd.lr;
    detail::train_epoch(model, train, cfg.batch_size, cfg.loss_weight, rng, row,
                        [&](const std::vector<TensorPtr<T>>& p) { sgd_nesterov_step(p, sgd); });
    detail::fill_validation(model, val, cfg.batch_size, cfg.loss_weight, row);
    res.history.push_back(row);
    if (row.val_total < best_total) {
      best_total = row.val_total;
      res.best_epoch = epoch;
      best = model.snapshot();
    }
    sched.update(row.val_total);
    sgd.lr = sched.lr;
  }
  model.restore(best);
  return res;
}

// Inference-mode predictions. One head: expected grade from the class
// probabilities; two heads: the grade head, clipped to [0,4].
template <std::floating_point T>
std::vector<GradePrediction> predict_grades(const ModelGraph<T>& model, std::span<const Image> images,
                                            std::size_t batch_size = 32) {
  std::vector<GradePrediction> out;
  out.reserve(images.size());
  std::vector<std::size_t> idx(images.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const auto chunk = std::span<const std::size_t>(idx).subspan(start, std::min(batch_size, idx.size() - start));
    auto x = image_batch<T>(images, chunk, [](const Image& i) -> const Image& { return i; });
    auto heads = forward(model, x, Mode::Infer);
    if (heads[0]->rank() != 2 || heads[0]->dim(1) != 5)
      throw DimensionError("predict_grades: model does not have a 5-way class head");
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      std::array<double, 5> probs{};
      for (std::size_t k = 0; k < 5; ++k) probs[k] = static_cast<double>(heads[0]->data()[r * 5 + k]);
      std::optional<double> reg;
      if (heads.size() > 1) reg = static_cast<double>(heads[1]->data()[r]);
      out.push_back(make_prediction(probs, reg));
    }
  }
  return out;
}

}  // namespace koa
