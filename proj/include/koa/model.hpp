#pragma once

// Layer graphs for the three networks: the FCN knee localizer, the
// classification CNN and the joint classification + regression CNN.

#include <cmath>
#include <cstddef>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "koa/ops.hpp"
#include "koa/tensor.hpp"

namespace koa {

enum class LayerKind { Conv, Pool, Upsample, Dense, Dropout, BatchNorm, Activation, Flatten, Head };
enum class Activation { Relu, Sigmoid, Softmax, Linear };
enum class Interp { Nearest, Bilinear };

inline const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Pool: return "pool";
    case LayerKind::Upsample: return "upsample";
    case LayerKind::Dense: return "dense";
    case LayerKind::Dropout: return "dropout";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Activation: return "activation";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Head: return "head";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind;
  std::string name;
  std::size_t units = 0;   // conv filters, dense units, head outputs
  std::size_t kernel = 0;  // conv kernel; heads: 0 = dense head, 1 = 1x1 conv head
  std::size_t factor = 0;  // upsample factor
  Interp interp = Interp::Nearest;
  double rate = 0.0;       // dropout probability
  Activation activation = Activation::Linear;
  bool regularized = false;  // L2 on this layer's weight
  Shape in_shape;            // per-sample, no batch axis
  Shape out_shape;
};

template <std::floating_point T>
struct NamedTensor {
  std::string name;
  TensorPtr<T> tensor;
};

template <std::floating_point T>
class ModelGraph {
 public:
  std::string arch;
  Shape input_shape;  // per-sample: [C,H,W] or [D]
  std::vector<LayerSpec> layers;
  double l2_lambda = 0.0;
  T bn_momentum = T(0.99);
  T bn_epsilon = T(1e-5);

  const std::vector<NamedTensor<T>>& params() const noexcept { return params_; }
  const std::vector<NamedTensor<T>>& buffers() const noexcept { return buffers_; }

  // Parameters followed by batchnorm running statistics, in layer order.
  std::vector<NamedTensor<T>> state() const {
    std::vector<NamedTensor<T>> all = params_;
    all.insert(all.end(), buffers_.begin(), buffers_.end());
    return all;
  }

  std::vector<TensorPtr<T>> parameter_tensors() const {
    std::vector<TensorPtr<T>> out;
    for (const auto& p : params_) out.push_back(p.tensor);
    return out;
  }

  std::vector<TensorPtr<T>> regularized_weights() const {
    std::vector<TensorPtr<T>> out;
    for (const auto& layer : layers)
      if (layer.regularized) out.push_back(param(layer.name + ".weight"));
    return out;
  }

  const TensorPtr<T>& param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ArgumentError("model has no tensor named '" + name + "'");
    return it->second;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const LayerSpec& layer(const std::string& name) const {
    for (const auto& l : layers)
      if (l.name == name) return l;
    throw ArgumentError("model has no layer named '" + name + "'");
  }

  std::vector<Shape> output_shapes() const {
    std::vector<Shape> out;
    for (const auto& l : layers)
      if (l.kind == LayerKind::Head) out.push_back(l.out_shape);
    return out;
  }

  std::size_t head_count() const { return output_shapes().size(); }

  // Independent copy of every tensor.
  ModelGraph clone() const {
    ModelGraph copy = *this;
    copy.params_.clear();
    copy.buffers_.clear();
    copy.index_.clear();
    for (const auto& p : params_) copy.add_param(p.name, std::make_shared<Tensor<T>>(p.tensor->shape(), p.tensor->storage()));
    for (const auto& b : buffers_) copy.add_buffer(b.name, std::make_shared<Tensor<T>>(b.tensor->shape(), b.tensor->storage()));
    return copy;
  }

  using Snapshot = std::vector<Buffer<T>>;

  Snapshot snapshot() const {
    Snapshot snap;
    for (const auto& t : state()) snap.push_back(t.tensor->storage());
    return snap;
  }

  void restore(const Snapshot& snap) {
    auto all = state();
    if (snap.size() != all.size()) throw StateError("snapshot does not match model state");
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (snap[i].size() != all[i].tensor->size()) throw StateError("snapshot tensor size mismatch");
      all[i].tensor->storage() = snap[i];
    }
  }

  void add_param(const std::string& name, TensorPtr<T> t) {
    register_name(name, t);
    params_.push_back({name, std::move(t)});
  }
  void add_buffer(const std::string& name, TensorPtr<T> t) {
    register_name(name, t);
    buffers_.push_back({name, std::move(t)});
  }

 private:
  void register_name(const std::string& name, const TensorPtr<T>& t) {
    if (!index_.emplace(name, t).second) throw ArgumentError("duplicate tensor name '" + name + "'");
  }

  std::vector<NamedTensor<T>> params_;
  std::vector<NamedTensor<T>> buffers_;
  std::map<std::string, TensorPtr<T>> index_;
};

// Appends layers while tracking the running per-sample shape, so every
// layer is shape-compatible with its predecessor by construction.
template <std::floating_point T>
class ModelBuilder {
 public:
  ModelBuilder(std::string arch, Shape input_shape) {
    if (input_shape.empty()) throw ArgumentError("model input shape is empty");
    for (auto d : input_shape)
      if (d == 0) throw ArgumentError("model input dimensions must be positive");
    model_.arch = std::move(arch);
    model_.input_shape = input_shape;
    shape_ = std::move(input_shape);
  }

  ModelBuilder& conv(const std::string& name, std::size_t filters, std::size_t kernel = 3, bool regularized = false) {
    require_spatial(name);
    LayerSpec l = start(LayerKind::Conv, name);
    l.units = filters;
    l.kernel = kernel;
    l.regularized = regularized;
    model_.add_param(name + ".weight", make_tensor<T>({filters, shape_[0], kernel, kernel}));
    model_.add_param(name + ".bias", make_tensor<T>({filters}));
    shape_ = {filters, shape_[1], shape_[2]};
    return finish(std::move(l));
  }

  ModelBuilder& batchnorm(const std::string& name) {
    LayerSpec l = start(LayerKind::BatchNorm, name);
    const std::size_t c = shape_[0];
    model_.add_param(name + ".gamma", make_tensor<T>({c}, T{1}));
    model_.add_param(name + ".beta", make_tensor<T>({c}));
    model_.add_buffer(name + ".running_mean", make_tensor<T>({c}));
    model_.add_buffer(name + ".running_var", make_tensor<T>({c}, T{1}));
    return finish(std::move(l));
  }

  ModelBuilder& activation(const std::string& name, Activation act) {
    LayerSpec l = start(LayerKind::Activation, name);
    l.activation = act;
    return finish(std::move(l));
  }

  ModelBuilder& pool(const std::string& name) {
    require_spatial(name);
    if (shape_[1] < 2 || shape_[2] < 2)
      throw DimensionError("layer '" + name + "': cannot pool spatial size " + shape_string(shape_));
    LayerSpec l = start(LayerKind::Pool, name);
    shape_ = {shape_[0], shape_[1] / 2, shape_[2] / 2};
    return finish(std::move(l));
  }

  ModelBuilder& upsample(const std::string& name, std::size_t factor, Interp interp = Interp::Nearest) {
    require_spatial(name);
    if (factor == 0) throw ArgumentError("layer '" + name + "': upsample factor must be >= 1");
    LayerSpec l = start(LayerKind::Upsample, name);
    l.factor = factor;
    l.interp = interp;
    shape_ = {shape_[0], shape_[1] * factor, shape_[2] * factor};
    return finish(std::move(l));
  }

  ModelBuilder& dropout(const std::string& name, double rate) {
    if (!(rate >= 0.0) || rate >= 1.0) throw ArgumentError("layer '" + name + "': dropout rate must be in [0,1)");
    LayerSpec l = start(LayerKind::Dropout, name);
    l.rate = rate;
    return finish(std::move(l));
  }

  ModelBuilder& flatten(const std::string& name) {
    LayerSpec l = start(LayerKind::Flatten, name);
    shape_ = {shape_size(shape_)};
    return finish(std::move(l));
  }

  ModelBuilder& dense(const std::string& name, std::size_t units, bool regularized = false) {
    require_flat(name);
    LayerSpec l = start(LayerKind::Dense, name);
    l.units = units;
    l.regularized = regularized;
    model_.add_param(name + ".weight", make_tensor<T>({shape_[0], units}));
    model_.add_param(name + ".bias", make_tensor<T>({units}));
    shape_ = {units};
    return finish(std::move(l));
  }

  // Output head fed by the trunk. Dense heads need a flat trunk, 1x1 conv
  // heads a spatial one. Heads do not feed each other.
  ModelBuilder& head(const std::string& name, std::size_t units, Activation act, bool pointwise_conv = false) {
    if (!trunk_shape_.empty() && trunk_shape_ != shape_)
      throw ArgumentError("layer '" + name + "': heads must directly follow the trunk");
    if (trunk_shape_.empty()) trunk_shape_ = shape_;
    LayerSpec l{};
    l.kind = LayerKind::Head;
    l.name = name;
    l.units = units;
    l.activation = act;
    l.kernel = pointwise_conv ? 1 : 0;
    l.in_shape = trunk_shape_;
    if (pointwise_conv) {
      require_spatial(name);
      model_.add_param(name + ".weight", make_tensor<T>({units, trunk_shape_[0], 1, 1}));
      l.out_shape = {units, trunk_shape_[1], trunk_shape_[2]};
    } else {
      require_flat(name);
      model_.add_param(name + ".weight", make_tensor<T>({trunk_shape_[0], units}));
      l.out_shape = {units};
    }
    model_.add_param(name + ".bias", make_tensor<T>({units}));
    model_.layers.push_back(std::move(l));
    return *this;
  }

  ModelBuilder& l2(double lambda) {
    model_.l2_lambda = lambda;
    return *this;
  }

  const Shape& current_shape() const noexcept { return shape_; }

  ModelGraph<T> build() && { return std::move(model_); }

 private:
  LayerSpec start(LayerKind kind, const std::string& name) {
    if (!trunk_shape_.empty()) throw ArgumentError("layer '" + name + "': no trunk layers may follow a head");
    LayerSpec l{};
    l.kind = kind;
    l.name = name;
    l.in_shape = shape_;
    return l;
  }
  ModelBuilder& finish(LayerSpec l) {
    l.out_shape = shape_;
    model_.layers.push_back(std::move(l));
    return *this;
  }
  void require_spatial(const std::string& name) const {
    if (shape_.size() != 3) throw DimensionError("layer '" + name + "' needs a [C,H,W] input, got " + shape_string(shape_));
  }
  void require_flat(const std::string& name) const {
    if (shape_.size() != 1) throw DimensionError("layer '" + name + "' needs a flat input, got " + shape_string(shape_));
  }

  ModelGraph<T> model_;
  Shape shape_;
  Shape trunk_shape_;
};

struct FcnConfig {
  std::size_t input_size = 256;
  std::vector<std::size_t> stage_filters{32, 32, 64, 96};
  std::size_t convs_per_stage = 2;
  std::size_t pooled_stages = 3;
  Interp upsampling = Interp::Bilinear;
};

// Four conv stages (conv3x3 + BN + ReLU, twice each), 2x2 pooling after the
// first three, x8 upsampling and a 1x1 sigmoid conv.
template <std::floating_point T>
ModelGraph<T> build_fcn_localizer(const FcnConfig& cfg = {}) {
  const std::size_t down = std::size_t{1} << cfg.pooled_stages;
  if (cfg.input_size == 0 || cfg.input_size % down != 0)
    throw ArgumentError("FCN input size " + std::to_string(cfg.input_size) + " is not divisible by " +
                        std::to_string(down));
  ModelBuilder<T> b("fcn", {1, cfg.input_size, cfg.input_size});
  for (std::size_t s = 0; s < cfg.stage_filters.size(); ++s) {
    const std::string stage = "stage" + std::to_string(s + 1);
    for (std::size_t k = 0; k < cfg.convs_per_stage; ++k) {
      const std::string id = stage + "_conv" + std::to_string(k + 1);
      b.conv(id, cfg.stage_filters[s]).batchnorm(id + "_bn").activation(id + "_relu", Activation::Relu);
    }
    if (s < cfg.pooled_stages) b.pool(stage + "_pool");
  }
  b.upsample("upsample", down, cfg.upsampling);
  b.head("mask", 1, Activation::Sigmoid, /*pointwise_conv=*/true);
  return std::move(b).build();
}

struct ClassifierConfig {
  std::size_t input_h = 200;
  std::size_t input_w = 300;
  std::vector<std::size_t> filters{32, 64, 96, 96};
  std::size_t fc_units = 256;
  std::size_t classes = 5;
  double conv_dropout = 0.2;
  double fc_dropout = 0.5;
  double l2 = 0.01;
};

// conv1..conv4 (each conv3x3 + BN + ReLU + pool), dropout after conv4,
// fc5 + ReLU + dropout, softmax head. L2 on conv3, conv4 and fc5.
template <std::floating_point T>
ModelGraph<T> build_classifier(const ClassifierConfig& cfg = {}) {
  ModelBuilder<T> b("classifier", {1, cfg.input_h, cfg.input_w});
  const std::size_t n = cfg.filters.size();
  for (std::size_t i = 0; i < n; ++i) {
    const std::string id = "conv" + std::to_string(i + 1);
    const bool reg = i + 2 >= n;
    b.conv(id, cfg.filters[i], 3, reg)
        .batchnorm(id + "_bn")
        .activation(id + "_relu", Activation::Relu)
        .pool(id + "_pool");
  }
  b.dropout("conv" + std::to_string(n) + "_dropout", cfg.conv_dropout);
  b.flatten("flatten");
  b.dense("fc5", cfg.fc_units, true).activation("fc5_relu", Activation::Relu).dropout("fc5_dropout", cfg.fc_dropout);
  b.head("class", cfg.classes, Activation::Softmax);
  b.l2(cfg.l2);
  return std::move(b).build();
}

struct JointConfig {
  std::size_t input_h = 200;
  std::size_t input_w = 300;
  std::size_t fc_units = 768;
  std::size_t classes = 5;
  double fc_dropout = 0.5;
  double l2 = 0.01;
};

// conv1, conv2_1, conv2_2, conv3_1, conv3_2 (conv3x3 + BN + ReLU + pool each),
// fc5 + ReLU + dropout, then a softmax class head and a linear grade head.
// L2 on fc5, conv3_1 and conv3_2.
template <std::floating_point T>
ModelGraph<T> build_joint_net(const JointConfig& cfg = {}) {
  ModelBuilder<T> b("joint", {1, cfg.input_h, cfg.input_w});
  const std::pair<const char*, std::size_t> convs[] = {
      {"conv1", 32}, {"conv2_1", 64}, {"conv2_2", 64}, {"conv3_1", 96}, {"conv3_2", 96}};
  for (const auto& [id, filters] : convs) {
    const std::string name = id;
    const bool reg = name.rfind("conv3", 0) == 0;
    b.conv(name, filters, 3, reg)
        .batchnorm(name + "_bn")
        .activation(name + "_relu", Activation::Relu)
        .pool(name + "_pool");
  }
  b.flatten("flatten");
  b.dense("fc5", cfg.fc_units, true).activation("fc5_relu", Activation::Relu).dropout("fc5_dropout", cfg.fc_dropout);
  b.head("class", cfg.classes, Activation::Softmax);
  b.head("grade", 1, Activation::Linear);
  b.l2(cfg.l2);
  return std::move(b).build();
}

// Exact number of trainable scalars (weights, biases, gamma, beta).
template <std::floating_point T>
std::size_t count_params(const ModelGraph<T>& model) {
  std::size_t total = 0;
  for (const auto& p : model.params()) total += p.tensor->size();
  return total;
}

// He-normal weights (std = sqrt(2 / fan_in)), zero biases, gamma = 1,
// beta = 0; running statistics reset to mean 0 / variance 1.
template <std::floating_point T>
void init_weights(ModelGraph<T>& model, Rng& rng) {
  for (const auto& [name, t] : model.params()) {
    if (name.ends_with(".weight")) {
      const auto& s = t->shape();
      const std::size_t fan_in = s.size() == 4 ? s[1] * s[2] * s[3] : s[0];
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
      for (auto& w : t->data()) w = static_cast<T>(dist(rng));
    } else if (name.ends_with(".gamma")) {
      std::fill(t->data().begin(), t->data().end(), T{1});
    } else {
      std::fill(t->data().begin(), t->data().end(), T{0});
    }
  }
  for (const auto& [name, t] : model.buffers())
    std::fill(t->data().begin(), t->data().end(), name.ends_with(".running_var") ? T{1} : T{0});
}

namespace detail {
template <typename T>
TensorPtr<T> apply_activation(const TensorPtr<T>& x, Activation act, Tape<T>* tape) {
  switch (act) {
    case Activation::Relu: return relu(x, tape);
    case Activation::Sigmoid: return sigmoid(x, tape);
    case Activation::Softmax: return softmax(x, tape);
    case Activation::Linear: return x;
  }
  return x;
}
}  // namespace detail

// Runs the trunk then every head; returns one tensor per head in layer order.
// `rng` is only required for train-mode dropout.
template <std::floating_point T>
std::vector<TensorPtr<T>> forward(const ModelGraph<T>& model, const TensorPtr<T>& input, Mode mode,
                                  Rng* rng = nullptr, Tape<T>* tape = nullptr) {
  const Shape& want = model.input_shape;
  if (input->rank() != want.size() + 1 || !std::equal(want.begin(), want.end(), input->shape().begin() + 1))
    throw DimensionError("model '" + model.arch + "' expects input [N," + shape_string(want).substr(1) + ", got " +
                         shape_string(input->shape()));
  TensorPtr<T> x = input;
  std::vector<TensorPtr<T>> outputs;
  for (const auto& l : model.layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        x = conv2d(x, model.param(l.name + ".weight"), model.param(l.name + ".bias"), Padding::Same, 1, tape);
        break;
      case LayerKind::BatchNorm:
        x = batchnorm(x, model.param(l.name + ".gamma"), model.param(l.name + ".beta"), mode,
                      model.param(l.name + ".running_mean"), model.param(l.name + ".running_var"), model.bn_momentum,
                      model.bn_epsilon, tape);
        break;
      case LayerKind::Activation: x = detail::apply_activation(x, l.activation, tape); break;
      case LayerKind::Pool: x = maxpool2(x, tape); break;
      case LayerKind::Upsample:
        x = l.interp == Interp::Bilinear ? upsample_bilinear(x, l.factor, tape) : upsample_nn(x, l.factor, tape);
        break;
      case LayerKind::Dropout:
        if (mode == Mode::Train && l.rate > 0) {
          if (!rng) throw StateError("train-mode dropout in '" + l.name + "' needs a random generator");
          x = dropout(x, l.rate, mode, *rng, tape);
        }
        break;
      case LayerKind::Flatten: x = flatten(x, tape); break;
      case LayerKind::Dense:
        x = dense(x, model.param(l.name + ".weight"), model.param(l.name + ".bias"), tape);
        break;
      case LayerKind::Head: {
        TensorPtr<T> y = l.kernel == 1
                             ? conv2d(x, model.param(l.name + ".weight"), model.param(l.name + ".bias"), Padding::Same, 1, tape)
                             : dense(x, model.param(l.name + ".weight"), model.param(l.name + ".bias"), tape);
        outputs.push_back(detail::apply_activation(y, l.activation, tape));
        break;
      }
    }
  }
  if (outputs.empty()) outputs.push_back(x);
  return outputs;
}

}  // namespace koa
