#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "koa/model.hpp"

using namespace koa;

namespace {

// Layer-by-layer count from the architecture description alone.
std::size_t conv_params(std::size_t in, std::size_t out) { return 9 * in * out + out + 2 * out; }  // + BN gamma/beta

std::size_t classifier_oracle(std::size_t h, std::size_t w) {
  const std::size_t f[] = {32, 64, 96, 96};
  std::size_t total = 0, c = 1;
  for (auto k : f) {
    total += conv_params(c, k);
    c = k;
    h /= 2;
    w /= 2;
  }
  const std::size_t flat = h * w * c;
  return total + flat * 256 + 256 + 256 * 5 + 5;
}

std::size_t joint_oracle(std::size_t h, std::size_t w) {
  const std::size_t f[] = {32, 64, 64, 96, 96};
  std::size_t total = 0, c = 1;
  for (auto k : f) {
    total += conv_params(c, k);
    c = k;
    h /= 2;
    w /= 2;
  }
  const std::size_t flat = h * w * c;
  return total + flat * 768 + 768 + 768 * 5 + 5 + 768 + 1;
}

std::size_t fcn_oracle() {
  const std::size_t f[] = {32, 32, 64, 96};
  std::size_t total = 0, c = 1;
  for (auto k : f)
    for (int r = 0; r < 2; ++r) {
      total += conv_params(c, k);
      c = k;
    }
  return total + c + 1;
}

TensorPtr<float> random_input(Shape s, Rng& rng) {
  auto t = make_tensor<float>(std::move(s));
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : t->data()) v = u(rng);
  return t;
}

bool all_finite(const Tensor<float>& t) {
  for (float v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

std::set<std::string> regularized(const ModelGraph<float>& m) {
  std::set<std::string> out;
  for (const auto& l : m.layers)
    if (l.regularized) out.insert(l.name);
  return out;
}

}  // namespace

TEST(CountParams, SmallCases) {
  ModelBuilder<float> b("d", {2});
  b.dense("fc", 3);
  EXPECT_EQ(count_params(std::move(b).build()), 9u);
  EXPECT_EQ(count_params(ModelBuilder<float>("empty", {4}).build()), 0u);
}

TEST(CountParams, ClassifierMatchesOracleAndBudget) {
  const auto m = build_classifier<float>();
  const std::size_t n = count_params(m);
  EXPECT_EQ(n, classifier_oracle(200, 300));
  EXPECT_GE(n, 5'100'000u);
  EXPECT_LE(n, 5'700'000u);
  EXPECT_NEAR(static_cast<double>(n), 5.4e6, 0.06 * 5.4e6);
}

TEST(CountParams, JointMatchesOracleAndBudget) {
  const auto m = build_joint_net<float>();
  const std::size_t n = count_params(m);
  EXPECT_EQ(n, joint_oracle(200, 300));
  EXPECT_GE(n, 3'600'000u);
  EXPECT_LE(n, 4'400'000u);
  EXPECT_NEAR(static_cast<double>(n), 4.18e6, 0.01e6);
}

TEST(CountParams, FcnMatchesOracle) { EXPECT_EQ(count_params(build_fcn_localizer<float>()), fcn_oracle()); }

TEST(Classifier, Structure) {
  const auto m = build_classifier<float>();
  EXPECT_EQ(m.layer("flatten").out_shape, Shape{20736});
  EXPECT_EQ(m.layer("flatten").in_shape, (Shape{96, 12, 18}));
  EXPECT_EQ(m.layer("conv4_dropout").rate, 0.2);
  EXPECT_EQ(m.layer("fc5_dropout").rate, 0.5);
  EXPECT_EQ(m.layer("fc5").units, 256u);
  EXPECT_EQ(regularized(m), (std::set<std::string>{"conv3", "conv4", "fc5"}));
  EXPECT_DOUBLE_EQ(m.l2_lambda, 0.01);
  EXPECT_EQ(m.output_shapes(), std::vector<Shape>{Shape{5}});
  const char* filters[] = {"conv1", "conv2", "conv3", "conv4"};
  const std::size_t want[] = {32, 64, 96, 96};
  for (int i = 0; i < 4; ++i) EXPECT_EQ(m.layer(filters[i]).units, want[i]);
  // dropout directly after conv4's pool, and only there among the convs
  std::size_t i4 = 0, id = 0;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    if (m.layers[i].name == "conv4_pool") i4 = i;
    if (m.layers[i].name == "conv4_dropout") id = i;
  }
  EXPECT_EQ(id, i4 + 1);
}

TEST(JointNet, Structure) {
  const auto m = build_joint_net<float>();
  EXPECT_EQ(m.layer("flatten").in_shape, (Shape{96, 6, 9}));
  EXPECT_EQ(m.layer("fc5").units, 768u);
  EXPECT_EQ(m.layer("fc5_dropout").rate, 0.5);
  EXPECT_EQ(regularized(m), (std::set<std::string>{"conv3_1", "conv3_2", "fc5"}));
  EXPECT_EQ(m.head_count(), 2u);
  EXPECT_EQ(m.output_shapes(), (std::vector<Shape>{Shape{5}, Shape{1}}));
  EXPECT_EQ(m.layer("grade").activation, Activation::Linear);
  EXPECT_EQ(m.layer("class").activation, Activation::Softmax);
  std::size_t dropouts = 0;
  for (const auto& l : m.layers) dropouts += l.kind == LayerKind::Dropout;
  EXPECT_EQ(dropouts, 1u);
}

TEST(Fcn, StructureAndBottleneck) {
  const auto m = build_fcn_localizer<float>();
  std::size_t pools = 0, convs = 0;
  for (const auto& l : m.layers) {
    pools += l.kind == LayerKind::Pool;
    convs += l.kind == LayerKind::Conv;
  }
  EXPECT_EQ(pools, 3u);
  EXPECT_EQ(convs, 8u);
  EXPECT_EQ(m.layer("upsample").in_shape, (Shape{96, 32, 32}));
  EXPECT_EQ(m.layer("upsample").factor, 8u);
  EXPECT_EQ(m.output_shapes(), std::vector<Shape>{(Shape{1, 256, 256})});
  EXPECT_EQ(m.layer("mask").activation, Activation::Sigmoid);
}

TEST(Fcn, OutputSizeEqualsInputForSizesDivisibleByEight) {
  for (std::size_t s : {8, 16, 64, 128, 256}) {
    FcnConfig c;
    c.input_size = s;
    EXPECT_EQ(build_fcn_localizer<float>(c).output_shapes().front(), (Shape{1, s, s})) << s;
  }
  for (std::size_t s : {0, 12, 100, 257}) {
    FcnConfig c;
    c.input_size = s;
    EXPECT_THROW(build_fcn_localizer<float>(c), ArgumentError) << s;
  }
}

TEST(Fcn, ForwardIsFiniteInUnitInterval) {
  FcnConfig c;
  c.input_size = 64;
  auto m = build_fcn_localizer<float>(c);
  Rng rng(1);
  init_weights(m, rng);
  auto y = forward(m, random_input({2, 1, 64, 64}, rng), Mode::Infer).at(0);
  EXPECT_EQ(y->shape(), (Shape{2, 1, 64, 64}));
  for (float v : y->data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Classifier, ForwardRowsSumToOne) {
  auto m = build_classifier<float>();
  Rng rng(2);
  init_weights(m, rng);
  auto y = forward(m, random_input({2, 1, 200, 300}, rng), Mode::Infer).at(0);
  ASSERT_EQ(y->shape(), (Shape{2, 5}));
  ASSERT_TRUE(all_finite(*y));
  for (std::size_t r = 0; r < 2; ++r) {
    double s = 0;
    for (std::size_t k = 0; k < 5; ++k) s += (*y)[r * 5 + k];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(JointNet, ForwardGivesBothHeads) {
  JointConfig c;
  c.input_h = 40;
  c.input_w = 64;
  auto m = build_joint_net<float>(c);
  Rng rng(3);
  init_weights(m, rng);
  auto heads = forward(m, random_input({3, 1, 40, 64}, rng), Mode::Train, &rng);
  ASSERT_EQ(heads.size(), 2u);
  EXPECT_EQ(heads[0]->shape(), (Shape{3, 5}));
  EXPECT_EQ(heads[1]->shape(), (Shape{3, 1}));
  EXPECT_TRUE(all_finite(*heads[0]));
  EXPECT_TRUE(all_finite(*heads[1]));
}

TEST(Forward, RejectsWrongInputShape) {
  auto m = build_classifier<float>();
  EXPECT_THROW(forward(m, make_tensor<float>({1, 1, 100, 100}), Mode::Infer), DimensionError);
  Rng rng(0);
  EXPECT_THROW(forward(m, make_tensor<float>({1, 1, 200, 300}), Mode::Train), StateError);  // dropout without rng
}

TEST(InitWeights, DeterministicBySeed) {
  auto a = build_joint_net<float>(), b = build_joint_net<float>();
  Rng r1(42), r2(42);
  init_weights(a, r1);
  init_weights(b, r2);
  EXPECT_EQ(a.snapshot(), b.snapshot());
  Rng r3(43);
  init_weights(b, r3);
  EXPECT_NE(a.snapshot(), b.snapshot());
}

TEST(InitWeights, BiasBetaZeroGammaOne) {
  auto m = build_classifier<float>();
  Rng rng(4);
  init_weights(m, rng);
  for (const auto& [name, t] : m.params()) {
    if (name.ends_with(".bias") || name.ends_with(".beta"))
      for (float v : t->data()) ASSERT_EQ(v, 0.0f) << name;
    if (name.ends_with(".gamma"))
      for (float v : t->data()) ASSERT_EQ(v, 1.0f) << name;
  }
}

TEST(InitWeights, HeNormalStd) {
  auto m = build_classifier<float>();
  Rng rng(5);
  init_weights(m, rng);
  const auto& w = m.param("conv3.weight");  // 96 x 64 x 3 x 3 = 55296 elements
  const double fan_in = 64 * 9;
  double s = 0, ss = 0;
  for (float v : w->data()) {
    s += v;
    ss += static_cast<double>(v) * v;
  }
  const double n = static_cast<double>(w->size());
  const double sd = std::sqrt(ss / n - (s / n) * (s / n));
  EXPECT_NEAR(sd, std::sqrt(2.0 / fan_in), 0.1 * std::sqrt(2.0 / fan_in));
}

TEST(ModelGraph, UniqueNamesAndLookup) {
  const auto m = build_joint_net<float>();
  std::set<std::string> names;
  for (const auto& t : m.state()) EXPECT_TRUE(names.insert(t.name).second) << t.name;
  EXPECT_TRUE(m.has("fc5.weight"));
  EXPECT_FALSE(m.has("conv4.weight"));
  EXPECT_THROW(m.param("nope"), ArgumentError);
  EXPECT_THROW(m.layer("nope"), ArgumentError);
  EXPECT_EQ(m.regularized_weights().size(), 3u);
}

TEST(ModelBuilder, RejectsIncompatibleLayers) {
  ModelBuilder<float> b("x", {1, 8, 8});
  EXPECT_THROW(b.dense("fc", 3), DimensionError);
  b.conv("c", 2);
  EXPECT_THROW(b.conv("c", 2), ArgumentError);  // duplicate name
  EXPECT_THROW(b.dropout("d", 1.0), ArgumentError);
  EXPECT_THROW(ModelBuilder<float>("x", {1, 0, 8}), ArgumentError);
  ModelBuilder<float> p("p", {1, 1, 1});
  EXPECT_THROW(p.pool("pool"), DimensionError);
}

TEST(ModelGraph, CloneIsIndependent) {
  auto m = build_fcn_localizer<float>([] {
    FcnConfig c;
    c.input_size = 16;
    return c;
  }());
  Rng rng(6);
  init_weights(m, rng);
  auto c = m.clone();
  EXPECT_EQ(c.snapshot(), m.snapshot());
  c.param("mask.bias")->data()[0] = 3.0f;
  EXPECT_NE(c.snapshot(), m.snapshot());
}
