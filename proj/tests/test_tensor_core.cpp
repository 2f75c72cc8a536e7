#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "koa/gradcheck.hpp"
#include "koa/ops.hpp"
#include "koa/optim.hpp"
#include "koa/tensor.hpp"

using namespace koa;

namespace {

// Direct summation over every tap, zero padding, stride 1, odd kernels.
std::vector<double> conv_reference(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>& b) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t o = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);
  std::vector<double> out(n * o * h * w, 0.0);
  for (std::size_t in = 0; in < n; ++in)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) {
          double s = b[oc];
          for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long sy = static_cast<long>(y + i) - ph, sx = static_cast<long>(xx + j) - pw;
                if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
                s += x[((in * c + ic) * h + sy) * w + sx] * k[((oc * c + ic) * kh + i) * kw + j];
              }
          out[((in * o + oc) * h + y) * w + xx] = s;
        }
  return out;
}

TensorPtr<double> random_tensor(Shape s, Rng& rng) {
  auto t = make_tensor<double>(std::move(s));
  std::uniform_real_distribution<double> u(-1, 1);
  for (auto& v : t->data()) v = u(rng);
  return t;
}

}  // namespace

TEST(Tensor, DataLengthMatchesShape) {
  Tensor<float> t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), DimensionError);
  EXPECT_THROW(Tensor<float>({2, 0}), DimensionError);
  t.reshape({6, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_THROW(t.reshape({5, 5}), DimensionError);
}

TEST(Tensor, GradMirrorsShape) {
  Tensor<double> t({3, 2});
  EXPECT_FALSE(t.has_grad());
  EXPECT_EQ(t.ensure_grad().size(), t.size());
}

TEST(Conv2d, AllOnesSamePaddingMatchesDirectSum) {
  auto x = make_tensor<double>({1, 1, 3, 3}, 1.0);
  auto k = make_tensor<double>({1, 1, 3, 3}, 1.0);
  auto b = make_tensor<double>({1}, 0.0);
  auto y = conv2d(x, k, b);
  // Frozen from conv_reference.
  const std::vector<double> expected{4, 6, 4, 6, 9, 6, 4, 6, 4};
  EXPECT_EQ(conv_reference(*x, *k, *b), expected);
  EXPECT_TRUE(std::ranges::equal(y->data(), expected));
}

TEST(Conv2d, MatchesDirectSumOnRandomShapes) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng() % 2, c = 1 + rng() % 3, o = 1 + rng() % 4, h = 2 + rng() % 6, w = 2 + rng() % 6;
    const std::size_t k = (rng() % 2) ? 3 : 5;
    auto x = random_tensor({n, c, h, w}, rng), kern = random_tensor({o, c, k, k}, rng), b = random_tensor({o}, rng);
    auto y = conv2d(x, kern, b);
    auto ref = conv_reference(*x, *kern, *b);
    ASSERT_EQ(y->size(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR((*y)[i], ref[i], 1e-12);
  }
}

TEST(Conv2d, ZeroKernelAnnihilates) {
  Rng rng(1);
  auto x = random_tensor({2, 3, 5, 4}, rng);
  auto y = conv2d(x, make_tensor<double>({2, 3, 3, 3}), make_tensor<double>({2}));
  for (double v : y->data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, IdentityPointwiseKernel) {
  Rng rng(2);
  auto x = random_tensor({2, 1, 4, 5}, rng);
  auto y = conv2d(x, make_tensor<double>({1, 1, 1, 1}, 1.0), make_tensor<double>({1}));
  EXPECT_EQ(y->storage(), x->storage());
}

TEST(Conv2d, ShapeErrorsNameTheAxes) {
  auto x = make_tensor<float>({1, 3, 4, 4});
  auto k = make_tensor<float>({2, 2, 3, 3});
  try {
    conv2d(x, k, make_tensor<float>({2}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("input axis 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("kernel axis 1"), std::string::npos) << msg;
  }
  EXPECT_THROW(conv2d(x, make_tensor<float>({2, 3, 3, 3}), make_tensor<float>({2}), Padding::Same, 0), ArgumentError);
}

TEST(Conv2d, SamePaddingKeepsSize) {
  auto y = conv2d(make_tensor<float>({1, 1, 7, 9}), make_tensor<float>({4, 1, 3, 3}), make_tensor<float>({4}));
  EXPECT_EQ(y->shape(), (Shape{1, 4, 7, 9}));
}

TEST(MaxPool2, SingleWindow) {
  auto y = maxpool2(make_tensor<double>({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(y->shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ((*y)[0], 4.0);
}

TEST(MaxPool2, ConstantInputHalves) {
  auto y = maxpool2(make_tensor<float>({1, 2, 6, 8}, 3.5f));
  EXPECT_EQ(y->shape(), (Shape{1, 2, 3, 4}));
  for (float v : y->data()) EXPECT_EQ(v, 3.5f);
}

TEST(MaxPool2, FourPoolsOf200x300Give12x18) {
  auto x = make_tensor<float>({1, 1, 200, 300});
  for (int i = 0; i < 4; ++i) x = maxpool2(x);
  EXPECT_EQ(x->shape(), (Shape{1, 1, 12, 18}));
}

TEST(MaxPool2, TiesRouteToFirstInWindow) {
  auto x = make_tensor<double>({1, 1, 2, 2}, 1.0);
  Tape<double> tape;
  auto y = maxpool2(x, &tape);
  tape.backward(y);
  EXPECT_EQ(x->storage().size(), 4u);
  EXPECT_EQ(x->grad()[0], 1.0);
  EXPECT_EQ(x->grad()[1], 0.0);
  EXPECT_EQ(x->grad()[2], 0.0);
  EXPECT_EQ(x->grad()[3], 0.0);
}

TEST(MaxPool2, RejectsTinyInput) {
  EXPECT_THROW(maxpool2(make_tensor<float>({1, 1, 1, 4})), DimensionError);
}

TEST(UpsampleNn, ReplicatesBlocks) {
  auto y = upsample_nn(make_tensor<float>({1, 1, 1, 1}, 2.5f), 8);
  EXPECT_EQ(y->shape(), (Shape{1, 1, 8, 8}));
  for (float v : y->data()) EXPECT_EQ(v, 2.5f);
  Rng rng(3);
  auto x = random_tensor({1, 2, 3, 3}, rng);
  EXPECT_EQ(upsample_nn(x, 1)->storage(), x->storage());
  EXPECT_EQ(upsample_nn(make_tensor<float>({1, 96, 32, 32}), 8)->shape(), (Shape{1, 96, 256, 256}));
  EXPECT_THROW(upsample_nn(x, 0), ArgumentError);
}

TEST(UpsampleNn, PoolOfUpsampleIsIdentity) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = random_tensor({1 + rng() % 2, 1 + rng() % 3, 1 + rng() % 5, 1 + rng() % 5}, rng);
    EXPECT_EQ(maxpool2(upsample_nn(x, 2))->storage(), x->storage());
  }
}

TEST(BatchNorm, ConstantInputGivesBeta) {
  auto x = make_tensor<double>({4, 2, 3, 3}, 7.0);
  auto beta = make_tensor<double>({2}, std::vector<double>{0.25, -1.5});
  auto y = batchnorm(x, make_tensor<double>({2}, 1.0), beta, Mode::Train, make_tensor<double>({2}),
                     make_tensor<double>({2}, 1.0));
  for (std::size_t i = 0; i < y->size(); ++i) EXPECT_DOUBLE_EQ((*y)[i], (i / 9) % 2 == 0 ? 0.25 : -1.5);
}

TEST(BatchNorm, StandardizedInputUnchanged) {
  // mean 0, variance 1 per channel
  auto x = make_tensor<double>({4, 1}, std::vector<double>{-1, 1, -1, 1});
  auto y = batchnorm(x, make_tensor<double>({1}, 1.0), make_tensor<double>({1}), Mode::Train,
                     make_tensor<double>({1}), make_tensor<double>({1}, 1.0));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR((*y)[i], (*x)[i], 1e-5);
}

TEST(BatchNorm, TwoSampleBatch) {
  auto x = make_tensor<double>({2, 1, 1, 1}, std::vector<double>{0, 2});
  auto y = batchnorm(x, make_tensor<double>({1}, 1.0), make_tensor<double>({1}), Mode::Train,
                     make_tensor<double>({1}), make_tensor<double>({1}, 1.0));
  // (0 - 1) / sqrt(1 + 1e-5)
  const double expected = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR((*y)[0], -expected, 1e-12);
  EXPECT_NEAR((*y)[1], expected, 1e-12);
  EXPECT_NEAR((*y)[0], -1.0, 1e-5);
}

TEST(BatchNorm, RunningStatsAndInference) {
  auto x = make_tensor<double>({2, 1}, std::vector<double>{0, 2});
  auto rm = make_tensor<double>({1}), rv = make_tensor<double>({1}, 1.0);
  auto g = make_tensor<double>({1}, 1.0), b = make_tensor<double>({1});
  batchnorm(x, g, b, Mode::Train, rm, rv, 0.9, 1e-5);
  EXPECT_NEAR((*rm)[0], 0.1, 1e-12);        // 0.9*0 + 0.1*1
  EXPECT_NEAR((*rv)[0], 0.9 + 0.1, 1e-12);  // batch variance 1
  auto y = batchnorm(make_tensor<double>({1, 1}, std::vector<double>{0.1}), g, b, Mode::Infer, rm, rv, 0.9, 1e-5);
  EXPECT_NEAR((*y)[0], 0.0, 1e-12);
  EXPECT_THROW(batchnorm(x, g, b, Mode::Train, rm, rv, 0.9, 0.0), ArgumentError);
}

TEST(Activations, ReluSigmoidSoftmax) {
  auto r = relu(make_tensor<double>({2}, std::vector<double>{-3, 5}));
  EXPECT_EQ((*r)[0], 0.0);
  EXPECT_EQ((*r)[1], 5.0);
  EXPECT_EQ((*sigmoid(make_tensor<double>({1}, 0.0)))[0], 0.5);
  auto s = softmax(make_tensor<double>({1, 5}, 0.3));
  for (double v : s->data()) EXPECT_NEAR(v, 0.2, 1e-15);
  EXPECT_THROW(softmax(make_tensor<double>({5})), DimensionError);
}

TEST(Activations, SoftmaxRowsSumToOne) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = make_tensor<double>({3, 5});
    std::uniform_real_distribution<double> u(-50, 50);
    for (auto& v : x->data()) v = u(rng);
    auto y = softmax(x);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) {
        const double p = (*y)[r * 5 + k];
        EXPECT_GE(p, 0.0);
        EXPECT_LE(p, 1.0);
        s += p;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Activations, SigmoidStaysInUnitInterval) {
  auto y = sigmoid(make_tensor<float>({3}, std::vector<float>{-80.f, 0.f, 80.f}));
  EXPECT_GE((*y)[0], 0.f);
  EXPECT_LT((*y)[0], 1e-20f);
  EXPECT_LE((*y)[2], 1.f);
}

TEST(Dense, HandComputed) {
  auto y = dense(make_tensor<double>({1, 2}, std::vector<double>{1, 2}),
                 make_tensor<double>({2, 2}, std::vector<double>{1, 0, 0, 1}), make_tensor<double>({2}, 1.0));
  EXPECT_TRUE(std::ranges::equal(y->data(), std::vector<double>{2, 3}));
}

TEST(Dense, ZeroWeightGivesBias) {
  auto y = dense(make_tensor<double>({3, 4}, 1.7), make_tensor<double>({4, 2}),
                 make_tensor<double>({2}, std::vector<double>{0.5, -2}));
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ((*y)[2 * r], 0.5);
    EXPECT_EQ((*y)[2 * r + 1], -2.0);
  }
  EXPECT_THROW(dense(make_tensor<double>({3, 4}), make_tensor<double>({3, 2}), make_tensor<double>({2})),
               DimensionError);
}

TEST(Dropout, IdentityCases) {
  Rng rng(6);
  auto x = random_tensor({4, 8}, rng);
  EXPECT_EQ(dropout(x, 0.0, Mode::Train, rng)->storage(), x->storage());
  EXPECT_EQ(dropout(x, 0.7, Mode::Infer, rng)->storage(), x->storage());
  EXPECT_THROW(dropout(x, 1.0, Mode::Train, rng), ArgumentError);
}

TEST(Dropout, PreservesExpectation) {
  Rng rng(8);
  auto y = dropout(make_tensor<float>({100, 1000}, 1.f), 0.5, Mode::Train, rng);
  const double mean = std::accumulate(y->data().begin(), y->data().end(), 0.0) / static_cast<double>(y->size());
  EXPECT_NEAR(mean, 1.0, 0.05);
  for (float v : y->data()) EXPECT_TRUE(v == 0.f || v == 2.f);
}

TEST(Backward, SquareHasGradientSix) {
  auto x = make_scalar<double>(3.0);
  Tape<double> tape;
  // x^2 as mse against target 0 scaled by n = 1
  auto loss = mse<double>(x, std::vector<double>{0.0}, &tape);
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(loss->item(), 9.0);
  EXPECT_DOUBLE_EQ(x->grad()[0], 6.0);
}

TEST(Backward, UnreachableParameterHasZeroGrad) {
  auto a = make_tensor<double>({1, 2}, 1.0), w = make_tensor<double>({2, 1}, 0.5), b = make_tensor<double>({1});
  auto unused = make_tensor<double>({3}, 4.0);
  zero_grads<double>({a, w, b, unused});
  Tape<double> tape;
  tape.backward(dense(a, w, b, &tape));
  for (double g : unused->grad()) EXPECT_EQ(g, 0.0);
  EXPECT_EQ(w->grad()[0], 1.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tape<double> tape;
  auto y = relu(make_tensor<double>({2}, 1.0), &tape);
  EXPECT_THROW(tape.backward(y), ArgumentError);
}

TEST(Backward, ReplaysInExactReverseOrder) {
  Rng rng(9);
  auto x = random_tensor({1, 1, 4, 4}, rng);
  Tape<double> tape;
  auto h = conv2d(x, random_tensor({2, 1, 3, 3}, rng), random_tensor({2}, rng), Padding::Same, 1, &tape);
  h = relu(maxpool2(h, &tape), &tape);
  auto loss = l2_penalty<double>({flatten(h, &tape)}, 1.0, &tape);
  auto order = tape.recorded_ops();
  tape.backward(loss);
  std::reverse(order.begin(), order.end());
  EXPECT_EQ(tape.last_replay(), order);
  EXPECT_EQ(order.front(), "l2_penalty");
  EXPECT_EQ(order.back(), "conv2d");
}

TEST(Backward, DeterministicUnderFixedSeed) {
  auto run = [] {
    Rng rng(42);
    auto x = random_tensor({2, 2, 6, 6}, rng), k = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
    Tape<double> tape;
    auto y = dropout(relu(conv2d(x, k, b, Padding::Same, 1, &tape), &tape), 0.3, Mode::Train, rng, &tape);
    tape.backward(l2_penalty<double>({y}, 0.5, &tape));
    return std::vector<double>(k->grad().begin(), k->grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, EveryOperatorWithinTolerance) {
  for (const auto& r : run_gradient_suite(123, 5)) EXPECT_LT(r.max_rel_error, 1e-4) << r.op;
}
