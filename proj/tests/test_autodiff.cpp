#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"
#include "woc/autodiff.hpp"
#include "woc/parameters.hpp"

namespace woc {
namespace {

using testing::check_gradients;
using testing::naive_conv2d;
using testing::random_tensor;
using testing::weighted_sum;


TEST(Conv2d, IdentityKernelReproducesInput) {
  Tape<float> tape;
  Tensor<float> x({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto y = conv2d(tape.constant(x), tape.constant(Tensor<float>({1, 1, 1, 1}, 1.0f)), 1, 0);
  EXPECT_EQ(y.value(), x);
}

TEST(Conv2d, OnesKernelStrideTwo) {
  Tape<float> tape;
  auto y = conv2d(tape.constant(Tensor<float>({1, 4, 4}, 1.0f)),
                  tape.constant(Tensor<float>({1, 1, 2, 2}, 1.0f)), 2, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 2}));
  for (float v : y.value()) EXPECT_EQ(v, 4.0f);
}

TEST(Conv2d, MatchesDirectLoopOracle) {
  Rng rng(11);
  struct Case {
    Shape x, w;
    std::size_t stride, pad;
  };
  for (const Case& c : {Case{{3, 9, 7}, {5, 3, 3, 3}, 1, 1}, Case{{2, 8, 8}, {4, 2, 4, 4}, 2, 1},
                        Case{{4, 5, 6}, {3, 4, 1, 1}, 1, 0}, Case{{1, 7, 7}, {2, 1, 3, 3}, 2, 0}}) {
    auto x = random_tensor(rng, c.x);
    auto w = random_tensor(rng, c.w);
    Tape<double> tape;
    auto y = conv2d(tape.constant(x), tape.constant(w), c.stride, c.pad);
    auto expected = naive_conv2d(x, w, c.stride, c.pad);
    ASSERT_EQ(y.shape(), expected.shape());
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(y.value()[i], expected[i], 1e-12);
  }
}

TEST(Conv2d, OutputSizeFormula) {
  Tape<float> tape;
  auto y = conv2d(tape.constant(Tensor<float>({1, 33, 20})), tape.constant(Tensor<float>({2, 1, 4, 4})), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{2, (33 + 2 - 4) / 2 + 1, (20 + 2 - 4) / 2 + 1}));
}

TEST(Conv2d, RejectsChannelMismatch) {
  Tape<float> tape;
  EXPECT_THROW(conv2d(tape.constant(Tensor<float>({2, 4, 4})), tape.constant(Tensor<float>({1, 3, 3, 3})), 1, 1),
               ShapeError);
}

TEST(Conv2d, RejectsUnsupportedKernelAndStride) {
  Tape<float> tape;
  auto x = tape.constant(Tensor<float>({1, 8, 8}));
  EXPECT_THROW(conv2d(x, tape.constant(Tensor<float>({1, 1, 5, 5})), 1, 0), ConfigError);
  EXPECT_THROW(conv2d(x, tape.constant(Tensor<float>({1, 1, 11, 11})), 1, 0), ConfigError);
  EXPECT_THROW(conv2d(x, tape.constant(Tensor<float>({1, 1, 3, 3})), 3, 0), ConfigError);
  EXPECT_THROW(conv2d(tape.constant(Tensor<float>({1, 2, 2})), tape.constant(Tensor<float>({1, 1, 4, 4})), 1, 0),
               ShapeError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 1}}) {
    auto x = random_tensor(rng, {2, 8, 8});
    auto w = random_tensor(rng, {3, 2, stride == 2 ? 4u : 3u, stride == 2 ? 4u : 3u});
    Tape<double> probe;
    auto shape = conv2d(probe.constant(x), probe.constant(w), stride, pad).shape();
    auto r = random_tensor(rng, shape);
    auto res = check_gradients(
        [&](Tape<double>&, const std::vector<Var<double>>& v) {
          return weighted_sum(conv2d(v[0], v[1], stride, pad), r);
        },
        {x, w});
    EXPECT_LT(res.max_relative_error, 1e-3);
  }
}

TEST(TransposedConv2d, IdentityKernelReproducesInput) {
  Tape<float> tape;
  Tensor<float> x({1, 2, 3}, {1, -2, 3, 4, 5, -6});
  auto y = transposed_conv2d(tape.constant(x), tape.constant(Tensor<float>({1, 1, 1, 1}, 1.0f)), 1, 0);
  EXPECT_EQ(y.value(), x);
}

TEST(TransposedConv2d, OutputSizeFormula) {
  Tape<float> tape;
  auto y = transposed_conv2d(tape.constant(Tensor<float>({3, 5, 6})),
                             tape.constant(Tensor<float>({3, 2, 4, 4})), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{2, (5 - 1) * 2 - 2 + 4, (6 - 1) * 2 - 2 + 4}));
}

// <conv(a), b> == <a, conv^T(b)> for matching configurations.
TEST(TransposedConv2d, IsAdjointOfConv2d) {
  Rng rng(21);
  struct Case {
    Shape a, w;
    std::size_t stride, pad;
  };
  for (const Case& c : {Case{{1, 4, 4}, {1, 1, 3, 3}, 1, 1}, Case{{1, 4, 4}, {2, 1, 4, 4}, 2, 1},
                        Case{{3, 8, 8}, {5, 3, 4, 4}, 2, 1}, Case{{2, 6, 6}, {4, 2, 1, 1}, 1, 0},
                        Case{{2, 8, 6}, {3, 2, 3, 3}, 2, 1}}) {
    for (int trial = 0; trial < 5; ++trial) {
      auto a = random_tensor(rng, c.a);
      auto w = random_tensor(rng, c.w);
      Tape<double> tape;
      auto ca = conv2d(tape.constant(a), tape.constant(w), c.stride, c.pad);
      auto b = random_tensor(rng, ca.shape());
      auto tb = transposed_conv2d(tape.constant(b), tape.constant(w), c.stride, c.pad);
      // Odd-sized strided cases drop trailing input rows in conv2d; the
      // adjoint pairs with the input region actually covered.
      if (tb.shape() != a.shape()) continue;
      EXPECT_NEAR(inner_product(ca.value(), b), inner_product(a, tb.value()), 1e-6);
    }
  }
}

TEST(TransposedConv2d, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  auto x = random_tensor(rng, {2, 5, 5});
  auto w = random_tensor(rng, {2, 3, 4, 4});
  Tape<double> probe;
  auto r = random_tensor(rng, transposed_conv2d(probe.constant(x), probe.constant(w), 2, 1).shape());
  auto res = check_gradients(
      [&](Tape<double>&, const std::vector<Var<double>>& v) {
        return weighted_sum(transposed_conv2d(v[0], v[1], 2, 1), r);
      },
      {x, w});
  EXPECT_LT(res.max_relative_error, 1e-3);
}

TEST(LeakyRelu, UsesLeakOnNegativeSide) {
  Tape<float> tape;
  auto y = leaky_relu(tape.constant(Tensor<float>({3}, {-1.0f, 0.0f, 2.0f})), 0.2f);
  EXPECT_FLOAT_EQ(y.value()[0], -0.2f);
  EXPECT_FLOAT_EQ(y.value()[1], 0.0f);
  EXPECT_FLOAT_EQ(y.value()[2], 2.0f);
  EXPECT_EQ(relu(tape.constant(Tensor<float>({1}, {-5.0f}))).value()[0], 0.0f);
}

TEST(LeakyRelu, GradientAwayFromKink) {
  Rng rng(3);
  auto x = testing::random_away_from_zero(rng, {40}, 1e-3);
  auto r = random_tensor(rng, {40});
  auto res = check_gradients(
      [&](Tape<double>&, const std::vector<Var<double>>& v) { return weighted_sum(leaky_relu(v[0], 0.2), r); }, {x});
  EXPECT_LT(res.max_relative_error, 1e-3);
}

TEST(LeakyRelu, RejectsSlopeOutsideUnitInterval) {
  Tape<float> tape;
  auto x = tape.constant(Tensor<float>({2}));
  EXPECT_THROW(leaky_relu(x, 1.0f), ConfigError);
  EXPECT_THROW(leaky_relu(x, -0.1f), ConfigError);
}

TEST(Backward, SumGivesOnes) {
  ParameterSet<float> ps;
  auto& p = ps.add("p", Tensor<float>({2, 3}, {1, 2, 3, 4, 5, 6}));
  Tape<float> tape;
  tape.backward(sum(tape.parameter(p)));
  for (float g : p.grad) EXPECT_EQ(g, 1.0f);
}

TEST(Backward, HalfSquaredNormGivesParameter) {
  ParameterSet<float> ps;
  auto& p = ps.add("p", Tensor<float>({4}, {0.5f, -1.5f, 2.0f, 0.0f}));
  Tape<float> tape;
  auto v = tape.parameter(p);
  tape.backward(mul_scalar(sum(mul(v, v)), 0.5f));
  EXPECT_EQ(p.grad, p.value);
}

TEST(Backward, UnreachableParameterGetsZeroAndGradientsAccumulate) {
  ParameterSet<float> ps;
  auto& a = ps.add("a", Tensor<float>({2}, 1.0f));
  auto& b = ps.add("b", Tensor<float>({2}, 1.0f));
  {
    Tape<float> tape;
    tape.parameter(b);
    tape.backward(sum(tape.parameter(a)));
  }
  {
    Tape<float> tape;
    tape.backward(sum(tape.parameter(a)));
  }
  for (float g : a.grad) EXPECT_EQ(g, 2.0f);
  for (float g : b.grad) EXPECT_EQ(g, 0.0f);
}

TEST(Backward, RejectsNonScalarLoss) {
  Tape<float> tape;
  auto x = tape.variable(Tensor<float>({3}));
  EXPECT_THROW(tape.backward(x), ShapeError);
}

TEST(Backward, CompositeGraphMatchesFiniteDifferences) {
  Rng rng(99);
  auto x = random_tensor(rng, {2, 6, 6});
  auto w1 = random_tensor(rng, {4, 2, 3, 3});
  auto w2 = random_tensor(rng, {3, 4, 4, 4});
  auto res = check_gradients(
      [&](Tape<double>&, const std::vector<Var<double>>& v) {
        auto h = leaky_relu(conv2d(v[0], v[1], 1, 1), 0.2);
        return sum(leaky_relu(conv2d(h, v[2], 2, 1), 0.2));
      },
      {x, w1, w2});
  EXPECT_LT(res.max_relative_error, 1e-3);
}

TEST(Backward, VisitsEachRecordedOperationOnce) {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({2}, 1.0));
  auto y = mul(x, x);
  auto z = add(y, x);  // x reached along two paths
  auto loss = sum(z);
  tape.backward(loss);
  EXPECT_EQ(tape.last_backward_visits(), 3u);
  EXPECT_EQ(tape.grad(x)[0], 3.0);
}

TEST(Backward, ElementwiseOpsMatchFiniteDifferences) {
  Rng rng(1);
  auto a = random_tensor(rng, {12}, 0.5, 2.0);
  auto b = random_tensor(rng, {12}, 0.5, 2.0);
  auto res = check_gradients(
      [](Tape<double>&, const std::vector<Var<double>>& v) {
        auto q = div(sub(v[0], v[1]), add(v[0], v[1]));
        auto s = sigmoid(mul_scalar(add_scalar(q, 0.1), 3.0));
        return add(mean(pow_scalar(s, 0.7)), sum(mul(v[0], v[1])));
      },
      {a, b});
  EXPECT_LT(res.max_relative_error, 1e-3);
}

TEST(Backward, StructuralOpsMatchFiniteDifferences) {
  Rng rng(2);
  auto a = random_tensor(rng, {2, 6, 4});
  auto b = random_tensor(rng, {1, 6, 4});
  auto bias = random_tensor(rng, {3});
  auto r = random_tensor(rng, {2, 3, 2});
  auto res = check_gradients(
      [&](Tape<double>&, const std::vector<Var<double>>& v) {
        auto c = bias_add(concat_channels(v[0], v[1]), v[2]);
        return weighted_sum(avg_pool2(channel_slice(c, 1, 2)), r);
      },
      {a, b, bias});
  EXPECT_LT(res.max_relative_error, 1e-3);
}

TEST(Backward, BceWithLogitsMatchesFiniteDifferences) {
  for (double label : {0.0, 1.0}) {
    auto res = check_gradients(
        [label](Tape<double>&, const std::vector<Var<double>>& v) { return bce_with_logits(v[0], label); },
        {Tensor<double>::scalar(0.37)});
    EXPECT_LT(res.max_relative_error, 1e-3);
  }
}

TEST(Forward, IsBitDeterministic) {
  Rng rng(4);
  auto x = Tensor<float>::cast(random_tensor(rng, {3, 16, 16}));
  auto w = Tensor<float>::cast(random_tensor(rng, {8, 3, 3, 3}));
  auto run = [&] {
    Tape<float> tape;
    return leaky_relu(conv2d(tape.constant(x), tape.constant(w), 1, 1), 0.2f).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, ZeroGradientLeavesParametersButAdvancesStep) {
  ParameterSet<float> ps;
  ps.add("p", Tensor<float>({3}, {1.0f, -2.0f, 3.0f}));
  auto before = ps["p"].value;
  Adam<float> adam;
  adam.step(ps);
  EXPECT_EQ(ps["p"].value, before);
  EXPECT_EQ(adam.steps(), 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParameterSet<double> ps;
  ps.add("p", Tensor<double>::scalar(0.25));
  ps["p"].grad[0] = 1.0;
  Adam<double> adam;
  EXPECT_EQ(adam.config().lr, 3e-4);
  adam.step(ps);
  // Bias-corrected moments are exactly g and g^2, so the update is
  // lr * 1 / (1 + eps).
  EXPECT_NEAR(0.25 - ps["p"].value[0], 3e-4, 3e-4 * 1e-7);
  EXPECT_EQ(ps["p"].grad[0], 0.0);
}

TEST(Adam, MomentsPersistAcrossSteps) {
  ParameterSet<double> ps;
  ps.add("p", Tensor<double>::scalar(0.0));
  Adam<double> adam;
  ps["p"].grad[0] = 1.0;
  adam.step(ps);
  const double after_first = ps["p"].value[0];
  adam.step(ps);  // zero gradient, but momentum keeps moving the parameter
  EXPECT_LT(ps["p"].value[0], after_first);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    ParameterSet<float> ps;
    const int n = 1 + static_cast<int>(uniform_index(rng, 5));
    for (int i = 0; i < n; ++i) {
      Shape s;
      const auto rank = uniform_index(rng, 5);
      for (std::uint64_t d = 0; d < rank; ++d) s.push_back(1 + uniform_index(rng, 4));
      Tensor<float> t(s);
      for (auto& v : t) v = static_cast<float>(normal(rng) * 1e3);
      ps.add("layer" + std::to_string(i) + ".w", std::move(t));
    }
    auto bytes = serialize_parameters(ps);
    auto back = deserialize_parameters<float>(bytes);
    EXPECT_TRUE(back == ps);
    EXPECT_EQ(serialize_parameters(back), bytes);
  }
}

TEST(Checkpoint, RejectsBadMagicAndTruncation) {
  ParameterSet<float> ps;
  ps.add("w", Tensor<float>({2, 2}, 1.0f));
  auto bytes = serialize_parameters(ps);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_parameters<float>(bad), FormatError);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(deserialize_parameters<float>(bytes), FormatError);
}

TEST(ParameterSet, RejectsDuplicateIdentifiers) {
  ParameterSet<float> ps;
  ps.add("w", Tensor<float>({1}));
  EXPECT_THROW(ps.add("w", Tensor<float>({1})), ConfigError);
}

}  // namespace
}  // namespace woc
