#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "test_support.hpp"
#include "woc/acr.hpp"

namespace woc {
namespace {

double penalty_value(const Tensor<double>& y, double alpha, const AcrConfig& cfg) {
  Tape<double> tape;
  return acr_penalty(tape.constant(y), alpha, cfg).value().item();
}

TEST(AcrPenalty, SingleElementHasNoNeighborTerms) {
  AcrConfig cfg;
  cfg.epsilon = 0.0;
  EXPECT_DOUBLE_EQ(penalty_value(Tensor<double>({1, 1, 1}, {0.5}), 1.0, cfg), -1.0);
}

TEST(AcrPenalty, ConstantTensorPaysEpsilonPerPair) {
  AcrConfig cfg;
  cfg.epsilon = 1.0 / 64.0;
  const double c = 0.25;
  // 2x2 grid: 2 left, 2 above, 1 above-left, 1 above-right pairs.
  const double expected = (4 * std::log2(c + cfg.epsilon) + 6 * std::log2(cfg.epsilon)) / 4.0;
  EXPECT_NEAR(penalty_value(Tensor<double>({1, 2, 2}, c), 1.0, cfg), expected, 1e-12);
}

TEST(AcrPenalty, MatchesDirectEvaluation) {
  Tensor<double> y({2, 3, 4});
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t h = 0; h < 3; ++h)
      for (std::size_t w = 0; w < 4; ++w) y.at(c, h, w) = static_cast<double>((c * 7 + h * 5 + w * 3) % 11) / 8.0 - 5.0 / 8.0;
  AcrConfig cfg;
  cfg.epsilon = 1.0 / 64.0;
  EXPECT_NEAR(penalty_value(y, 1.0, cfg), -4.342013853836, 1e-10);  // tests/oracles/acr_penalty.py
}

TEST(AcrPenalty, LinearInAlpha) {
  Rng rng(4);
  auto y = testing::random_tensor(rng, {3, 5, 5});
  AcrConfig cfg;
  EXPECT_DOUBLE_EQ(penalty_value(y, 2.0, cfg), 2.0 * penalty_value(y, 1.0, cfg));
}

TEST(AcrPenalty, GradientMatchesFiniteDifferences) {
  // Values on a shuffled grid keep magnitudes and differences away from zero.
  Rng rng(12);
  Tensor<double> y({2, 3, 4});
  std::vector<std::size_t> order(y.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double mag = 0.05 + 0.9 * static_cast<double>(order[i]) / static_cast<double>(y.size());
    y[i] = coin_flip(rng) ? mag : -mag;
  }
  AcrConfig cfg = AcrConfig::for_code(6, 2, 3, 4);
  auto r = testing::check_gradients(
      [&](Tape<double>&, const std::vector<Var<double>>& v) { return acr_penalty(v[0], 1.7, cfg); }, {y});
  EXPECT_LT(r.max_relative_error, 1e-3);
  EXPECT_EQ(r.checked, y.size());
}

TEST(AcrPenalty, ZeroSubgradientAtKinks) {
  Tape<double> tape;
  auto v = tape.variable(Tensor<double>({1, 1, 2}, 0.0));
  tape.backward(acr_penalty(v, 1.0, AcrConfig{}));
  for (double g : tape.grad(v)) EXPECT_EQ(g, 0.0);
}

TEST(AcrPenalty, RejectsWrongRank) {
  Tape<double> tape;
  EXPECT_THROW(acr_penalty(tape.constant(Tensor<double>({4}, 0.5)), 1.0, AcrConfig{}), ShapeError);
}

TEST(AcrTarget, FromRatio) {
  EXPECT_DOUBLE_EQ(target_from_ratio(6, 8, 4, 4, 4.0), 192.0);
  EXPECT_DOUBLE_EQ(target_from_ratio(6, 8, 4, 4, 1.0), 6.0 * 8 * 4 * 4);
  EXPECT_DOUBLE_EQ(target_from_ratio(6, 8, 8, 8), 768.0);
  EXPECT_THROW(target_from_ratio(6, 8, 4, 4, 0.0), ConfigError);
  auto cfg = AcrConfig::for_code(6, 8, 8, 8);
  EXPECT_DOUBLE_EQ(cfg.total_to_target_ratio, 4.0);
  EXPECT_DOUBLE_EQ(cfg.epsilon, 1.0 / 64.0);
}

TEST(AcrUpdate, FixedPointAtTarget) {
  AcrConfig cfg;
  AcrState s{1.3, cfg.target_bits, 5};
  EXPECT_DOUBLE_EQ(update_alpha(s, cfg.target_bits, cfg).alpha, 1.3);
}

TEST(AcrUpdate, DoubleTargetScalesByExpEta) {
  AcrConfig cfg;
  AcrState s{1.0, 2 * cfg.target_bits, 3};
  auto n = update_alpha(s, 2 * cfg.target_bits, cfg);
  EXPECT_NEAR(n.alpha, 1.01005016708, 1e-10);
  EXPECT_EQ(n.iteration, 4u);
}

TEST(AcrUpdate, RunningMeanUsesMomentum) {
  AcrConfig cfg;
  auto s = update_alpha(AcrState{}, 1000.0, cfg);
  EXPECT_DOUBLE_EQ(s.mean_bits, 1000.0);
  s = update_alpha(s, 500.0, cfg);
  EXPECT_DOUBLE_EQ(s.mean_bits, 0.9 * 1000.0 + 0.1 * 500.0);
}

TEST(AcrUpdate, MonotoneFeedbackAndPositivity) {
  Rng rng(21);
  AcrConfig cfg;
  AcrState s;
  for (int t = 0; t < 2000; ++t) {
    auto n = update_alpha(s, uniform(rng, 0.0, 3.0 * cfg.target_bits), cfg);
    const double dr = n.mean_bits - cfg.target_bits, da = n.alpha - s.alpha;
    if (dr > 0) {
      EXPECT_GT(da, 0.0);
    }
    if (dr < 0) {
      EXPECT_LT(da, 0.0);
    }
    EXPECT_GT(n.alpha, 0.0);
    s = n;
  }
}

}  // namespace
}  // namespace woc
