#include <gtest/gtest.h>

#include <cmath>

#include "test_support.hpp"
#include "woc/trainer.hpp"

namespace woc {
namespace {

// Small enough to step in well under a second.
TrainConfig tiny_config() {
  TrainConfig c = TrainConfig::desk();
  c.model.scales = 2;
  c.model.scale_channels = {4, 4};
  c.model.extractor_layers = 1;
  c.model.code_channels = 4;
  c.disc.trunk_channels = {4, 4};
  c.batch = 2;
  c.patch = 48;
  c.ms_ssim_scales = 2;
  c.iterations = 10;
  c.pool_images = 4;
  c.pool_image_size = 64;
  return c;
}

std::vector<Tensor<float>> tiny_batch(const TrainConfig& c, std::uint64_t seed) {
  auto src = PatchSource<float>::synthetic(seed, 2, c.pool_image_size, c.patch);
  Rng rng(seed);
  return src.batch(c.batch, rng);
}

TEST(Scheduler, TruthTableOnGrid) {
  SchedulerConfig cfg;
  for (int i = 0; i <= 1000; ++i) {
    const double a = i / 1000.0;
    const TrainMode want = a < 0.8 ? TrainMode::kDiscriminatorOnly
                                   : (a < 0.95 ? TrainMode::kAlternate : TrainMode::kGeneratorOnly);
    EXPECT_EQ(scheduler_decide(a, cfg), want) << a;
  }
  EXPECT_EQ(scheduler_decide(0.7, cfg), TrainMode::kDiscriminatorOnly);
  EXPECT_EQ(scheduler_decide(0.8, cfg), TrainMode::kAlternate);
  EXPECT_EQ(scheduler_decide(0.9, cfg), TrainMode::kAlternate);
  EXPECT_EQ(scheduler_decide(0.95, cfg), TrainMode::kGeneratorOnly);
}

TEST(Scheduler, AccuracyRunningAverage) {
  EXPECT_DOUBLE_EQ(update_accuracy({0.5}, 1.0, 0.8).accuracy, 0.6);
  EXPECT_DOUBLE_EQ(update_accuracy({0.37}, 0.37, 0.8).accuracy, 0.37);
  EXPECT_DOUBLE_EQ(update_accuracy({0.2}, 0.9, 0.0).accuracy, 0.9);
  EXPECT_THROW((SchedulerConfig{0.9, 0.8, 0.8}.validate()), ConfigError);
}

TEST(Scheduler, AlternationIsStrict) {
  for (std::uint64_t it = 0; it < 6; ++it) {
    EXPECT_NE(trains_discriminator(TrainMode::kAlternate, it), propagates_confusion(TrainMode::kAlternate, it));
    EXPECT_TRUE(trains_discriminator(TrainMode::kDiscriminatorOnly, it));
    EXPECT_FALSE(propagates_confusion(TrainMode::kDiscriminatorOnly, it));
    EXPECT_TRUE(propagates_confusion(TrainMode::kGeneratorOnly, it));
    EXPECT_FALSE(trains_discriminator(TrainMode::kGeneratorOnly, it));
  }
}

TEST(RandomSwap, DeterministicAndBalanced) {
  Tensor<float> a({3, 2, 2}, 0.f), b({3, 2, 2}, 1.f);
  Rng r1(42), r2(42);
  int swaps = 0;
  for (int i = 0; i < 10000; ++i) {
    auto p = random_swap(a, b, r1);
    auto q = random_swap(a, b, r2);
    ASSERT_EQ(p.target_first, q.target_first);
    EXPECT_EQ(p.first[0], p.target_first ? 0.f : 1.f);
    swaps += !p.target_first;
  }
  EXPECT_GE(swaps, 4800);
  EXPECT_LE(swaps, 5200);
  EXPECT_THROW(random_swap(a, Tensor<float>({3, 2, 3}), r1), ShapeError);
}

TEST(Discriminator, BranchAverageFeedsSigmoid) {
  Tape<double> tape;
  auto s = Tensor<double>::scalar;
  auto logit = combine_branches<double>({tape.constant(s(2.0)), tape.constant(s(0.0)), tape.constant(s(-2.0))});
  EXPECT_DOUBLE_EQ(logit.value().item(), 0.0);
  EXPECT_DOUBLE_EQ(sigmoid(logit).value().item(), 0.5);
  auto l2 = combine_branches<double>({tape.constant(s(1.0)), tape.constant(s(3.0))});
  EXPECT_DOUBLE_EQ(l2.value().item(), 2.0);
}

TEST(Discriminator, ScoreInOpenUnitInterval) {
  Discriminator<float> d(DiscriminatorConfig{}, 3);
  Rng rng(1);
  for (int i = 0; i < 5; ++i) {
    auto a = Tensor<float>::cast(testing::random_tensor(rng, {3, 32, 32}, 0.0, 1.0));
    auto b = Tensor<float>::cast(testing::random_tensor(rng, {3, 32, 32}, 0.0, 1.0));
    const double s = discriminator_score(SwappedPair<float>{a, b, true}, d);
    EXPECT_GT(s, 0.0);
    EXPECT_LT(s, 1.0);
  }
  Tape<float> tape;
  auto small = tape.constant(Tensor<float>({3, 4, 4}));
  EXPECT_THROW(discriminator_score(small, small, d), ShapeError);
}

TEST(Discriminator, GradientMatchesFiniteDifferences) {
  DiscriminatorConfig cfg;
  cfg.trunk_channels = {3, 2, 2};
  Discriminator<double> d(cfg, 5);
  Rng rng(9);
  const std::size_t n = d.parameters().size();
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<Tensor<double>> inputs{testing::random_tensor(rng, {3, 8, 8}, 0.0, 1.0),
                                       testing::random_tensor(rng, {3, 8, 8}, 0.0, 1.0)};
    for (std::size_t i = 0; i < n; ++i) inputs.push_back(d.parameters().at(i).value);
    auto r = testing::check_gradients(
        [&](Tape<double>&, const std::vector<Var<double>>& v) {
          // Parameters enter as tape variables in declaration order:
          // trunk w, trunk b, branch w, branch b per depth.
          std::vector<Var<double>> pv(v.begin() + 2, v.end());
          auto x = concat_channels(v[0], v[1]);
          std::vector<Var<double>> branches;
          for (std::size_t k = 0; k < cfg.trunk_channels.size(); ++k) {
            const auto t = 4 * k;
            x = leaky_relu(bias_add(conv2d(x, pv[t], 2, 1), pv[t + 1]), 0.2);
            branches.push_back(mean(bias_add(conv2d(x, pv[t + 2], 1, 0), pv[t + 3])));
          }
          return sigmoid(combine_branches(branches));
        },
        inputs);
    EXPECT_LT(r.max_relative_error, 1e-3) << trial;
  }
}

TEST(Discriminator, LibraryPathMatchesManualGraph) {
  DiscriminatorConfig cfg;
  cfg.trunk_channels = {3, 2, 2};
  Discriminator<double> d(cfg, 5);
  Rng rng(10);
  auto a = testing::random_tensor(rng, {3, 8, 8}, 0.0, 1.0), b = testing::random_tensor(rng, {3, 8, 8}, 0.0, 1.0);
  Tape<double> tape;
  const double lib = discriminator_score(tape.constant(a), tape.constant(b), d).value().item();
  auto x = concat_channels(tape.constant(a), tape.constant(b));
  std::vector<Var<double>> br;
  for (std::size_t k = 0; k < 3; ++k) {
    auto p = [&](const std::string& s) { return tape.constant(d.parameters()[s].value); };
    const auto t = "trunk" + std::to_string(k), bn = "branch" + std::to_string(k);
    x = leaky_relu(bias_add(conv2d(x, p(t + ".w"), 2, 1), p(t + ".b")), 0.2);
    br.push_back(mean(bias_add(conv2d(x, p(bn + ".w"), 1, 0), p(bn + ".b"))));
  }
  EXPECT_EQ(lib, sigmoid(combine_branches(br)).value().item());
}

TEST(BalanceGradients, NormArithmetic) {
  std::vector<Tensor<double>> rec{Tensor<double>({2}, {0.0, 4.0})};
  std::vector<Tensor<double>> zero{Tensor<double>({2})};
  EXPECT_EQ(balance_gradients(rec, zero)[0], rec[0]);

  std::vector<Tensor<double>> adv{Tensor<double>({2}, {1.0, 0.0})};
  auto c = balance_gradients(rec, adv, 1.0);
  EXPECT_DOUBLE_EQ(c[0][0], 4.0);
  EXPECT_DOUBLE_EQ(c[0][1], 4.0);

  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    std::vector<Tensor<double>> r{testing::random_tensor(rng, {5}), testing::random_tensor(rng, {2, 3})};
    std::vector<Tensor<double>> a{testing::random_tensor(rng, {5}), testing::random_tensor(rng, {2, 3})};
    const double ratio = uniform(rng, 0.0, 2.0);
    EXPECT_LE(global_norm(balance_gradients(r, a, ratio)), global_norm(r) * (1.0 + ratio) + 1e-12);
  }
  EXPECT_THROW(balance_gradients(rec, std::vector<Tensor<double>>{}), ShapeError);
}

TEST(TrainConfig, DefaultsAndSchedule) {
  TrainConfig c;
  EXPECT_EQ(c.batch, 16u);
  EXPECT_DOUBLE_EQ(c.lr, 3e-4);
  EXPECT_EQ(c.lr_drop_at.size(), 2u);
  EXPECT_DOUBLE_EQ(c.lr_drop_factor, 5.0);
  c.iterations = 1000;
  EXPECT_DOUBLE_EQ(c.lr_at(0), 3e-4);
  EXPECT_DOUBLE_EQ(c.lr_at(599), 3e-4);
  EXPECT_DOUBLE_EQ(c.lr_at(600), 3e-4 / 5);
  EXPECT_DOUBLE_EQ(c.lr_at(999), 3e-4 / 25);
  EXPECT_EQ(TrainConfig::desk().batch, 8u);
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
  auto c = tiny_config();
  c.color = ColorSpace::kYCbCr;
  auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_TRUE(back.model == c.model);
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"patch", 50}}), ConfigError);
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"batch", "eight"}}), ConfigError);
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"colorspace", "hsv"}}), ConfigError);
}

TEST(Trainer, ReproducibleLogs) {
  auto c = tiny_config();
  c.iterations = 4;
  auto src = PatchSource<float>::synthetic(c.seed, c.pool_images, c.pool_image_size, c.patch);
  auto run = [&](std::uint64_t seed) {
    auto cc = c;
    cc.seed = seed;
    Trainer<float> t(cc);
    std::vector<std::string> rows;
    t.run(src, [&](const TrainLogRow& r) { rows.push_back(format_log_row(r)); });
    return rows;
  };
  const auto a = run(7), b = run(7), d = run(8);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, d);
  ASSERT_EQ(a.size(), 4u);
  EXPECT_EQ(std::string(kTrainLogHeader), "iteration,rec_loss,ms_ssim,mean_bits,target_bits,alpha,disc_accuracy,mode");
}

TEST(Trainer, ModeTranscriptReplaysScheduler) {
  auto c = tiny_config();
  c.iterations = 8;
  c.sched.momentum = 0.0;  // accuracy jumps, so several modes appear
  auto src = PatchSource<float>::synthetic(c.seed, c.pool_images, c.pool_image_size, c.patch);
  Trainer<float> t(c);
  t.run(src, [&](const TrainLogRow& r) {
    EXPECT_EQ(r.mode, to_string(scheduler_decide(r.disc_accuracy, c.sched))) << r.iteration;
  });
}

TEST(Trainer, DiscriminatorOnlyFreezesConfusionSignal) {
  auto c = tiny_config();
  auto batch = tiny_batch(c, 3);
  Trainer<float> adv(c);
  auto off_cfg = c;
  off_cfg.adversarial_ratio = 0.0;
  Trainer<float> off(off_cfg);
  ASSERT_EQ(scheduler_decide(adv.scheduler_state().accuracy, c.sched), TrainMode::kDiscriminatorOnly);
  const auto disc_before = adv.discriminator().parameters();
  adv.step(batch);
  off.step(batch);
  // No confusion gradient reached the reconstructor...
  EXPECT_TRUE(adv.model().encoder() == off.model().encoder());
  EXPECT_TRUE(adv.model().decoder() == off.model().decoder());
  // ...while the discriminator trained.
  EXPECT_FALSE(adv.discriminator().parameters() == disc_before);

  // The discriminator phase alone never touches the reconstructor.
  const auto enc = adv.model().encoder(), dec = adv.model().decoder();
  adv.discriminator_phase(batch, batch, {true, false}, 1e-3);
  EXPECT_TRUE(adv.model().encoder() == enc);
  EXPECT_TRUE(adv.model().decoder() == dec);
}

TEST(Trainer, GeneratorOnlyFreezesDiscriminator) {
  auto c = tiny_config();
  auto batch = tiny_batch(c, 4);
  Trainer<float> t(c);
  t.scheduler_state().accuracy = 0.99;
  const auto disc_before = t.discriminator().parameters();
  const auto enc_before = t.model().encoder();
  auto row = t.step(batch);
  EXPECT_EQ(row.mode, "gen_only");
  EXPECT_TRUE(t.discriminator().parameters() == disc_before);
  EXPECT_FALSE(t.model().encoder() == enc_before);
}

TEST(Trainer, DegeneratePairsGiveChanceAccuracy) {
  auto c = tiny_config();
  c.patch = 32;
  c.ms_ssim_scales = 1;
  c.model.reduction = 4;
  Trainer<float> t(c);
  auto src = PatchSource<float>::synthetic(11, 4, 64, 32);
  Rng rng(12), swap(13);
  for (int s = 0; s < 200; ++s) {
    auto b = src.batch(4, rng);
    std::vector<bool> tf;
    for (int i = 0; i < 4; ++i) tf.push_back(coin_flip(swap));
    t.discriminator_phase(b, b, tf, 1e-3);
  }
  double acc = 0.0;
  const int rounds = 125;
  for (int r = 0; r < rounds; ++r) {
    auto b = src.batch(4, rng);
    std::vector<bool> tf;
    for (int i = 0; i < 4; ++i) tf.push_back(coin_flip(swap));
    acc += t.batch_accuracy(b, b, tf);
  }
  acc /= rounds;
  EXPECT_GE(acc, 0.4);
  EXPECT_LE(acc, 0.6);
}

TEST(Trainer, NonFiniteLossAborts) {
  auto c = tiny_config();
  Trainer<float> t(c);
  t.model().decoder().at(0).value.fill(std::nanf(""));
  EXPECT_THROW(t.step(tiny_batch(c, 5)), TrainingError);
}

TEST(Trainer, FrozenAlphaStaysPut) {
  auto c = tiny_config();
  c.freeze_alpha = true;
  c.initial_alpha = 0.0;
  c.adversarial_ratio = 0.0;
  Trainer<float> t(c);
  auto b = tiny_batch(c, 6);
  auto r0 = t.step(b);
  auto r1 = t.step(b);
  EXPECT_EQ(r0.alpha, 0.0);
  EXPECT_EQ(r1.alpha, 0.0);
  EXPECT_EQ(r1.mode, "off");
  EXPECT_GT(t.acr_state().mean_bits, 0.0);
}

}  // namespace
}  // namespace woc
