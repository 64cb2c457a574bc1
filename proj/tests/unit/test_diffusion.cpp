#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "checks.hpp"
#include "test_support.hpp"
#include "urcdm/diffusion.hpp"
#include "urcdm/error.hpp"
#include "urcdm/pipeline.hpp"
#include "urcdm/sampler.hpp"
#include "urcdm/train.hpp"

using namespace urcdm;
using namespace urcdm::diffusion;
using urcdm::testing::random_tensor;

TEST(Schedule, AlphaBarStrictlyDecreasingFromOne) {
  for (auto kind : {ScheduleKind::kCosine, ScheduleKind::kLinear}) {
    const NoiseSchedule s(250, kind);
    EXPECT_EQ(s.alpha_bar(0), 1.0);
    EXPECT_GT(s.alpha_bar(1), 0.99);
    for (int t = 1; t <= 250; ++t) EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1)) << t;
    EXPECT_LT(s.alpha_bar(250), 0.05);
    EXPECT_GT(s.alpha_bar(250), kMinAlphaBarForEpsilonInversion);
  }
}

TEST(Schedule, VariancePreservingIdentity) {
  const NoiseSchedule s(250);
  for (int t = 0; t <= 250; ++t) {
    EXPECT_NEAR(s.sigma(t) * s.sigma(t) + std::sqrt(s.alpha_bar(t)) * std::sqrt(s.alpha_bar(t)), 1.0, 1e-15);
  }
  EXPECT_THROW(s.alpha_bar(251), Error);
  EXPECT_THROW(s.beta(0), Error);
  EXPECT_THROW(NoiseSchedule(1), Error);
}

TEST(Schedule, PosteriorVarianceClippedAtFirstStep) {
  const NoiseSchedule s(250);
  EXPECT_EQ(s.posterior_variance(1), s.beta(1));
  for (int t = 2; t <= 250; ++t) EXPECT_LE(s.posterior_variance(t), s.beta(t));
}

TEST(Schedule, EmbeddingIsSinusoidal) {
  const NoiseSchedule s(250);
  const auto e = s.noise_embedding(125);
  ASSERT_EQ(e.size(), kNoiseEmbeddingDim);
  EXPECT_NEAR(e[0], std::sin(500.0), 1e-12);
  EXPECT_NEAR(e[kNoiseEmbeddingDim / 2], std::cos(500.0), 1e-12);
}

TEST(NoiseStreamTest, SameSeedSameSequence) {
  NoiseStream a(99), b(99), c(100);
  const Tensor ta = a.normal_like({1000}), tb = b.normal_like({1000}), tc = c.normal_like({1000});
  EXPECT_TRUE(bit_equal(ta, tb));
  EXPECT_FALSE(bit_equal(ta, tc));
}

TEST(ForwardDiffuse, Examples) {
  const NoiseSchedule s(250);
  const Tensor x0 = random_tensor({2, 3, 4, 4}, 1), noise = random_tensor({2, 3, 4, 4}, 2);
  EXPECT_TRUE(bit_equal(forward_diffuse_at(1.0, x0, noise), x0));
  const Tensor zero_img = forward_diffuse(s, Tensor(x0.shape()), 40, noise);
  for (std::size_t i = 0; i < noise.size(); ++i) EXPECT_NEAR(zero_img[i], s.sigma(40) * noise[i], 1e-15);
  const Tensor ones(x0.shape(), 1.0);
  const Tensor xt = forward_diffuse(s, ones, 125, noise);
  const double ab = s.alpha_bar(125);
  for (std::size_t i = 0; i < xt.size(); ++i) EXPECT_NEAR(xt[i], std::sqrt(ab) + std::sqrt(1 - ab) * noise[i], 1e-14);
  EXPECT_THROW(forward_diffuse(s, x0, 0, noise), Error);
}

TEST(Targets, VParameterisationExamples) {
  const Tensor x0 = random_tensor({1, 3, 4, 4}, 3), noise = random_tensor({1, 3, 4, 4}, 4);
  EXPECT_TRUE(bit_equal(training_target_at(1.0, x0, noise, PredictionTarget::kV), noise));
  const Tensor v0 = training_target_at(0.0, x0, noise, PredictionTarget::kV);
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_EQ(v0[i], -x0[i]);
  const Tensor v = training_target_at(0.36, x0, noise, PredictionTarget::kV);
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(v[i], 0.6 * noise[i] - 0.8 * x0[i], 1e-15);
}

TEST(Targets, RoundTripRecoversX0AtEveryStep) {
  const NoiseSchedule s(250);
  const Tensor x0 = random_tensor({1, 3, 4, 4}, 5), noise = random_tensor({1, 3, 4, 4}, 6);
  for (auto target : {PredictionTarget::kEpsilon, PredictionTarget::kV}) {
    for (int t = 1; t <= 250; ++t) {
      const Tensor xt = forward_diffuse(s, x0, t, noise);
      const Tensor rec = predict_x0(s, xt, training_target(s, x0, noise, t, target), t, target);
      ASSERT_LT(max_abs_diff(rec, x0), 1e-10) << to_string(target) << " t=" << t;
    }
  }
}

TEST(Targets, ZeroEpsilonPredictionRescales) {
  const NoiseSchedule s(250);
  const Tensor xt = random_tensor({1, 1, 3, 3}, 7);
  const Tensor x0 = predict_x0(s, xt, Tensor(xt.shape()), 60, PredictionTarget::kEpsilon);
  for (std::size_t i = 0; i < xt.size(); ++i) EXPECT_NEAR(x0[i], xt[i] / std::sqrt(s.alpha_bar(60)), 1e-14);
}

TEST(Targets, ParameterisationsAgree) {
  const NoiseSchedule s(250);
  for (int t : {1, 17, 125, 249}) {
    const Tensor x0 = random_tensor({1, 3, 4, 4}, 10 + t), noise = random_tensor({1, 3, 4, 4}, 20 + t);
    const Tensor xt = forward_diffuse(s, x0, t, noise);
    const Tensor v = training_target(s, x0, noise, t, PredictionTarget::kV);
    EXPECT_LT(max_abs_diff(epsilon_from_prediction(s.alpha_bar(t), xt, v, PredictionTarget::kV), noise), 1e-10);
    EXPECT_LT(max_abs_diff(predict_x0(s, xt, v, t, PredictionTarget::kV),
                           predict_x0(s, xt, noise, t, PredictionTarget::kEpsilon)),
              1e-9);
  }
}

TEST(ReverseStep, LastStepIsDeterministic) {
  const NoiseSchedule s(250);
  const Tensor xt = random_tensor({1, 3, 4, 4}, 8), eps = random_tensor({1, 3, 4, 4}, 9);
  NoiseStream a(1), b(2);
  EXPECT_TRUE(bit_equal(reverse_step(s, xt, eps, 1, PredictionTarget::kEpsilon, a),
                        reverse_step(s, xt, eps, 1, PredictionTarget::kEpsilon, b)));
}

TEST(ReverseStep, LooseBoundMatchesEpsilonForm) {
  const NoiseSchedule s(250);
  const Tensor xt = random_tensor({1, 3, 4, 4}, 10), eps = random_tensor({1, 3, 4, 4}, 11);
  for (int t : {1, 2, 100, 249, 250}) {
    NoiseStream a(5), b(5);
    const Tensor plain = reverse_step(s, xt, eps, t, PredictionTarget::kEpsilon, a);
    const Tensor bounded = reverse_step(s, xt, eps, t, PredictionTarget::kEpsilon, b, 1e12);
    EXPECT_LT(max_abs_diff(plain, bounded), 1e-9) << t;
  }
}

TEST(ReverseStep, BoundKeepsLastStepInRange) {
  const NoiseSchedule s(250);
  Tensor xt = random_tensor({1, 3, 4, 4}, 12);
  xt *= 5.0;
  const Tensor eps = random_tensor({1, 3, 4, 4}, 13);
  NoiseStream stream(6);
  const Tensor x = reverse_step(s, xt, eps, 1, PredictionTarget::kV, stream, 1.0);
  for (double v : x.values()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(ReverseStep, BoundTamesWrongEpsilonAtLargeBeta) {
  const NoiseSchedule s(250);
  const int t = 250;
  const Tensor xt = random_tensor({1, 3, 8, 8}, 14);
  Tensor eps = xt;
  eps *= 0.9;
  NoiseStream a(7), b(7);
  const Tensor plain = reverse_step(s, xt, eps, t, PredictionTarget::kEpsilon, a);
  const Tensor bounded = reverse_step(s, xt, eps, t, PredictionTarget::kEpsilon, b, 1.0);
  double plain_max = 0.0, bounded_max = 0.0;
  for (double v : plain.values()) plain_max = std::max(plain_max, std::abs(v));
  for (double v : bounded.values()) bounded_max = std::max(bounded_max, std::abs(v));
  EXPECT_GT(plain_max, 3.0);
  EXPECT_LT(bounded_max, 5.0);
}

TEST(VariancePreservation, UnitVarianceDataStaysUnit) {
  const NoiseSchedule s(250);
  NoiseStream stream(31);
  const Tensor x0 = stream.normal_like({10000});
  for (int t = 1; t <= 250; t += 13) {
    const Tensor xt = forward_diffuse(s, x0, t, stream.normal_like({10000}));
    const double mean = xt.sum() / 10000.0;
    double var = 0.0;
    for (double v : xt.values()) var += (v - mean) * (v - mean);
    var /= 9999.0;
    EXPECT_NEAR(var, 1.0, 0.05) << "t=" << t;
  }
}

TEST(AnalyticScore, ClosedFormCases) {
  const NoiseSchedule s(250);
  const int t = 90;
  const double ab = s.alpha_bar(t), mu = 0.4;
  const Tensor at_mean({1, 1, 2, 2}, std::sqrt(ab) * mu);
  EXPECT_LT(analytic_gaussian_score(s, at_mean, t, mu, 0.7).max_abs(), 1e-15);
  const Tensor xt = random_tensor({1, 1, 2, 2}, 40);
  const Tensor point = analytic_gaussian_score(s, xt, t, mu, 0.0);
  for (std::size_t i = 0; i < xt.size(); ++i) EXPECT_NEAR(point[i], -(xt[i] - std::sqrt(ab) * mu) / (1 - ab), 1e-12);
}

TEST(AnalyticScore, MatchesGradientOfLogDensity) {
  const NoiseSchedule s(250);
  const double mu = -0.3, sd = 0.6;
  for (int t : {5, 80, 240}) {
    const double ab = s.alpha_bar(t), var = ab * sd * sd + 1 - ab;
    auto logp = [&](const Tensor& x) {
      double l = 0.0;
      for (double v : x.values()) l += -0.5 * (v - std::sqrt(ab) * mu) * (v - std::sqrt(ab) * mu) / var - 0.5 * std::log(2 * std::numbers::pi * var);
      return l;
    };
    const Tensor x = random_tensor({1, 1, 3, 3}, 50 + t);
    EXPECT_LT(urcdm::testing::input_grad_error(logp, x, analytic_gaussian_score(s, x, t, mu, sd)), 1e-6) << t;
  }
}

TEST(Sampler, PointMassOracleConverges) {
  const double c = 0.35;
  const GaussianOracle oracle(c, 0.0, 4);
  NoiseStream stream(3);
  const Tensor x = sample_chain(oracle, 8, nullptr, stream);
  for (double v : x.values()) EXPECT_NEAR(v, c, 1e-2);
}

TEST(Sampler, GaussianOracleMoments) {
  const auto m = urcdm::testing::sampler_moments();
  EXPECT_LT(m.worst_mean_se, 4.0);
  EXPECT_NEAR(m.variance_ratio, 1.0, 0.10);
}

TEST(Sampler, ChainIsBitIdenticalForASeed) {
  const GaussianOracle oracle(0.1, 0.3, 8);
  NoiseStream a(77), b(77);
  EXPECT_TRUE(bit_equal(sample_chain(oracle, 3, nullptr, a), sample_chain(oracle, 3, nullptr, b)));
}

TEST(Sampler, KnownRegionIsHeldExactly) {
  const GaussianOracle oracle(0.0, 0.5, 8);
  KnownRegion known{Tensor({1, 1, 8, 8}), random_tensor({1, 3, 8, 8}, 60)};
  for (std::size_t y = 0; y < 8; ++y) known.mask.at(0, 0, y, 0) = known.mask.at(0, 0, 0, y) = 1.0;
  NoiseStream stream(4);
  const Tensor x = sample_chain(oracle, 1, nullptr, stream, &known);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 8; ++y) {
      EXPECT_EQ(x.at(0, c, y, 0), known.values.at(0, c, y, 0));
      EXPECT_EQ(x.at(0, c, 0, y), known.values.at(0, c, 0, y));
    }
}

// ---- training loss ------------------------------------------------------------

namespace {

net::ModelSpec tiny_spec() {
  net::ModelSpec spec;
  spec.net.resolution = 8;
  spec.schedule_steps = 50;
  return spec;
}

train::Batch fixed_batch(std::size_t n, std::uint64_t seed) {
  train::Batch b;
  b.images = random_tensor({n, 3, 8, 8}, seed, 0.2, 0.8);
  return b;
}

}  // namespace

TEST(Loss, ZeroModelOnNoiseTargetsIsAboutOne) {
  auto model = net::ScoreModel::initialize(tiny_spec(), 1);
  NoiseStream stream(5);
  const auto batch = fixed_batch(16, 2);
  std::vector<int> steps(16);
  for (auto& t : steps) t = 1 + static_cast<int>(stream.below(50));
  const double loss = train::denoising_loss(model, batch, steps, stream.normal_like(batch.images.shape()), false);
  EXPECT_NEAR(loss, 1.0, 0.1);
}

TEST(Loss, ExactPredictionGivesZeroLossAndNoUpdate) {
  // Zero noise makes the epsilon target 0, which the zero head matches.
  auto model = net::ScoreModel::initialize(tiny_spec(), 1);
  const ParamStore before = model.params();
  train::Batch b;
  b.images = Tensor({2, 3, 8, 8}, 0.5);  // model space 0
  const double loss = train::denoising_loss(model, b, {10, 20}, Tensor({2, 3, 8, 8}), true);
  EXPECT_EQ(loss, 0.0);
  AdamState adam;
  adam.config.lr = 1e-3;
  adam_step(model.params(), adam);
  EXPECT_TRUE(model.params().same_values(before));
}

TEST(Loss, SmoothedLossIsBiasCorrectedEma) {
  train::SmoothedLoss s(0.5);
  EXPECT_TRUE(s.empty());
  EXPECT_DOUBLE_EQ(s.update(4.0), 4.0);
  // (0.5*4*0.5 + 0.5*2) / (1 - 0.25)
  EXPECT_DOUBLE_EQ(s.update(2.0), (0.5 * 0.5 * 4.0 + 0.5 * 2.0) / 0.75);
}

TEST(Loss, LogLineRoundTrip) {
  const train::LossRecord r{120, 0.123456789012345678, 0.2, 3.5e-7};
  const auto back = train::parse_loss_line(train::format_loss_line(r));
  EXPECT_EQ(back.step, r.step);
  EXPECT_EQ(back.loss, r.loss);
  EXPECT_EQ(back.smoothed, r.smoothed);
  EXPECT_EQ(back.grad_norm, r.grad_norm);
  EXPECT_THROW(train::parse_loss_line("step=3 loss=1"), Error);
}

TEST(Trainer, SmoothedLossDecreasesOnFixedData) {
  auto model = net::ScoreModel::initialize(tiny_spec(), 2);
  train::TrainConfig cfg;
  cfg.steps = 500;
  cfg.adam.lr = 1e-3;
  cfg.log_every = 50;
  train::Trainer trainer(model, cfg);
  const auto data = fixed_batch(4, 9);
  const auto log = trainer.run([&](NoiseStream&) { return data; });
  ASSERT_EQ(log.size(), 10u);
  EXPECT_LT(log.back().smoothed, log.front().smoothed);
  EXPECT_EQ(trainer.steps_done(), 500u);
}

TEST(Trainer, NonFiniteLossLeavesParametersUntouched) {
  auto model = net::ScoreModel::initialize(tiny_spec(), 3);
  train::Trainer trainer(model, {});
  trainer.step(fixed_batch(2, 10));
  const ParamStore before = model.params();
  auto bad = fixed_batch(2, 11);
  bad.images[5] = std::nan("");
  try {
    trainer.step(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNumeric);
  }
  EXPECT_TRUE(model.params().same_values(before));
  EXPECT_EQ(trainer.steps_done(), 1u);
}
