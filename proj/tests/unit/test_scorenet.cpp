#include <gtest/gtest.h>

#include "test_support.hpp"
#include "urcdm/error.hpp"
#include "urcdm/scorenet.hpp"
#include "urcdm/train.hpp"

using namespace urcdm;
using namespace urcdm::net;
using urcdm::testing::random_tensor;

namespace {

ModelSpec lowres_spec(std::size_t r = 8) {
  ModelSpec s;
  s.net.resolution = r;
  s.net.conditioning = ConditioningMode::kLowResImage;
  s.net.condition_images = 1;
  s.target = diffusion::PredictionTarget::kV;
  s.schedule_steps = 50;
  return s;
}

void randomize_head(ScoreModel& m, std::uint64_t seed) {
  m.params().value("out.w") = random_tensor(m.params().value("out.w").shape(), seed, -0.1, 0.1);
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::kInternal;
}

}  // namespace

TEST(ScoreNetConfig, Validation) {
  ScoreNetConfig c;
  EXPECT_NO_THROW(c.validate());
  c.resolution = 12;
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::kConfig);
  c.resolution = 16;
  c.condition_images = 1;  // images without a conditioning mode
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::kConfig);
  c.conditioning = ConditioningMode::kLowResImage;
  EXPECT_NO_THROW(c.validate());
  c.condition_images = 0;
  EXPECT_EQ(kind_of([&] { c.validate(); }), ErrorKind::kConfig);
}

TEST(ScoreNet, FreshNetworkPredictsExactZeroWithInputShape) {
  for (std::size_t r : {8, 16, 32}) {
    auto m = ScoreModel::initialize(lowres_spec(r), 1);
    ConditionInput cond;
    cond.images = {random_tensor({2, 3, r, r}, 2, 0.0, 1.0)};
    const Tensor x = random_tensor({2, 3, r, r}, 3);
    const Tensor y = m.predict(x, 10, &cond);
    EXPECT_EQ(y.shape(), x.shape());
    EXPECT_EQ(y.max_abs(), 0.0);
  }
}

TEST(ScoreNet, SeedsControlInitialisation) {
  const auto a = ScoreModel::initialize(lowres_spec(), 5), b = ScoreModel::initialize(lowres_spec(), 5);
  const auto c = ScoreModel::initialize(lowres_spec(), 6);
  EXPECT_TRUE(a.params().same_values(b.params()));
  EXPECT_FALSE(a.params().same_values(c.params()));
}

TEST(ScoreNet, BatchPermutationPermutesOutputs) {
  auto m = ScoreModel::initialize(lowres_spec(), 7);
  randomize_head(m, 8);
  const std::size_t n = 3, r = 8, per = 3 * r * r;
  const Tensor x = random_tensor({n, 3, r, r}, 9);
  ConditionInput cond;
  cond.images = {random_tensor({n, 3, r, r}, 10, 0.0, 1.0)};
  const std::vector<std::size_t> perm{2, 0, 1};
  Tensor xp(x.shape()), cp(x.shape());
  for (std::size_t k = 0; k < n; ++k) {
    std::copy_n(x.data() + perm[k] * per, per, xp.data() + k * per);
    std::copy_n(cond.images[0].data() + perm[k] * per, per, cp.data() + k * per);
  }
  ConditionInput condp;
  condp.images = {cp};
  const Tensor y = m.predict(x, 20, &cond), yp = m.predict(xp, 20, &condp);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t q = 0; q < per; ++q) EXPECT_NEAR(yp[k * per + q], y[perm[k] * per + q], 1e-12);
  }
}

TEST(ScoreNet, PredictIsDeterministic) {
  auto m = ScoreModel::initialize(lowres_spec(), 11);
  randomize_head(m, 12);
  ConditionInput cond;
  cond.images = {random_tensor({2, 3, 8, 8}, 13, 0.0, 1.0)};
  const Tensor x = random_tensor({2, 3, 8, 8}, 14);
  EXPECT_TRUE(bit_equal(m.predict(x, 30, &cond), m.predict(x, 30, &cond)));
}

TEST(ScoreNet, ConditioningContractIsEnforced) {
  auto m = ScoreModel::initialize(lowres_spec(), 1);
  const Tensor x = random_tensor({1, 3, 8, 8}, 2);
  EXPECT_EQ(kind_of([&] { m.predict(x, 5, nullptr); }), ErrorKind::kConfig);
  ConditionInput wrong;
  wrong.images = {random_tensor({1, 3, 4, 4}, 3, 0.0, 1.0)};
  EXPECT_EQ(kind_of([&] { m.predict(x, 5, &wrong); }), ErrorKind::kInvalidShape);

  ModelSpec masked = lowres_spec();
  masked.net.conditioning = ConditioningMode::kLowResImageInpaintMask;
  auto mm = ScoreModel::initialize(masked, 1);
  ConditionInput c;
  c.images = {random_tensor({1, 3, 8, 8}, 4, 0.0, 1.0)};
  c.mask = Tensor({1, 1, 8, 8}, 0.5);
  c.known = Tensor({1, 3, 8, 8});
  EXPECT_EQ(kind_of([&] { mm.predict(x, 5, &c); }), ErrorKind::kConfig);
}

TEST(ScoreNet, BackwardWithoutForwardIsAStateError) {
  const ScoreNet net(ScoreNetConfig{});
  ParamStore p = net.init_params(1);
  TapeHandle tape;
  EXPECT_EQ(kind_of([&] { net.backward(p, tape, Tensor({1, 3, 8, 8})); }), ErrorKind::kState);
}

TEST(ScoreNet, CheckpointRoundTripIsBitExact) {
  urcdm::testing::TempDir dir("ckpt");
  auto m = ScoreModel::initialize(lowres_spec(16), 21);
  randomize_head(m, 22);
  m.save(dir.str("m.ckpt"));
  const auto back = ScoreModel::load(dir.str("m.ckpt"));
  EXPECT_TRUE(back.params().same_values(m.params()));
  EXPECT_EQ(back.spec().net.resolution, 16u);
  EXPECT_EQ(back.spec().net.conditioning, ConditioningMode::kLowResImage);
  EXPECT_EQ(back.target(), diffusion::PredictionTarget::kV);
  EXPECT_EQ(back.schedule().steps(), 50);

  auto entries = m.to_checkpoint();
  entries.erase("meta.resolution");
  EXPECT_EQ(kind_of([&] { ScoreModel::from_checkpoint(entries); }), ErrorKind::kConfig);
  entries = m.to_checkpoint();
  entries["in.b"] = Tensor({1});
  EXPECT_EQ(kind_of([&] { ScoreModel::from_checkpoint(entries); }), ErrorKind::kConfig);
}

TEST(ScoreNet, ConditioningChannelsMatterAfterTraining) {
  auto m = ScoreModel::initialize(lowres_spec(), 31);
  train::TrainConfig cfg;
  cfg.steps = 120;
  cfg.adam.lr = 1e-3;
  train::Trainer trainer(m, cfg);
  trainer.run([](NoiseStream& s) {
    train::Batch b;
    b.images = Tensor({4, 3, 8, 8});
    for (std::size_t n = 0; n < 4; ++n) {
      const double level = s.uniform();
      for (std::size_t q = 0; q < 3 * 64; ++q) b.images[n * 192 + q] = level;
    }
    b.cond.images = {b.images};
    return b;
  });
  ConditionInput cond, zero;
  cond.images = {Tensor({1, 3, 8, 8}, 0.8)};
  zero.images = {Tensor({1, 3, 8, 8})};
  const Tensor x = random_tensor({1, 3, 8, 8}, 32);
  EXPECT_GT(max_abs_diff(m.predict(x, 25, &cond), m.predict(x, 25, &zero)), 0.0);
}
