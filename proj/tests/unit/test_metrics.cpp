#include <gtest/gtest.h>

#include <random>

#include "checks.hpp"
#include "urcdm/error.hpp"
#include "urcdm/image.hpp"
#include "urcdm/metrics.hpp"

using namespace urcdm;
using namespace urcdm::metrics;

namespace {

Features gaussian_rows(std::size_t n, const Eigen::VectorXd& mean, const Eigen::VectorXd& sd, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Features f(static_cast<Eigen::Index>(n), mean.size());
  for (Eigen::Index i = 0; i < f.rows(); ++i)
    for (Eigen::Index j = 0; j < f.cols(); ++j) f(i, j) = mean[j] + sd[j] * g(rng);
  return f;
}

Features column(std::initializer_list<double> v) {
  Features f(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) f(i++, 0) = x;
  return f;
}

std::vector<synth::Pyramid> corpus(std::uint64_t first, std::size_t n) {
  synth::GeneratorConfig g;
  g.sizes = {32, 64, 160};
  std::vector<synth::Pyramid> out;
  for (std::size_t k = 0; k < n; ++k) out.push_back(synth::gen_pyramid(first + k, g));
  return out;
}

std::vector<synth::Pyramid> darken(std::vector<synth::Pyramid> set, double delta) {
  for (auto& p : set)
    for (auto& l : p.levels)
      for (double& v : l.values()) v = std::max(0.0, v - delta);
  return set;
}

}  // namespace

TEST(Frechet, ClosedForms) {
  const auto r = urcdm::testing::metric_closed_forms();
  EXPECT_LT(r.shift_err, 1e-8);
  EXPECT_LT(r.anisotropic_err, 1e-8);
  EXPECT_LT(std::abs(r.self_distance), 1e-8);
}

TEST(Frechet, SampleEstimateConvergesToGaussianValue) {
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(8), m2(8), s1(8), s2(8);
  m2 << 0.5, -0.3, 0.2, 0.0, 0.4, -0.1, 0.3, 0.6;
  s1 << 1.0, 0.5, 2.0, 1.5, 0.8, 1.2, 0.6, 1.0;
  s2 << 1.3, 0.7, 1.5, 1.5, 1.1, 0.9, 0.8, 1.4;
  double want = (m1 - m2).squaredNorm();
  for (int j = 0; j < 8; ++j) want += (s1[j] - s2[j]) * (s1[j] - s2[j]);  // diagonal case
  const auto a = FeatureMoments::fit(gaussian_rows(5000, m1, s1, 1));
  const auto b = FeatureMoments::fit(gaussian_rows(5000, m2, s2, 2));
  const double got = frechet_distance(a, b);
  EXPECT_NEAR(got, want, 0.15 * want);
  EXPECT_NEAR(frechet_distance(b, a), got, 1e-8 * got);
}

TEST(Frechet, MismatchedDimensionsThrow) {
  const auto a = FeatureMoments::fit(gaussian_rows(20, Eigen::VectorXd::Zero(3), Eigen::VectorXd::Ones(3), 1));
  const auto b = FeatureMoments::fit(gaussian_rows(20, Eigen::VectorXd::Zero(4), Eigen::VectorXd::Ones(4), 1));
  EXPECT_THROW(frechet_distance(a, b), Error);
  EXPECT_THROW(FeatureMoments::fit(Features(1, 3)), Error);
}

TEST(PrecisionRecall, IdenticalAndSeparatedSets) {
  const auto r = urcdm::testing::metric_closed_forms();
  EXPECT_EQ(r.ip_identical, 1.0);
  EXPECT_EQ(r.ir_identical, 1.0);
  EXPECT_EQ(r.ip_separated, 0.0);
  EXPECT_EQ(r.ir_separated, 0.0);
  EXPECT_EQ(r.oracle_disagreement, 0u);
}

TEST(PrecisionRecall, OneDimensionalHandExample) {
  const Features real = column({0, 1, 2, 3});
  const Features gen = column({0.5, 2.5, 7});
  // k=1: every real radius is 1, so 7 is the only uncovered generated point.
  EXPECT_EQ(knn_radii(real, 1), Eigen::VectorXd::Ones(4));
  EXPECT_DOUBLE_EQ(improved_precision(real, gen, 1), 2.0 / 3.0);
  // Generated radii 2, 2, 4.5 cover every real point.
  EXPECT_DOUBLE_EQ(improved_recall(real, gen, 1), 1.0);
  EXPECT_THROW(knn_radii(real, 4), Error);
}

TEST(PrecisionRecall, TightGeneratedClusterRecallsLittle) {
  Features real = gaussian_rows(200, Eigen::VectorXd::Zero(2), Eigen::VectorXd::Ones(2), 11);
  Features gen = gaussian_rows(4, Eigen::VectorXd::Zero(2), Eigen::VectorXd::Constant(2, 1e-3), 12);
  EXPECT_LT(improved_recall(real, gen, 3), 0.05);
  EXPECT_THROW(improved_recall(real, gen.topRows(3), 3), Error);
}

TEST(Extractor, ConstantPatch) {
  const HandcraftedExtractor fx(3);
  const auto f = fx.extract(Tensor({3, 32, 32}, 0.3));
  ASSERT_EQ(f.size(), 78);
  for (int c = 0; c < 3; ++c)
    for (int b = 0; b < 8; ++b) EXPECT_NEAR(f[c * 8 + b], b == 2 ? 1.0 : 0.0, 1e-12);
  for (int q = 72; q < 78; ++q) EXPECT_NEAR(f[q], 0.0, 1e-12);
}

TEST(Extractor, FlipLeavesHistogramAndHaarEnergy) {
  const HandcraftedExtractor fx(3);
  Tensor p = urcdm::testing::random_tensor({3, 32, 32}, 8, 0.0, 1.0);
  const auto a = fx.extract(p);
  const auto b = fx.extract(image::dihedral(p, 4));
  for (int q = 0; q < 24; ++q) EXPECT_NEAR(a[q], b[q], 1e-12);
  for (int q = 72; q < 78; ++q) EXPECT_NEAR(a[q], b[q], 1e-12);
  EXPECT_GT((a.segment(24, 48) - b.segment(24, 48)).norm(), 0.0);
}

TEST(Extractor, SeedSelectsFilters) {
  const Tensor p = urcdm::testing::random_tensor({3, 40, 40}, 9, 0.0, 1.0);
  EXPECT_EQ(HandcraftedExtractor(1).extract(p), HandcraftedExtractor(1).extract(p));
  EXPECT_NE(HandcraftedExtractor(1).extract(p), HandcraftedExtractor(2).extract(p));
  EXPECT_NE(HandcraftedExtractor(1).id(), HandcraftedExtractor(2).id());
}

TEST(Pfid, IdenticalSetsScoreZeroAndShiftsAreMonotone) {
  const auto real = corpus(1, 4);
  const HandcraftedExtractor fx(0);
  PfidConfig cfg;
  cfg.crops = 300;
  cfg.seed = 4;
  EXPECT_LT(std::abs(pfid(real, real, cfg, fx)), 1e-6);
  const double small = pfid(real, darken(real, 0.05), cfg, fx);
  const double large = pfid(real, darken(real, 0.10), cfg, fx);
  EXPECT_GT(small, 0.0);
  EXPECT_LT(small, large);
}

TEST(Pfid, CropLargerThanLevelIsRejected) {
  synth::GeneratorConfig g;
  g.sizes = {32, 60, 116};
  const std::vector<synth::Pyramid> set{synth::gen_pyramid(1, g)};
  PfidConfig cfg;
  cfg.crops = 10;
  try {
    pfid(set, set, cfg, HandcraftedExtractor(0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvalidArgument);
  }
}

TEST(Patches, TakeCropCoversTheFreeRange) {
  Tensor img({3, 64, 64});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i % 4096) / 4096.0;
  CropSpec s;
  s.scale = 0.5;  // side 64 from base 32: the whole image
  EXPECT_TRUE(bit_equal(take_crop(img, s, 32), img));
  s.scale = 1.0;
  s.u = 1.0;
  s.v = 1.0;
  const Tensor c = take_crop(img, s, 32);
  EXPECT_EQ(c.at(0, 0, 0), img.at(0, 32, 32));
  const auto specs = draw_crop_specs(100, {1.0, 0.5}, 3, 2, 7);
  const auto again = draw_crop_specs(100, {1.0, 0.5}, 3, 2, 7);
  for (std::size_t k = 0; k < specs.size(); ++k) {
    EXPECT_EQ(specs[k].u, again[k].u);
    EXPECT_EQ(specs[k].scale, again[k].scale);
    EXPECT_EQ(specs[k].real, again[k].real);
  }
  ASSERT_EQ(specs.size(), 100u);
  for (const auto& sp : specs) {
    EXPECT_LT(sp.real, 3u);
    EXPECT_LT(sp.gen, 2u);
    EXPECT_TRUE(sp.u >= 0.0 && sp.u <= 1.0);
  }
}

TEST(Evaluate, IdenticalSetsAreAPerfectMatch) {
  const auto real = corpus(3, 3);
  EvalConfig cfg;
  cfg.patches_per_level = 120;
  cfg.pfid.crops = 120;
  cfg.seed = 5;
  const auto r = evaluate(real, real, cfg, HandcraftedExtractor(0));
  EXPECT_LT(std::abs(r.get("pfid").value), 1e-6);
  for (const auto& e : r.entries) {
    if (e.name.rfind("ip", 0) == 0 || e.name.rfind("ir", 0) == 0) {
      EXPECT_EQ(e.value, 1.0) << e.name;
    }
    if (e.name.rfind("fid", 0) == 0) {
      EXPECT_LT(std::abs(e.value), 1e-6) << e.name;
    }
  }
  EXPECT_THROW(r.get("nope"), Error);
}

TEST(Report, JsonRoundTripAndSchemaErrors) {
  Report r;
  r.seed = 9;
  r.extractor = "handcrafted-v1-seed0";
  r.entries = {{"fid_mag0", 1.25, 10, 11}, {"pfid", 0.5, 20, 20}};
  const Report back = parse_report_json(format_report_json(r));
  EXPECT_EQ(back.seed, 9u);
  EXPECT_EQ(back.extractor, r.extractor);
  ASSERT_EQ(back.entries.size(), 2u);
  EXPECT_EQ(back.get("fid_mag0").value, 1.25);
  EXPECT_EQ(back.get("pfid").real_count, 20u);
  EXPECT_FALSE(format_report_text(r).empty());
  try {
    parse_report_json(R"({"seed": "x"})");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConfig);
  }
}
