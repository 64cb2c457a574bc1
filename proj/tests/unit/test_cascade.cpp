#include <gtest/gtest.h>

#include "checks.hpp"
#include "urcdm/cascade.hpp"
#include "urcdm/error.hpp"
#include "urcdm/image.hpp"

using namespace urcdm;
using namespace urcdm::cascade;
using urcdm::testing::OracleCdm;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::kInternal;
}

Tensor grey_context(double v = 0.5) { return Tensor({3, 32, 32}, v); }

}  // namespace

TEST(Cdm, PointMassOraclesComposeToAConstant) {
  const OracleCdm oracle(0.2, 1e-4);
  NoiseStream s(3);
  const Tensor out = run_cdm(oracle.cdm(), grey_context(), nullptr, s);
  ASSERT_EQ(out.shape(), (Shape{3, 32, 32}));
  for (double v : out.values()) EXPECT_NEAR(v, 0.6, 1e-2);
}

TEST(Cdm, SameSeedSameTile) {
  const OracleCdm oracle;
  NoiseStream a(5), b(5), c(6);
  const Tensor x = run_cdm(oracle.cdm(), grey_context(), nullptr, a);
  const Tensor y = run_cdm(oracle.cdm(), grey_context(), nullptr, b);
  const Tensor z = run_cdm(oracle.cdm(), grey_context(), nullptr, c);
  EXPECT_TRUE(bit_equal(x, y));
  EXPECT_GT(max_abs_diff(x, z), 0.05);
}

TEST(Cdm, ContextPresenceMustMatchTheCascade) {
  const OracleCdm oracle;
  NoiseStream s(1);
  EXPECT_EQ(kind_of([&] { run_cdm(oracle.cdm(), std::nullopt, nullptr, s); }), ErrorKind::kConfig);
  EXPECT_EQ(kind_of([&] { oracle.cdm().validate(false); }), ErrorKind::kConfig);
  EXPECT_NO_THROW(oracle.cdm().validate(true));
  EXPECT_EQ(kind_of([&] { run_cdm(oracle.cdm(), Tensor({1, 32, 32}), nullptr, s); }), ErrorKind::kInvalidShape);
}

TEST(Cdm, KnownPixelsSurviveTheChain) {
  const OracleCdm oracle;
  TileConstraint known{Tensor({1, 32, 32}), Tensor({3, 32, 32})};
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      known.mask.at(0, y, x) = 1.0;
      for (std::size_t c = 0; c < 3; ++c) known.values.at(c, y, x) = 0.1 + 0.02 * c + 0.01 * x;
    }
  NoiseStream s(9);
  const Tensor out = run_cdm(oracle.cdm(), grey_context(), &known, s);
  double worst = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 8; ++x) worst = std::max(worst, std::abs(out.at(c, y, x) - known.values.at(c, y, x)));
  EXPECT_LT(worst, 1e-12);
}

TEST(Constraint, DownsampleKeepsOnlyFullyKnownBlocks) {
  TileConstraint c{Tensor({1, 32, 32}), Tensor({3, 32, 32})};
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 6; ++x) {
      c.mask.at(0, y, x) = 1.0;
      for (std::size_t ch = 0; ch < 3; ++ch) c.values.at(ch, y, x) = 0.5;
    }
  const auto d8 = downsample_constraint(c, 8);  // 4x4 blocks: one full column
  const auto d16 = downsample_constraint(c, 16);  // 2x2 blocks: three full columns
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      EXPECT_EQ(d8.mask.at(0, y, x), x < 1 ? 1.0 : 0.0);
      EXPECT_EQ(d8.values.at(0, y, x), x < 1 ? 0.5 : 0.0);
    }
  for (std::size_t x = 0; x < 16; ++x) EXPECT_EQ(d16.mask.at(0, 5, x), x < 3 ? 1.0 : 0.0);
  EXPECT_TRUE(bit_equal(downsample_constraint(c, 32).mask, c.mask));
  EXPECT_EQ(kind_of([&] { downsample_constraint(c, 12); }), ErrorKind::kGeometry);
}

TEST(ContextCrop, CornerTilePadsWithWhite) {
  const Tensor prev({3, 32, 32}, 0.0);
  const tiling::TileSpec t{0, 0, 0, 0, 32, 0};
  const Tensor ctx = center_context_crop(prev, t, 64, 32, true);
  // Centre at 8 in prev pixels: 8 rows and 8 columns fall outside.
  std::size_t white = 0;
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) {
      const bool outside = y < 8 || x < 8;
      EXPECT_EQ(ctx.at(1, y, x), outside ? 1.0 : 0.0);
      white += ctx.at(0, y, x) == 1.0;
    }
  EXPECT_DOUBLE_EQ(white / 1024.0, 1.0 - 24.0 * 24.0 / 1024.0);
}

TEST(ContextCrop, InteriorTileIsCentredOnItsFootprint) {
  Tensor prev({3, 64, 64});
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x)
      for (std::size_t c = 0; c < 3; ++c) prev.at(c, y, x) = (y * 64 + x) / 4096.0;
  const tiling::TileSpec t{2, 2, 48, 48, 32, 0};  // footprint [24,40) at scale 1/2
  const Tensor ctx = center_context_crop(prev, t, 128, 32, true);
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) EXPECT_EQ(ctx.at(2, y, x), prev.at(2, 16 + y, 16 + x));
}

TEST(ContextCrop, StrictModeRejectsFractionalFootprints) {
  const Tensor prev({3, 32, 32}, 0.5);
  const auto g = tiling::plan_grid(200, 32, 0.125);
  EXPECT_EQ(kind_of([&] { center_context_crop(prev, g.at(1, 1), 200, 32, true); }), ErrorKind::kGeometry);
  EXPECT_NO_THROW(center_context_crop(prev, g.at(1, 1), 200, 32, false));
}

TEST(Plan, DefaultGeometry) {
  const Geometry g;
  const auto stages = plan(g);
  ASSERT_EQ(stages.size(), 3u);
  EXPECT_EQ(stages[0].grid, 1u);
  EXPECT_EQ(stages[1].grid, 7u);
  EXPECT_EQ(stages[1].wavefronts, 13u);
  EXPECT_EQ(stages[1].max_wavefront, 7u);
  EXPECT_EQ(stages[2].grid, 49u);
  EXPECT_EQ(stages[2].wavefronts, 97u);
  EXPECT_EQ(stages[2].max_wavefront, 49u);
  EXPECT_FALSE(stages[1].integer_mapping);
  EXPECT_NEAR(stages[1].footprint, 32.0 * 32 / 200, 1e-12);
  EXPECT_FALSE(format_plan(g, stages).empty());
}

TEST(Plan, GeometryValidation) {
  Geometry g;
  g.sizes = {32, 200, 150};
  EXPECT_EQ(kind_of([&] { g.validate(); }), ErrorKind::kGeometry);
  g.sizes = {32, 201, 1376};
  EXPECT_EQ(kind_of([&] { g.validate(); }), ErrorKind::kGeometry);
  g.sizes = {16, 200, 1376};
  EXPECT_EQ(kind_of([&] { g.validate(); }), ErrorKind::kGeometry);
  g.sizes = {32, 200, 1376};
  g.strict_mapping = true;
  EXPECT_EQ(kind_of([&] { g.validate(); }), ErrorKind::kGeometry);
  g.sizes = {32, 60, 116};
  g.strict_mapping = false;
  EXPECT_NO_THROW(g.validate());
}

TEST(GenerateTile, FullyConstrainedTileReturnsItsConstraint) {
  const auto r = urcdm::testing::seam_exactness(1);
  EXPECT_TRUE(r.complete);
  EXPECT_EQ(r.mismatched, 0u);
  EXPECT_EQ(r.assembly_mismatches, 0u);
  EXPECT_GT(r.multiply_covered, 0u);
  EXPECT_EQ(r.constrained_max_diff, 0.0);
}

TEST(GenerateWsi, WorkerCountDoesNotChangeThePyramid) {
  const OracleCdm mid(0.1, 0.4, 50), high(0.1, 0.4, 50);
  // The low stage runs without context.
  const GaussianOracle b0(0.1, 0.4, 8, diffusion::NoiseSchedule(50), 3, 0);
  const GaussianOracle b1(0.1, 0.4, 16, diffusion::NoiseSchedule(50), 3, 1);
  const GaussianOracle b2(0.1, 0.4, 32, diffusion::NoiseSchedule(50), 3, 1);
  const std::array<CDM, 3> cdms{CDM{&b0, &b1, &b2}, mid.cdm(), high.cdm()};
  Geometry g;
  g.sizes = {32, 60, 116};
  GenerateOptions one, four;
  one.seed = four.seed = 77;
  four.workers = 4;
  const auto a = generate_wsi(cdms, g, one);
  const auto b = generate_wsi(cdms, g, four);
  ASSERT_EQ(a.pyramid.levels.size(), 3u);
  for (std::size_t l = 0; l < 3; ++l) {
    EXPECT_EQ(a.pyramid.levels[l].dim(1), g.sizes[l]);
    EXPECT_TRUE(bit_equal(a.pyramid.levels[l], b.pyramid.levels[l])) << l;
  }
  EXPECT_EQ(a.events[2].size(), b.events[2].size());
}
