#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <map>
#include <set>
#include <thread>

#include "test_support.hpp"
#include "urcdm/error.hpp"
#include "urcdm/image.hpp"
#include "urcdm/rng.hpp"
#include "urcdm/tiler.hpp"

using namespace urcdm;
using namespace urcdm::tiling;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::kInternal;
}

// Deterministic content from the tile seed, known pixels copied in.
TileOutcome mock_tile(const TileSpec& t, const KnownPixels& known) {
  const std::size_t P = t.size, hw = P * P;
  Tensor px({3, P, P});
  NoiseStream s(t.seed);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = s.uniform();
  for (std::size_t q = 0; q < hw; ++q) {
    if (known.mask[q] != 0.0) {
      for (std::size_t c = 0; c < 3; ++c) px[c * hw + q] = known.values[c * hw + q];
    }
  }
  return {px, false};
}

// Pixels of tile k also covered by a tile earlier in raster order.
std::set<std::pair<std::size_t, std::size_t>> earlier_pixels(const TileGrid& g, std::size_t k) {
  std::set<std::pair<std::size_t, std::size_t>> out;
  const auto& t = g.tiles[k];
  for (std::size_t e = 0; e < k; ++e) {
    const auto& o = g.tiles[e];
    for (std::size_t y = 0; y < g.patch; ++y)
      for (std::size_t x = 0; x < g.patch; ++x) {
        const std::size_t Y = t.y + y, X = t.x + x;
        if (Y >= o.y && Y < o.y + g.patch && X >= o.x && X < o.x + g.patch) out.insert({y, x});
      }
  }
  return out;
}

}  // namespace

TEST(PlanGrid, ReferenceGeometries) {
  const auto a = plan_grid(6400, 1024, 0.125);
  EXPECT_EQ(a.stride, 896u);
  EXPECT_EQ(a.n, 7u);
  EXPECT_EQ(plan_grid(41344, 1024, 0.125).n, 46u);
  EXPECT_EQ(plan_grid(200, 32, 0.125).n, 7u);
  EXPECT_EQ(plan_grid(1376, 32, 0.125).n, 49u);
}

TEST(PlanGrid, SingleTileWhenCanvasEqualsPatch) {
  for (double w : {0.125, 0.25, 0.5}) {
    const auto g = plan_grid(32, 32, w);
    EXPECT_EQ(g.n, 1u);
    EXPECT_TRUE(dependencies(g, 0).empty());
    EXPECT_EQ(wavefronts(g).size(), 1u);
  }
}

TEST(PlanGrid, RejectsInexactGeometry) {
  EXPECT_EQ(kind_of([] { plan_grid(201, 32, 0.125); }), ErrorKind::kGeometry);
  EXPECT_EQ(kind_of([] { plan_grid(200, 30, 0.125); }), ErrorKind::kGeometry);  // S = 26.25
  EXPECT_EQ(kind_of([] { plan_grid(16, 32, 0.125); }), ErrorKind::kGeometry);
}

TEST(PlanGrid, TilesCoverCanvasWithExpectedMultiplicity) {
  for (std::size_t n : {2, 4, 7}) {
    const std::size_t W = 28 * (n - 1) + 32;
    const auto g = plan_grid(W, 32, 0.125, 5, 2);
    ASSERT_EQ(g.n, n);
    EXPECT_EQ(g.stride * (g.n - 1) + g.patch, W);
    std::vector<int> count(W * W, 0);
    std::size_t area = 0;
    for (const auto& t : g.tiles) {
      ASSERT_LE(t.y + t.size, W);
      ASSERT_LE(t.x + t.size, W);
      area += t.size * t.size;
      for (std::size_t y = t.y; y < t.y + t.size; ++y)
        for (std::size_t x = t.x; x < t.x + t.size; ++x) ++count[y * W + x];
    }
    std::size_t total = 0;
    for (int c : count) {
      EXPECT_TRUE(c == 1 || c == 2 || c == 4) << c;
      total += c;
    }
    EXPECT_EQ(total, area);
  }
}

TEST(PlanGrid, SeedsAreStableHashes) {
  const auto g = plan_grid(116, 32, 0.125, 42, 3);
  for (const auto& t : g.tiles) EXPECT_EQ(t.seed, stable_hash(42, {3, t.i, t.j}));
  std::set<std::uint64_t> distinct;
  for (const auto& t : g.tiles) distinct.insert(t.seed);
  EXPECT_EQ(distinct.size(), g.tiles.size());
}

TEST(Dag, LeftAndTopOnlyAndAcyclic) {
  const auto g = plan_grid(144, 32, 0.125);
  EXPECT_TRUE(dependencies(g, 0).empty());
  for (std::size_t k = 0; k < g.tiles.size(); ++k) {
    const auto& t = g.tiles[k];
    std::set<std::size_t> want;
    if (t.i > 0) want.insert(g.index(t.i - 1, t.j));
    if (t.j > 0) want.insert(g.index(t.i, t.j - 1));
    const auto d = dependencies(g, k);
    EXPECT_EQ(std::set<std::size_t>(d.begin(), d.end()), want);
    for (auto dep : d) EXPECT_LT(dep, k);
    for (auto after : dependents(g, k)) {
      const auto back = dependencies(g, after);
      EXPECT_NE(std::find(back.begin(), back.end(), k), back.end());
    }
  }
}

TEST(Dag, WavefrontsOfSevenBySeven) {
  const auto g = plan_grid(200, 32, 0.125);
  const auto w = wavefronts(g);
  ASSERT_EQ(w.size(), 13u);
  std::size_t widest = 0;
  for (std::size_t L = 0; L < w.size(); ++L) {
    EXPECT_EQ(w[L].size(), wavefront_width(7, L));
    EXPECT_EQ(w[L].size(), std::min({L + 1, std::size_t{7}, 13 - L}));
    for (auto k : w[L]) EXPECT_EQ(g.tiles[k].i + g.tiles[k].j, L);
    widest = std::max(widest, w[L].size());
  }
  EXPECT_EQ(widest, 7u);
  EXPECT_EQ(w[6].size(), 7u);
}

TEST(KnownRegion, StripShapes) {
  const auto g = plan_grid(116, 32, 0.125);
  CanvasAssembly canvas(3, 116);
  std::vector<TileStatus> status(g.tiles.size(), TileStatus::kDone);
  const std::size_t o = 4;
  EXPECT_EQ(known_region(g, g.index(0, 0), canvas, status).count(), 0u);
  const auto left = known_region(g, g.index(0, 1), canvas, status);
  EXPECT_EQ(left.count(), 32 * o);
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x) EXPECT_EQ(left.mask.at(0, y, x), x < o ? 1.0 : 0.0);
  const auto corner = known_region(g, g.index(1, 1), canvas, status);
  EXPECT_EQ(corner.count(), 2 * 32 * o - o * o);
}

TEST(KnownRegion, EqualsEverythingWrittenEarlierInRasterOrder) {
  const auto g = plan_grid(152, 32, 0.25);  // S = 24, 6x6
  CanvasAssembly canvas(3, 152);
  const std::vector<TileStatus> status(g.tiles.size(), TileStatus::kDone);
  for (std::size_t k = 0; k < g.tiles.size(); ++k) {
    const auto known = known_region(g, k, canvas, status);
    const auto want = earlier_pixels(g, k);
    std::size_t got = 0;
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) {
        const bool m = known.mask.at(0, y, x) == 1.0;
        got += m;
        EXPECT_EQ(m, want.count({y, x}) == 1) << "tile " << k << " at " << y << "," << x;
      }
    EXPECT_EQ(got, want.size());
    EXPECT_TRUE(bit_equal(known.mask, raster_prefix_mask(g, k)));
  }
}

TEST(KnownRegion, RequiresFinishedDependencies) {
  const auto g = plan_grid(60, 32, 0.125);
  CanvasAssembly canvas(3, 60);
  std::vector<TileStatus> status(4, TileStatus::kDone);
  status[g.index(0, 0)] = TileStatus::kRunning;
  EXPECT_EQ(kind_of([&] { known_region(g, g.index(0, 1), canvas, status); }), ErrorKind::kScheduling);
  status[g.index(0, 0)] = TileStatus::kSkippedWhite;
  EXPECT_NO_THROW(known_region(g, g.index(0, 1), canvas, status));
}

TEST(KnownRegion, SkippedNeighbourPixelsAreKnown) {
  const auto g = plan_grid(60, 32, 0.125);
  CanvasAssembly canvas(3, 60);
  const Tensor white({3, 32, 32}, 1.0);
  canvas.write(g.at(0, 0), white);
  std::vector<TileStatus> status(4, TileStatus::kPending);
  status[g.index(0, 0)] = TileStatus::kSkippedWhite;
  const auto k = known_region(g, g.index(0, 1), canvas, status);
  EXPECT_EQ(k.count(), 32u * 4);
  for (std::size_t y = 0; y < 32; ++y) EXPECT_EQ(k.values.at(1, y, 0), 1.0);
}

TEST(WhiteRule, Examples) {
  EXPECT_TRUE(is_white_patch(Tensor({3, 10, 10}, 1.0)));
  EXPECT_FALSE(is_white_patch(Tensor({3, 10, 10}, 0.0)));
  Tensor mostly({3, 10, 10}, 1.0);
  for (std::size_t q = 0; q < 6; ++q)
    for (std::size_t c = 0; c < 3; ++c) mostly.at(c, 0, q) = 0.2;
  EXPECT_FALSE(is_white_patch(mostly));  // 94% white pixels
  mostly.at(0, 0, 5) = mostly.at(1, 0, 5) = mostly.at(2, 0, 5) = 1.0;
  mostly.at(0, 0, 4) = mostly.at(1, 0, 4) = mostly.at(2, 0, 4) = 1.0;
  EXPECT_TRUE(is_white_patch(mostly));   // 96% white, mean 0.968
  EXPECT_FALSE(is_white_patch(Tensor({3, 10, 10}, 0.88)));  // every pixel passes, mean 0.88
}

TEST(SubstituteWhite, ConstantWhiteStaysWhite) {
  const Tensor prev({3, 20, 20}, 1.0);
  const auto g = plan_grid(116, 32, 0.125);
  for (const auto& t : g.tiles) {
    const Tensor s = substitute_white(t, prev, 116);
    for (double v : s.values()) EXPECT_EQ(v, 1.0);
  }
}

TEST(SubstituteWhite, GradientPreservedAtSamplePoints) {
  // Canvas = 3x prev: canvas pixel 3k+1 sits on the centre of prev pixel k.
  const std::size_t W = 12;
  Tensor prev({3, W, W});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < W; ++y)
      for (std::size_t x = 0; x < W; ++x) prev.at(c, y, x) = 0.9 + 0.004 * y + 0.002 * x + 0.001 * c;
  TileSpec t{0, 0, 6, 3, 24, 0};
  const Tensor s = substitute_white(t, prev, 3 * W);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t r = 0; r < 24; ++r)
      for (std::size_t q = 0; q < 24; ++q) {
        const double Y = (t.y + r + 0.5) / 3.0 - 0.5, X = (t.x + q + 0.5) / 3.0 - 0.5;
        // Bilinear reproduces an affine field exactly away from the clamped border.
        EXPECT_NEAR(s.at(c, r, q), 0.9 + 0.004 * Y + 0.002 * X + 0.001 * c, 1e-12);
        if ((t.y + r) % 3 == 1 && (t.x + q) % 3 == 1) {
          EXPECT_EQ(s.at(c, r, q), prev.at(c, (t.y + r) / 3, (t.x + q) / 3));
        }
      }
}

TEST(Canvas, CountsDisagreeingWrites) {
  const auto g = plan_grid(60, 32, 0.125);
  CanvasAssembly canvas(3, 60);
  canvas.write(g.at(0, 0), Tensor({3, 32, 32}, 0.5));
  canvas.write(g.at(0, 1), Tensor({3, 32, 32}, 0.5));
  EXPECT_EQ(canvas.seam_mismatches(), 0u);
  EXPECT_EQ(canvas.writers(0, 30), 2);
  canvas.write(g.at(1, 0), Tensor({3, 32, 32}, 0.25));
  EXPECT_EQ(canvas.seam_mismatches(), 3u * 32 * 4);  // counted per channel value
  EXPECT_FALSE(canvas.complete());
  EXPECT_EQ(kind_of([&] { canvas.verify(); }), ErrorKind::kInternal);
}

TEST(RunStage, WorkerCountDoesNotChangeTheCanvas) {
  const auto g = plan_grid(116, 32, 0.125, 17, 3);
  StageOptions one, four;
  four.workers = 4;
  const auto a = run_stage(g, mock_tile, one);
  const auto b = run_stage(g, mock_tile, four);
  EXPECT_TRUE(bit_equal(a.canvas.image(), b.canvas.image()));
  EXPECT_EQ(a.canvas.seam_mismatches(), 0u);
  EXPECT_TRUE(a.canvas.complete());
  std::map<std::pair<std::size_t, std::size_t>, std::uint64_t> sa, sb;
  for (const auto& e : a.events) sa[{e.i, e.j}] = e.seed;
  for (const auto& e : b.events) sb[{e.i, e.j}] = e.seed;
  EXPECT_EQ(sa, sb);
  EXPECT_LE(b.max_concurrent, 4u);
  EXPECT_EQ(a.max_concurrent, 1u);
}

TEST(RunStage, EventLogRespectsDependencies) {
  const auto g = plan_grid(152, 32, 0.25, 3, 2);
  StageOptions opts;
  opts.workers = 3;
  auto slow = [](const TileSpec& t, const KnownPixels& k) {
    std::this_thread::sleep_for(std::chrono::microseconds(200 * ((t.i * 7 + t.j * 3) % 5)));
    return mock_tile(t, k);
  };
  const auto res = run_stage(g, slow, opts);
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> started, finished;
  std::size_t last = 0;
  for (const auto& line : res.events) {
    const auto e = parse_event(format_event(line));
    EXPECT_EQ(e.sequence, line.sequence);
    EXPECT_EQ(e.status, line.status);
    EXPECT_EQ(e.seed, line.seed);
    if (line.sequence > 0) EXPECT_GT(line.sequence, last);
    last = line.sequence;
    if (line.status == TileStatus::kRunning) started[{line.i, line.j}] = line.sequence;
    if (line.status == TileStatus::kDone || line.status == TileStatus::kSkippedWhite) finished[{line.i, line.j}] = line.sequence;
  }
  ASSERT_EQ(started.size(), g.tiles.size());
  ASSERT_EQ(finished.size(), g.tiles.size());
  for (const auto& t : g.tiles) {
    for (auto d : dependencies(g, g.index(t.i, t.j))) {
      const auto& dt = g.tiles[d];
      EXPECT_LT(finished.at({dt.i, dt.j}), started.at({t.i, t.j}));
    }
  }
}

TEST(RunStage, FailingTileAbortsWithPartialCanvas) {
  const auto g = plan_grid(116, 32, 0.125);
  std::atomic<bool> saw_partial{false};
  StageOptions opts;
  opts.on_failure = [&](const CanvasAssembly& c) { saw_partial = c.written(0, 0) && !c.complete(); };
  auto gen = [](const TileSpec& t, const KnownPixels& k) {
    if (t.i == 1 && t.j == 2) fail(ErrorKind::kNumeric, "boom");
    return mock_tile(t, k);
  };
  try {
    run_stage(g, gen, opts);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kTile);
    EXPECT_NE(std::string(e.what()).find("(1,2)"), std::string::npos);
  }
  EXPECT_TRUE(saw_partial);
}

TEST(StageEvents, ParseRejectsGarbage) {
  EXPECT_THROW(parse_event("1 2 3"), Error);
  EXPECT_THROW(parse_event("0 0.1 0 0 flying 5"), Error);
}
