#include <benchmark/benchmark.h>

#include "urcdm/metrics.hpp"
#include "urcdm/rng.hpp"
#include "urcdm/tiler.hpp"

namespace {

using urcdm::Tensor;
namespace tiling = urcdm::tiling;

tiling::TileOutcome copy_known(const tiling::TileSpec& t, const tiling::KnownPixels& known) {
  Tensor px({3, t.size, t.size}, 0.5);
  const std::size_t hw = t.size * t.size;
  for (std::size_t q = 0; q < hw; ++q)
    if (known.mask[q] != 0.0)
      for (std::size_t c = 0; c < 3; ++c) px[c * hw + q] = known.values[c * hw + q];
  return {px, false};
}

// Scheduling and assembly overhead of a stage with an instant generator.
static void BM_RunStage(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto grid = tiling::plan_grid(28 * (n - 1) + 32, 32, 0.125, 1, 3);
  tiling::StageOptions opts;
  opts.workers = static_cast<std::size_t>(state.range(1));
  for (auto _ : state) benchmark::DoNotOptimize(tiling::run_stage(grid, copy_known, opts));
  state.counters["tiles/s"] = benchmark::Counter(static_cast<double>(n * n), benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_RunStage)->Args({7, 1})->Args({49, 1})->Args({49, 4})->Unit(benchmark::kMillisecond);

static void BM_ExtractFeatures(benchmark::State& state) {
  const urcdm::metrics::HandcraftedExtractor fx(0);
  urcdm::NoiseStream s(2);
  Tensor p({3, 32, 32});
  for (auto& v : p.values()) v = s.uniform();
  for (auto _ : state) benchmark::DoNotOptimize(fx.extract(p));
}
BENCHMARK(BM_ExtractFeatures);

static void BM_FrechetDistance(benchmark::State& state) {
  const auto n = static_cast<Eigen::Index>(state.range(0));
  urcdm::NoiseStream s(3);
  urcdm::metrics::Features a(n, 78), b(n, 78);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    a.data()[i] = s.normal();
    b.data()[i] = 0.1 + s.normal();
  }
  const auto ma = urcdm::metrics::FeatureMoments::fit(a), mb = urcdm::metrics::FeatureMoments::fit(b);
  for (auto _ : state) benchmark::DoNotOptimize(urcdm::metrics::frechet_distance(ma, mb));
}
BENCHMARK(BM_FrechetDistance)->Arg(2000);

static void BM_PrecisionRecall(benchmark::State& state) {
  const auto n = static_cast<Eigen::Index>(state.range(0));
  urcdm::NoiseStream s(4);
  urcdm::metrics::Features a(n, 78), b(n, 78);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    a.data()[i] = s.normal();
    b.data()[i] = s.normal();
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(urcdm::metrics::improved_precision(a, b, 3));
    benchmark::DoNotOptimize(urcdm::metrics::improved_recall(a, b, 3));
  }
}
BENCHMARK(BM_PrecisionRecall)->Arg(500)->Arg(2000)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
