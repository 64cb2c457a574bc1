#include <benchmark/benchmark.h>

#include "urcdm/layers.hpp"
#include "urcdm/rng.hpp"
#include "urcdm/scorenet.hpp"

namespace {

using urcdm::Tensor;

static void BM_Conv3x3(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto r = static_cast<std::size_t>(state.range(1));
  urcdm::NoiseStream s(1);
  Tensor x = s.normal_like({1, c, r, r});
  Tensor k = s.normal_like({c, c, 3, 3});
  Tensor b({c});
  for (auto _ : state) benchmark::DoNotOptimize(urcdm::nn::conv2d(x, k, b, 1));
  state.counters["MAC/s"] = benchmark::Counter(static_cast<double>(c * c * 9 * r * r),
                                               benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Conv3x3)->Args({8, 32})->Args({16, 16})->Args({16, 32})->Args({32, 8});

static void BM_Conv3x3Backward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto r = static_cast<std::size_t>(state.range(1));
  urcdm::NoiseStream s(2);
  Tensor x = s.normal_like({8, c, r, r});
  Tensor k = s.normal_like({c, c, 3, 3});
  Tensor dy = s.normal_like({8, c, r, r});
  for (auto _ : state) benchmark::DoNotOptimize(urcdm::nn::conv2d_backward(x, k, dy, 1));
}
BENCHMARK(BM_Conv3x3Backward)->Args({8, 32})->Args({16, 16});

static void BM_ScoreNetPredict(benchmark::State& state) {
  urcdm::net::ScoreNetConfig cfg;
  cfg.resolution = static_cast<std::size_t>(state.range(0));
  cfg.base_width = static_cast<std::size_t>(state.range(1));
  cfg.conditioning = urcdm::net::ConditioningMode::kLowResImageInpaintMask;
  cfg.condition_images = 2;
  urcdm::net::ScoreNet net(cfg);
  auto params = net.init_params(3);
  urcdm::NoiseStream s(4);
  const std::size_t r = cfg.resolution;
  Tensor x = s.normal_like({1, 3, r, r});
  urcdm::ConditionInput cond;
  cond.images = {Tensor({1, 3, r, r}, 0.5), Tensor({1, 3, r, r}, 0.5)};
  cond.mask = Tensor({1, 1, r, r});
  cond.known = Tensor({1, 3, r, r});
  Tensor emb({1, 32});
  for (auto _ : state) benchmark::DoNotOptimize(net.predict(params, x, emb, &cond));
}
BENCHMARK(BM_ScoreNetPredict)->Args({8, 8})->Args({16, 8})->Args({32, 8})->Args({32, 16});

}  // namespace

BENCHMARK_MAIN();
