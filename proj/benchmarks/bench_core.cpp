#include <benchmark/benchmark.h>

#include "bayeslayers/bayes.hpp"
#include "bayeslayers/chi_square.hpp"
#include "bayeslayers/metrics.hpp"
#include "bayeslayers/network.hpp"
#include "bayeslayers/ops.hpp"
#include "bayeslayers/rng.hpp"

using namespace bayeslayers;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  for (double& v : t.values()) v = rng.normal();
  return t;
}

void BM_Conv2d(benchmark::State& state) {
  const auto channels = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor input = random_tensor({channels, 28, 28}, rng);
  const Tensor kernels = random_tensor({16, channels, 3, 3}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(input, kernels, 1, 1));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(16 * channels * 9 * 28 * 28));
}
BENCHMARK(BM_Conv2d)->Arg(1)->Arg(8);

void BM_ForwardMicroCnn(benchmark::State& state) {
  const Model model = make_preset(Architecture::micro_cnn, {1, 28, 28}, 3, true, 7);
  Rng rng(2);
  const Tensor input = random_tensor({1, 28, 28}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(forward(model, input));
}
BENCHMARK(BM_ForwardMicroCnn);

// Arguments: layer dimension, quantile in percent.
void BM_SampleLayerWeights(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const double q = static_cast<double>(state.range(1)) / 100.0;
  GaussianLayerPosterior post;
  post.layer_name = "w";
  post.mean = Tensor({m}, 0.1);
  post.sigma = 0.02;
  post.dimension = m;
  post.epsilon_quantile = q;
  post.radius2_threshold = q == 0.0 ? 0.0 : chi_square_quantile(static_cast<unsigned>(m), q);
  Rng rng(3);
  for (auto _ : state) benchmark::DoNotOptimize(sample_layer_weights(post, rng, 100000));
}
BENCHMARK(BM_SampleLayerWeights)->Args({1000, 0})->Args({1000, 5})->Args({1000, 90})->Args({18432, 5});

void BM_Auroc(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(4);
  ScoreSet s;
  for (std::size_t i = 0; i < n; ++i) {
    s.id_scores.push_back(rng.normal() + 1.0);
    s.ood_scores.push_back(rng.normal());
  }
  for (auto _ : state) benchmark::DoNotOptimize(auroc(s));
  state.SetComplexityN(static_cast<std::int64_t>(n));
}
BENCHMARK(BM_Auroc)->RangeMultiplier(8)->Range(64, 32768)->Complexity(benchmark::oNLogN);

}  // namespace
BENCHMARK_MAIN();
