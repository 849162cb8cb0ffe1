// Micro benchmarks for the hot paths of a toy adaptation run: the model
// forward/backward pass, one TriDA step-2 objective, the epoch diagnostics
// and one synthesis run.

#include <benchmark/benchmark.h>

#include <random>

#include "trida/baselines.hpp"
#include "trida/diagnostics.hpp"
#include "trida/model.hpp"
#include "trida/objectives.hpp"
#include "trida/synthesis.hpp"

namespace {

using namespace trida;

Tensor uniform(Shape shape, std::mt19937_64& rng) {
  Tensor t(std::move(shape), 0.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t k = 0; k < t.size(); ++k) t[k] = u(rng);
  return t;
}

std::vector<int> labels(int n, int classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, classes - 1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (int& y : out) y = d(rng);
  return out;
}

ModelBundle toy_model() {
  ModelConfig c;
  c.target_classes = 4;
  c.pretrain_classes = 8;
  return ModelBundle(c, 1);
}

void BM_ForwardBackward(benchmark::State& state) {
  ModelBundle model = toy_model();
  std::mt19937_64 rng(1);
  const int n = static_cast<int>(state.range(0));
  const Tensor x = uniform({n, 3, 32, 32}, rng);
  const auto y = labels(n, 4, rng);
  for (auto _ : state) {
    Var loss = loss_source(model, x, y);
    loss.backward();
    benchmark::DoNotOptimize(loss.item());
  }
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_ForwardBackward)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_TridaStep2Objective(benchmark::State& state) {
  ModelBundle model = toy_model();
  std::mt19937_64 rng(2);
  const int n = 32;
  const Tensor x_t = uniform({n, 3, 32, 32}, rng), x_p = uniform({n, 3, 32, 32}, rng);
  const auto y_t = labels(n, 4, rng), y_p = labels(n, 8, rng);
  auto base = make_objective(ObjectiveKind::sfuda_shot_like, model.config().feature_dim(), 2);
  TriDAConfig cfg;
  const bool trida = state.range(0) != 0;
  if (!trida) cfg = TriDAConfig::disabled();
  for (auto _ : state) {
    const MixedBatch mixed = mix_batch(x_p, y_p, x_t, y_t, sample_lambda(cfg.alpha, rng));
    auto value = objective_sfuda_step2(model, x_t, y_t, trida ? &mixed : nullptr, *base, cfg);
    value.total.backward();
    benchmark::DoNotOptimize(value.parts.total);
  }
}
BENCHMARK(BM_TridaStep2Objective)->ArgName("trida")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_SlicedWasserstein(benchmark::State& state) {
  std::mt19937_64 rng(3);
  const int n = static_cast<int>(state.range(0));
  const Tensor a = uniform({n, 256}, rng), b = uniform({n, 256}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(sliced_wasserstein(a, b, 128, 0));
}
BENCHMARK(BM_SlicedWasserstein)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);

void BM_Silhouette(benchmark::State& state) {
  std::mt19937_64 rng(4);
  const int n = static_cast<int>(state.range(0));
  const Tensor f = uniform({n, 256}, rng);
  const auto y = labels(n, 8, rng);
  for (auto _ : state) benchmark::DoNotOptimize(silhouette_score(f, y));
}
BENCHMARK(BM_Silhouette)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);

void BM_Synthesis(benchmark::State& state) {
  const ModelBundle model = toy_model();
  SynthesisConfig cfg;
  cfg.steps = 20;
  cfg.images_per_class = 4;
  for (auto _ : state) benchmark::DoNotOptimize(synthesize_class_images(model, 0, cfg).loss_history.back());
}
BENCHMARK(BM_Synthesis)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
