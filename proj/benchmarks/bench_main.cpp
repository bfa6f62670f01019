#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "rgrid/attack.hpp"
#include "rgrid/model.hpp"
#include "rgrid/ops.hpp"

using namespace rgrid;

namespace {

Tensor uniform(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor::from_data(std::move(shape), std::move(v));
}

StructureSpec desk_spec(const char* id) {
  StructureSpec spec = structure_from_preset(id, Family::ViT);
  spec.embed_dim = 32;
  spec.heads = 2;
  spec.mlp_ratio = 2.0;
  spec.stage_layers = spec.stacking == Stacking::OriViT ? std::vector<std::size_t>{2} : std::vector<std::size_t>{1, 1};
  return spec;
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = uniform({n, n}, 1), b = uniform({n, n}, 2);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

static void BM_Conv2d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const Tensor x = uniform({8, c, 16, 16}, 3), w = uniform({c, c, 3, 3}, 4), b = uniform({c}, 5);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w, b, {1, 1}));
}
BENCHMARK(BM_Conv2d)->Arg(16)->Arg(32);

static void BM_ConvBackward(benchmark::State& state) {
  const Tensor x = uniform({8, 16, 16, 16}, 3);
  const Tensor w = uniform({16, 16, 3, 3}, 4);
  const Tensor b = uniform({16}, 5);
  Tensor wl = Tensor::from_data(w.shape(), std::vector<double>(w.data().begin(), w.data().end()), true);
  const Tensor wrt[] = {wl};
  for (auto _ : state) benchmark::DoNotOptimize(gradients(ops::sum(ops::conv2d(x, wl, b, {1, 1})), wrt));
}
BENCHMARK(BM_ConvBackward);

static void BM_ModelForward(benchmark::State& state, const char* id) {
  const Model model(desk_spec(id), 1);
  const Tensor x = uniform({8, 3, 32, 32}, 6, 0.0, 1.0);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(x));
}
BENCHMARK_CAPTURE(BM_ModelForward, b, "(b)");
BENCHMARK_CAPTURE(BM_ModelForward, n, "(n)");

static void BM_ModelBackward(benchmark::State& state, const char* id) {
  Model model(desk_spec(id), 1);
  const Tensor x = uniform({8, 3, 32, 32}, 6, 0.0, 1.0);
  const std::vector<int> y(8, 1);
  std::vector<Tensor> params;
  for (const auto& p : model.parameters()) params.push_back(p.value);
  for (auto _ : state) {
    benchmark::DoNotOptimize(gradients(ops::softmax_cross_entropy(model.forward(x), y), params));
  }
}
BENCHMARK_CAPTURE(BM_ModelBackward, b, "(b)");
BENCHMARK_CAPTURE(BM_ModelBackward, n, "(n)");

static void BM_PgdStep(benchmark::State& state) {
  const Model model(desk_spec("(b)"), 1);
  const LogitFn f = logits_of(model);
  const Tensor x = uniform({8, 3, 32, 32}, 7, 0.0, 1.0);
  const std::vector<int> y(8, 0);
  AttackSpec spec;
  spec.steps = 1;
  for (auto _ : state) {
    std::mt19937_64 rng(0);
    benchmark::DoNotOptimize(pgd(f, x, y, spec, rng));
  }
}
BENCHMARK(BM_PgdStep);
BENCHMARK_MAIN();
