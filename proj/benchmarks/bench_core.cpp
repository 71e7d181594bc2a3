#include <benchmark/benchmark.h>

#include "bcnn/ops.hpp"
#include "bcnn/scene.hpp"
#include "bcnn/uncertainty.hpp"
#include "bcnn/variational.hpp"

using namespace bcnn;

static void BM_Conv2dForward(benchmark::State& state) {
  RngStream rng(1);
  Tensor in = Tensor::uniform({32, 16, 28, 28}, -1, 1, rng);
  Tensor w = Tensor::uniform({16, 16, 3, 3}, -1, 1, rng);
  Tensor b = Tensor::uniform({16}, -1, 1, rng);
  ConvSpec spec = ConvSpec::uniform(16, 2, 3, 1, 1, 1);
  for (auto _ : state) {
    Tensor out = conv_forward(in, w, b, spec);
    benchmark::DoNotOptimize(out.values().data());
  }
  state.SetItemsProcessed(state.iterations() * in.dim(0));
}
BENCHMARK(BM_Conv2dForward)->Unit(benchmark::kMillisecond);

static void BM_Conv2dTrainStep(benchmark::State& state) {
  RngStream rng(2);
  Tensor in = Tensor::uniform({32, 16, 28, 28}, -1, 1, rng);
  Tensor w = Tensor::uniform({16, 16, 3, 3}, -1, 1, rng, true);
  Tensor b = Tensor::uniform({16}, -1, 1, rng, true);
  ConvSpec spec = ConvSpec::uniform(16, 2, 3, 1, 1, 1);
  for (auto _ : state) {
    w.zero_grad();
    b.zero_grad();
    Tensor loss = sum(conv_forward(in, w, b, spec));
    backward(loss);
    benchmark::DoNotOptimize(w.grad().data());
  }
  state.SetItemsProcessed(state.iterations() * in.dim(0));
}
BENCHMARK(BM_Conv2dTrainStep)->Unit(benchmark::kMillisecond);

static void BM_Conv3dDilatedForward(benchmark::State& state) {
  RngStream rng(3);
  Tensor in = Tensor::uniform({1, 8, 60, 40, 60}, -1, 1, rng);
  Tensor w = Tensor::uniform({8, 8, 3, 3, 3}, -1, 1, rng);
  Tensor b = Tensor::uniform({8}, -1, 1, rng);
  ConvSpec spec = ConvSpec::uniform(8, 3, 3, 1, 2, 2);
  for (auto _ : state) {
    Tensor out = conv_forward(in, w, b, spec);
    benchmark::DoNotOptimize(out.values().data());
  }
}
BENCHMARK(BM_Conv3dDilatedForward)->Unit(benchmark::kMillisecond);

static void BM_WeightSampling(benchmark::State& state) {
  RngStream rng(4);
  VariationalParam vp = init_variational({32, 16, 3, 3}, 9, 1, real(0.5), rng);
  for (auto _ : state) {
    Tensor w = sample_weights(vp, draw_eps(vp.mu.shape(), rng));
    benchmark::DoNotOptimize(w.values().data());
  }
}
BENCHMARK(BM_WeightSampling)->Unit(benchmark::kMicrosecond);

static void BM_DistanceTransform(benchmark::State& state) {
  SceneConfig cfg;
  VoxelScene s = make_scene(11, cfg);
  for (auto _ : state) {
    auto d = distance_to_surface(s.observed_surface, s.dims, s.voxel_size);
    benchmark::DoNotOptimize(d.data());
  }
}
BENCHMARK(BM_DistanceTransform)->Unit(benchmark::kMillisecond);

static void BM_SceneGeneration(benchmark::State& state) {
  SceneConfig cfg;
  std::uint64_t seed = 0;
  for (auto _ : state) {
    VoxelScene s = make_scene(++seed, cfg);
    benchmark::DoNotOptimize(s.tsdf.data());
  }
}
BENCHMARK(BM_SceneGeneration)->Unit(benchmark::kMillisecond);

static void BM_UncertaintySummaries(benchmark::State& state) {
  RngStream rng(5);
  PredictionSet ps;
  ps.T = 20;
  ps.E = 4096;
  ps.C = 10;
  ps.probs.resize(static_cast<size_t>(ps.T * ps.E * ps.C));
  for (Index t = 0; t < ps.T; ++t)
    for (Index e = 0; e < ps.E; ++e) {
      real sum = 0;
      for (Index c = 0; c < ps.C; ++c) {
        real v = real(rng.uniform(1e-3, 1));
        ps.probs[static_cast<size_t>((t * ps.E + e) * ps.C + c)] = v;
        sum += v;
      }
      for (Index c = 0; c < ps.C; ++c)
        ps.probs[static_cast<size_t>((t * ps.E + e) * ps.C + c)] /= sum;
    }
  ps.labels.assign(static_cast<size_t>(ps.E), 0);
  for (auto _ : state) {
    auto records = summarize(ps);
    benchmark::DoNotOptimize(records.data());
  }
  state.SetItemsProcessed(state.iterations() * ps.E);
}
BENCHMARK(BM_UncertaintySummaries)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
