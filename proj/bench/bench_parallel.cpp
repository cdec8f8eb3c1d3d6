// Serial reference path vs OpenMP path for the clip-parallel stages.
//
//   ./bench/sedx_bench --benchmark_filter=Batch
//
// The second argument of every benchmark is 0 for serial and 1 for parallel.

#include <benchmark/benchmark.h>

#include <omp.h>

#include "sedx/trainer.hpp"

using namespace sedx;

namespace {

DatasetSpec bench_spec(std::uint32_t strong, std::uint32_t unlabeled) {
  DatasetSpec s;
  s.strong = strong;
  s.unlabeled = unlabeled;
  s.seed = 17;
  return s;
}

const Dataset& bench_data() {
  static const Dataset data = [] {
    Dataset d;
    d.root = "bench";
    for (const GeneratedClip& g : generate_clips(bench_spec(16, 16))) d.clips.push_back(g.record);
    return d;
  }();
  return data;
}

void BM_GenerateClips(benchmark::State& state) {
  const DatasetSpec spec = bench_spec(static_cast<std::uint32_t>(state.range(0)), 0);
  for (auto _ : state) benchmark::DoNotOptimize(generate_clips(spec, state.range(1) != 0));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_BatchGradient(benchmark::State& state) {
  const Dataset& data = bench_data();
  RunConfig cfg;
  cfg.mode = TrainMode::kProjectorFcSc;
  const ModelConfig mc = model_config_for(cfg, data);
  const ModelParams student = ModelParams::initialize(mc, 1);
  const ModelParams teacher = ModelParams::initialize(mc, 2);
  std::vector<const ClipRecord*> clips;
  for (std::size_t i = 0; i < static_cast<std::size_t>(state.range(0)); ++i) {
    clips.push_back(&data.clips[i % data.clips.size()]);
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(batch_gradient(student, teacher, clips, cfg, 10.0, true, state.range(1) != 0));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_Evaluate(benchmark::State& state) {
  const Dataset& data = bench_data();
  RunConfig cfg;
  Checkpoint ckpt;
  ckpt.student = ModelParams::initialize(model_config_for(cfg, data), 1);
  ckpt.teacher = ckpt.student;
  InferenceOptions opts;
  opts.parallel = state.range(0) != 0;
  for (auto _ : state) benchmark::DoNotOptimize(evaluate(ckpt, data, opts));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(data.count(LabelMode::kStrong)));
}

}  // namespace

BENCHMARK(BM_GenerateClips)->ArgsProduct({{64, 256}, {0, 1}})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_BatchGradient)->ArgsProduct({{8, 16}, {0, 1}})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Evaluate)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

int main(int argc, char** argv) {
  benchmark::Initialize(&argc, argv);
  std::printf("OpenMP threads: %d\n", omp_get_max_threads());
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
