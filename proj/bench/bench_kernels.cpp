// Serial reference vs OpenMP kernels. Threads: ADVXL_NUM_THREADS or the OpenMP default.

#include <cstdio>

#include <benchmark/benchmark.h>

#include "advxl/objectives.hpp"
#include "advxl/vit.hpp"

using namespace advxl;

namespace {

struct Setup {
  VitConfig config;
  ParamStore<float> params;
  TrainBatch batch;

  explicit Setup(int n) {
    config.image_size = 32;
    params = init_vit_params<float>(config, 1);
    Rng rng(2);
    batch.images = ImageBatch<float>(n, 3, 32, 32);
    for (float& v : batch.images.data) v = static_cast<float>(rng.uniform());
    for (int i = 0; i < n; ++i) batch.labels.push_back(i % config.num_classes);
  }
};

Exec exec_of(const benchmark::State& state) { return state.range(0) ? Exec::parallel : Exec::serial; }

void label(benchmark::State& state, int n) {
  state.SetItemsProcessed(state.iterations() * n);
  state.SetLabel(state.range(0) ? "parallel" : "serial");
}

void BM_forward(benchmark::State& state) {
  const Setup s(64);
  const VitModel<float> model(s.config);
  BatchPass<float> pass;
  for (auto _ : state) {
    forward_batch(model, s.params, s.batch.images, {}, pass, exec_of(state));
    benchmark::DoNotOptimize(pass.outputs.data());
  }
  label(state, 64);
}

void BM_forward_backward(benchmark::State& state) {
  const Setup s(64);
  const VitModel<float> model(s.config);
  BatchPass<float> pass;
  std::vector<float> douts(64 * static_cast<std::size_t>(s.config.output_dim()), 0.01f);
  for (auto _ : state) {
    forward_batch(model, s.params, s.batch.images, {}, pass, exec_of(state));
    ParamStore<float> grad = s.params.zeros_like();
    ImageBatch<float> dimages;
    backward_batch<float>(model, s.params, pass, douts, &grad, &dimages, exec_of(state));
    benchmark::DoNotOptimize(grad.values.data());
  }
  label(state, 64);
}

void BM_pgd3_training_loss(benchmark::State& state) {
  const Setup s(64);
  const VitModel<float> model(s.config);
  const PerturbationBudget budget{Norm::linf, 4.0 / 255, 4.0 / 255, 3, true};
  for (auto _ : state) {
    Rng rng(3);
    ParamStore<float> grad = s.params.zeros_like();
    const auto r = adversarial_objective(model, s.params, ObjectiveContext{}, s.batch, {}, budget, rng, &grad, nullptr,
                                         -1, exec_of(state));
    benchmark::DoNotOptimize(r.loss);
  }
  label(state, 64);
}

// Both paths must produce the same bits before their timings mean anything.
bool paths_agree() {
  const Setup s(16);
  const VitModel<float> model(s.config);
  const PerturbationBudget budget{Norm::linf, 4.0 / 255, 4.0 / 255, 2, true};
  ParamStore<float> g[2] = {s.params.zeros_like(), s.params.zeros_like()};
  float loss[2];
  for (int k = 0; k < 2; ++k) {
    Rng rng(4);
    loss[k] = adversarial_objective(model, s.params, ObjectiveContext{}, s.batch, {}, budget, rng, &g[k], nullptr, -1,
                                    k ? Exec::parallel : Exec::serial)
                  .loss;
  }
  return loss[0] == loss[1] && g[0].values == g[1].values;
}

}  // namespace

BENCHMARK(BM_forward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_forward_backward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_pgd3_training_loss)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();

int main(int argc, char** argv) {
  const bool agree = paths_agree();
  std::printf("threads %d, serial and parallel results %s\n", worker_threads(), agree ? "bitwise equal" : "DIFFER");
  if (!agree) return 1;
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
