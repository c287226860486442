#include <benchmark/benchmark.h>

#include <memory>

#include "ssn/config.hpp"
#include "ssn/trainer.hpp"

using namespace ssn;

namespace {

// One optimizer step of the default synthetic run, after FSM insertion.
void BM_TrainerStep(benchmark::State& state) {
  RunConfig c;
  c.train.batch_size = int(state.range(0));
  c.train.insertion_iteration = 0;
  auto data = std::make_shared<const SynthDataset>(c.data.train);
  Trainer t(c.network.build(), c.train, data);
  for (auto _ : state) benchmark::DoNotOptimize(t.step());
  state.SetItemsProcessed(state.iterations() * c.train.batch_size);
}
BENCHMARK(BM_TrainerStep)->Arg(4)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_Predict3Block(benchmark::State& state) {
  Model<float> m(build_3block3fsm(64, 64, int(state.range(0)), 17), 1);
  Tensor4<float> x({1, 3, 64, 64});
  for (auto _ : state) benchmark::DoNotOptimize(m.predict(x));
}
BENCHMARK(BM_Predict3Block)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
