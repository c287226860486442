#include <benchmark/benchmark.h>

#include <random>

#include "ssn/fsm.hpp"
#include "ssn/ops.hpp"

using namespace ssn;

namespace {

Tensor4<float> random_maps(Shape4 s) {
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n;
  Tensor4<float> t(s);
  for (float& v : t.values()) v = n(rng);
  return t;
}

// Args: channels, spatial size.
void BM_ShiftForward(benchmark::State& state) {
  const int k = int(state.range(0)), hw = int(state.range(1));
  auto m = random_maps({1, k, hw, hw});
  std::vector<float> dx(k), dy(k);
  for (int i = 0; i < k; ++i) dx[i] = 0.37f * float(i % 7) - 1.1f, dy[i] = -0.21f * float(i % 5) + 0.6f;
  for (auto _ : state) benchmark::DoNotOptimize(fsm::shift_forward<float>(m, dx, dy));
  state.SetItemsProcessed(state.iterations() * std::int64_t(k) * hw * hw);
}
BENCHMARK(BM_ShiftForward)->Args({64, 32})->Args({256, 64})->Args({512, 64});

void BM_ShiftBackward(benchmark::State& state) {
  const int k = int(state.range(0)), hw = int(state.range(1));
  auto m = random_maps({1, k, hw, hw});
  auto up = random_maps({1, k, hw, hw});
  std::vector<float> dx(k, 1.3f), dy(k, -0.4f);
  for (auto _ : state) benchmark::DoNotOptimize(fsm::shift_backward<float>(m, dx, dy, up));
  state.SetItemsProcessed(state.iterations() * std::int64_t(k) * hw * hw);
}
BENCHMARK(BM_ShiftBackward)->Args({64, 32})->Args({256, 64});

void BM_Conv1x1(benchmark::State& state) {
  const int c = int(state.range(0)), k = int(state.range(1)), hw = int(state.range(2));
  auto x = random_maps({1, c, hw, hw});
  auto w = random_maps({k, c, 1, 1});
  for (auto _ : state) {
    benchmark::DoNotOptimize(ops::conv2d_forward<float>(x, w.storage(), k, {}, ConvGeometry{}));
  }
  state.counters["MAC/s"] = benchmark::Counter(double(c) * k * hw * hw, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Conv1x1)->Args({256, 256, 64})->Args({256, 512, 32});

void BM_FsmForward(benchmark::State& state) {
  const int c = int(state.range(0)), k = int(state.range(1)), hw = int(state.range(2));
  std::mt19937_64 rng(2);
  fsm::FsmParams<float> p("fsm", c, k, fsm::CaVariant::kSoftplusNormalized);
  p.initialize(rng, fsm::FsmInit{1.0, false});
  auto x = random_maps({1, c, hw, hw});
  for (auto _ : state) {
    Tape<float> tape;
    benchmark::DoNotOptimize(fsm::fsm(tape, tape.constant(x), p, false));
  }
}
BENCHMARK(BM_FsmForward)->Args({64, 64, 32})->Args({256, 256, 64})->Unit(benchmark::kMillisecond);

}  // namespace
