#include <benchmark/benchmark.h>

#include "sslecho/data.hpp"
#include "sslecho/model.hpp"
#include "sslecho/objectives.hpp"
#include "sslecho/ops.hpp"
#include "sslecho/rng.hpp"

namespace {

using namespace sslecho;

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
  std::vector<Scalar> v(shape_numel(shape));
  for (Scalar& x : v) x = static_cast<Scalar>(rng.normal());
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = random_tensor({n, n}, rng);
  const Tensor b = random_tensor({n, n}, rng);
  for (auto _ : state) {
    Tape tape = Tape::no_grad();
    benchmark::DoNotOptimize(ops::matmul(tape, a, b));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto channels = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const Tensor x = random_tensor({64, channels, 16, 16}, rng, true);
  const Tensor k = random_tensor({channels, channels, 3, 3}, rng, true);
  for (auto _ : state) {
    Tape tape;
    Tensor y = ops::conv2d(tape, x, k, 1, 1);
    tape.backward(ops::sum(tape, y));
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_BackboneStep(benchmark::State& state) {
  BackboneConfig cfg;
  cfg.widths = {8, 16, 32};
  cfg.stem_width = 8;
  cfg.blocks_per_stage = 1;
  ParameterMap params = build_backbone(cfg);
  Rng rng(3);
  const Tensor batch = random_tensor({64, 1, 16, 16}, rng);
  for (auto _ : state) {
    params.zero_grad();
    Tape tape;
    Tensor loss = ops::mean(tape, forward_logits(tape, cfg, params, batch, ForwardMode::kTrain));
    tape.backward(loss);
  }
}
BENCHMARK(BM_BackboneStep)->Unit(benchmark::kMillisecond);

void BM_DeskDefaultStep(benchmark::State& state) {
  const BackboneConfig cfg = BackboneConfig::desk_default();
  ParameterMap params = build_backbone(cfg);
  Rng rng(4);
  const Tensor batch = random_tensor({64, 1, 16, 16}, rng);
  for (auto _ : state) {
    params.zero_grad();
    Tape tape;
    Tensor loss = ops::mean(tape, forward_logits(tape, cfg, params, batch, ForwardMode::kTrain));
    tape.backward(loss);
  }
}
BENCHMARK(BM_DeskDefaultStep)->Unit(benchmark::kMillisecond);

void BM_SynthImage(benchmark::State& state) {
  Rng rng(5);
  for (auto _ : state) {
    benchmark::DoNotOptimize(render_synthetic_image(View::kPLAX, Diagnosis::kSevereAS, 16, 0.08, rng));
  }
}
BENCHMARK(BM_SynthImage);

}  // namespace
BENCHMARK_MAIN();
