#include <benchmark/benchmark.h>

#include "yolomed/model.hpp"

using namespace yolomed;

namespace {

ModelConfig bench_config(int input_size, double width_mult, bool use_csti) {
    ModelConfig cfg;
    cfg.input_size = input_size;
    cfg.width_mult = width_mult;
    cfg.use_csti = use_csti;
    cfg.finalize();
    return cfg;
}

void run_forward(benchmark::State& state, const ModelConfig& cfg) {
    YoloMedNet net(cfg);
    ag::NoGradGuard ng;
    ag::Var input = ag::constant(ag::Tensor({1, 3, cfg.input_size, cfg.input_size}));
    for (auto _ : state) {
        ModelOutputs out = net.forward(input, /*training=*/false);
        benchmark::DoNotOptimize(out.seg_logits->value.data());
    }
}

void BM_ForwardFull256(benchmark::State& state) { run_forward(state, bench_config(256, 1.0, true)); }
void BM_ForwardQuarter128(benchmark::State& state) {
    run_forward(state, bench_config(128, 0.25, true));
}
void BM_ForwardQuarter128NoFusion(benchmark::State& state) {
    run_forward(state, bench_config(128, 0.25, false));
}

void BM_FusionModule256(benchmark::State& state) {
    ModelConfig cfg = bench_config(256, 1.0, true);
    nn::Rng rng(cfg.seed);
    Csti csti(cfg, rng);
    ag::NoGradGuard ng;
    std::array<ag::Var, 3> det;
    for (int i = 0; i < 3; ++i) {
        const long s = cfg.strides[static_cast<size_t>(i)];
        det[static_cast<size_t>(i)] = ag::constant(
            ag::Tensor({1, cfg.neck_channels[static_cast<size_t>(i)], 256 / s, 256 / s}));
    }
    ag::Var seg = ag::constant(ag::Tensor({1, 32, 128, 128}));
    for (auto _ : state) {
        auto [det_hat, seg_hat] = csti.forward(det, seg);
        benchmark::DoNotOptimize(seg_hat->value.data());
    }
}

}  // namespace

BENCHMARK(BM_ForwardFull256)->Unit(benchmark::kMillisecond)->Iterations(3);
BENCHMARK(BM_ForwardQuarter128)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ForwardQuarter128NoFusion)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_FusionModule256)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
