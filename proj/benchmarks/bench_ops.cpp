// Microbenchmarks for the hot paths: dense products, convolutions, the two
// attention flavors, and a whole-model forward pass.  FLOP-bearing benchmarks
// report items/s as floating-point operations per second.

#include <benchmark/benchmark.h>

#include "volseg/attention.hpp"
#include "volseg/loss.hpp"
#include "volseg/model.hpp"
#include "volseg/nn.hpp"

using namespace volseg;

namespace {

ModelSettings desk_settings() {
    ModelSettings s; // defaults: channels [16,32,64,128] in both branches
    s.num_classes = 3;
    return s;
}

} // namespace

static void BM_MatMul(benchmark::State& state) {
    const int64_t n = state.range(0);
    Rng rng(1);
    auto a = Tensor<float>::randn(rng, {n, n});
    auto b = Tensor<float>::randn(rng, {n, n});
    NoGradGuard ng;
    for (auto _ : state) {
        auto c = matmul(a, b);
        benchmark::DoNotOptimize(c.raw());
    }
    state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_MatMul)->Arg(64)->Arg(128)->Arg(256);

static void BM_Conv2d(benchmark::State& state) {
    const int64_t c = state.range(0);
    Rng rng(2);
    auto x = Tensor<float>::randn(rng, {4, c, 32, 32});
    auto w = Tensor<float>::randn(rng, {c, c, 3, 3});
    auto b = Tensor<float>::randn(rng, {c});
    NoGradGuard ng;
    for (auto _ : state) {
        auto y = conv2d(x, w, b, {1, 1}, {1, 1});
        benchmark::DoNotOptimize(y.raw());
    }
    state.SetItemsProcessed(state.iterations() * (2 * 4 * c * 32 * 32 * c * 3 * 3 + 4 * c * 32 * 32));
}
BENCHMARK(BM_Conv2d)->Arg(16)->Arg(32)->Arg(64);

static void BM_Conv3d(benchmark::State& state) {
    const int64_t c = state.range(0);
    Rng rng(3);
    auto x = Tensor<float>::randn(rng, {1, c, 8, 16, 16});
    auto w = Tensor<float>::randn(rng, {c, c, 3, 3, 3});
    auto b = Tensor<float>::randn(rng, {c});
    NoGradGuard ng;
    for (auto _ : state) {
        auto y = conv3d(x, w, b, {1, 1, 1}, {1, 1, 1});
        benchmark::DoNotOptimize(y.raw());
    }
    state.SetItemsProcessed(state.iterations() *
                            (2 * c * 8 * 16 * 16 * c * 3 * 3 * 3 + c * 8 * 16 * 16));
}
BENCHMARK(BM_Conv3d)->Arg(16)->Arg(32);

static void BM_ReducedKeyAttention(benchmark::State& state) {
    const int64_t r = state.range(0);
    Rng rng(4);
    ParamStore<float> ps;
    GrMsa2d<float> gr(ps, "g", 32, 2, r, rng);
    auto f = Tensor<float>::randn(rng, {4, 32, 32, 32});
    NoGradGuard ng;
    for (auto _ : state) {
        auto y = gr(f);
        benchmark::DoNotOptimize(y.raw());
    }
}
BENCHMARK(BM_ReducedKeyAttention)->Arg(1)->Arg(2)->Arg(4)->Arg(8);

static void BM_WindowAttention3d(benchmark::State& state) {
    const bool shifted = state.range(0) != 0;
    Rng rng(5);
    ParamStore<float> ps;
    WindowMsa3d<float> wm(ps, "w", 32, 2, {2, 4, 4},
                          shifted ? std::array<int64_t, 3>{1, 2, 2}
                                  : std::array<int64_t, 3>{0, 0, 0},
                          rng);
    auto f = Tensor<float>::randn(rng, {32, 8, 16, 16});
    NoGradGuard ng;
    for (auto _ : state) {
        auto y = wm(f);
        benchmark::DoNotOptimize(y.raw());
    }
}
BENCHMARK(BM_WindowAttention3d)->Arg(0)->Arg(1);

static void BM_FusionBlock(benchmark::State& state) {
    Rng rng(6);
    HlgmConfig cfg;
    cfg.dim = 32;
    ParamStore<float> ps;
    HlgmBlock<float> block(ps, "b", cfg, rng);
    auto fp = Tensor<float>::randn(rng, {32, 8, 16, 16});
    auto fv = Tensor<float>::randn(rng, {32, 8, 16, 16});
    NoGradGuard ng;
    for (auto _ : state) {
        auto [op, ov] = block(fp, fv);
        benchmark::DoNotOptimize(op.raw());
        benchmark::DoNotOptimize(ov.raw());
    }
}
BENCHMARK(BM_FusionBlock);

static void BM_ModelForward(benchmark::State& state) {
    HybridModel<float> model(desk_settings(), 0);
    Rng rng(7);
    auto vol = Tensor<float>::randn(rng, {1, 16, 64, 64});
    NoGradGuard ng;
    for (auto _ : state) {
        auto pyr = model.forward(vol);
        benchmark::DoNotOptimize(pyr.p3d_res[0].raw());
    }
    state.SetItemsProcessed(state.iterations() *
                            model.count_flops({1, 16, 64, 64}));
}
BENCHMARK(BM_ModelForward)->Unit(benchmark::kMillisecond)->MinTime(2.0);

static void BM_TrainStep(benchmark::State& state) {
    HybridModel<float> model(desk_settings(), 0);
    Sgd<float> opt(model.params(), 0.9);
    Rng rng(8);
    auto vol = Tensor<float>::randn(rng, {1, 16, 64, 64});
    std::vector<uint8_t> labels(16 * 64 * 64, 0);
    for (size_t i = 0; i < labels.size(); ++i)
        labels[i] = static_cast<uint8_t>(rng.next_int(0, 2));
    for (auto _ : state) {
        auto pyr = model.forward(vol);
        auto rep = deep_supervised_loss(pyr.p2d, pyr.p3d_res, labels, {16, 64, 64});
        model.params().zero_grad();
        backward(rep.total);
        opt.step(1e-4);
        benchmark::DoNotOptimize(rep.total.raw());
    }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond)->MinTime(2.0);

BENCHMARK_MAIN();
