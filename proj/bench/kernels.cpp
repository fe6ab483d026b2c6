#include <benchmark/benchmark.h>

#include "objmask/conv.hpp"
#include "objmask/experiment.hpp"
#include "objmask/maskgen.hpp"
#include "objmask/reference.hpp"
#include "objmask/rng.hpp"
#include "objmask/sparse.hpp"

using namespace objmask;

namespace {

Tensor random_input(int c, int hw, std::uint64_t seed) {
    Rng rng(seed);
    Tensor x({1, c, hw, hw});
    for (auto& v : x.vec()) v = static_cast<float>(rng.uniform(-1, 1));
    return x;
}

ConvWeights random_weights(int c, int k, std::uint64_t seed) {
    Rng rng(seed);
    ConvWeights w = ConvWeights::dense(c, c, k, 1, k / 2);
    for (auto& v : w.kernel.vec()) v = static_cast<float>(rng.uniform(-0.1, 0.1));
    return w;
}

void BM_conv_reference(benchmark::State& st) {
    const Tensor x = random_input(64, 24, 1);
    const ConvWeights w = random_weights(64, 3, 2);
    for (auto _ : st) benchmark::DoNotOptimize(reference::conv2d_forward(x, w));
}

void BM_conv_dense(benchmark::State& st) {
    const Tensor x = random_input(64, 24, 1);
    const ConvWeights w = random_weights(64, 3, 2);
    for (auto _ : st) benchmark::DoNotOptimize(conv2d_forward(x, w));
}

// Arg: foreground percentage of the mask.
void BM_conv_sparse(benchmark::State& st) {
    const Tensor x = random_input(64, 24, 1);
    const ConvWeights w = random_weights(64, 3, 2);
    const BinaryMask m = random_mask(24, 24, static_cast<double>(st.range(0)) / 100.0, 3);
    const TileIndexList tiles = reduce_mask(m, tile_size_for_stride(8));
    for (auto _ : st) benchmark::DoNotOptimize(sparse_conv(x, w, tiles));
    st.counters["active_tiles"] = static_cast<double>(tiles.indices.size());
}

void BM_forward(benchmark::State& st) {
    const Model model(ModelConfig{});
    const SyntheticScene s = generate_scene(SceneConfig{}, 7);
    const Tensor img = stack_images({&s});
    const BinaryMask mask = dilate(gt_instance_mask(s), 5);
    ForwardOptions fo;
    if (st.range(0) > 0) {
        fo.mode = ForwardMode::Pipeline;
        fo.mask = &mask;
        fo.exec = st.range(0) == 2 ? Execution::Sparse : Execution::Dense;
    }
    for (auto _ : st) benchmark::DoNotOptimize(model.forward(img, fo));
}

}  // namespace

BENCHMARK(BM_conv_reference)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_conv_dense)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_conv_sparse)->Arg(10)->Arg(30)->Arg(60)->Arg(100)->Unit(benchmark::kMicrosecond);
// 0: vanilla, 1: masked dense, 2: masked sparse.
BENCHMARK(BM_forward)->DenseRange(0, 2)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
