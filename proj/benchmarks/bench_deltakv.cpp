#include <benchmark/benchmark.h>

#include <vector>

#include "deltakv/codec.hpp"
#include "deltakv/controller.hpp"
#include "deltakv/quantizer.hpp"
#include "deltakv/reference_index.hpp"
#include "deltakv/rng.hpp"

using namespace deltakv;

namespace {

std::vector<float> noise(Rng& rng, std::size_t n) {
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
    return v;
}

CodecVariant variant_arg(int64_t v) { return v == 0 ? CodecVariant::heavy : CodecVariant::light; }

void BM_Compress(benchmark::State& state) {
    const std::size_t width = static_cast<std::size_t>(state.range(1));
    const auto codec = init_codec<float>(CodecConfig::defaults(variant_arg(state.range(0)), width), 1);
    Rng rng(2);
    const auto kv = noise(rng, width), bar = noise(rng, width);
    for (auto _ : state) benchmark::DoNotOptimize(compress<float>(codec, kv, bar));
}
BENCHMARK(BM_Compress)->ArgsProduct({{0, 1}, {32, 256}});

void BM_Reconstruct(benchmark::State& state) {
    const std::size_t width = static_cast<std::size_t>(state.range(1));
    const auto cfg = CodecConfig::defaults(variant_arg(state.range(0)), width);
    const auto codec = init_codec<float>(cfg, 1);
    Rng rng(3);
    const auto z = noise(rng, cfg.latent_dim), bar = noise(rng, width);
    for (auto _ : state) benchmark::DoNotOptimize(reconstruct<float>(codec, z, bar));
}
BENCHMARK(BM_Reconstruct)->ArgsProduct({{0, 1}, {32, 256}});

void BM_TopK(benchmark::State& state) {
    const std::size_t width = 32, tokens = static_cast<std::size_t>(state.range(0));
    ReferenceSet<float> refs(10, width);
    Rng rng(4);
    for (std::size_t t = 0; t < tokens; t += 10) refs.maybe_append(t, noise(rng, width));
    const auto q = noise(rng, width);
    for (auto _ : state) benchmark::DoNotOptimize(refs.topk(q, 4, tokens));
    state.SetComplexityN(static_cast<int64_t>(tokens));
}
BENCHMARK(BM_TopK)->RangeMultiplier(4)->Range(256, 16384)->Complexity();

void BM_TopKBatched(benchmark::State& state) {
    const std::size_t width = 32, tokens = static_cast<std::size_t>(state.range(0));
    ReferenceSet<float> refs(10, width);
    Rng rng(4);
    for (std::size_t t = 0; t < tokens; t += 10) refs.maybe_append(t, noise(rng, width));
    const auto q = noise(rng, width);
    for (auto _ : state) benchmark::DoNotOptimize(refs.topk_batched(q, 4, tokens));
}
BENCHMARK(BM_TopKBatched)->RangeMultiplier(4)->Range(256, 16384);

void BM_Quantize(benchmark::State& state) {
    Rng rng(5);
    const auto z = noise(rng, static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(quantize_token<float>(z));
}
BENCHMARK(BM_Quantize)->Arg(8)->Arg(64);

// One decode step of the toy model after a prompt of range(0) tokens.
void BM_DecodeStep(benchmark::State& state) {
    ModelConfig mc;
    mc.max_seq = 1024;
    ControllerConfig cc;
    cc.filter_layers = {0};
    cc.budget_ratio = 0.3;
    const auto prompt_len = static_cast<std::size_t>(state.range(0));
    std::vector<Token> prompt(prompt_len);
    Rng rng(6);
    for (auto& t : prompt) t = static_cast<Token>(rng.below(mc.vocab));
    Engine<float> engine(init_model<float>(mc, 1),
                         make_codec_bank<float>(CodecConfig::defaults(CodecVariant::heavy, mc.kv_width()), mc.n_layers,
                                                cc.filter_layers, 2),
                         cc);
    for (auto _ : state) {
        state.PauseTiming();
        engine.reset();
        engine.prefill(prompt, 64);
        state.ResumeTiming();
        benchmark::DoNotOptimize(engine.decode_step(1));
    }
}
BENCHMARK(BM_DecodeStep)->Arg(128)->Arg(512)->Unit(benchmark::kMicrosecond);

}  // namespace
BENCHMARK_MAIN();
