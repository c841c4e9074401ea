// Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include "cache_sim.hpp"
#include "deltakv/analysis.hpp"
#include "deltakv/controller.hpp"
#include "deltakv/quantizer.hpp"
#include "deltakv/reference_index.hpp"
#include "deltakv/trainer.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace deltakv;
using namespace deltakv::testing;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c);
    return buf;
}

std::vector<Token> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
    std::vector<Token> t(n);
    for (auto& x : t) x = static_cast<Token>(rng.below(vocab));
    return t;
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

// 1. keep ratios for the two published layer layouts
Outcome kr_reproduction() {
    const double a = compute_budget_ratios(5, 32, 10, 0.25, 1.0, 0.3).keep_ratio;
    const double b = compute_budget_ratios(4, 32, 10, 0.25, 1.0, 0.2).keep_ratio;
    const double q = compute_budget_ratios(5, 32, 10, 0.25, 4.0, 0.3).keep_ratio;
    const bool ok = std::fabs(a * 100 - 45.2) <= 0.1 && std::fabs(b * 100 - 43.1) <= 0.1 &&
                    std::fabs(q - 0.293) < 5e-4 && std::lround(q * 100) == 29;
    return {ok, fmt("KR=%.4f, %.4f, 4-bit %.4f", a, b, q)};
}

// 2. identity codec, r = 1: sparse pipeline vs naive dense forward
Outcome identity_losslessness() {
    ModelConfig mc;
    ControllerConfig cc;
    cc.filter_layers = {0};
    cc.budget_ratio = 1.0;
    cc.n_sink = 4;
    cc.n_recent = 8;
    cc.codec_variant = CodecVariant::identity_linear;
    double worst64 = 0.0, worst32 = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(1000 + seed);
        const auto prompt = random_tokens(rng, 16, mc.vocab);
        const auto model = init_model<double>(mc, seed);
        const auto bank = make_codec_bank<double>(CodecConfig::defaults(CodecVariant::identity_linear, mc.kv_width()),
                                                  mc.n_layers, cc.filter_layers, seed);
        Engine<double> e64(model, bank, cc);
        Engine<float> e32(model.cast<float>(), bank.cast<float>(), cc);
        const auto g64 = e64.generate(prompt, 64, 16);
        const auto g32 = e32.generate(prompt, 64, 16);
        {
            std::vector<Token> seq = prompt;
            seq.insert(seq.end(), g64.tokens.begin(), g64.tokens.end() - 1);
            const auto dense = oracle_forward(model, seq);
            for (std::size_t s = 0; s < 64; ++s) {
                worst64 = std::max(worst64, max_abs_diff<double>(g64.step_logits[s], dense.logits[prompt.size() - 1 + s]));
            }
        }
        {
            // 32-bit pipeline against the 32-bit dense forward
            std::vector<Token> seq = prompt;
            seq.insert(seq.end(), g32.tokens.begin(), g32.tokens.end() - 1);
            const auto dense = dense_forward(e32.model(), seq);
            for (std::size_t s = 0; s < 64; ++s) {
                worst32 = std::max(worst32, max_abs_diff<float>(g32.step_logits[s], dense.logits.row(prompt.size() - 1 + s)));
            }
        }
    }
    return {worst64 < 1e-5 && worst32 < 1e-5,
            fmt("20 generations x 64 steps, max |dlogit| 64-bit vs naive oracle %.2e, 32-bit vs 32-bit dense %.2e", worst64, worst32)};
}

// 3. chunked prefill equivalence, dense and sparse
Outcome chunk_equivalence() {
    ModelConfig mc;
    double worst = 0.0;
    bool sparse_identical = true;
    std::size_t latents_checked = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(2000 + seed);
        const auto tokens = random_tokens(rng, 48, mc.vocab);
        const auto model = init_model<float>(mc, seed);
        const auto one = dense_forward(model, tokens);
        for (std::size_t chunk : {std::size_t{1}, std::size_t{3}, tokens.size()}) {
            const auto c = chunk_prefill(model, tokens, chunk);
            worst = std::max(worst, max_abs_diff(c.logits, one.logits));
            for (std::size_t l = 0; l < mc.n_layers; ++l) {
                worst = std::max(worst, max_abs_diff(c.trace.layers[l], one.trace.layers[l]));
            }
        }

        ControllerConfig cc;
        cc.filter_layers = {0};
        cc.quantize_latent = true;
        cc.n_sink = 2;
        cc.n_recent = 4;
        cc.stride = 5;
        const auto bank = make_codec_bank<float>(CodecConfig::defaults(CodecVariant::heavy, mc.kv_width()), mc.n_layers,
                                                 cc.filter_layers, seed + 50);
        auto capture = [&](std::size_t chunk) {
            Engine<float> e(model, bank, cc);
            e.prefill(tokens, chunk);
            std::vector<std::map<std::size_t, std::variant<Vector<float>, QuantizedLatent>>> codes;
            std::vector<std::vector<std::size_t>> refs;
            std::vector<std::vector<float>> ref_kv;
            for (std::size_t l = 1; l < mc.n_layers; ++l) {
                codes.push_back(e.cache().latent_codes(e.request(), l));
                const auto& rs = e.cache().reference_set(e.request(), l);
                refs.push_back(rs.token_indices());
                std::vector<float> flat;
                for (std::size_t i = 0; i < rs.size(); ++i) flat.insert(flat.end(), rs.kv(i).begin(), rs.kv(i).end());
                ref_kv.push_back(flat);
            }
            return std::make_tuple(codes, refs, ref_kv);
        };
        const auto whole = capture(tokens.size());
        for (const auto& layer : std::get<0>(whole)) latents_checked += layer.size();
        for (std::size_t chunk : {1, 3}) {
            if (capture(chunk) != whole) sparse_identical = false;
        }
    }
    return {worst < 1e-5 && sparse_identical && latents_checked > 0,
            fmt("dense max dev %.2e over chunks {1,3,full}; sparse 4-bit codes identical=%g over %g latents", worst,
                sparse_identical ? 1.0 : 0.0, static_cast<double>(latents_checked))};
}

// 4. central finite differences of the hybrid loss w.r.t. every codec parameter
Outcome gradient_check() {
    ModelConfig mc;
    mc.n_layers = 2;
    mc.n_heads = 1;
    mc.head_dim = 4;
    mc.vocab = 16;
    mc.max_seq = 16;
    mc.ffn_dim = 8;
    const double h = 1e-5;
    double worst[2] = {0.0, 0.0};
    std::size_t probes = 0, zero_probes = 0;
    const CodecVariant variants[2] = {CodecVariant::heavy, CodecVariant::light};
    for (int vi = 0; vi < 2; ++vi) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const auto model = init_model<double>(mc, 300 + seed);
            auto bank = make_codec_bank<double>(CodecConfig::defaults(variants[vi], mc.kv_width()), mc.n_layers, {}, seed);
            Rng rng(400 + seed);
            for (auto& layer : bank.layers)
                for (auto& t : layer->tensors)
                    for (auto& x : t.flat()) x = rng.uniform(-0.4, 0.4);
            const auto tokens = random_tokens(rng, 7, mc.vocab);
            const std::span<const Token> targets = std::span<const Token>(tokens).subspan(1);
            CompressionSettings s;
            s.stride = 2;
            s.top_k = 2;
            const LossWeights w{1.0, 1.0};
            auto loss = [&](const CodecBank<double>& b) {
                const auto f = deltakv_forward(model, b, tokens, s);
                return hybrid_loss(f.mse, f.logits, targets, w).total;
            };
            const auto fwd = deltakv_forward(model, bank, tokens, s);
            const auto grad = deltakv_backward(model, bank, fwd, targets, w);
            auto probe = bank;
            for (std::size_t l = 0; l < mc.n_layers; ++l) {
                for (std::size_t t = 0; t < bank.at(l).tensors.size(); ++t) {
                    for (std::size_t e = 0; e < bank.at(l).tensors[t].size(); ++e) {
                        double& x = probe.at(l).tensors[t].flat()[e];
                        const double x0 = x;
                        x = x0 + h;
                        const double lp = loss(probe);
                        x = x0 - h;
                        const double lm = loss(probe);
                        x = x0;
                        // Cancellation noise of the difference quotient; a discrepancy at
                        // that level maps to relative error 1e-4.
                        const double roundoff = 4.0 * std::numeric_limits<double>::epsilon() *
                                                std::max(std::fabs(lp), std::fabs(lm)) / (2 * h);
                        const double a = grad.at(l).tensors[t].flat()[e];
                        if (a == 0.0) ++zero_probes;
                        const double rel = relative_error(a, (lp - lm) / (2 * h), std::max(1e-6, roundoff * 1e4));
                        worst[vi] = std::max(worst[vi], rel);
                        ++probes;
                    }
                }
            }
        }
    }
    return {worst[0] < 1e-4 && worst[1] < 1e-4,
            fmt("max rel err heavy %.2e, light %.2e over %g probes", worst[0], worst[1], static_cast<double>(probes)) +
                fmt(" (%g with an exactly-zero analytic gradient)", static_cast<double>(zero_probes))};
}

// 5. top-k retrieval and batch_l2 against exhaustive oracles
Outcome retrieval_oracle() {
    Rng rng(5);
    std::size_t mismatches = 0;
    double l2_worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.below(60), d = 1 + rng.below(12), s = 1 + rng.below(5);
        const std::size_t k = 1 + rng.below(8);
        Matrix<double> rows(n, d);
        for (auto& x : rows.flat()) x = static_cast<double>(rng.below(3));  // small grid: frequent ties
        ReferenceSet<double> refs(s, d);
        for (std::size_t i = 0; i < n; ++i) refs.maybe_append(i, rows.row(i));
        std::vector<double> q(d);
        for (auto& x : q) x = static_cast<double>(rng.below(3));
        const std::size_t bound = rng.below(n + 1);
        std::vector<std::size_t> cand;
        for (std::size_t j = 0; j < bound; j += s) cand.push_back(j);
        std::stable_sort(cand.begin(), cand.end(),
                         [&](auto a, auto b) { return sq_dist(q, rows.row(a)) < sq_dist(q, rows.row(b)); });
        cand.resize(std::min(k, cand.size()));
        auto to_tokens = [&](const std::vector<std::size_t>& entries) {
            std::vector<std::size_t> t;
            for (auto e : entries) t.push_back(refs.token_index(e));
            return t;
        };
        if (to_tokens(refs.topk(q, k, bound)) != cand) ++mismatches;
        if (to_tokens(refs.topk_batched(q, k, bound)) != cand) ++mismatches;

        auto qm = random_matrix<double>(rng, 1 + rng.below(8), d);
        auto rm = random_matrix<double>(rng, 1 + rng.below(20), d);
        const auto got = batch_l2(qm, rm);
        for (std::size_t i = 0; i < qm.rows(); ++i)
            for (std::size_t j = 0; j < rm.rows(); ++j) l2_worst = std::max(l2_worst, std::fabs(got(i, j) - sq_dist(qm.row(i), rm.row(j))));
    }
    return {mismatches == 0 && l2_worst < 1e-5,
            fmt("1000 instances, %g top-k mismatches, batch_l2 max dev %.2e", static_cast<double>(mismatches), l2_worst)};
}

// 6. 4-bit token-wise quantizer. The strict bound is checked on 64-bit
// latents; 32-bit outputs also carry half an ulp of the output rounding.
template <typename T>
void quantizer_pass(Rng& rng, double& worst_excess, std::size_t& not_fixed) {
    for (int i = 0; i < 10000; ++i) {
        const std::size_t d = 1 + rng.below(64);
        const double spread = std::pow(10.0, rng.uniform(-4.0, 2.0));
        const double centre = rng.uniform(-3.0, 3.0);
        std::vector<T> z(d);
        for (auto& x : z) x = static_cast<T>(centre + spread * rng.uniform(-1.0, 1.0));
        if (i % 500 == 0) std::fill(z.begin(), z.end(), z[0]);
        const auto q = quantize_token<T>(z);
        const auto back = dequantize_token<T>(q, d);
        double err = 0.0, mag = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            err = std::max(err, std::fabs(static_cast<double>(back[j]) - static_cast<double>(z[j])));
            mag = std::max(mag, std::fabs(static_cast<double>(z[j])));
        }
        const double output_rounding = std::is_same_v<T, float> ? std::numeric_limits<float>::epsilon() * mag / 2.0 : 0.0;
        worst_excess = std::max(worst_excess, err - (static_cast<double>(q.scale) / 2.0 + 1e-9 + output_rounding));
        if (!(quantize_token<T>(back) == q)) ++not_fixed;
    }
}

Outcome quantizer_bounds() {
    Rng rng(6);
    double excess64 = -1.0, excess32 = -1.0;
    std::size_t not_fixed = 0, pack_fail = 0;
    quantizer_pass<double>(rng, excess64, not_fixed);
    quantizer_pass<float>(rng, excess32, not_fixed);
    for (std::size_t d : {1, 2, 7, 8, 33, 64}) {
        for (int rep = 0; rep < 50; ++rep) {
            std::vector<std::uint8_t> codes(d);
            for (auto& c : codes) c = static_cast<std::uint8_t>(rng.below(16));
            const auto packed = pack_nibbles(codes);
            if (packed.size() != (d + 1) / 2 || unpack_nibbles(packed, d) != codes) ++pack_fail;
        }
    }
    return {excess64 <= 0.0 && excess32 <= 0.0 && not_fixed == 0 && pack_fail == 0,
            fmt("10000 64-bit vectors max (err - scale/2 - 1e-9) = %.2e; 10000 32-bit vectors with half-ulp term %.2e; ",
                excess64, excess32) +
                fmt("non-fixed points %g, pack failures %g", static_cast<double>(not_fixed), static_cast<double>(pack_fail))};
}

// 7. cache manager vs reference simulator plus long-run accounting
Outcome cache_model_check() {
    const auto mc = run_model_check(10000, 77);
    if (!mc.failure.empty()) return {false, "model check: " + mc.failure};

    CacheConfig c;
    c.n_layers = 4;
    c.kv_width = 32;
    c.latent_dim = 8;
    c.filter_layers = {0};
    c.full_capacity = 20000;
    c.latent_capacity = 20000;
    const auto bank = make_codec_bank<float>(CodecConfig::defaults(CodecVariant::heavy, c.kv_width), c.n_layers,
                                             c.filter_layers, 3);
    CacheManager<float> cm(c, &bank);
    cm.register_request(1);
    Rng rng(7);
    const std::size_t T = 3000;
    for (std::size_t i = 0; i < T; ++i)
        for (std::size_t l = 0; l < c.n_layers; ++l) cm.append_token(1, l, random_vector<float>(rng, c.kv_width));
    cm.check_invariants();
    const auto a = cm.audit(1);
    const std::size_t want_full = c.n_sink + c.n_recent + (T + c.stride - 1) / c.stride;
    bool slots_ok = true;
    for (std::size_t l = 1; l < c.n_layers; ++l) slots_ok = slots_ok && a.layers[l].full_slots == want_full;
    const double rel = std::fabs(a.measured_kr_net / a.predicted_kr - 1.0);
    return {slots_ok && rel < 0.02,
            fmt("10000 ops clean; full slots per compressed layer %g (want %g); net KR vs predicted rel dev %.4f",
                static_cast<double>(a.layers[1].full_slots), static_cast<double>(want_full), rel)};
}

// 8. seeded toy training run
Outcome training_behavior() {
    ModelConfig mc;
    const auto model = init_model<float>(mc, 1);
    const std::vector<std::size_t> filters{0};
    const auto codec = make_codec_bank<float>(CodecConfig::defaults(CodecVariant::heavy, mc.kv_width()), mc.n_layers,
                                              filters, 3);
    MarkovCorpusConfig cc;
    cc.n_sequences = 500;
    cc.seq_len = 64;
    cc.seed = 5;
    const auto corpus = make_markov_corpus(cc);
    TrainConfig tc;
    tc.total_steps = 500;
    tc.seq_len = 64;
    tc.seed = 9;
    tc.compression.filter_layers = filters;
    const auto before = model.checksum();
    const auto r1 = train(model, codec, corpus, tc);
    const auto r2 = train(model, codec, corpus, tc);
    auto mean_total = [&](std::size_t from) {
        double s = 0.0;
        for (std::size_t i = from; i < from + 50; ++i) s += r1.history[i].total;
        return s / 50.0;
    };
    const double first = mean_total(0), last = mean_total(450);
    bool identical = r1.codec == r2.codec && r1.history.size() == r2.history.size();
    for (std::size_t i = 0; identical && i < r1.history.size(); ++i) {
        identical = r1.history[i].total == r2.history[i].total && r1.history[i].mse == r2.history[i].mse;
    }
    const bool frozen = model.checksum() == before;
    return {last <= 0.7 * first && frozen && identical,
            fmt("loss %.4f -> %.4f (ratio %.3f)", first, last, last / first) +
                (frozen ? ", model unchanged" : ", MODEL CHANGED") + (identical ? ", rerun bitwise identical" : ", RERUN DIFFERS")};
}

// 9. residualization shrinks norms, flattens spectra; panels vs brute force
std::string panel_mismatch(const Matrix<double>& m, const Matrix<double>& res, const AnalysisReport& r,
                           const AnalysisConfig& cfg) {
    const std::size_t n = m.rows();
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::size_t> cand;
        for (std::size_t j = 0; j < i; j += cfg.stride) cand.push_back(j);
        std::stable_sort(cand.begin(), cand.end(), [&](auto a, auto b) { return sq_dist(m.row(i), m.row(a)) < sq_dist(m.row(i), m.row(b)); });
        const std::size_t kk = std::min(cfg.k, cand.size());
        for (std::size_t c = 0; c < m.cols(); ++c) {
            double mean = 0.0;
            for (std::size_t t = 0; t < kk; ++t) mean += m(cand[t], c);
            if (kk) mean /= static_cast<double>(kk);
            if (std::fabs(res(i, c) - (m(i, c) - mean)) > 1e-12) return "residual row " + std::to_string(i);
        }
        if (i == 0) continue;
        const double sim = [&] {
            double ab = 0, aa = 0, bb = 0;
            for (std::size_t c = 0; c < m.cols(); ++c) {
                ab += m(i, c) * m(cand[0], c);
                aa += m(i, c) * m(i, c);
                bb += m(cand[0], c) * m(cand[0], c);
            }
            return (aa == 0 || bb == 0) ? 0.0 : std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
        }();
        if (r.similarity[i - 1] != sim) return "similarity of token " + std::to_string(i);
        std::size_t best = 0;
        double best_sim = -2.0;
        for (std::size_t j = 0; j < i; ++j) {
            double ab = 0, aa = 0, bb = 0;
            for (std::size_t c = 0; c < m.cols(); ++c) {
                ab += m(i, c) * m(j, c);
                aa += m(i, c) * m(i, c);
                bb += m(j, c) * m(j, c);
            }
            const double s = (aa == 0 || bb == 0) ? 0.0 : std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
            if (s >= best_sim) best_sim = s, best = j;
        }
        if (r.nearest_similar[i - 1] != best) return "nearest similar token of " + std::to_string(i);
    }
    auto counts = [](const std::vector<double>& v, const std::vector<double>& e) {
        std::vector<std::size_t> c(e.size() - 1, 0);
        for (double x : v) {
            std::size_t b = 0;
            for (std::size_t i = 0; i + 1 < e.size(); ++i)
                if (x >= e[i]) b = i;
            ++c[std::min(b, c.size() - 1)];
        }
        return c;
    };
    if (r.similarity_histogram.counts != counts(r.similarity, r.similarity_histogram.edges)) return "similarity histogram";
    if (r.distance_histogram.counts != counts(r.log2_distance, r.distance_histogram.edges)) return "distance histogram";
    auto value_counts = [&](const Matrix<double>& x) {
        std::vector<double> v(x.flat().begin(), x.flat().end()), mags;
        for (double t : v) mags.push_back(std::fabs(t));
        std::sort(mags.begin(), mags.end());
        const double range = mags[static_cast<std::size_t>(std::ceil(cfg.value_quantile * mags.size())) - 1];
        return counts(v, linear_edges(-range, range, cfg.value_bins));
    };
    if (r.value_histogram_original.counts != value_counts(m)) return "original value histogram";
    if (r.value_histogram_residual.counts != value_counts(res)) return "residual value histogram";
    double mean_o = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean_o += std::sqrt(sq_dist(m.row(i), std::vector<double>(m.cols(), 0.0)));
    if (std::fabs(mean_o / n - r.norm_stats_original.mean) > 1e-12 * mean_o) return "norm mean";
    return "";
}

Outcome residualization_direction() {
    ModelConfig mc;
    mc.max_seq = 512;
    AnalysisConfig cfg;
    std::size_t cases = 0, good = 0;
    std::string mismatch;
    double worst_norm_ratio = 0.0, worst_flat_gain = 1e9;
    for (std::uint64_t s = 0; s < 5; ++s) {
        MarkovCorpusConfig cc;
        cc.n_sequences = 1;
        cc.seq_len = 512;
        cc.seed = s;
        const auto tokens = make_markov_corpus(cc).at(0);
        const auto model = init_model<double>(mc, 10 + s);
        const auto trace = dense_forward(model, tokens).trace;
        for (std::size_t l = 0; l < mc.n_layers; ++l) {
            const auto& m = trace.layers[l];
            const auto res = residualize_trace(m, cfg.stride, cfg.k);
            const auto r = build_report<double>(m, res, nullptr, cfg);
            ++cases;
            const double norm_ratio = r.norm_stats_residual.mean / r.norm_stats_original.mean;
            worst_norm_ratio = std::max(worst_norm_ratio, norm_ratio);
            worst_flat_gain = std::min(worst_flat_gain, r.flatness_residual - r.flatness_original);
            if (norm_ratio < 1.0 && r.flatness_residual > r.flatness_original) ++good;
            if (mismatch.empty()) {
                const auto pm = panel_mismatch(m, res, r, cfg);
                if (!pm.empty()) mismatch = "seed " + std::to_string(s) + " layer " + std::to_string(l) + ": " + pm;
            }
        }
    }
    Outcome o;
    o.pass = good == cases && mismatch.empty();
    o.detail = fmt("%g/%g traces; worst residual/original mean norm %.3f", static_cast<double>(good),
                   static_cast<double>(cases), worst_norm_ratio) +
               fmt(", min flatness gain %.3f", worst_flat_gain) +
               (mismatch.empty() ? ", panels match oracles" : ", panel mismatch: " + mismatch);
    return o;
}

// 10. SVD reconstruction and energy
Outcome svd_correctness() {
    Rng rng(10);
    double worst_rec = 0.0, worst_energy = 0.0;
    for (int t = 0; t < 50; ++t) {
        const std::size_t r = 1 + rng.below(64), c = 1 + rng.below(64);
        const auto a = random_matrix<double>(rng, r, c);
        const auto s = svd(a);
        double err = 0.0, e2 = 0.0;
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                double x = 0.0;
                for (std::size_t k = 0; k < s.s.size(); ++k) x += s.u(i, k) * s.s[k] * s.v(j, k);
                err += (x - a(i, j)) * (x - a(i, j));
            }
        }
        for (double v : s.s) e2 += v * v;
        double f2 = 0.0;
        for (double v : a.flat()) f2 += v * v;
        worst_rec = std::max(worst_rec, std::sqrt(err));
        worst_energy = std::max(worst_energy, std::fabs(e2 - f2) / f2);
    }
    return {worst_rec < 1e-6 && worst_energy < 1e-6,
            fmt("50 matrices, max ||A - USV^T||_F %.2e, max energy rel dev %.2e", worst_rec, worst_energy)};
}

// 11. OmniKV token scores
Outcome omnikv_scoring() {
    Rng rng(11);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        const std::size_t h = 1 + rng.below(8), q = 1 + rng.below(16), k = 1 + rng.below(64);
        AttentionTensor<double> a(h, q, k);
        for (std::size_t hh = 0; hh < h; ++hh) {
            for (std::size_t i = 0; i < q; ++i) {
                double sum = 0.0;
                for (std::size_t j = 0; j < k; ++j) sum += a.at(hh, i, j) = rng.uniform(0.0, 1.0);
                for (std::size_t j = 0; j < k; ++j) a.at(hh, i, j) /= sum;
            }
        }
        const auto got = omnikv_score(a);
        for (std::size_t j = 0; j < k; ++j) {
            double best = -1.0;
            for (std::size_t hh = 0; hh < h; ++hh) {
                double sum = 0.0;
                for (std::size_t i = 0; i < q; ++i) sum += a.at(hh, i, j);
                best = std::max(best, sum / static_cast<double>(q));
            }
            worst = std::max(worst, std::fabs(got[j] - best));
        }
    }
    AttentionTensor<double> u(4, 6, 16);
    std::fill(u.data.begin(), u.data.end(), 1.0 / 16.0);
    bool uniform_exact = true;
    for (double s : omnikv_score(u)) uniform_exact = uniform_exact && s == 1.0 / 16.0;
    return {worst < 1e-7 && uniform_exact,
            fmt("100 tensors, max dev %.2e; uniform case exact=%g", worst, uniform_exact ? 1.0 : 0.0)};
}

}  // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"KR reproduction", kr_reproduction},
        {"identity-codec end-to-end losslessness", identity_losslessness},
        {"chunk-prefill equivalence", chunk_equivalence},
        {"gradient correctness", gradient_check},
        {"retrieval oracle", retrieval_oracle},
        {"quantizer bounds", quantizer_bounds},
        {"cache-manager model check", cache_model_check},
        {"training behavior", training_behavior},
        {"residualization direction", residualization_direction},
        {"SVD correctness", svd_correctness},
        {"OmniKV scoring", omnikv_scoring},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%s %zu %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str(), secs);
        std::fflush(stdout);
        if (!o.pass) ++failures;
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
    return failures == 0 ? 0 : 1;
}
