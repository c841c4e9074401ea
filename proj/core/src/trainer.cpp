#include "deltakv/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "deltakv/reference_index.hpp"
#include "deltakv/rng.hpp"

namespace deltakv {

std::string to_string(ReferenceMode m) { return m == ReferenceMode::raw ? "raw" : "reconstructed"; }

ReferenceMode reference_mode_from_string(const std::string& s) {
    if (s == "raw") return ReferenceMode::raw;
    if (s == "reconstructed") return ReferenceMode::reconstructed;
    throw ConfigError("unknown reference mode '" + s + "'");
}

bool CompressionSettings::is_filter(std::size_t layer) const {
    return std::find(filter_layers.begin(), filter_layers.end(), layer) != filter_layers.end();
}

void CompressionSettings::validate(std::size_t n_layers) const {
    if (stride == 0) throw ConfigError("stride must be >= 1");
    if (top_k == 0) throw ConfigError("top_k must be >= 1");
    for (std::size_t l : filter_layers) {
        if (l >= n_layers) throw ConfigError("filter layer " + std::to_string(l) + " out of range");
    }
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must be in [0, 1)");
    if (seq_len < 2) throw ConfigError("seq_len must be >= 2 for a next-token target");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("AdamW betas must be in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("AdamW eps must be positive");
}

namespace {

// Gradient of rms_norm with respect to its input.
template <typename T>
void rms_backward(std::span<const T> x, std::span<const T> gain, T inv, std::span<const T> dy, std::span<T> dx) {
    const std::size_t n = x.size();
    T proj{};
    for (std::size_t k = 0; k < n; ++k) proj += gain[k] * dy[k] * x[k];
    const T coef = inv * inv * inv * proj / static_cast<T>(n);
    for (std::size_t k = 0; k < n; ++k) dx[k] += inv * gain[k] * dy[k] - x[k] * coef;
}

template <typename T>
void add_scaled(std::span<T> acc, std::span<const T> v, T f) {
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += f * v[i];
}

template <typename T>
void check_codec_shapes(const ModelParams<T>& model, const CodecBank<T>& codec, const CompressionSettings& settings) {
    const auto& cfg = model.config;
    settings.validate(cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        if (settings.is_filter(l)) continue;
        if (!codec.has(l)) throw ShapeError("no codec for compressed layer " + std::to_string(l));
        if (codec.at(l).config.input_dim != cfg.kv_width()) {
            throw ShapeError("codec input_dim does not match the model's 2*d_k");
        }
    }
}

}  // namespace

template <typename T>
DeltaKvForward<T> deltakv_forward(const ModelParams<T>& model, const CodecBank<T>& codec,
                                  std::span<const Token> tokens, const CompressionSettings& settings) {
    const auto& cfg = model.config;
    check_tokens(cfg, tokens);
    check_codec_shapes(model, codec, settings);
    const std::size_t n = tokens.size();
    const std::size_t d = cfg.hidden();
    const std::size_t dk = cfg.kv_dim();
    const std::size_t w = cfg.kv_width();

    DeltaKvForward<T> fwd;
    fwd.ground_truth = dense_forward(model, tokens).trace;

    Matrix<T> h(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const auto e = model.embedding.row(tokens[i]);
        std::copy(e.begin(), e.end(), h.row(i).begin());
    }

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = model.layers[l];
        LayerTape<T>& tp = fwd.tape.emplace_back();
        tp.input = h;
        tp.attn_inv.resize(n);
        tp.normed = Matrix<T>(n, d);
        tp.q_rot = Matrix<T>(n, d);
        tp.kv = Matrix<T>(n, w);
        tp.kv_bar = Matrix<T>(n, w);
        tp.kv_hat = Matrix<T>(n, w);
        tp.keys_rot = Matrix<T>(n, dk);
        tp.ref_tokens.resize(n);
        tp.probs.resize(n);
        tp.heads = Matrix<T>(n, d);
        tp.after_attn = Matrix<T>(n, d);
        tp.ffn_inv.resize(n);
        tp.ffn_normed = Matrix<T>(n, d);
        tp.gate_pre = Matrix<T>(n, cfg.ffn_dim);
        tp.up = Matrix<T>(n, cfg.ffn_dim);

        for (std::size_t i = 0; i < n; ++i) {
            const auto proj = project_qkv(model, l, std::span<const T>(h.row(i)));
            Vector<T> scratch(d);
            tp.attn_inv[i] = rms_norm<T>(h.row(i), lw.attn_norm.row(0), cfg.norm_eps, scratch);
            std::copy(proj.normed.begin(), proj.normed.end(), tp.normed.row(i).begin());
            std::copy(proj.kv.begin(), proj.kv.end(), tp.kv.row(i).begin());
            auto q = tp.q_rot.row(i);
            std::copy(proj.q.begin(), proj.q.end(), q.begin());
            rope_heads<T>(q, cfg, i);
        }

        tp.compressed = !settings.is_filter(l);
        tp.reference_mode = settings.reference_mode;
        if (!tp.compressed) {
            tp.kv_hat = tp.kv;
        } else {
            const auto& cp = codec.at(l);
            const auto& gt = fwd.ground_truth.layers[l];
            ReferenceSet<T> refs(settings.stride, w);
            for (std::size_t i = 0; i < n; ++i) {
                const auto kv = tp.kv.row(i);
                const auto entries = refs.topk(kv, settings.top_k, i);
                for (std::size_t e : entries) tp.ref_tokens[i].push_back(refs.token_index(e));
                const auto bar = refs.mean_reference(entries);
                std::copy(bar.begin(), bar.end(), tp.kv_bar.row(i).begin());
                const auto z = compress<T>(cp, kv, bar);
                const auto hat = reconstruct<T>(cp, z, bar);
                std::copy(hat.begin(), hat.end(), tp.kv_hat.row(i).begin());
                fwd.mse += squared_l2<T>(gt.row(i), hat);
                refs.maybe_append(i, settings.reference_mode == ReferenceMode::reconstructed
                                         ? std::span<const T>(hat)
                                         : kv);
            }
        }

        for (std::size_t j = 0; j < n; ++j) {
            auto k = tp.keys_rot.row(j);
            const auto src = tp.kv_hat.row(j);
            std::copy(src.begin(), src.begin() + dk, k.begin());
            rope_heads<T>(k, cfg, j);
        }

        for (std::size_t i = 0; i < n; ++i) {
            AttentionRows<T> rows;
            rows.reserve(i + 1);
            for (std::size_t j = 0; j <= i; ++j) rows.push(tp.keys_rot.row(j), tp.kv_hat.row(j).subspan(dk, dk));
            attend<T>(cfg, tp.q_rot.row(i), rows, tp.heads.row(i), &tp.probs[i]);
            auto a = tp.after_attn.row(i);
            vecmat<T>(tp.heads.row(i), lw.wo, a);
            add_scaled<T>(a, h.row(i), T{1});

            auto u = tp.ffn_normed.row(i);
            tp.ffn_inv[i] = rms_norm<T>(a, lw.ffn_norm.row(0), cfg.norm_eps, u);
            vecmat<T>(u, lw.w_gate, tp.gate_pre.row(i));
            vecmat<T>(u, lw.w_up, tp.up.row(i));
            Vector<T> act(cfg.ffn_dim);
            for (std::size_t f = 0; f < cfg.ffn_dim; ++f) act[f] = swish(tp.gate_pre(i, f)) * tp.up(i, f);
            auto hr = h.row(i);
            vecmat<T>(act, lw.w_down, hr);
            add_scaled<T>(hr, a, T{1});
        }
        fwd.reconstructed.layers.push_back(tp.kv_hat);
    }

    fwd.final_hidden = h;
    fwd.final_inv.resize(n);
    fwd.final_normed = Matrix<T>(n, d);
    fwd.logits = Matrix<T>(n, cfg.vocab);
    for (std::size_t i = 0; i < n; ++i) {
        fwd.final_inv[i] = rms_norm<T>(h.row(i), model.final_norm.row(0), cfg.norm_eps, fwd.final_normed.row(i));
        vecmat<T>(fwd.final_normed.row(i), model.lm_head, fwd.logits.row(i));
    }
    return fwd;
}

template <typename T>
LossBreakdown<T> hybrid_loss(T mse, const Matrix<T>& logits, std::span<const Token> targets,
                             const LossWeights& weights) {
    if (targets.size() > logits.rows()) throw ShapeError("hybrid_loss: more targets than logits rows");
    LossBreakdown<T> out;
    out.mse = mse;
    if (!targets.empty()) {
        Matrix<T> head(targets.size(), logits.cols());
        for (std::size_t i = 0; i < targets.size(); ++i) {
            const auto r = logits.row(i);
            std::copy(r.begin(), r.end(), head.row(i).begin());
        }
        out.ntp = ntp_loss(head, targets);
    }
    out.total = static_cast<T>(weights.mse) * out.mse + static_cast<T>(weights.ntp) * out.ntp;
    return out;
}

template <typename T>
CodecBank<T> deltakv_backward(const ModelParams<T>& model, const CodecBank<T>& codec, const DeltaKvForward<T>& fwd,
                              std::span<const Token> targets, const LossWeights& weights) {
    const auto& cfg = model.config;
    const std::size_t n = fwd.logits.rows();
    const std::size_t d = cfg.hidden();
    const std::size_t dk = cfg.kv_dim();
    const std::size_t w = cfg.kv_width();
    const std::size_t dh = cfg.head_dim;
    if (fwd.tape.size() != cfg.n_layers) throw ShapeError("deltakv_backward: tape does not match the model");
    if (targets.size() > n) throw ShapeError("deltakv_backward: more targets than positions");

    CodecBank<T> grads;
    grads.layers.resize(codec.layers.size());
    for (std::size_t l = 0; l < codec.layers.size(); ++l) {
        if (codec.has(l)) grads.layers[l] = CodecParams<T>::zeros(codec.at(l).config);
    }

    Matrix<T> dh_mat(n, d);
    if (!targets.empty() && weights.ntp != 0.0) {
        const T f = static_cast<T>(weights.ntp) / static_cast<T>(targets.size());
        for (std::size_t i = 0; i < targets.size(); ++i) {
            auto p = softmax_row<T>(fwd.logits.row(i));
            p[targets[i]] -= T{1};
            for (T& v : p) v *= f;
            Vector<T> dn(d);
            vecmat_transposed<T>(p, model.lm_head, dn);
            rms_backward<T>(fwd.final_hidden.row(i), model.final_norm.row(0), fwd.final_inv[i], dn, dh_mat.row(i));
        }
    }

    const T scale = T{1} / std::sqrt(static_cast<T>(dh));
    const T mse_coef = static_cast<T>(2.0 * weights.mse);
    for (std::size_t l = cfg.n_layers; l-- > 0;) {
        const auto& lw = model.layers[l];
        const auto& tp = fwd.tape[l];

        // FFN sub-block, residual included.
        Matrix<T> d_after(n, d);
        for (std::size_t i = 0; i < n; ++i) {
            const auto dy = dh_mat.row(i);
            Vector<T> dm(cfg.ffn_dim);
            vecmat_transposed<T>(dy, lw.w_down, dm);
            Vector<T> dg(cfg.ffn_dim), du(cfg.ffn_dim);
            for (std::size_t f = 0; f < cfg.ffn_dim; ++f) {
                const T g = tp.gate_pre(i, f);
                dg[f] = dm[f] * tp.up(i, f) * swish_derivative(g);
                du[f] = dm[f] * swish(g);
            }
            Vector<T> d_norm(d), tmp(d);
            vecmat_transposed<T>(dg, lw.w_gate, d_norm);
            vecmat_transposed<T>(du, lw.w_up, tmp);
            add_scaled<T>(d_norm, tmp, T{1});
            auto da = d_after.row(i);
            std::copy(dy.begin(), dy.end(), da.begin());
            rms_backward<T>(tp.after_attn.row(i), lw.ffn_norm.row(0), tp.ffn_inv[i], d_norm, da);
        }

        // Attention sub-block.
        Matrix<T> dx(n, d);
        Matrix<T> dq_rot(n, d);
        Matrix<T> dk_rot(n, dk);
        Matrix<T> d_kv_hat(n, w);
        for (std::size_t i = 0; i < n; ++i) {
            const auto da = d_after.row(i);
            std::copy(da.begin(), da.end(), dx.row(i).begin());
            Vector<T> d_heads(d);
            vecmat_transposed<T>(da, lw.wo, d_heads);
            const auto& probs = tp.probs[i];
            for (std::size_t hh = 0; hh < cfg.n_heads; ++hh) {
                const std::span<const T> g(d_heads.data() + hh * dh, dh);
                const auto p = probs.row(hh);
                Vector<T> dp(i + 1);
                T sum{};
                for (std::size_t j = 0; j <= i; ++j) {
                    const auto v = tp.kv_hat.row(j).subspan(dk + hh * dh, dh);
                    dp[j] = dot<T>(g, v);
                    sum += p[j] * dp[j];
                    add_scaled<T>(d_kv_hat.row(j).subspan(dk + hh * dh, dh), g, p[j]);
                }
                const auto q = tp.q_rot.row(i).subspan(hh * dh, dh);
                auto dq = dq_rot.row(i).subspan(hh * dh, dh);
                for (std::size_t j = 0; j <= i; ++j) {
                    const T ds = p[j] * (dp[j] - sum) * scale;
                    add_scaled<T>(dq, tp.keys_rot.row(j).subspan(hh * dh, dh), ds);
                    add_scaled<T>(dk_rot.row(j).subspan(hh * dh, dh), q, ds);
                }
            }
        }
        for (std::size_t j = 0; j < n; ++j) {
            auto dkr = dk_rot.row(j);
            rope_heads<T>(dkr, cfg, j, true);
            add_scaled<T>(d_kv_hat.row(j).first(dk), std::span<const T>(dkr), T{1});
        }

        Matrix<T> d_kv(n, w);
        if (tp.compressed) {
            const auto& cp = codec.at(l);
            auto& gp = grads.at(l);
            const auto& gt = fwd.ground_truth.layers[l];
            for (std::size_t i = 0; i < n; ++i) {
                auto row = d_kv_hat.row(i);
                const auto hat = tp.kv_hat.row(i);
                const auto ref = gt.row(i);
                for (std::size_t e = 0; e < w; ++e) row[e] += mse_coef * (hat[e] - ref[e]);
            }
            // Later tokens read earlier reconstructions through their
            // references, so walk backwards.
            for (std::size_t i = n; i-- > 0;) {
                const auto cg = codec_backward<T>(cp, tp.kv.row(i), tp.kv_bar.row(i), d_kv_hat.row(i), gp);
                add_scaled<T>(d_kv.row(i), cg.d_kv, T{1});
                const auto& refs = tp.ref_tokens[i];
                if (refs.empty()) continue;
                const T f = T{1} / static_cast<T>(refs.size());
                for (std::size_t r : refs) {
                    auto dst = tp.reference_mode == ReferenceMode::raw ? d_kv.row(r) : d_kv_hat.row(r);
                    add_scaled<T>(dst, cg.d_kv_bar, f);
                }
            }
        } else {
            d_kv = d_kv_hat;
        }

        for (std::size_t i = 0; i < n; ++i) {
            auto dq = dq_rot.row(i);
            rope_heads<T>(dq, cfg, i, true);
            Vector<T> dn(d), tmp(d);
            vecmat_transposed<T>(dq, lw.wq, dn);
            vecmat_transposed<T>(d_kv.row(i).first(dk), lw.wk, tmp);
            add_scaled<T>(dn, tmp, T{1});
            vecmat_transposed<T>(d_kv.row(i).subspan(dk, dk), lw.wv, tmp);
            add_scaled<T>(dn, tmp, T{1});
            rms_backward<T>(tp.input.row(i), lw.attn_norm.row(0), tp.attn_inv[i], dn, dx.row(i));
        }
        dh_mat = std::move(dx);
    }
    return grads;
}

double lr_schedule(std::size_t step, std::size_t total_steps, double warmup_fraction) {
    if (total_steps == 0) return 0.0;
    const double t = static_cast<double>(std::min(step, total_steps));
    const double total = static_cast<double>(total_steps);
    const double warm = warmup_fraction * total;
    if (t < warm) return t / warm;
    if (total <= warm) return 1.0;
    return (total - t) / (total - warm);
}

template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::size_t t,
                  double lr, const TrainConfig& config) {
    if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
        throw ShapeError("adamw_update: size mismatch");
    }
    const T b1 = static_cast<T>(config.beta1);
    const T b2 = static_cast<T>(config.beta2);
    const T c1 = T{1} - static_cast<T>(std::pow(config.beta1, static_cast<double>(t)));
    const T c2 = T{1} - static_cast<T>(std::pow(config.beta2, static_cast<double>(t)));
    const T eta = static_cast<T>(lr);
    const T decay = static_cast<T>(lr * config.weight_decay);
    const T eps = static_cast<T>(config.eps);
    for (std::size_t i = 0; i < param.size(); ++i) {
        m[i] = b1 * m[i] + (T{1} - b1) * grad[i];
        v[i] = b2 * v[i] + (T{1} - b2) * grad[i] * grad[i];
        const T m_hat = m[i] / c1;
        const T v_hat = v[i] / c2;
        param[i] = param[i] - decay * param[i] - eta * m_hat / (std::sqrt(v_hat) + eps);
    }
}

template <typename T>
void adamw_step(CodecBank<T>& params, const CodecBank<T>& grads, AdamWState<T>& state, std::size_t step_index,
                const TrainConfig& config) {
    std::vector<Matrix<T>*> ps;
    std::vector<const Matrix<T>*> gs;
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        if (!params.has(l)) continue;
        if (!grads.has(l) || grads.at(l).tensors.size() != params.at(l).tensors.size()) {
            throw ShapeError("adamw_step: gradient layout does not match parameters");
        }
        for (std::size_t i = 0; i < params.at(l).tensors.size(); ++i) {
            ps.push_back(&params.at(l).tensors[i]);
            gs.push_back(&grads.at(l).tensors[i]);
        }
    }
    if (state.m.empty()) {
        for (const auto* p : ps) {
            state.m.emplace_back(p->size(), T{});
            state.v.emplace_back(p->size(), T{});
        }
    }
    if (state.m.size() != ps.size()) throw ShapeError("adamw_step: optimizer state does not match parameters");
    const double lr = config.learning_rate * lr_schedule(step_index + 1, config.total_steps, config.warmup_fraction);
    state.step = step_index + 1;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        if (gs[i]->size() != ps[i]->size()) throw ShapeError("adamw_step: gradient shape mismatch");
        adamw_update<T>(ps[i]->flat(), gs[i]->flat(), state.m[i], state.v[i], state.step, lr, config);
    }
}

double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

template <typename T>
TrainResult<T> train(const ModelParams<T>& model, const CodecBank<T>& codec, const Corpus& corpus,
                     const TrainConfig& config) {
    config.validate();
    TrainResult<T> result;
    result.codec = codec;
    AdamWState<T> state;
    for (std::size_t step = 0; step < config.total_steps; ++step) {
        const auto& seq = corpus.at(step);
        if (seq.size() < config.seq_len) {
            throw InputError("corpus sequence " + std::to_string(step) + " shorter than seq_len");
        }
        const std::span<const Token> tokens(seq.data(), config.seq_len);
        const auto targets = tokens.subspan(1);
        const auto fwd = deltakv_forward(model, result.codec, tokens, config.compression);
        const auto loss = hybrid_loss(fwd.mse, fwd.logits, targets, config.weights);
        const auto grads = deltakv_backward(model, result.codec, fwd, targets, config.weights);

        TrainStepRecord rec;
        rec.step = step;
        rec.mse = static_cast<double>(loss.mse);
        rec.ntp = static_cast<double>(loss.ntp);
        rec.total = static_cast<double>(loss.total);
        rec.lr = config.learning_rate * lr_schedule(step + 1, config.total_steps, config.warmup_fraction);

        if (config.grad_mode == GradMode::finite_diff_check) {
            Rng rng(config.seed + step);
            const double h = std::is_same_v<T, double> ? 1e-5 : 1e-2;
            std::vector<std::size_t> compressed;
            for (std::size_t l = 0; l < result.codec.layers.size(); ++l) {
                if (result.codec.has(l)) compressed.push_back(l);
            }
            for (std::size_t s = 0; s < config.fd_samples && !compressed.empty(); ++s) {
                const std::size_t l = compressed[rng.below(compressed.size())];
                const std::size_t ti = rng.below(result.codec.at(l).tensors.size());
                const std::size_t e = rng.below(result.codec.at(l).tensors[ti].size());
                auto probe = result.codec;
                T& x = probe.at(l).tensors[ti].flat()[e];
                const T x0 = x;
                x = static_cast<T>(x0 + h);
                const auto fp = deltakv_forward(model, probe, tokens, config.compression);
                const double lp = static_cast<double>(hybrid_loss(fp.mse, fp.logits, targets, config.weights).total);
                x = static_cast<T>(x0 - h);
                const auto fm = deltakv_forward(model, probe, tokens, config.compression);
                const double lm = static_cast<double>(hybrid_loss(fm.mse, fm.logits, targets, config.weights).total);
                const double numeric = (lp - lm) / (2.0 * h);
                const double analytic = static_cast<double>(grads.at(l).tensors[ti].flat()[e]);
                rec.fd_max_rel_error = std::max(rec.fd_max_rel_error, relative_error(analytic, numeric, 1e-3));
            }
        }

        adamw_step(result.codec, grads, state, step, config);
        result.history.push_back(rec);
    }
    return result;
}

void write_loss_csv(const std::vector<TrainStepRecord>& history, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write " + path.string());
    out << "step,mse,ntp,total,lr\n";
    char buf[160];
    for (const auto& r : history) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g\n", r.step, r.mse, r.ntp, r.total, r.lr);
        out << buf;
    }
}

#define DELTAKV_INSTANTIATE_TRAINER(T)                                                                          \
    template DeltaKvForward<T> deltakv_forward(const ModelParams<T>&, const CodecBank<T>&, std::span<const Token>, \
                                               const CompressionSettings&);                                     \
    template LossBreakdown<T> hybrid_loss(T, const Matrix<T>&, std::span<const Token>, const LossWeights&);      \
    template CodecBank<T> deltakv_backward(const ModelParams<T>&, const CodecBank<T>&, const DeltaKvForward<T>&, \
                                           std::span<const Token>, const LossWeights&);                         \
    template void adamw_update(std::span<T>, std::span<const T>, std::span<T>, std::span<T>, std::size_t,       \
                               double, const TrainConfig&);                                                     \
    template void adamw_step(CodecBank<T>&, const CodecBank<T>&, AdamWState<T>&, std::size_t,                  \
                             const TrainConfig&);                                                               \
    template TrainResult<T> train(const ModelParams<T>&, const CodecBank<T>&, const Corpus&, const TrainConfig&);

DELTAKV_INSTANTIATE_TRAINER(float)
DELTAKV_INSTANTIATE_TRAINER(double)

}  // namespace deltakv
