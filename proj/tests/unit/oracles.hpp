#pragma once

// Naive reference implementations used as test oracles. They only read
// parameters and never call the library's math.

#include <cmath>
#include <functional>
#include <vector>

#include "deltakv/codec.hpp"
#include "deltakv/model.hpp"

namespace deltakv::testing {

using Vec = std::vector<double>;

template <typename T>
Vec row_times(const Vec& x, const Matrix<T>& w) {
    Vec y(w.cols(), 0.0);
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) y[j] += x[i] * static_cast<double>(w(i, j));
    return y;
}

template <typename T>
Vec add_bias(Vec x, const Matrix<T>& b) {
    for (std::size_t j = 0; j < x.size(); ++j) x[j] += static_cast<double>(b(0, j));
    return x;
}

inline double oracle_gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
inline double oracle_swish(double x) { return x / (1.0 + std::exp(-x)); }

template <typename T>
Vec oracle_fc(const CodecParams<T>& p, const Vec& x) {
    const auto& t = p.tensors;
    switch (p.config.variant) {
        case CodecVariant::heavy: {
            Vec h = add_bias(row_times(x, t[0]), t[1]);
            for (double& v : h) v = oracle_gelu(v);
            return add_bias(row_times(h, t[2]), t[3]);
        }
        case CodecVariant::light: {
            Vec a = row_times(x, t[0]);
            Vec b = row_times(x, t[1]);
            for (std::size_t i = 0; i < a.size(); ++i) a[i] = oracle_swish(a[i]) * b[i];
            return row_times(a, t[2]);
        }
        case CodecVariant::identity_linear:
            return row_times(x, t[0]);
    }
    return {};
}

template <typename T>
Vec oracle_fd(const CodecParams<T>& p, const Vec& z) {
    const auto& t = p.tensors;
    switch (p.config.variant) {
        case CodecVariant::heavy: {
            Vec h = add_bias(row_times(z, t[4]), t[5]);
            for (double& v : h) v = oracle_gelu(v);
            return add_bias(row_times(h, t[6]), t[7]);
        }
        case CodecVariant::light:
            return row_times(z, t[3]);
        case CodecVariant::identity_linear:
            return row_times(z, t[1]);
    }
    return {};
}

template <typename T>
Vec oracle_reconstruct(const CodecParams<T>& p, const Vec& kv, const Vec& kv_bar) {
    Vec a = oracle_fc(p, kv);
    const Vec b = oracle_fc(p, kv_bar);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] -= b[i];
    Vec out = oracle_fd(p, a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += kv_bar[i];
    return out;
}

inline Vec oracle_rms(const Vec& x, const Vec& gain, double eps) {
    double ms = 0.0;
    for (double v : x) ms += v * v;
    ms /= static_cast<double>(x.size());
    Vec y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] / std::sqrt(ms + eps) * gain[i];
    return y;
}

inline void oracle_rope(double* head, std::size_t dim, std::size_t pos, double base) {
    for (std::size_t i = 0; i < dim / 2; ++i) {
        const double a = static_cast<double>(pos) * std::pow(base, -2.0 * static_cast<double>(i) / dim);
        const double x = head[2 * i], y = head[2 * i + 1];
        head[2 * i] = x * std::cos(a) - y * std::sin(a);
        head[2 * i + 1] = x * std::sin(a) + y * std::cos(a);
    }
}

template <typename T>
Vec gain_of(const Matrix<T>& g) {
    return Vec(g.flat().begin(), g.flat().end());
}

struct OracleForward {
    std::vector<Vec> logits;
    std::vector<std::vector<Vec>> kv;      // raw pre-RoPE kv per layer per token
    std::vector<std::vector<Vec>> kv_used;  // what attention read
};

// Replaces the raw kv of (layer, token) with the state attention reads;
// `used` holds earlier tokens' replaced states of the same layer.
using KvHook = std::function<Vec(std::size_t layer, std::size_t token, const Vec& raw, const std::vector<Vec>& used)>;

template <typename T>
OracleForward oracle_forward(const ModelParams<T>& m, const std::vector<Token>& tokens, const KvHook& hook = {}) {
    const auto& c = m.config;
    const std::size_t n = tokens.size(), d = c.hidden(), dk = c.kv_dim(), hd = c.head_dim;
    OracleForward out;
    std::vector<Vec> h(n);
    for (std::size_t i = 0; i < n; ++i) {
        h[i] = Vec(m.embedding.row(tokens[i]).begin(), m.embedding.row(tokens[i]).end());
    }
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const auto& w = m.layers[l];
        std::vector<Vec> q(n), raw(n), used;
        for (std::size_t i = 0; i < n; ++i) {
            const Vec x = oracle_rms(h[i], gain_of(w.attn_norm), c.norm_eps);
            q[i] = row_times(x, w.wq);
            Vec k = row_times(x, w.wk), v = row_times(x, w.wv);
            raw[i] = k;
            raw[i].insert(raw[i].end(), v.begin(), v.end());
            used.push_back(hook ? hook(l, i, raw[i], used) : raw[i]);
        }
        for (std::size_t i = 0; i < n; ++i) {
            Vec qi = q[i];
            for (std::size_t hh = 0; hh < c.n_heads; ++hh) oracle_rope(qi.data() + hh * hd, hd, i, c.rope_base);
            Vec heads(d, 0.0);
            for (std::size_t hh = 0; hh < c.n_heads; ++hh) {
                Vec s(i + 1);
                double mx = -1e300;
                for (std::size_t j = 0; j <= i; ++j) {
                    Vec kj(used[j].begin() + hh * hd, used[j].begin() + (hh + 1) * hd);
                    oracle_rope(kj.data(), hd, j, c.rope_base);
                    double dotp = 0.0;
                    for (std::size_t e = 0; e < hd; ++e) dotp += qi[hh * hd + e] * kj[e];
                    s[j] = dotp / std::sqrt(static_cast<double>(hd));
                    mx = std::max(mx, s[j]);
                }
                double z = 0.0;
                for (double& v : s) z += (v = std::exp(v - mx));
                for (std::size_t j = 0; j <= i; ++j)
                    for (std::size_t e = 0; e < hd; ++e) heads[hh * hd + e] += s[j] / z * used[j][dk + hh * hd + e];
            }
            const Vec o = row_times(heads, w.wo);
            for (std::size_t e = 0; e < d; ++e) h[i][e] += o[e];
            const Vec x = oracle_rms(h[i], gain_of(w.ffn_norm), c.norm_eps);
            Vec g = row_times(x, w.w_gate);
            const Vec u = row_times(x, w.w_up);
            for (std::size_t e = 0; e < g.size(); ++e) g[e] = oracle_swish(g[e]) * u[e];
            const Vec down = row_times(g, w.w_down);
            for (std::size_t e = 0; e < d; ++e) h[i][e] += down[e];
        }
        out.kv.push_back(raw);
        out.kv_used.push_back(used);
    }
    for (std::size_t i = 0; i < n; ++i) {
        out.logits.push_back(row_times(oracle_rms(h[i], gain_of(m.final_norm), c.norm_eps), m.lm_head));
    }
    return out;
}

}  // namespace deltakv::testing
