#include "deltakv/model.hpp"

#include <cmath>
#include <cstring>

#include "deltakv/container.hpp"
#include "deltakv/rng.hpp"
#include "json.hpp"

namespace deltakv {

void ModelConfig::validate() const {
    if (n_layers == 0 || n_heads == 0 || head_dim == 0 || vocab == 0 || max_seq == 0 || ffn_dim == 0) {
        throw ConfigError("ModelConfig: all counts must be >= 1");
    }
    if (head_dim % 2 != 0) throw ShapeError("ModelConfig: head_dim must be even for RoPE");
    if (!(rope_base > 0.0)) throw ConfigError("ModelConfig: rope_base must be positive");
}

std::string model_config_to_json(const ModelConfig& c) {
    nlohmann::json j = {{"n_layers", c.n_layers}, {"n_heads", c.n_heads}, {"head_dim", c.head_dim},
                        {"vocab", c.vocab},       {"max_seq", c.max_seq}, {"ffn_dim", c.ffn_dim},
                        {"rope_base", c.rope_base}, {"norm_eps", c.norm_eps}};
    return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    ModelConfig c;
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.head_dim = j.value("head_dim", c.head_dim);
    c.vocab = j.value("vocab", c.vocab);
    c.max_seq = j.value("max_seq", c.max_seq);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.rope_base = j.value("rope_base", c.rope_base);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
    c.validate();
    return c;
}

template <typename T>
std::vector<std::pair<std::string, const Matrix<T>*>> ModelParams<T>::named_tensors() const {
    std::vector<std::pair<std::string, const Matrix<T>*>> out;
    out.emplace_back("embedding", &embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& w = layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        out.emplace_back(p + "attn_norm", &w.attn_norm);
        out.emplace_back(p + "wq", &w.wq);
        out.emplace_back(p + "wk", &w.wk);
        out.emplace_back(p + "wv", &w.wv);
        out.emplace_back(p + "wo", &w.wo);
        out.emplace_back(p + "ffn_norm", &w.ffn_norm);
        out.emplace_back(p + "w_gate", &w.w_gate);
        out.emplace_back(p + "w_up", &w.w_up);
        out.emplace_back(p + "w_down", &w.w_down);
    }
    out.emplace_back("final_norm", &final_norm);
    out.emplace_back("lm_head", &lm_head);
    return out;
}

template <typename T>
std::vector<std::pair<std::string, Matrix<T>*>> ModelParams<T>::named_tensors() {
    std::vector<std::pair<std::string, Matrix<T>*>> out;
    for (auto& [name, ptr] : std::as_const(*this).named_tensors()) {
        out.emplace_back(name, const_cast<Matrix<T>*>(ptr));
    }
    return out;
}

template <typename T>
std::uint64_t ModelParams<T>::checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& [name, m] : named_tensors()) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(m->flat().data());
        for (std::size_t i = 0; i < m->size() * sizeof(T); ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    }
    return h;
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
    ModelParams<U> out;
    out.config = config;
    out.seed = seed;
    out.embedding = embedding.template cast<U>();
    for (const auto& w : layers) {
        LayerWeights<U> c;
        c.attn_norm = w.attn_norm.template cast<U>();
        c.wq = w.wq.template cast<U>();
        c.wk = w.wk.template cast<U>();
        c.wv = w.wv.template cast<U>();
        c.wo = w.wo.template cast<U>();
        c.ffn_norm = w.ffn_norm.template cast<U>();
        c.w_gate = w.w_gate.template cast<U>();
        c.w_up = w.w_up.template cast<U>();
        c.w_down = w.w_down.template cast<U>();
        out.layers.push_back(std::move(c));
    }
    out.final_norm = final_norm.template cast<U>();
    out.lm_head = lm_head.template cast<U>();
    return out;
}

namespace {

template <typename T>
Matrix<T> uniform_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
    const double bound = std::sqrt(6.0 / static_cast<double>(rows));
    Matrix<T> m(rows, cols);
    for (T& v : m.flat()) v = static_cast<T>(rng.uniform(-bound, bound));
    return m;
}

}  // namespace

template <typename T>
ModelParams<T> init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    const std::size_t d = config.hidden();
    ModelParams<T> p;
    p.config = config;
    p.seed = seed;
    p.embedding = uniform_matrix<T>(rng, config.vocab, d);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        LayerWeights<T> w;
        w.attn_norm = Matrix<T>(1, d, T{1});
        w.wq = uniform_matrix<T>(rng, d, d);
        w.wk = uniform_matrix<T>(rng, d, config.kv_dim());
        w.wv = uniform_matrix<T>(rng, d, config.kv_dim());
        w.wo = uniform_matrix<T>(rng, d, d);
        w.ffn_norm = Matrix<T>(1, d, T{1});
        w.w_gate = uniform_matrix<T>(rng, d, config.ffn_dim);
        w.w_up = uniform_matrix<T>(rng, d, config.ffn_dim);
        w.w_down = uniform_matrix<T>(rng, config.ffn_dim, d);
        p.layers.push_back(std::move(w));
    }
    p.final_norm = Matrix<T>(1, d, T{1});
    p.lm_head = uniform_matrix<T>(rng, d, config.vocab);
    return p;
}

template <typename T>
void apply_rope(std::span<T> head, std::size_t position, double base) {
    if (head.size() % 2 != 0) throw ShapeError("apply_rope: head_dim must be even");
    const double dim = static_cast<double>(head.size());
    for (std::size_t i = 0; i < head.size() / 2; ++i) {
        const double freq = std::pow(base, -2.0 * static_cast<double>(i) / dim);
        const double angle = static_cast<double>(position) * freq;
        const T c = static_cast<T>(std::cos(angle));
        const T s = static_cast<T>(std::sin(angle));
        const T x = head[2 * i];
        const T y = head[2 * i + 1];
        head[2 * i] = x * c - y * s;
        head[2 * i + 1] = x * s + y * c;
    }
}

template <typename T>
void apply_rope_inverse(std::span<T> head, std::size_t position, double base) {
    if (head.size() % 2 != 0) throw ShapeError("apply_rope_inverse: head_dim must be even");
    const double dim = static_cast<double>(head.size());
    for (std::size_t i = 0; i < head.size() / 2; ++i) {
        const double freq = std::pow(base, -2.0 * static_cast<double>(i) / dim);
        const double angle = static_cast<double>(position) * freq;
        const T c = static_cast<T>(std::cos(angle));
        const T s = static_cast<T>(std::sin(angle));
        const T x = head[2 * i];
        const T y = head[2 * i + 1];
        head[2 * i] = x * c + y * s;
        head[2 * i + 1] = -x * s + y * c;
    }
}

template <typename T>
void rope_heads(std::span<T> v, const ModelConfig& config, std::size_t position, bool inverse) {
    if (v.size() != config.n_heads * config.head_dim) throw ShapeError("rope_heads: width mismatch");
    for (std::size_t h = 0; h < config.n_heads; ++h) {
        auto head = v.subspan(h * config.head_dim, config.head_dim);
        if (inverse) {
            apply_rope_inverse<T>(head, position, config.rope_base);
        } else {
            apply_rope<T>(head, position, config.rope_base);
        }
    }
}

template <typename T>
T rms_norm(std::span<const T> x, std::span<const T> gain, double eps, std::span<T> out) {
    if (x.size() != gain.size() || x.size() != out.size()) throw ShapeError("rms_norm: width mismatch");
    T ms{};
    for (T v : x) ms += v * v;
    ms /= static_cast<T>(x.size());
    const T inv = T{1} / std::sqrt(ms + static_cast<T>(eps));
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
    return inv;
}

template <typename T>
QkvProjection<T> project_qkv(const ModelParams<T>& params, std::size_t layer, std::span<const T> h) {
    const auto& cfg = params.config;
    const auto& w = params.layers.at(layer);
    QkvProjection<T> p;
    p.normed.resize(cfg.hidden());
    rms_norm<T>(h, w.attn_norm.row(0), cfg.norm_eps, p.normed);
    p.q = vecmat<T>(p.normed, w.wq);
    p.kv.resize(cfg.kv_width());
    std::span<T> kv(p.kv);
    vecmat<T>(p.normed, w.wk, kv.first(cfg.kv_dim()));
    vecmat<T>(p.normed, w.wv, kv.last(cfg.kv_dim()));
    return p;
}

template <typename T>
void attend(const ModelConfig& config, std::span<const T> q_rot, const AttentionRows<T>& rows, std::span<T> out,
            Matrix<T>* probs) {
    const std::size_t n = rows.size();
    const std::size_t dh = config.head_dim;
    if (n == 0) throw ShapeError("attend: no keys");
    if (q_rot.size() != config.hidden() || out.size() != config.hidden()) throw ShapeError("attend: width mismatch");
    if (probs != nullptr) *probs = Matrix<T>(config.n_heads, n);
    const T scale = T{1} / std::sqrt(static_cast<T>(dh));
    std::vector<T> weights(n);
    for (std::size_t h = 0; h < config.n_heads; ++h) {
        const auto q = q_rot.subspan(h * dh, dh);
        for (std::size_t j = 0; j < n; ++j) weights[j] = dot<T>(q, rows.keys[j].subspan(h * dh, dh)) * scale;
        softmax_inplace<T>(weights);
        auto o = out.subspan(h * dh, dh);
        std::fill(o.begin(), o.end(), T{});
        for (std::size_t j = 0; j < n; ++j) {
            const auto v = rows.values[j].subspan(h * dh, dh);
            for (std::size_t e = 0; e < dh; ++e) o[e] += weights[j] * v[e];
        }
        if (probs != nullptr) std::copy(weights.begin(), weights.end(), probs->row(h).begin());
    }
}

template <typename T>
void attention_block(const ModelParams<T>& params, std::size_t layer, std::span<const T> q_rot,
                     const AttentionRows<T>& rows, std::span<T> h, Matrix<T>* probs) {
    const auto& cfg = params.config;
    std::vector<T> heads(cfg.hidden());
    attend<T>(cfg, q_rot, rows, heads, probs);
    std::vector<T> proj(cfg.hidden());
    vecmat<T>(heads, params.layers[layer].wo, proj);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += proj[i];
}

template <typename T>
void ffn_block(const ModelParams<T>& params, std::size_t layer, std::span<T> h) {
    const auto& cfg = params.config;
    const auto& w = params.layers[layer];
    std::vector<T> x(cfg.hidden());
    rms_norm<T>(h, w.ffn_norm.row(0), cfg.norm_eps, x);
    auto gate = vecmat<T>(x, w.w_gate);
    const auto up = vecmat<T>(x, w.w_up);
    for (std::size_t i = 0; i < gate.size(); ++i) gate[i] = swish(gate[i]) * up[i];
    std::vector<T> down(cfg.hidden());
    vecmat<T>(gate, w.w_down, down);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += down[i];
}

template <typename T>
Vector<T> lm_logits(const ModelParams<T>& params, std::span<const T> h) {
    std::vector<T> x(params.config.hidden());
    rms_norm<T>(h, params.final_norm.row(0), params.config.norm_eps, x);
    return vecmat<T>(x, params.lm_head);
}

void check_tokens(const ModelConfig& config, std::span<const Token> tokens) {
    if (tokens.empty()) throw InputError("empty token sequence");
    if (tokens.size() > config.max_seq) {
        throw InputError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq " +
                         std::to_string(config.max_seq));
    }
    for (Token t : tokens) {
        if (t >= config.vocab) throw InputError("token id " + std::to_string(t) + " out of vocabulary");
    }
}

template <typename T>
ForwardResult<T> chunk_prefill(const ModelParams<T>& params, std::span<const Token> tokens, std::size_t chunk_len) {
    if (chunk_len == 0) throw InputError("chunk_prefill: chunk_len must be >= 1");
    const auto& cfg = params.config;
    check_tokens(cfg, tokens);
    const std::size_t n = tokens.size();
    const std::size_t d = cfg.hidden();
    const std::size_t dk = cfg.kv_dim();

    ForwardResult<T> result;
    result.logits = Matrix<T>(n, cfg.vocab);
    result.trace.layers.assign(cfg.n_layers, Matrix<T>(n, cfg.kv_width()));
    // Post-RoPE keys and values per layer; rows fill in as chunks complete.
    std::vector<Matrix<T>> keys(cfg.n_layers, Matrix<T>(n, dk));
    std::vector<Matrix<T>> values(cfg.n_layers, Matrix<T>(n, dk));

    for (std::size_t begin = 0; begin < n; begin += chunk_len) {
        const std::size_t end = std::min(n, begin + chunk_len);
        Matrix<T> h(end - begin, d);
        for (std::size_t t = begin; t < end; ++t) {
            const auto e = params.embedding.row(tokens[t]);
            std::copy(e.begin(), e.end(), h.row(t - begin).begin());
        }
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            Matrix<T> q_rot(end - begin, d);
            for (std::size_t t = begin; t < end; ++t) {
                auto proj = project_qkv(params, l, std::span<const T>(h.row(t - begin)));
                std::copy(proj.kv.begin(), proj.kv.end(), result.trace.layers[l].row(t).begin());
                auto k = keys[l].row(t);
                std::copy(proj.kv.begin(), proj.kv.begin() + dk, k.begin());
                rope_heads<T>(k, cfg, t);
                std::copy(proj.kv.begin() + dk, proj.kv.end(), values[l].row(t).begin());
                rope_heads<T>(proj.q, cfg, t);
                std::copy(proj.q.begin(), proj.q.end(), q_rot.row(t - begin).begin());
            }
            for (std::size_t t = begin; t < end; ++t) {
                AttentionRows<T> rows;
                rows.reserve(t + 1);
                for (std::size_t j = 0; j <= t; ++j) rows.push(keys[l].row(j), values[l].row(j));
                auto hr = h.row(t - begin);
                attention_block<T>(params, l, q_rot.row(t - begin), rows, hr);
                ffn_block<T>(params, l, hr);
            }
        }
        for (std::size_t t = begin; t < end; ++t) {
            const auto logits = lm_logits<T>(params, h.row(t - begin));
            std::copy(logits.begin(), logits.end(), result.logits.row(t).begin());
        }
    }
    return result;
}

template <typename T>
ForwardResult<T> dense_forward(const ModelParams<T>& params, std::span<const Token> tokens) {
    return chunk_prefill(params, tokens, std::max<std::size_t>(tokens.size(), 1));
}

template <typename T>
T ntp_loss(const Matrix<T>& logits, std::span<const Token> targets) {
    if (logits.rows() != targets.size()) throw ShapeError("ntp_loss: one target per logits row required");
    if (targets.empty()) throw ShapeError("ntp_loss: no positions");
    T total{};
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const auto row = logits.row(i);
        if (targets[i] >= row.size()) throw InputError("ntp_loss: target out of range");
        const T mx = *std::max_element(row.begin(), row.end());
        T sum{};
        for (T v : row) sum += std::exp(v - mx);
        total += (mx + std::log(sum)) - row[targets[i]];
    }
    return total / static_cast<T>(logits.rows());
}

template <typename T>
void save_model(const ModelParams<T>& params, const std::filesystem::path& path) {
    Container c;
    c.kind = "model";
    nlohmann::json meta;
    meta["config"] = nlohmann::json::parse(model_config_to_json(params.config));
    meta["seed"] = params.seed;
    c.metadata_json = meta.dump();
    for (const auto& [name, m] : params.named_tensors()) {
        c.tensors.push_back({name, {m->rows(), m->cols()}, std::vector<float>(m->flat().begin(), m->flat().end())});
    }
    write_container_file(c, path);
}

template <typename T>
ModelParams<T> load_model(const std::filesystem::path& path) {
    const Container c = read_container_file(path);
    if (c.kind != "model") throw InputError("load_model: container kind is '" + c.kind + "'");
    const auto meta = nlohmann::json::parse(c.metadata_json);
    ModelParams<T> p = init_model<T>(model_config_from_json(meta.at("config").dump()), 0);
    p.seed = meta.value("seed", std::uint64_t{0});
    for (auto& [name, m] : p.named_tensors()) {
        const auto& t = c.find(name);
        if (t.shape.size() != 2 || t.shape[0] != m->rows() || t.shape[1] != m->cols()) {
            throw ShapeError("load_model: tensor '" + name + "' has unexpected shape");
        }
        std::copy(t.data.begin(), t.data.end(), m->flat().begin());
    }
    return p;
}

#define DELTAKV_INSTANTIATE_MODEL(T)                                                                        \
    template struct ModelParams<T>;                                                                          \
    template ModelParams<T> init_model(const ModelConfig&, std::uint64_t);                                   \
    template void apply_rope(std::span<T>, std::size_t, double);                                             \
    template void apply_rope_inverse(std::span<T>, std::size_t, double);                                     \
    template void rope_heads(std::span<T>, const ModelConfig&, std::size_t, bool);                           \
    template T rms_norm(std::span<const T>, std::span<const T>, double, std::span<T>);                       \
    template QkvProjection<T> project_qkv(const ModelParams<T>&, std::size_t, std::span<const T>);           \
    template void attend(const ModelConfig&, std::span<const T>, const AttentionRows<T>&, std::span<T>,      \
                         Matrix<T>*);                                                                        \
    template void attention_block(const ModelParams<T>&, std::size_t, std::span<const T>,                    \
                                  const AttentionRows<T>&, std::span<T>, Matrix<T>*);                        \
    template void ffn_block(const ModelParams<T>&, std::size_t, std::span<T>);                               \
    template Vector<T> lm_logits(const ModelParams<T>&, std::span<const T>);                                 \
    template ForwardResult<T> dense_forward(const ModelParams<T>&, std::span<const Token>);                  \
    template ForwardResult<T> chunk_prefill(const ModelParams<T>&, std::span<const Token>, std::size_t);     \
    template T ntp_loss(const Matrix<T>&, std::span<const Token>);                                           \
    template void save_model(const ModelParams<T>&, const std::filesystem::path&);                           \
    template ModelParams<T> load_model(const std::filesystem::path&);

DELTAKV_INSTANTIATE_MODEL(float)
DELTAKV_INSTANTIATE_MODEL(double)

template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;
template ModelParams<float> ModelParams<float>::cast<float>() const;
template ModelParams<double> ModelParams<double>::cast<double>() const;

}  // namespace deltakv
