#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "deltakv/tensor.hpp"

namespace deltakv {

using Token = std::uint32_t;

// Decoder-only transformer geometry. Queries, keys and values share the
// head layout, so d_q = d_k = d_v = n_heads * head_dim.
struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t n_heads = 2;
    std::size_t head_dim = 8;
    std::size_t vocab = 256;
    std::size_t max_seq = 128;
    std::size_t ffn_dim = 32;
    double rope_base = 10000.0;
    double norm_eps = 1e-5;

    std::size_t hidden() const { return n_heads * head_dim; }
    std::size_t kv_dim() const { return n_heads * head_dim; }
    // Width of one token's concatenated [K | V] state.
    std::size_t kv_width() const { return 2 * kv_dim(); }

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

template <typename T>
struct LayerWeights {
    Matrix<T> attn_norm;  // 1 x d
    Matrix<T> wq, wk, wv, wo;
    Matrix<T> ffn_norm;  // 1 x d
    Matrix<T> w_gate, w_up, w_down;
};

template <typename T>
struct ModelParams {
    ModelConfig config;
    std::uint64_t seed = 0;
    Matrix<T> embedding;  // vocab x d
    std::vector<LayerWeights<T>> layers;
    Matrix<T> final_norm;  // 1 x d
    Matrix<T> lm_head;     // d x vocab

    std::vector<std::pair<std::string, const Matrix<T>*>> named_tensors() const;
    std::vector<std::pair<std::string, Matrix<T>*>> named_tensors();

    // FNV-1a over every tensor's bytes, in named_tensors() order.
    std::uint64_t checksum() const;

    template <typename U>
    ModelParams<U> cast() const;
};

// Pre-RoPE [K | V] state per layer, one row per processed token.
template <typename T>
struct KvTrace {
    std::vector<Matrix<T>> layers;

    std::size_t tokens() const { return layers.empty() ? 0 : layers.front().rows(); }
};

template <typename T>
struct ForwardResult {
    Matrix<T> logits;  // seq x vocab
    KvTrace<T> trace;
};

// Uniform +-sqrt(6/fan_in) for every matrix (fan_in = rows); norm gains are 1.
template <typename T>
ModelParams<T> init_model(const ModelConfig& config, std::uint64_t seed);

// Rotary embedding on one head (consecutive pairs, frequencies base^(-2i/D)).
template <typename T>
void apply_rope(std::span<T> head, std::size_t position, double base);

template <typename T>
void apply_rope_inverse(std::span<T> head, std::size_t position, double base);

// Applies RoPE to every head of a [n_heads * head_dim] vector.
template <typename T>
void rope_heads(std::span<T> v, const ModelConfig& config, std::size_t position, bool inverse = false);

template <typename T>
T rms_norm(std::span<const T> x, std::span<const T> gain, double eps, std::span<T> out);

template <typename T>
struct QkvProjection {
    Vector<T> normed;
    Vector<T> q;   // pre-RoPE
    Vector<T> kv;  // pre-RoPE [K | V]
};

template <typename T>
QkvProjection<T> project_qkv(const ModelParams<T>& params, std::size_t layer, std::span<const T> h);

// Keys are post-RoPE K rows (kv_dim wide), values are V rows.
template <typename T>
struct AttentionRows {
    std::vector<std::span<const T>> keys;
    std::vector<std::span<const T>> values;

    void reserve(std::size_t n) {
        keys.reserve(n);
        values.reserve(n);
    }
    void push(std::span<const T> k, std::span<const T> v) {
        keys.push_back(k);
        values.push_back(v);
    }
    std::size_t size() const { return keys.size(); }
};

// Scaled dot-product attention of one RoPE'd query over `rows`; writes the
// concatenated head outputs to `out`. If `probs` is given it receives the
// n_heads x rows.size() post-softmax weights.
template <typename T>
void attend(const ModelConfig& config, std::span<const T> q_rot, const AttentionRows<T>& rows, std::span<T> out,
            Matrix<T>* probs = nullptr);

// h += attend(...) * W_o
template <typename T>
void attention_block(const ModelParams<T>& params, std::size_t layer, std::span<const T> q_rot,
                     const AttentionRows<T>& rows, std::span<T> h, Matrix<T>* probs = nullptr);

// h += SwiGLU(RMSNorm(h))
template <typename T>
void ffn_block(const ModelParams<T>& params, std::size_t layer, std::span<T> h);

template <typename T>
Vector<T> lm_logits(const ModelParams<T>& params, std::span<const T> h);

// Throws InputError for empty input, out-of-vocab ids or overlong sequences.
void check_tokens(const ModelConfig& config, std::span<const Token> tokens);

template <typename T>
ForwardResult<T> dense_forward(const ModelParams<T>& params, std::span<const Token> tokens);

template <typename T>
ForwardResult<T> chunk_prefill(const ModelParams<T>& params, std::span<const Token> tokens, std::size_t chunk_len);

// Mean next-token cross-entropy (natural log), one target per logits row.
template <typename T>
T ntp_loss(const Matrix<T>& logits, std::span<const Token> targets);

template <typename T>
void save_model(const ModelParams<T>& params, const std::filesystem::path& path);

template <typename T>
ModelParams<T> load_model(const std::filesystem::path& path);

}  // namespace deltakv
