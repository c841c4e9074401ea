#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "deltakv/codec.hpp"
#include "deltakv/corpus.hpp"
#include "deltakv/model.hpp"

namespace deltakv {

// What a reference entry stores: the codec's reconstruction (training
// default) or the raw pre-RoPE state (inference default).
enum class ReferenceMode { reconstructed, raw };

std::string to_string(ReferenceMode m);
ReferenceMode reference_mode_from_string(const std::string& s);

struct CompressionSettings {
    std::size_t stride = 10;
    std::size_t top_k = 4;
    std::vector<std::size_t> filter_layers;  // run uncompressed
    ReferenceMode reference_mode = ReferenceMode::reconstructed;

    bool is_filter(std::size_t layer) const;
    void validate(std::size_t n_layers) const;
};

struct LossWeights {
    double mse = 1.0;
    double ntp = 1.0;
};

template <typename T>
struct LossBreakdown {
    T mse{};
    T ntp{};
    T total{};
};

// Per-layer activations kept for the reverse pass. Rows are tokens.
template <typename T>
struct LayerTape {
    bool compressed = false;
    ReferenceMode reference_mode = ReferenceMode::reconstructed;
    Matrix<T> input;       // h entering the layer
    std::vector<T> attn_inv;  // rms scale of the attention norm
    Matrix<T> normed;
    Matrix<T> q_rot;
    Matrix<T> kv;          // pre-RoPE projection of the current pass
    Matrix<T> kv_bar;      // mean reference (compressed layers)
    Matrix<T> kv_hat;      // state attention actually reads
    Matrix<T> keys_rot;
    std::vector<std::vector<std::size_t>> ref_tokens;  // retrieved token indices per row
    std::vector<Matrix<T>> probs;  // n_heads x (i+1) per row
    Matrix<T> heads;       // attention output before W_o
    Matrix<T> after_attn;
    std::vector<T> ffn_inv;
    Matrix<T> ffn_normed;
    Matrix<T> gate_pre;
    Matrix<T> up;
};

template <typename T>
struct DeltaKvForward {
    Matrix<T> logits;
    T mse{};
    KvTrace<T> reconstructed;  // kv_hat per layer
    std::vector<LayerTape<T>> tape;
    Matrix<T> final_hidden;
    std::vector<T> final_inv;
    Matrix<T> final_normed;
    KvTrace<T> ground_truth;
};

// Layer-by-layer pass in which every layer attends over reconstructed KV.
// Compressed layers retrieve, compress and reconstruct token by token and
// accumulate the squared error against the dense forward's trace.
template <typename T>
DeltaKvForward<T> deltakv_forward(const ModelParams<T>& model, const CodecBank<T>& codec,
                                  std::span<const Token> tokens, const CompressionSettings& settings);

// ntp uses the leading targets.size() logits rows; empty targets give ntp = 0.
template <typename T>
LossBreakdown<T> hybrid_loss(T mse, const Matrix<T>& logits, std::span<const Token> targets,
                             const LossWeights& weights = {});

// Reverse pass of weights.mse * mse + weights.ntp * ntp with respect to the
// codec parameters, back through the frozen model layers.
template <typename T>
CodecBank<T> deltakv_backward(const ModelParams<T>& model, const CodecBank<T>& codec, const DeltaKvForward<T>& fwd,
                              std::span<const Token> targets, const LossWeights& weights = {});

enum class GradMode { analytic, finite_diff_check };

struct TrainConfig {
    double learning_rate = 2e-4;
    double warmup_fraction = 0.02;
    std::size_t total_steps = 100;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    std::size_t seq_len = 64;
    std::uint64_t seed = 0;
    GradMode grad_mode = GradMode::analytic;
    std::size_t fd_samples = 8;  // coordinates probed per step in finite_diff_check mode
    LossWeights weights;
    CompressionSettings compression;

    void validate() const;
};

// Linear warmup to 1 over warmup_fraction * total_steps, then linear decay
// to 0 at the final step. `step` counts from 1.
double lr_schedule(std::size_t step, std::size_t total_steps, double warmup_fraction);

template <typename T>
struct AdamWState {
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    std::size_t step = 0;
};

// One decoupled-weight-decay AdamW update of a flat parameter block; `t`
// is the 1-based step used for bias correction.
template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, std::size_t t,
                  double lr, const TrainConfig& config);

// Updates every codec tensor; lr = learning_rate * lr_schedule(step_index + 1).
template <typename T>
void adamw_step(CodecBank<T>& params, const CodecBank<T>& grads, AdamWState<T>& state, std::size_t step_index,
                const TrainConfig& config);

struct TrainStepRecord {
    std::size_t step = 0;
    double mse = 0.0;
    double ntp = 0.0;
    double total = 0.0;
    double lr = 0.0;
    double fd_max_rel_error = 0.0;  // finite_diff_check mode only
};

template <typename T>
struct TrainResult {
    CodecBank<T> codec;
    std::vector<TrainStepRecord> history;
};

// Batch size 1; step i consumes corpus sequence i truncated to seq_len.
template <typename T>
TrainResult<T> train(const ModelParams<T>& model, const CodecBank<T>& codec, const Corpus& corpus,
                     const TrainConfig& config);

void write_loss_csv(const std::vector<TrainStepRecord>& history, const std::filesystem::path& path);

// Relative error |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor);

}  // namespace deltakv
