#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deltakv/cache_manager.hpp"
#include "deltakv/codec.hpp"
#include "deltakv/model.hpp"
#include "deltakv/ratios.hpp"

namespace deltakv {

struct ControllerConfig {
    std::vector<std::size_t> filter_layers{0};
    double budget_ratio = 1.0;  // r
    std::size_t stride = 10;
    std::size_t k_refs = 4;
    std::size_t n_sink = 4;
    std::size_t n_recent = 32;
    bool quantize_latent = false;
    CodecVariant codec_variant = CodecVariant::heavy;
    SlotMapVariant slot_map = SlotMapVariant::per_layer;
    std::size_t full_capacity = 0;    // 0: sized from the model's max_seq
    std::size_t latent_capacity = 0;

    bool is_filter(std::size_t layer) const;
    void validate(std::size_t n_layers) const;
};

struct EngineConfig {
    ModelConfig model;
    CodecConfig codec;
    ControllerConfig controller;
};

std::string controller_config_to_json(const ControllerConfig& c);
ControllerConfig controller_config_from_json(const std::string& text);
std::string engine_config_to_json(const EngineConfig& c);
EngineConfig engine_config_from_json(const std::string& text);

// Post-softmax attention weights laid out [heads][queries][keys].
template <typename T>
struct AttentionTensor {
    std::size_t heads = 0;
    std::size_t queries = 0;
    std::size_t keys = 0;
    std::vector<T> data;

    AttentionTensor() = default;
    AttentionTensor(std::size_t h, std::size_t q, std::size_t k) : heads(h), queries(q), keys(k), data(h * q * k) {}

    T& at(std::size_t h, std::size_t i, std::size_t j) { return data[(h * queries + i) * keys + j]; }
    const T& at(std::size_t h, std::size_t i, std::size_t j) const { return data[(h * queries + i) * keys + j]; }
};

// s_j = max_h mean_i A[h, i, j]
template <typename T>
Vector<T> omnikv_score(const AttentionTensor<T>& attn);

template <typename T>
struct SelectionResult {
    Vector<T> scores;
    std::vector<std::size_t> selected;  // ascending
};

// Number of tokens a budget ratio r keeps out of n: ceil(r * n), capped at n.
std::size_t budget_count(double r, std::size_t n);

// Keeps every protected index, then fills up to budget_count(r, n) by
// descending score (smaller index first on ties).
template <typename T>
SelectionResult<T> select_topk_tokens(std::span<const T> scores, double r, std::span<const std::size_t> protect);

// KR/CR for the controller layout; q = 4 when latents are quantized.
BudgetRatios compute_budget_ratios(const ControllerConfig& config, std::size_t l_total, double latent_ratio);

struct StepRecord {
    std::size_t step = 0;
    Token token = 0;
    std::size_t selected = 0;
    std::size_t reconstructed = 0;
    std::size_t live_bytes = 0;
};

template <typename T>
struct GenerationResult {
    std::vector<Token> tokens;           // generated tokens
    std::vector<Vector<T>> step_logits;  // logits that produced tokens[i]
    std::vector<StepRecord> transcript;
};

void write_transcript_jsonl(const std::vector<StepRecord>& transcript, const std::filesystem::path& path);

// Greedy argmax; ties go to the smaller token id.
template <typename T>
Token argmax_token(std::span<const T> logits);

// Sparse inference engine for one request stream.
template <typename T>
class Engine {
public:
    Engine(ModelParams<T> model, CodecBank<T> codec, ControllerConfig config);
    Engine(const Engine&) = delete;
    Engine& operator=(const Engine&) = delete;

    // Processes the prompt in chunks and returns one logits row per token.
    Matrix<T> prefill(std::span<const Token> tokens, std::size_t chunk_len);

    Vector<T> decode_step(Token token);

    GenerationResult<T> generate(std::span<const Token> prompt, std::size_t n_new, std::size_t chunk_len);

    void reset();

    std::size_t length() const noexcept { return length_; }
    const CacheManager<T>& cache() const noexcept { return cache_; }
    CacheManager<T>& cache() noexcept { return cache_; }
    RequestId request() const noexcept { return request_; }
    const ControllerConfig& config() const noexcept { return config_; }
    const ModelParams<T>& model() const noexcept { return model_; }

    // One entry per filter layer from the latest forward call.
    const std::vector<SelectionResult<T>>& last_selections() const noexcept { return selections_; }
    std::size_t last_reconstructions() const noexcept { return reconstructions_; }

private:
    Matrix<T> forward_rows(std::span<const Token> tokens);
    std::vector<std::size_t> protected_positions(std::size_t n) const;
    static CacheConfig make_cache_config(const ModelParams<T>& model, const CodecBank<T>& codec,
                                         const ControllerConfig& config);

    ModelParams<T> model_;
    CodecBank<T> codec_;
    ControllerConfig config_;
    CacheManager<T> cache_;
    RequestId request_ = 0;
    std::size_t length_ = 0;
    std::vector<SelectionResult<T>> selections_;
    std::size_t reconstructions_ = 0;
};

}  // namespace deltakv
