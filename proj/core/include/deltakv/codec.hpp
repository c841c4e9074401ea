#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deltakv/tensor.hpp"

namespace deltakv {

// heavy:           f_c(x) = GeLU(x Wc1 + bc1) Wc2 + bc2,   f_d(z) = GeLU(z Wd1 + bd1) Wd2 + bd2
// light:           f_c(x) = (Swish(x W1) * (x W2)) W3,    f_d(z) = z Wd
// identity_linear: f_c(x) = x Wc,                         f_d(z) = z Wd   (square, identity at init)
enum class CodecVariant { heavy, light, identity_linear };

std::string to_string(CodecVariant v);
CodecVariant codec_variant_from_string(const std::string& s);

struct CodecConfig {
    CodecVariant variant = CodecVariant::heavy;
    std::size_t input_dim = 32;  // 2 * d_k
    std::size_t latent_dim = 8;  // d_c
    std::size_t hidden_dim = 128;
    std::size_t decoder_hidden_dim = 128;  // heavy only

    // d_c = input/4; heavy d_h = d_h' = 4 * input; light d_h = 3 * input.
    static CodecConfig defaults(CodecVariant variant, std::size_t input_dim);

    void validate() const;
    bool operator==(const CodecConfig&) const = default;
};

std::string codec_config_to_json(const CodecConfig& c);
CodecConfig codec_config_from_json(const std::string& text);

// Exact number of learnable scalars for the variant.
std::size_t param_count(const CodecConfig& config);

std::vector<std::string> codec_tensor_names(CodecVariant variant);

template <typename T>
using LatentCode = Vector<T>;

template <typename T>
struct CodecParams {
    CodecConfig config;
    std::vector<Matrix<T>> tensors;  // codec_tensor_names(config.variant) order; biases are 1 x n

    // Correctly shaped, all-zero bundle (gradient accumulator).
    static CodecParams zeros(const CodecConfig& config);

    std::size_t scalar_count() const;
    void scale(T factor);
    void add(const CodecParams& other);

    template <typename U>
    CodecParams<U> cast() const;

    bool operator==(const CodecParams&) const = default;
};

// Seeded uniform +-sqrt(6/fan_in), zero biases, final decoder layer x0.1.
// identity_linear ignores the seed and starts at exact identities.
template <typename T>
CodecParams<T> init_codec(const CodecConfig& config, std::uint64_t seed);

template <typename T>
CodecParams<T> identity_codec(std::size_t input_dim);

template <typename T>
Vector<T> encode(const CodecParams<T>& p, std::span<const T> x);

template <typename T>
Vector<T> decode(const CodecParams<T>& p, std::span<const T> z);

// z = f_c(kv) - f_c(kv_bar)
template <typename T>
LatentCode<T> compress(const CodecParams<T>& p, std::span<const T> kv, std::span<const T> kv_bar);

// f_d(z) + kv_bar
template <typename T>
Vector<T> reconstruct(const CodecParams<T>& p, std::span<const T> z, std::span<const T> kv_bar);

template <typename T>
struct CodecInputGrads {
    Vector<T> d_kv;
    Vector<T> d_kv_bar;
};

// Reverse pass of reconstruct(compress(kv, kv_bar), kv_bar) for the given
// upstream gradient. Parameter gradients are accumulated into `grads`.
template <typename T>
CodecInputGrads<T> codec_backward(const CodecParams<T>& p, std::span<const T> kv, std::span<const T> kv_bar,
                                  std::span<const T> upstream, CodecParams<T>& grads);

template <typename T>
CodecParams<T> codec_grads(const CodecParams<T>& p, std::span<const T> kv, std::span<const T> kv_bar,
                           std::span<const T> upstream);

// One codec per compressed layer; filter layers hold none.
template <typename T>
struct CodecBank {
    std::vector<std::optional<CodecParams<T>>> layers;

    bool has(std::size_t layer) const { return layer < layers.size() && layers[layer].has_value(); }
    const CodecParams<T>& at(std::size_t layer) const;
    CodecParams<T>& at(std::size_t layer);
    const CodecConfig& config() const;
    std::uint64_t checksum() const;

    template <typename U>
    CodecBank<U> cast() const;

    bool operator==(const CodecBank&) const = default;
};

template <typename T>
CodecBank<T> make_codec_bank(const CodecConfig& config, std::size_t n_layers,
                             std::span<const std::size_t> filter_layers, std::uint64_t seed);

template <typename T>
void save_codec_bank(const CodecBank<T>& bank, const std::filesystem::path& path);

template <typename T>
CodecBank<T> load_codec_bank(const std::filesystem::path& path);

}  // namespace deltakv
