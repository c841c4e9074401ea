#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "deltakv/tensor.hpp"

namespace deltakv {

// Token-wise asymmetric 4-bit code for one latent vector. Element i lives
// in byte i/2; even indices take the low nibble.
struct QuantizedLatent {
    std::vector<std::uint8_t> codes;
    std::size_t count = 0;
    float scale = 0.0F;
    float zero_point = 0.0F;

    std::uint8_t code(std::size_t i) const;
    // Storage footprint: packed nibbles plus two 32-bit reals.
    std::size_t bytes() const { return codes.size() + 8; }
    bool operator==(const QuantizedLatent&) const = default;
};

inline constexpr double kQuantScaleFloor = 1e-12;
inline constexpr int kQuantLevels = 15;

inline constexpr std::size_t quantized_bytes(std::size_t d_c) { return (d_c + 1) / 2 + 8; }

std::vector<std::uint8_t> pack_nibbles(std::span<const std::uint8_t> codes);
std::vector<std::uint8_t> unpack_nibbles(std::span<const std::uint8_t> packed, std::size_t count);

template <typename T>
QuantizedLatent quantize_token(std::span<const T> z);

template <typename T>
Vector<T> dequantize_token(const QuantizedLatent& q, std::size_t d_c);

}  // namespace deltakv
