#include "deltakv/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace deltakv {

std::uint8_t QuantizedLatent::code(std::size_t i) const {
    if (i >= count) throw IndexError("QuantizedLatent::code: index out of range");
    const std::uint8_t b = codes[i / 2];
    return i % 2 == 0 ? static_cast<std::uint8_t>(b & 0x0F) : static_cast<std::uint8_t>(b >> 4);
}

std::vector<std::uint8_t> pack_nibbles(std::span<const std::uint8_t> codes) {
    std::vector<std::uint8_t> out((codes.size() + 1) / 2, 0);
    for (std::size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] > 15) throw InputError("pack_nibbles: code exceeds 4 bits");
        out[i / 2] |= static_cast<std::uint8_t>(i % 2 == 0 ? codes[i] : codes[i] << 4);
    }
    return out;
}

std::vector<std::uint8_t> unpack_nibbles(std::span<const std::uint8_t> packed, std::size_t count) {
    if (packed.size() * 2 < count) throw ShapeError("unpack_nibbles: not enough packed bytes");
    std::vector<std::uint8_t> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint8_t b = packed[i / 2];
        out[i] = i % 2 == 0 ? static_cast<std::uint8_t>(b & 0x0F) : static_cast<std::uint8_t>(b >> 4);
    }
    return out;
}

namespace {

double dequant_value(int code, float scale, float zero_point) {
    return static_cast<double>(code) * static_cast<double>(scale) + static_cast<double>(zero_point);
}

float float_at_most(double x) {
    float f = static_cast<float>(x);
    if (static_cast<double>(f) > x) f = std::nextafter(f, -std::numeric_limits<float>::infinity());
    return f;
}

float float_at_least(double x) {
    float f = static_cast<float>(x);
    if (static_cast<double>(f) < x) f = std::nextafter(f, std::numeric_limits<float>::infinity());
    return f;
}

}  // namespace

template <typename T>
QuantizedLatent quantize_token(std::span<const T> z) {
    QuantizedLatent q;
    q.count = z.size();
    if (z.empty()) return q;
    const auto [lo_it, hi_it] = std::minmax_element(z.begin(), z.end());
    // Zero point rounded down and scale rounded up keep every element inside
    // [zero_point, zero_point + 15 * scale] after both are narrowed to float.
    q.zero_point = float_at_most(static_cast<double>(*lo_it));
    const double zp = q.zero_point;
    auto scale_for = [&](double top) { return float_at_least(std::max((top - zp) / kQuantLevels, kQuantScaleFloor)); };
    float scale = scale_for(static_cast<double>(*hi_it));
    // Shrink towards the scale that the dequantized top code reproduces, so
    // quantize(dequantize(q)) returns q unchanged. The top stays >= max.
    for (int it = 0; it < 64; ++it) {
        const auto top = static_cast<T>(dequant_value(kQuantLevels, scale, q.zero_point));
        const float next = scale_for(static_cast<double>(top));
        if (next == scale) break;
        scale = next;
    }
    q.scale = scale;
    std::vector<std::uint8_t> codes(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double r = (static_cast<double>(z[i]) - zp) / static_cast<double>(scale);
        codes[i] = static_cast<std::uint8_t>(std::clamp(std::round(r), 0.0, static_cast<double>(kQuantLevels)));
    }
    q.codes = pack_nibbles(codes);
    return q;
}

template <typename T>
Vector<T> dequantize_token(const QuantizedLatent& q, std::size_t d_c) {
    if (q.count < d_c || q.codes.size() * 2 < d_c) throw ShapeError("dequantize_token: fewer codes than d_c");
    Vector<T> out(d_c);
    const auto codes = unpack_nibbles(q.codes, d_c);
    for (std::size_t i = 0; i < d_c; ++i) out[i] = static_cast<T>(dequant_value(codes[i], q.scale, q.zero_point));
    return out;
}

template QuantizedLatent quantize_token(std::span<const float>);
template QuantizedLatent quantize_token(std::span<const double>);
template Vector<float> dequantize_token(const QuantizedLatent&, std::size_t);
template Vector<double> dequantize_token(const QuantizedLatent&, std::size_t);

}  // namespace deltakv
