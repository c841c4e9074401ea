#include "deltakv/codec.hpp"

#include <algorithm>
#include <cmath>

#include "deltakv/container.hpp"
#include "deltakv/rng.hpp"
#include "json.hpp"

namespace deltakv {

namespace {

// Tensor slots per variant.
namespace heavy {
enum : std::size_t { wc1, bc1, wc2, bc2, wd1, bd1, wd2, bd2 };
}
namespace light {
enum : std::size_t { w1, w2, w3, wd };
}
namespace ident {
enum : std::size_t { wc, wd };
}

struct Shape {
    std::size_t rows, cols;
};

std::vector<Shape> tensor_shapes(const CodecConfig& c) {
    const std::size_t in = c.input_dim, dc = c.latent_dim, dh = c.hidden_dim, dh2 = c.decoder_hidden_dim;
    switch (c.variant) {
        case CodecVariant::heavy:
            return {{in, dh}, {1, dh}, {dh, dc}, {1, dc}, {dc, dh2}, {1, dh2}, {dh2, in}, {1, in}};
        case CodecVariant::light:
            return {{in, dh}, {in, dh}, {dh, dc}, {dc, in}};
        case CodecVariant::identity_linear:
            return {{in, dc}, {dc, in}};
    }
    throw ConfigError("unknown codec variant");
}

template <typename T>
void add_into(std::span<T> acc, std::span<const T> v) {
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
}

}  // namespace

std::string to_string(CodecVariant v) {
    switch (v) {
        case CodecVariant::heavy: return "heavy";
        case CodecVariant::light: return "light";
        case CodecVariant::identity_linear: return "identity_linear";
    }
    return "unknown";
}

CodecVariant codec_variant_from_string(const std::string& s) {
    if (s == "heavy") return CodecVariant::heavy;
    if (s == "light") return CodecVariant::light;
    if (s == "identity_linear" || s == "identity") return CodecVariant::identity_linear;
    throw ConfigError("unknown codec variant '" + s + "'");
}

CodecConfig CodecConfig::defaults(CodecVariant variant, std::size_t input_dim) {
    CodecConfig c;
    c.variant = variant;
    c.input_dim = input_dim;
    switch (variant) {
        case CodecVariant::heavy:
            c.latent_dim = std::max<std::size_t>(1, input_dim / 4);
            c.hidden_dim = 4 * input_dim;
            c.decoder_hidden_dim = c.hidden_dim;
            break;
        case CodecVariant::light:
            c.latent_dim = std::max<std::size_t>(1, input_dim / 4);
            c.hidden_dim = 3 * input_dim;
            c.decoder_hidden_dim = 0;
            break;
        case CodecVariant::identity_linear:
            c.latent_dim = input_dim;
            c.hidden_dim = 0;
            c.decoder_hidden_dim = 0;
            break;
    }
    return c;
}

void CodecConfig::validate() const {
    if (input_dim == 0 || latent_dim == 0) throw ConfigError("CodecConfig: dims must be >= 1");
    if (variant == CodecVariant::identity_linear && latent_dim != input_dim) {
        throw ConfigError("CodecConfig: identity_linear requires latent_dim == input_dim");
    }
    if (variant == CodecVariant::heavy && (hidden_dim == 0 || decoder_hidden_dim == 0)) {
        throw ConfigError("CodecConfig: heavy variant needs hidden widths");
    }
    if (variant == CodecVariant::light && hidden_dim == 0) {
        throw ConfigError("CodecConfig: light variant needs a hidden width");
    }
}

std::string codec_config_to_json(const CodecConfig& c) {
    nlohmann::json j = {{"variant", to_string(c.variant)},
                        {"input_dim", c.input_dim},
                        {"latent_dim", c.latent_dim},
                        {"hidden_dim", c.hidden_dim},
                        {"decoder_hidden_dim", c.decoder_hidden_dim}};
    return j.dump();
}

CodecConfig codec_config_from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    CodecConfig c;
    c.variant = codec_variant_from_string(j.value("variant", std::string("heavy")));
    c.input_dim = j.value("input_dim", c.input_dim);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.decoder_hidden_dim = j.value("decoder_hidden_dim", c.decoder_hidden_dim);
    c.validate();
    return c;
}

std::size_t param_count(const CodecConfig& config) {
    config.validate();
    std::size_t n = 0;
    for (const auto& s : tensor_shapes(config)) n += s.rows * s.cols;
    return n;
}

std::vector<std::string> codec_tensor_names(CodecVariant variant) {
    switch (variant) {
        case CodecVariant::heavy: return {"wc1", "bc1", "wc2", "bc2", "wd1", "bd1", "wd2", "bd2"};
        case CodecVariant::light: return {"w1", "w2", "w3", "wd"};
        case CodecVariant::identity_linear: return {"wc", "wd"};
    }
    return {};
}

template <typename T>
CodecParams<T> CodecParams<T>::zeros(const CodecConfig& config) {
    config.validate();
    CodecParams<T> p;
    p.config = config;
    for (const auto& s : tensor_shapes(config)) p.tensors.emplace_back(s.rows, s.cols);
    return p;
}

template <typename T>
std::size_t CodecParams<T>::scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
}

template <typename T>
void CodecParams<T>::scale(T factor) {
    for (auto& t : tensors)
        for (T& v : t.flat()) v *= factor;
}

template <typename T>
void CodecParams<T>::add(const CodecParams& other) {
    if (other.tensors.size() != tensors.size()) throw ShapeError("CodecParams::add: layout mismatch");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (tensors[i].size() != other.tensors[i].size()) throw ShapeError("CodecParams::add: shape mismatch");
        add_into<T>(tensors[i].flat(), other.tensors[i].flat());
    }
}

template <typename T>
template <typename U>
CodecParams<U> CodecParams<T>::cast() const {
    CodecParams<U> out;
    out.config = config;
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
}

template <typename T>
CodecParams<T> init_codec(const CodecConfig& config, std::uint64_t seed) {
    if (config.variant == CodecVariant::identity_linear) return identity_codec<T>(config.input_dim);
    CodecParams<T> p = CodecParams<T>::zeros(config);
    Rng rng(seed);
    const auto names = codec_tensor_names(config.variant);
    for (std::size_t i = 0; i < p.tensors.size(); ++i) {
        auto& t = p.tensors[i];
        if (t.rows() == 1 && names[i][0] == 'b') continue;  // biases start at zero
        const double bound = std::sqrt(6.0 / static_cast<double>(t.rows()));
        for (T& v : t.flat()) v = static_cast<T>(rng.uniform(-bound, bound));
    }
    auto& last = config.variant == CodecVariant::heavy ? p.tensors[heavy::wd2] : p.tensors[light::wd];
    for (T& v : last.flat()) v *= static_cast<T>(0.1);
    return p;
}

template <typename T>
CodecParams<T> identity_codec(std::size_t input_dim) {
    CodecParams<T> p = CodecParams<T>::zeros(CodecConfig::defaults(CodecVariant::identity_linear, input_dim));
    p.tensors[ident::wc] = Matrix<T>::identity(input_dim);
    p.tensors[ident::wd] = Matrix<T>::identity(input_dim);
    return p;
}

namespace {

// Forward activations kept for the reverse pass.
template <typename T>
struct EncoderActs {
    Vector<T> a;  // heavy: pre-GeLU; light: x W1
    Vector<T> b;  // light: x W2
    Vector<T> m;  // heavy: GeLU(a); light: Swish(a) * b
};

template <typename T>
Vector<T> encode_impl(const CodecParams<T>& p, std::span<const T> x, EncoderActs<T>* acts) {
    const auto& c = p.config;
    if (x.size() != c.input_dim) throw ShapeError("encode: input width mismatch");
    EncoderActs<T> local;
    EncoderActs<T>& e = acts ? *acts : local;
    switch (c.variant) {
        case CodecVariant::heavy: {
            e.a = vecmat<T>(x, p.tensors[heavy::wc1]);
            add_into<T>(e.a, p.tensors[heavy::bc1].row(0));
            e.m.resize(e.a.size());
            for (std::size_t i = 0; i < e.a.size(); ++i) e.m[i] = gelu(e.a[i]);
            auto out = vecmat<T>(e.m, p.tensors[heavy::wc2]);
            add_into<T>(out, p.tensors[heavy::bc2].row(0));
            return out;
        }
        case CodecVariant::light: {
            e.a = vecmat<T>(x, p.tensors[light::w1]);
            e.b = vecmat<T>(x, p.tensors[light::w2]);
            e.m.resize(e.a.size());
            for (std::size_t i = 0; i < e.a.size(); ++i) e.m[i] = swish(e.a[i]) * e.b[i];
            return vecmat<T>(e.m, p.tensors[light::w3]);
        }
        case CodecVariant::identity_linear:
            return vecmat<T>(x, p.tensors[ident::wc]);
    }
    throw ConfigError("unknown codec variant");
}

template <typename T>
Vector<T> encode_backward(const CodecParams<T>& p, std::span<const T> x, const EncoderActs<T>& e,
                          std::span<const T> d_out, CodecParams<T>& g) {
    const auto& c = p.config;
    Vector<T> d_x(c.input_dim);
    switch (c.variant) {
        case CodecVariant::heavy: {
            add_into<T>(g.tensors[heavy::bc2].row(0), d_out);
            accumulate_outer<T>(e.m, d_out, g.tensors[heavy::wc2]);
            Vector<T> d_a(e.a.size());
            vecmat_transposed<T>(d_out, p.tensors[heavy::wc2], d_a);
            for (std::size_t i = 0; i < d_a.size(); ++i) d_a[i] *= gelu_derivative(e.a[i]);
            add_into<T>(g.tensors[heavy::bc1].row(0), d_a);
            accumulate_outer<T>(x, d_a, g.tensors[heavy::wc1]);
            vecmat_transposed<T>(d_a, p.tensors[heavy::wc1], d_x);
            break;
        }
        case CodecVariant::light: {
            accumulate_outer<T>(e.m, d_out, g.tensors[light::w3]);
            Vector<T> d_m(e.m.size());
            vecmat_transposed<T>(d_out, p.tensors[light::w3], d_m);
            Vector<T> d_a(d_m.size()), d_b(d_m.size());
            for (std::size_t i = 0; i < d_m.size(); ++i) {
                d_a[i] = d_m[i] * e.b[i] * swish_derivative(e.a[i]);
                d_b[i] = d_m[i] * swish(e.a[i]);
            }
            accumulate_outer<T>(x, d_a, g.tensors[light::w1]);
            accumulate_outer<T>(x, d_b, g.tensors[light::w2]);
            Vector<T> tmp(c.input_dim);
            vecmat_transposed<T>(d_a, p.tensors[light::w1], d_x);
            vecmat_transposed<T>(d_b, p.tensors[light::w2], tmp);
            add_into<T>(d_x, tmp);
            break;
        }
        case CodecVariant::identity_linear:
            accumulate_outer<T>(x, d_out, g.tensors[ident::wc]);
            vecmat_transposed<T>(d_out, p.tensors[ident::wc], d_x);
            break;
    }
    return d_x;
}

template <typename T>
Vector<T> decode_impl(const CodecParams<T>& p, std::span<const T> z, Vector<T>* pre) {
    const auto& c = p.config;
    if (z.size() != c.latent_dim) throw ShapeError("decode: latent width mismatch");
    if (c.variant == CodecVariant::heavy) {
        Vector<T> a = vecmat<T>(z, p.tensors[heavy::wd1]);
        add_into<T>(a, p.tensors[heavy::bd1].row(0));
        Vector<T> act(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) act[i] = gelu(a[i]);
        auto out = vecmat<T>(act, p.tensors[heavy::wd2]);
        add_into<T>(out, p.tensors[heavy::bd2].row(0));
        if (pre) *pre = std::move(a);
        return out;
    }
    const auto& wd = c.variant == CodecVariant::light ? p.tensors[light::wd] : p.tensors[ident::wd];
    return vecmat<T>(z, wd);
}

template <typename T>
Vector<T> decode_backward(const CodecParams<T>& p, std::span<const T> z, const Vector<T>& pre,
                          std::span<const T> d_out, CodecParams<T>& g) {
    const auto& c = p.config;
    Vector<T> d_z(c.latent_dim);
    if (c.variant == CodecVariant::heavy) {
        Vector<T> act(pre.size());
        for (std::size_t i = 0; i < pre.size(); ++i) act[i] = gelu(pre[i]);
        add_into<T>(g.tensors[heavy::bd2].row(0), d_out);
        accumulate_outer<T>(act, d_out, g.tensors[heavy::wd2]);
        Vector<T> d_a(pre.size());
        vecmat_transposed<T>(d_out, p.tensors[heavy::wd2], d_a);
        for (std::size_t i = 0; i < d_a.size(); ++i) d_a[i] *= gelu_derivative(pre[i]);
        add_into<T>(g.tensors[heavy::bd1].row(0), d_a);
        accumulate_outer<T>(z, d_a, g.tensors[heavy::wd1]);
        vecmat_transposed<T>(d_a, p.tensors[heavy::wd1], d_z);
        return d_z;
    }
    const std::size_t slot = c.variant == CodecVariant::light ? std::size_t{light::wd} : std::size_t{ident::wd};
    accumulate_outer<T>(z, d_out, g.tensors[slot]);
    vecmat_transposed<T>(d_out, p.tensors[slot], d_z);
    return d_z;
}

}  // namespace

template <typename T>
Vector<T> encode(const CodecParams<T>& p, std::span<const T> x) {
    return encode_impl<T>(p, x, nullptr);
}

template <typename T>
Vector<T> decode(const CodecParams<T>& p, std::span<const T> z) {
    return decode_impl<T>(p, z, nullptr);
}

template <typename T>
LatentCode<T> compress(const CodecParams<T>& p, std::span<const T> kv, std::span<const T> kv_bar) {
    if (kv.size() != p.config.input_dim || kv_bar.size() != p.config.input_dim) {
        throw ShapeError("compress: kv width mismatch");
    }
    auto z = encode<T>(p, kv);
    const auto zr = encode<T>(p, kv_bar);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] -= zr[i];
    return z;
}

template <typename T>
Vector<T> reconstruct(const CodecParams<T>& p, std::span<const T> z, std::span<const T> kv_bar) {
    if (kv_bar.size() != p.config.input_dim) throw ShapeError("reconstruct: kv_bar width mismatch");
    auto out = decode<T>(p, z);
    add_into<T>(out, kv_bar);
    return out;
}

template <typename T>
CodecInputGrads<T> codec_backward(const CodecParams<T>& p, std::span<const T> kv, std::span<const T> kv_bar,
                                  std::span<const T> upstream, CodecParams<T>& grads) {
    const auto& c = p.config;
    if (kv.size() != c.input_dim || kv_bar.size() != c.input_dim || upstream.size() != c.input_dim) {
        throw ShapeError("codec_backward: width mismatch");
    }
    EncoderActs<T> e_kv, e_ref;
    auto z = encode_impl<T>(p, kv, &e_kv);
    const auto z_ref = encode_impl<T>(p, kv_bar, &e_ref);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] -= z_ref[i];
    Vector<T> pre;
    decode_impl<T>(p, z, &pre);

    const Vector<T> d_z = decode_backward<T>(p, z, pre, upstream, grads);
    Vector<T> neg_d_z(d_z.size());
    for (std::size_t i = 0; i < d_z.size(); ++i) neg_d_z[i] = -d_z[i];

    CodecInputGrads<T> out;
    out.d_kv = encode_backward<T>(p, kv, e_kv, d_z, grads);
    out.d_kv_bar = encode_backward<T>(p, kv_bar, e_ref, neg_d_z, grads);
    add_into<T>(out.d_kv_bar, upstream);
    return out;
}

template <typename T>
CodecParams<T> codec_grads(const CodecParams<T>& p, std::span<const T> kv, std::span<const T> kv_bar,
                           std::span<const T> upstream) {
    auto g = CodecParams<T>::zeros(p.config);
    codec_backward<T>(p, kv, kv_bar, upstream, g);
    return g;
}

template <typename T>
const CodecParams<T>& CodecBank<T>::at(std::size_t layer) const {
    if (!has(layer)) throw IndexError("CodecBank: no codec for layer " + std::to_string(layer));
    return *layers[layer];
}

template <typename T>
CodecParams<T>& CodecBank<T>::at(std::size_t layer) {
    if (!has(layer)) throw IndexError("CodecBank: no codec for layer " + std::to_string(layer));
    return *layers[layer];
}

template <typename T>
const CodecConfig& CodecBank<T>::config() const {
    for (const auto& c : layers) {
        if (c) return c->config;
    }
    throw ConfigError("CodecBank: no compressed layers");
}

template <typename T>
std::uint64_t CodecBank<T>::checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& c : layers) {
        if (!c) continue;
        for (const auto& t : c->tensors) {
            const auto* bytes = reinterpret_cast<const unsigned char*>(t.flat().data());
            for (std::size_t i = 0; i < t.size() * sizeof(T); ++i) {
                h ^= bytes[i];
                h *= 1099511628211ull;
            }
        }
    }
    return h;
}

template <typename T>
template <typename U>
CodecBank<U> CodecBank<T>::cast() const {
    CodecBank<U> out;
    for (const auto& c : layers) {
        if (c) {
            out.layers.emplace_back(c->template cast<U>());
        } else {
            out.layers.emplace_back(std::nullopt);
        }
    }
    return out;
}

template <typename T>
CodecBank<T> make_codec_bank(const CodecConfig& config, std::size_t n_layers,
                             std::span<const std::size_t> filter_layers, std::uint64_t seed) {
    config.validate();
    CodecBank<T> bank;
    bank.layers.resize(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) {
        if (std::find(filter_layers.begin(), filter_layers.end(), l) != filter_layers.end()) continue;
        bank.layers[l] = init_codec<T>(config, seed + 7919 * (l + 1));
    }
    return bank;
}

template <typename T>
void save_codec_bank(const CodecBank<T>& bank, const std::filesystem::path& path) {
    Container c;
    c.kind = "codec";
    nlohmann::json meta;
    meta["n_layers"] = bank.layers.size();
    std::vector<std::size_t> compressed;
    for (std::size_t l = 0; l < bank.layers.size(); ++l) {
        if (bank.layers[l]) compressed.push_back(l);
    }
    meta["compressed_layers"] = compressed;
    if (!compressed.empty()) meta["config"] = nlohmann::json::parse(codec_config_to_json(bank.config()));
    c.metadata_json = meta.dump();
    for (std::size_t l : compressed) {
        const auto names = codec_tensor_names(bank.layers[l]->config.variant);
        for (std::size_t i = 0; i < names.size(); ++i) {
            const auto& m = bank.layers[l]->tensors[i];
            c.tensors.push_back({"layers." + std::to_string(l) + "." + names[i],
                                 {m.rows(), m.cols()},
                                 std::vector<float>(m.flat().begin(), m.flat().end())});
        }
    }
    write_container_file(c, path);
}

template <typename T>
CodecBank<T> load_codec_bank(const std::filesystem::path& path) {
    const Container c = read_container_file(path);
    if (c.kind != "codec") throw InputError("load_codec_bank: container kind is '" + c.kind + "'");
    const auto meta = nlohmann::json::parse(c.metadata_json);
    CodecBank<T> bank;
    bank.layers.resize(meta.at("n_layers").get<std::size_t>());
    const auto compressed = meta.at("compressed_layers").get<std::vector<std::size_t>>();
    if (compressed.empty()) return bank;
    const CodecConfig config = codec_config_from_json(meta.at("config").dump());
    const auto names = codec_tensor_names(config.variant);
    for (std::size_t l : compressed) {
        auto p = CodecParams<T>::zeros(config);
        for (std::size_t i = 0; i < names.size(); ++i) {
            const auto& t = c.find("layers." + std::to_string(l) + "." + names[i]);
            if (t.data.size() != p.tensors[i].size()) throw ShapeError("load_codec_bank: shape mismatch");
            std::copy(t.data.begin(), t.data.end(), p.tensors[i].flat().begin());
        }
        bank.layers.at(l) = std::move(p);
    }
    return bank;
}

#define DELTAKV_INSTANTIATE_CODEC(T)                                                                          \
    template struct CodecParams<T>;                                                                            \
    template struct CodecBank<T>;                                                                              \
    template CodecParams<T> init_codec(const CodecConfig&, std::uint64_t);                                     \
    template CodecParams<T> identity_codec(std::size_t);                                                       \
    template Vector<T> encode(const CodecParams<T>&, std::span<const T>);                                      \
    template Vector<T> decode(const CodecParams<T>&, std::span<const T>);                                      \
    template LatentCode<T> compress(const CodecParams<T>&, std::span<const T>, std::span<const T>);            \
    template Vector<T> reconstruct(const CodecParams<T>&, std::span<const T>, std::span<const T>);             \
    template CodecInputGrads<T> codec_backward(const CodecParams<T>&, std::span<const T>, std::span<const T>,  \
                                               std::span<const T>, CodecParams<T>&);                           \
    template CodecParams<T> codec_grads(const CodecParams<T>&, std::span<const T>, std::span<const T>,         \
                                        std::span<const T>);                                                   \
    template CodecBank<T> make_codec_bank(const CodecConfig&, std::size_t, std::span<const std::size_t>,       \
                                          std::uint64_t);                                                      \
    template void save_codec_bank(const CodecBank<T>&, const std::filesystem::path&);                          \
    template CodecBank<T> load_codec_bank(const std::filesystem::path&);

DELTAKV_INSTANTIATE_CODEC(float)
DELTAKV_INSTANTIATE_CODEC(double)

template CodecParams<double> CodecParams<float>::cast<double>() const;
template CodecParams<float> CodecParams<double>::cast<float>() const;
template CodecParams<float> CodecParams<float>::cast<float>() const;
template CodecParams<double> CodecParams<double>::cast<double>() const;
template CodecBank<double> CodecBank<float>::cast<double>() const;
template CodecBank<float> CodecBank<double>::cast<float>() const;
template CodecBank<float> CodecBank<float>::cast<float>() const;
template CodecBank<double> CodecBank<double>::cast<double>() const;

}  // namespace deltakv
