#include "deltakv/controller.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace deltakv {

bool ControllerConfig::is_filter(std::size_t layer) const {
    return std::find(filter_layers.begin(), filter_layers.end(), layer) != filter_layers.end();
}

void ControllerConfig::validate(std::size_t n_layers) const {
    for (std::size_t i = 0; i < filter_layers.size(); ++i) {
        if (filter_layers[i] >= n_layers) throw ConfigError("filter layer " + std::to_string(filter_layers[i]) + " out of range");
        if (i > 0 && filter_layers[i] <= filter_layers[i - 1]) throw ConfigError("filter layers must be strictly increasing");
    }
    if (!(budget_ratio > 0.0 && budget_ratio <= 1.0)) throw ConfigError("budget ratio r must be in (0, 1]");
    if (stride == 0 || k_refs == 0) throw ConfigError("stride and k_refs must be >= 1");
    if (n_recent == 0) throw ConfigError("n_recent must be >= 1");
}

namespace {

nlohmann::json controller_json(const ControllerConfig& c) {
    return {{"filter_layers", c.filter_layers},
            {"budget_ratio", c.budget_ratio},
            {"stride", c.stride},
            {"k_refs", c.k_refs},
            {"n_sink", c.n_sink},
            {"n_recent", c.n_recent},
            {"quantize_latent", c.quantize_latent},
            {"codec_variant", to_string(c.codec_variant)},
            {"slot_map", to_string(c.slot_map)},
            {"full_capacity", c.full_capacity},
            {"latent_capacity", c.latent_capacity}};
}

ControllerConfig controller_from(const nlohmann::json& j) {
    ControllerConfig c;
    c.filter_layers = j.value("filter_layers", c.filter_layers);
    c.budget_ratio = j.value("budget_ratio", c.budget_ratio);
    c.stride = j.value("stride", c.stride);
    c.k_refs = j.value("k_refs", c.k_refs);
    c.n_sink = j.value("n_sink", c.n_sink);
    c.n_recent = j.value("n_recent", c.n_recent);
    c.quantize_latent = j.value("quantize_latent", c.quantize_latent);
    c.codec_variant = codec_variant_from_string(j.value("codec_variant", to_string(c.codec_variant)));
    c.slot_map = slot_map_variant_from_string(j.value("slot_map", to_string(c.slot_map)));
    c.full_capacity = j.value("full_capacity", c.full_capacity);
    c.latent_capacity = j.value("latent_capacity", c.latent_capacity);
    return c;
}

}  // namespace

std::string controller_config_to_json(const ControllerConfig& c) { return controller_json(c).dump(); }

ControllerConfig controller_config_from_json(const std::string& text) {
    return controller_from(nlohmann::json::parse(text));
}

std::string engine_config_to_json(const EngineConfig& c) {
    nlohmann::json j;
    j["model"] = nlohmann::json::parse(model_config_to_json(c.model));
    j["codec"] = nlohmann::json::parse(codec_config_to_json(c.codec));
    j["controller"] = controller_json(c.controller);
    return j.dump(2);
}

EngineConfig engine_config_from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    EngineConfig c;
    if (j.contains("model")) c.model = model_config_from_json(j["model"].dump());
    if (j.contains("controller")) c.controller = controller_from(j["controller"]);
    c.codec = CodecConfig::defaults(c.controller.codec_variant, c.model.kv_width());
    if (j.contains("codec")) c.codec = codec_config_from_json(j["codec"].dump());
    c.controller.validate(c.model.n_layers);
    return c;
}

template <typename T>
Vector<T> omnikv_score(const AttentionTensor<T>& attn) {
    if (attn.data.size() != attn.heads * attn.queries * attn.keys) throw ShapeError("omnikv_score: data size mismatch");
    if (attn.heads == 0 || attn.queries == 0) throw ShapeError("omnikv_score: need at least one head and query");
    Vector<T> out(attn.keys);
    Vector<T> mean(attn.keys);
    for (std::size_t h = 0; h < attn.heads; ++h) {
        std::fill(mean.begin(), mean.end(), T{});
        for (std::size_t i = 0; i < attn.queries; ++i) {
            for (std::size_t j = 0; j < attn.keys; ++j) mean[j] += attn.at(h, i, j);
        }
        for (std::size_t j = 0; j < attn.keys; ++j) {
            const T m = mean[j] / static_cast<T>(attn.queries);
            out[j] = h == 0 ? m : std::max(out[j], m);
        }
    }
    return out;
}

std::size_t budget_count(double r, std::size_t n) {
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("budget ratio r must be in (0, 1]");
    // The small slack keeps products like 0.3 * 10 from rounding up to 4.
    const double raw = std::ceil(r * static_cast<double>(n) - 1e-9);
    return std::min(n, static_cast<std::size_t>(std::max(0.0, raw)));
}

template <typename T>
SelectionResult<T> select_topk_tokens(std::span<const T> scores, double r, std::span<const std::size_t> protect) {
    const std::size_t n = scores.size();
    const std::size_t budget = budget_count(r, n);
    SelectionResult<T> out;
    out.scores.assign(scores.begin(), scores.end());
    std::vector<bool> taken(n, false);
    std::size_t count = 0;
    for (std::size_t p : protect) {
        if (p >= n) throw IndexError("select_topk_tokens: protected index out of range");
        if (!taken[p]) {
            taken[p] = true;
            ++count;
        }
    }
    if (count < budget) {
        std::vector<std::size_t> order;
        for (std::size_t j = 0; j < n; ++j) {
            if (!taken[j]) order.push_back(j);
        }
        const std::size_t want = std::min(budget - count, order.size());
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(want), order.end(),
                          [&](std::size_t a, std::size_t b) {
                              if (scores[a] != scores[b]) return scores[a] > scores[b];
                              return a < b;
                          });
        for (std::size_t i = 0; i < want; ++i) taken[order[i]] = true;
    }
    for (std::size_t j = 0; j < n; ++j) {
        if (taken[j]) out.selected.push_back(j);
    }
    return out;
}

BudgetRatios compute_budget_ratios(const ControllerConfig& config, std::size_t l_total, double latent_ratio) {
    return compute_budget_ratios(config.filter_layers.size(), l_total, config.stride, latent_ratio,
                                 config.quantize_latent ? 4.0 : 1.0, config.budget_ratio);
}

void write_transcript_jsonl(const std::vector<StepRecord>& transcript, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write " + path.string());
    for (const auto& r : transcript) {
        nlohmann::json j = {{"step", r.step},
                            {"token", r.token},
                            {"selected", r.selected},
                            {"reconstructed", r.reconstructed},
                            {"live_bytes", r.live_bytes}};
        out << j.dump() << '\n';
    }
}

template <typename T>
Token argmax_token(std::span<const T> logits) {
    if (logits.empty()) throw ShapeError("argmax_token: empty logits");
    return static_cast<Token>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

template <typename T>
CacheConfig Engine<T>::make_cache_config(const ModelParams<T>& model, const CodecBank<T>& codec,
                                         const ControllerConfig& config) {
    const auto& mc = model.config;
    config.validate(mc.n_layers);
    CacheConfig c;
    c.n_layers = mc.n_layers;
    c.kv_width = mc.kv_width();
    c.latent_dim = 1;
    for (std::size_t l = 0; l < mc.n_layers; ++l) {
        if (!config.is_filter(l) && codec.has(l)) {
            c.latent_dim = codec.at(l).config.latent_dim;
            break;
        }
    }
    c.filter_layers = config.filter_layers;
    c.n_sink = config.n_sink;
    c.n_recent = config.n_recent;
    c.stride = config.stride;
    c.top_k = config.k_refs;
    c.quantize = config.quantize_latent;
    c.slot_map = config.slot_map;
    // Per layer: every token plus reference copies plus one temp row per token.
    const std::size_t per_layer = 2 * mc.max_seq + mc.max_seq / config.stride + 2;
    c.full_capacity = config.full_capacity ? config.full_capacity : mc.n_layers * per_layer;
    c.latent_capacity = config.latent_capacity ? config.latent_capacity : mc.n_layers * mc.max_seq;
    return c;
}

template <typename T>
Engine<T>::Engine(ModelParams<T> model, CodecBank<T> codec, ControllerConfig config)
    : model_(std::move(model)),
      codec_(std::move(codec)),
      config_(std::move(config)),
      cache_(make_cache_config(model_, codec_, config_), &codec_) {
    cache_.register_request(request_);
}

template <typename T>
void Engine<T>::reset() {
    cache_.release_request(request_);
    ++request_;
    cache_.register_request(request_);
    length_ = 0;
    selections_.clear();
    reconstructions_ = 0;
}

template <typename T>
std::vector<std::size_t> Engine<T>::protected_positions(std::size_t n) const {
    std::vector<std::size_t> out;
    const std::size_t sink_end = std::min(n, config_.n_sink);
    for (std::size_t p = 0; p < sink_end; ++p) out.push_back(p);
    const std::size_t recent_begin = std::max(sink_end, n > config_.n_recent ? n - config_.n_recent : 0);
    for (std::size_t p = recent_begin; p < n; ++p) out.push_back(p);
    return out;
}

template <typename T>
Matrix<T> Engine<T>::forward_rows(std::span<const Token> tokens) {
    const auto& cfg = model_.config;
    const std::size_t m = tokens.size();
    const std::size_t start = length_;
    const std::size_t d = cfg.hidden();
    const std::size_t dk = cfg.kv_dim();
    if (start + m > cfg.max_seq) {
        throw InputError("sequence would reach " + std::to_string(start + m) + " tokens, max_seq is " +
                         std::to_string(cfg.max_seq));
    }
    for (Token t : tokens) {
        if (t >= cfg.vocab) throw InputError("token id " + std::to_string(t) + " out of vocabulary");
    }

    selections_.clear();
    reconstructions_ = 0;
    Matrix<T> h(m, d);
    for (std::size_t i = 0; i < m; ++i) {
        const auto e = model_.embedding.row(tokens[i]);
        std::copy(e.begin(), e.end(), h.row(i).begin());
    }

    const std::size_t total = start + m;
    std::optional<std::vector<std::size_t>> group_selection;
    Vector<T> heads(d);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        if (config_.is_filter(l)) {
            Matrix<T> q_rot(m, d);
            for (std::size_t i = 0; i < m; ++i) {
                auto proj = project_qkv(model_, l, std::span<const T>(h.row(i)));
                cache_.append_token(request_, l, proj.kv);
                rope_heads<T>(proj.q, cfg, start + i);
                std::copy(proj.q.begin(), proj.q.end(), q_rot.row(i).begin());
            }
            const auto view = cache_.full_view(request_, l);
            Matrix<T> keys(view.entries.size(), dk);
            AttentionRows<T> all;
            all.reserve(view.entries.size());
            for (std::size_t j = 0; j < view.entries.size(); ++j) {
                const auto kv = cache_.read(l, view.entries[j].slot);
                auto k = keys.row(j);
                std::copy(kv.begin(), kv.begin() + static_cast<std::ptrdiff_t>(dk), k.begin());
                rope_heads<T>(k, cfg, view.entries[j].position);
                all.push(keys.row(j), kv.subspan(dk, dk));
            }
            AttentionTensor<T> attn(cfg.n_heads, m, total);
            for (std::size_t i = 0; i < m; ++i) {
                AttentionRows<T> rows;
                const std::size_t n = start + i + 1;
                rows.keys.assign(all.keys.begin(), all.keys.begin() + static_cast<std::ptrdiff_t>(n));
                rows.values.assign(all.values.begin(), all.values.begin() + static_cast<std::ptrdiff_t>(n));
                Matrix<T> probs;
                auto hr = h.row(i);
                attention_block<T>(model_, l, q_rot.row(i), rows, hr, &probs);
                ffn_block<T>(model_, l, hr);
                for (std::size_t hh = 0; hh < cfg.n_heads; ++hh) {
                    for (std::size_t j = 0; j < n; ++j) attn.at(hh, i, j) = probs(hh, j);
                }
            }
            const auto scores = omnikv_score(attn);
            const auto prot = protected_positions(total);
            auto sel = select_topk_tokens<T>(scores, config_.budget_ratio, prot);
            group_selection = sel.selected;
            selections_.push_back(std::move(sel));
            continue;
        }

        for (std::size_t i = 0; i < m; ++i) {
            const std::size_t pos = start + i;
            auto proj = project_qkv(model_, l, std::span<const T>(h.row(i)));
            cache_.append_token(request_, l, proj.kv);
            rope_heads<T>(proj.q, cfg, pos);
            VirtualSlotMapping view;
            if (group_selection) {
                const auto& sel = *group_selection;
                const auto end = std::upper_bound(sel.begin(), sel.end(), pos);
                view = cache_.build_view(request_, l, std::span<const std::size_t>(sel.begin(), end));
            } else {
                view = cache_.full_view(request_, l);
            }
            reconstructions_ += view.reconstructed;
            Matrix<T> keys(view.entries.size(), dk);
            AttentionRows<T> rows;
            rows.reserve(view.entries.size());
            for (std::size_t j = 0; j < view.entries.size(); ++j) {
                const auto kv = cache_.read(l, view.entries[j].slot);
                auto k = keys.row(j);
                std::copy(kv.begin(), kv.begin() + static_cast<std::ptrdiff_t>(dk), k.begin());
                rope_heads<T>(k, cfg, view.entries[j].position);
                rows.push(keys.row(j), kv.subspan(dk, dk));
            }
            auto hr = h.row(i);
            attention_block<T>(model_, l, std::span<const T>(proj.q), rows, hr);
            ffn_block<T>(model_, l, hr);
        }
    }

    Matrix<T> logits(m, cfg.vocab);
    for (std::size_t i = 0; i < m; ++i) {
        const auto row = lm_logits<T>(model_, h.row(i));
        std::copy(row.begin(), row.end(), logits.row(i).begin());
    }
    cache_.post_forward(request_);
    length_ = total;
    return logits;
}

template <typename T>
Matrix<T> Engine<T>::prefill(std::span<const Token> tokens, std::size_t chunk_len) {
    if (chunk_len == 0) throw InputError("prefill: chunk_len must be >= 1");
    if (tokens.empty()) throw InputError("prefill: empty prompt");
    if (length_ + tokens.size() > model_.config.max_seq) {
        throw InputError("prompt of " + std::to_string(tokens.size()) + " tokens exceeds max_seq");
    }
    Matrix<T> out(tokens.size(), model_.config.vocab);
    for (std::size_t begin = 0; begin < tokens.size(); begin += chunk_len) {
        const std::size_t end = std::min(tokens.size(), begin + chunk_len);
        const auto part = forward_rows(tokens.subspan(begin, end - begin));
        for (std::size_t i = 0; i < part.rows(); ++i) {
            const auto r = part.row(i);
            std::copy(r.begin(), r.end(), out.row(begin + i).begin());
        }
    }
    return out;
}

template <typename T>
Vector<T> Engine<T>::decode_step(Token token) {
    if (length_ == 0) throw LifecycleError("decode_step before prefill");
    const auto logits = forward_rows(std::span<const Token>(&token, 1));
    return Vector<T>(logits.row(0).begin(), logits.row(0).end());
}

template <typename T>
GenerationResult<T> Engine<T>::generate(std::span<const Token> prompt, std::size_t n_new, std::size_t chunk_len) {
    GenerationResult<T> out;
    const auto prompt_logits = prefill(prompt, chunk_len);
    if (n_new == 0) return out;
    Vector<T> logits(prompt_logits.row(prompt.size() - 1).begin(), prompt_logits.row(prompt.size() - 1).end());
    for (std::size_t step = 0; step < n_new; ++step) {
        if (step > 0) logits = decode_step(out.tokens.back());
        const Token next = argmax_token<T>(logits);
        StepRecord rec;
        rec.step = step;
        rec.token = next;
        rec.selected = selections_.empty() ? length_ : selections_.front().selected.size();
        rec.reconstructed = reconstructions_;
        const auto audit = cache_.audit(request_);
        rec.live_bytes = audit.full_bytes + audit.latent_bytes;
        out.tokens.push_back(next);
        out.step_logits.push_back(logits);
        out.transcript.push_back(rec);
    }
    return out;
}

#define DELTAKV_INSTANTIATE_CONTROLLER(T)                                                                  \
    template Vector<T> omnikv_score(const AttentionTensor<T>&);                                             \
    template SelectionResult<T> select_topk_tokens(std::span<const T>, double, std::span<const std::size_t>); \
    template Token argmax_token(std::span<const T>);                                                        \
    template class Engine<T>;

DELTAKV_INSTANTIATE_CONTROLLER(float)
DELTAKV_INSTANTIATE_CONTROLLER(double)

}  // namespace deltakv
