#include "cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "deltakv/analysis.hpp"
#include "deltakv/controller.hpp"
#include "deltakv/corpus.hpp"
#include "deltakv/errors.hpp"
#include "deltakv/ratios.hpp"
#include "deltakv/rng.hpp"
#include "deltakv/trainer.hpp"
#include "json.hpp"

#ifndef DELTAKV_VERSION
#define DELTAKV_VERSION "unknown"
#endif

namespace deltakv::cli {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr double kDenseTolerance = 1e-5;

json default_config() {
    json c;
    c["model"] = json::parse(model_config_to_json(ModelConfig{}));
    c["model_checkpoint"] = "";
    c["codec"] = {{"variant", "heavy"}, {"latent_dim", 0}, {"hidden_dim", 0}, {"decoder_hidden_dim", 0}};
    c["codec_checkpoint"] = "";
    c["controller"] = json::parse(controller_config_to_json(ControllerConfig{}));
    c["controller"].erase("codec_variant");
    const TrainConfig tc;
    c["train"] = {{"learning_rate", tc.learning_rate},
                  {"warmup_fraction", tc.warmup_fraction},
                  {"total_steps", tc.total_steps},
                  {"beta1", tc.beta1},
                  {"beta2", tc.beta2},
                  {"eps", tc.eps},
                  {"weight_decay", tc.weight_decay},
                  {"seq_len", tc.seq_len},
                  {"grad_mode", "analytic"},
                  {"fd_samples", tc.fd_samples},
                  {"mse_weight", tc.weights.mse},
                  {"ntp_weight", tc.weights.ntp},
                  {"reference_mode", "reconstructed"}};
    c["corpus"] = {{"path", ""}, {"n_sequences", 0}, {"branching", 4}};
    c["generate"] = {{"prompt", json::array()}, {"prompt_len", 16}, {"n_new", 64}, {"chunk_len", 16}};
    const AnalysisConfig ac;
    c["analyze"] = {{"seq_len", 0},
                    {"cosine_step", ac.cosine_step},
                    {"value_bins", ac.value_bins},
                    {"value_quantile", ac.value_quantile},
                    {"flatness_m", ac.flatness_m},
                    {"latent", true}};
    c["audit"] = {{"tokens", 0}, {"chunk_len", 16}};
    c["bench"] = {{"tokens", 0}, {"repeats", 20}};
    return c;
}

// Overlays `patch` onto `base`; keys absent from `base` are rejected.
void merge_known(json& base, const json& patch, const std::string& where) {
    if (!patch.is_object()) throw ConfigError("config section '" + where + "' must be an object");
    for (const auto& [key, value] : patch.items()) {
        const std::string path = where.empty() ? key : where + "." + key;
        if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
        if (base[key].is_object()) {
            merge_known(base[key], value, path);
        } else {
            base[key] = value;
        }
    }
}

void apply_override(json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + assignment + "'");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json* node = &config;
    std::stringstream parts(key);
    std::string part;
    while (std::getline(parts, part, '.')) {
        if (!node->is_object() || !node->contains(part)) throw UsageError("unknown config key '" + key + "'");
        node = &(*node)[part];
    }
    if (node->is_object()) throw UsageError("--set cannot replace the section '" + key + "'");
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    *node = value;
}

std::string hex64(std::uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string file_checksum(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot read " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 14];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    return hex64(h);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write " + path.string());
    out << text;
}

struct Run {
    std::string command;
    std::vector<std::string> argv;
    json config;
    std::uint64_t seed = 0;
    bool seed_from_flag = false;
    fs::path output_dir;
    json inputs = json::object();
    std::ostream* out = nullptr;
    std::ostream* err = nullptr;
};

void write_manifest(const Run& run, const char* precision) {
    json m;
    m["command"] = run.command;
    m["argv"] = run.argv;
    m["seed"] = run.seed;
    m["seed_source"] = run.seed_from_flag ? "flag" : "random";
    m["precision"] = precision;
    m["config"] = run.config;
    m["input_checksums"] = run.inputs;
    m["versions"] = {{"deltakv", DELTAKV_VERSION},
                     {"compiler", __VERSION__},
                     {"cplusplus", __cplusplus},
                     {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                           std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                           std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
                     {"cli11", CLI11_VERSION}};
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    m["timestamp"] = stamp;
    write_text(run.output_dir / "manifest.json", m.dump(2) + "\n");
}

ModelConfig model_config(const json& c) { return model_config_from_json(c["model"].dump()); }

// Fills zero codec dims from the variant defaults and echoes them back.
CodecConfig resolve_codec(json& c) {
    const ModelConfig mc = model_config(c);
    auto& j = c["codec"];
    CodecConfig cc = CodecConfig::defaults(codec_variant_from_string(j["variant"].get<std::string>()), mc.kv_width());
    if (j["latent_dim"].get<std::size_t>() != 0) cc.latent_dim = j["latent_dim"];
    if (j["hidden_dim"].get<std::size_t>() != 0) cc.hidden_dim = j["hidden_dim"];
    if (j["decoder_hidden_dim"].get<std::size_t>() != 0) cc.decoder_hidden_dim = j["decoder_hidden_dim"];
    cc.validate();
    j["latent_dim"] = cc.latent_dim;
    j["hidden_dim"] = cc.hidden_dim;
    j["decoder_hidden_dim"] = cc.decoder_hidden_dim;
    return cc;
}

ControllerConfig controller_config(const json& c, const CodecConfig& codec) {
    ControllerConfig cc = controller_config_from_json(c["controller"].dump());
    cc.codec_variant = codec.variant;
    cc.validate(model_config(c).n_layers);
    return cc;
}

TrainConfig train_config(const json& c, std::uint64_t seed) {
    const auto& t = c["train"];
    const auto& ctl = c["controller"];
    TrainConfig tc;
    tc.learning_rate = t["learning_rate"];
    tc.warmup_fraction = t["warmup_fraction"];
    tc.total_steps = t["total_steps"];
    tc.beta1 = t["beta1"];
    tc.beta2 = t["beta2"];
    tc.eps = t["eps"];
    tc.weight_decay = t["weight_decay"];
    tc.seq_len = t["seq_len"];
    const std::string mode = t["grad_mode"];
    if (mode == "analytic") {
        tc.grad_mode = GradMode::analytic;
    } else if (mode == "finite_diff_check") {
        tc.grad_mode = GradMode::finite_diff_check;
    } else {
        throw ConfigError("train.grad_mode must be analytic or finite_diff_check");
    }
    tc.fd_samples = t["fd_samples"];
    tc.weights.mse = t["mse_weight"];
    tc.weights.ntp = t["ntp_weight"];
    tc.seed = seed;
    tc.compression.stride = ctl["stride"];
    tc.compression.top_k = ctl["k_refs"];
    tc.compression.filter_layers = ctl["filter_layers"].get<std::vector<std::size_t>>();
    tc.compression.reference_mode = reference_mode_from_string(t["reference_mode"]);
    tc.validate();
    tc.compression.validate(model_config(c).n_layers);
    return tc;
}

template <typename T>
ModelParams<T> load_or_init_model(Run& run) {
    const std::string path = run.config["model_checkpoint"];
    if (path.empty()) return init_model<T>(model_config(run.config), run.seed);
    run.inputs["model_checkpoint"] = {{"path", path}, {"fnv1a64", file_checksum(path)}};
    auto m = load_model<T>(path);
    run.config["model"] = json::parse(model_config_to_json(m.config));
    return m;
}

template <typename T>
CodecBank<T> load_or_init_codec(Run& run, const ModelConfig& mc, bool force_identity = false) {
    if (force_identity) run.config["codec"] = {{"variant", "identity_linear"}, {"latent_dim", 0}, {"hidden_dim", 0},
                                               {"decoder_hidden_dim", 0}};
    const std::string path = run.config["codec_checkpoint"];
    if (!path.empty() && !force_identity) {
        run.inputs["codec_checkpoint"] = {{"path", path}, {"fnv1a64", file_checksum(path)}};
        auto bank = load_codec_bank<T>(path);
        const CodecConfig& cc = bank.config();
        run.config["codec"] = {{"variant", to_string(cc.variant)},
                               {"latent_dim", cc.latent_dim},
                               {"hidden_dim", cc.hidden_dim},
                               {"decoder_hidden_dim", cc.decoder_hidden_dim}};
        resolve_codec(run.config);
        return bank;
    }
    const CodecConfig cc = resolve_codec(run.config);
    const auto filters = run.config["controller"]["filter_layers"].get<std::vector<std::size_t>>();
    return make_codec_bank<T>(cc, mc.n_layers, filters, run.seed + 1);
}

Corpus load_corpus(Run& run, const ModelConfig& mc, std::size_t seq_len, std::size_t min_sequences) {
    const auto& j = run.config["corpus"];
    const std::string path = j["path"];
    if (!path.empty()) {
        run.inputs["corpus"] = {{"path", path}, {"fnv1a64", file_checksum(path)}};
        return read_corpus_text(path, mc.vocab);
    }
    MarkovCorpusConfig kc;
    kc.vocab = mc.vocab;
    kc.seq_len = seq_len;
    kc.branching = j["branching"];
    kc.n_sequences = std::max<std::size_t>(j["n_sequences"].get<std::size_t>(), min_sequences);
    kc.seed = run.seed + 2;
    return make_markov_corpus(kc);
}

template <typename T>
int cmd_train(Run& run, const char* precision) {
    auto model = load_or_init_model<T>(run);
    auto codec = load_or_init_codec<T>(run, model.config);
    const TrainConfig tc = train_config(run.config, run.seed);
    const Corpus corpus = load_corpus(run, model.config, tc.seq_len, std::max<std::size_t>(tc.total_steps, 1));
    write_manifest(run, precision);

    const std::uint64_t before = model.checksum();
    auto result = train(model, codec, corpus, tc);
    if (model.checksum() != before) throw NumericalError("model parameters changed during training", 0.0);
    save_codec_bank(result.codec, run.output_dir / "codec.dkv");
    save_model(model, run.output_dir / "model.dkv");
    write_loss_csv(result.history, run.output_dir / "loss.csv");
    if (!result.history.empty()) {
        const auto& last = result.history.back();
        *run.out << "steps=" << result.history.size() << " final_total=" << last.total << " final_mse=" << last.mse
                 << " final_ntp=" << last.ntp << "\n";
    } else {
        *run.out << "steps=0 codec unchanged\n";
    }
    return kOk;
}

std::vector<Token> make_prompt(const Run& run, const ModelConfig& mc) {
    const auto& g = run.config["generate"];
    auto prompt = g["prompt"].get<std::vector<Token>>();
    if (prompt.empty()) {
        Rng rng(run.seed + 3);
        prompt.resize(g["prompt_len"].get<std::size_t>());
        for (auto& t : prompt) t = static_cast<Token>(rng.below(mc.vocab));
    }
    check_tokens(mc, prompt);
    return prompt;
}

template <typename T>
int cmd_generate(Run& run, const char* precision, bool identity, bool compare_dense) {
    auto model = load_or_init_model<T>(run);
    auto codec = load_or_init_codec<T>(run, model.config, identity);
    const ControllerConfig ctl = controller_config(run.config, codec.config());
    const auto prompt = make_prompt(run, model.config);
    const auto& g = run.config["generate"];
    write_manifest(run, precision);

    Engine<T> engine(model, codec, ctl);
    const auto result = engine.generate(prompt, g["n_new"].get<std::size_t>(), g["chunk_len"].get<std::size_t>());
    write_transcript_jsonl(result.transcript, run.output_dir / "transcript.jsonl");
    {
        std::ofstream tok(run.output_dir / "tokens.txt");
        for (std::size_t i = 0; i < result.tokens.size(); ++i) tok << (i ? " " : "") << result.tokens[i];
        tok << "\n";
    }
    *run.out << "generated=" << result.tokens.size() << "\n";
    if (!compare_dense) return kOk;

    std::vector<Token> all = prompt;
    if (!result.tokens.empty()) all.insert(all.end(), result.tokens.begin(), result.tokens.end() - 1);
    const auto dense = dense_forward(model, all);
    double worst = 0.0;
    for (std::size_t s = 0; s < result.step_logits.size(); ++s) {
        const auto row = dense.logits.row(prompt.size() - 1 + s);
        for (std::size_t v = 0; v < row.size(); ++v) {
            worst = std::max(worst, std::fabs(static_cast<double>(result.step_logits[s][v] - row[v])));
        }
    }
    json cmp = {{"max_logit_deviation", worst}, {"tolerance", kDenseTolerance}, {"steps", result.step_logits.size()}};
    write_text(run.output_dir / "compare_dense.json", cmp.dump(2) + "\n");
    char buf[64];
    std::snprintf(buf, sizeof buf, "max_logit_deviation=%.3e\n", worst);
    *run.out << buf;
    return worst < kDenseTolerance ? kOk : kRuntime;
}

template <typename T>
int cmd_analyze(Run& run, const char* precision) {
    auto model = load_or_init_model<T>(run);
    const auto& a = run.config["analyze"];
    const bool with_latent = a["latent"];
    std::optional<CodecBank<T>> codec;
    if (with_latent) codec = load_or_init_codec<T>(run, model.config);
    std::size_t seq_len = a["seq_len"];
    if (seq_len == 0) seq_len = model.config.max_seq;
    const Corpus corpus = load_corpus(run, model.config, seq_len, 1);
    const auto& seq = corpus.at(0);
    if (seq.size() < seq_len) throw InputError("corpus sequence shorter than analyze.seq_len");
    write_manifest(run, precision);

    AnalysisConfig ac;
    ac.stride = run.config["controller"]["stride"];
    ac.k = run.config["controller"]["k_refs"];
    ac.cosine_step = a["cosine_step"];
    ac.value_bins = a["value_bins"];
    ac.value_quantile = a["value_quantile"];
    ac.flatness_m = a["flatness_m"];

    const auto fwd = dense_forward(model, std::span<const Token>(seq.data(), seq_len));
    json summary = json::array();
    for (std::size_t l = 0; l < model.config.n_layers; ++l) {
        const auto& original = fwd.trace.layers[l];
        const auto residual = residualize_trace(original, ac.stride, ac.k);
        std::optional<Matrix<T>> latent;
        if (codec && codec->has(l)) latent = latent_trace(codec->at(l), original, ac.stride, ac.k);
        const auto report = build_report(original, residual, latent ? &*latent : nullptr, ac);
        write_report(report, run.output_dir / ("layer_" + std::to_string(l)));
        summary.push_back({{"layer", l},
                           {"norm_mean_original", report.norm_stats_original.mean},
                           {"norm_mean_residual", report.norm_stats_residual.mean},
                           {"flatness_original", report.flatness_original},
                           {"flatness_residual", report.flatness_residual}});
        char buf[160];
        std::snprintf(buf, sizeof buf, "layer %zu: norm %.4f -> %.4f  flatness %.4f -> %.4f\n", l,
                      report.norm_stats_original.mean, report.norm_stats_residual.mean, report.flatness_original,
                      report.flatness_residual);
        *run.out << buf;
    }
    write_text(run.output_dir / "summary.json", summary.dump(2) + "\n");
    return kOk;
}

template <typename T>
int cmd_audit(Run& run, const char* precision) {
    auto model = load_or_init_model<T>(run);
    auto codec = load_or_init_codec<T>(run, model.config);
    const ControllerConfig ctl = controller_config(run.config, codec.config());
    std::size_t n = run.config["audit"]["tokens"];
    if (n == 0) n = model.config.max_seq;
    run.config["generate"]["prompt_len"] = n;
    const auto prompt = make_prompt(run, model.config);
    write_manifest(run, precision);

    Engine<T> engine(model, codec, ctl);
    engine.prefill(prompt, run.config["audit"]["chunk_len"].get<std::size_t>());
    engine.cache().check_invariants();
    const auto audit = engine.cache().audit(engine.request());
    write_text(run.output_dir / "audit.json", audit.to_json() + "\n");
    char buf[160];
    std::snprintf(buf, sizeof buf, "tokens=%zu measured_kr=%.4f measured_kr_net=%.4f predicted_kr=%.4f\n", audit.tokens,
                  audit.measured_kr, audit.measured_kr_net, audit.predicted_kr);
    *run.out << buf;
    return kOk;
}

template <typename T>
int cmd_bench(Run& run, const char* precision) {
    auto model = load_or_init_model<T>(run);
    auto codec = load_or_init_codec<T>(run, model.config);
    const ControllerConfig ctl = controller_config(run.config, codec.config());
    std::size_t n = run.config["bench"]["tokens"];
    if (n == 0) n = model.config.max_seq;
    const std::size_t repeats = std::max<std::size_t>(run.config["bench"]["repeats"].get<std::size_t>(), 1);
    run.config["generate"]["prompt_len"] = n / 2;
    const auto prompt = make_prompt(run, model.config);
    write_manifest(run, precision);

    std::size_t layer = 0;
    while (layer < model.config.n_layers && !codec.has(layer)) ++layer;
    if (layer == model.config.n_layers) throw ConfigError("bench needs at least one compressed layer");
    const auto trace = dense_forward(model, prompt).trace.layers[layer];
    ReferenceSet<T> refs(ctl.stride, trace.cols());
    std::vector<Vector<T>> means;
    for (std::size_t i = 0; i < trace.rows(); ++i) {
        means.push_back(refs.mean_reference(refs.topk(trace.row(i), ctl.k_refs, i)));
        refs.maybe_append(i, trace.row(i));
    }
    using clock = std::chrono::steady_clock;
    auto seconds = [](clock::time_point a, clock::time_point b) { return std::chrono::duration<double>(b - a).count(); };
    double t_search = 0, t_compress = 0, t_reconstruct = 0, t_decode = 0;
    volatile double sink = 0;
    for (std::size_t r = 0; r < repeats; ++r) {
        auto t0 = clock::now();
        for (std::size_t i = 0; i < trace.rows(); ++i) sink = sink + refs.topk(trace.row(i), ctl.k_refs, i).size();
        auto t1 = clock::now();
        std::vector<LatentCode<T>> z;
        for (std::size_t i = 0; i < trace.rows(); ++i) {
            z.push_back(compress(codec.at(layer), trace.row(i), std::span<const T>(means[i])));
        }
        auto t2 = clock::now();
        for (std::size_t i = 0; i < trace.rows(); ++i) {
            sink = sink + static_cast<double>(reconstruct(codec.at(layer), std::span<const T>(z[i]),
                                                          std::span<const T>(means[i]))[0]);
        }
        auto t3 = clock::now();
        t_search += seconds(t0, t1);
        t_compress += seconds(t1, t2);
        t_reconstruct += seconds(t2, t3);
    }
    Engine<T> engine(model, codec, ctl);
    engine.prefill(prompt, 16);
    Token tok = prompt.back();
    const std::size_t steps = std::min(n - n / 2, model.config.max_seq - prompt.size());
    auto t0 = clock::now();
    for (std::size_t s = 0; s < steps; ++s) tok = argmax_token<T>(engine.decode_step(tok));
    t_decode = seconds(t0, clock::now());

    const double total = t_search + t_compress + t_reconstruct;
    json out = {{"per_token_share",
                 {{"reference_search", t_search / total},
                  {"compression", t_compress / total},
                  {"reconstruction", t_reconstruct / total}}},
                {"decode_step_vs_reconstruction",
                 steps == 0 ? 0.0
                            : (t_decode / static_cast<double>(steps)) /
                                  (t_reconstruct / static_cast<double>(repeats * trace.rows()))}};
    write_text(run.output_dir / "bench.json", out.dump(2) + "\n");
    char buf[200];
    std::snprintf(buf, sizeof buf, "share: reference_search=%.3f compression=%.3f reconstruction=%.3f\n",
                  t_search / total, t_compress / total, t_reconstruct / total);
    *run.out << buf;
    return kOk;
}

struct RatioFlags {
    std::optional<std::size_t> l_full, l_total, stride;
    std::optional<double> dc_ratio, q, r;
};

int cmd_ratios(Run& run, const RatioFlags& f) {
    const ModelConfig mc = model_config(run.config);
    const CodecConfig cc = resolve_codec(run.config);
    const ControllerConfig ctl = controller_config(run.config, cc);
    const std::size_t l_total = f.l_total.value_or(mc.n_layers);
    const std::size_t l_full = f.l_full.value_or(ctl.filter_layers.size());
    const std::size_t stride = f.stride.value_or(ctl.stride);
    const double dc = f.dc_ratio.value_or(static_cast<double>(cc.latent_dim) / static_cast<double>(cc.input_dim));
    const double q = f.q.value_or(ctl.quantize_latent ? 4.0 : 1.0);
    const double r = f.r.value_or(ctl.budget_ratio);
    const auto br = compute_budget_ratios(l_full, l_total, stride, dc, q, r);
    run.config["ratios"] = {{"l_full", l_full}, {"l_total", l_total}, {"stride", stride},
                            {"dc_ratio", dc},   {"q", q},             {"r", r}};
    write_manifest(run, "float64");
    json j = {{"keep_ratio", br.keep_ratio}, {"compute_ratio", br.compute_ratio}, {"budget", br.budget}};
    write_text(run.output_dir / "ratios.json", j.dump(2) + "\n");
    char buf[128];
    std::snprintf(buf, sizeof buf, "KR=%.3f CR=%.3f r=%.3f\n", br.keep_ratio, br.compute_ratio, br.budget);
    *run.out << buf;
    return kOk;
}

template <typename T>
int dispatch(Run& run, bool identity, bool compare_dense) {
    const char* precision = std::is_same_v<T, double> ? "float64" : "float32";
    if (run.command == "train") return cmd_train<T>(run, precision);
    if (run.command == "generate") return cmd_generate<T>(run, precision, identity, compare_dense);
    if (run.command == "analyze") return cmd_analyze<T>(run, precision);
    if (run.command == "audit") return cmd_audit<T>(run, precision);
    if (run.command == "bench") return cmd_bench<T>(run, precision);
    throw UsageError("unknown command " + run.command);
}

}  // namespace

int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"DeltaKV residual KV-cache compression toolkit", "deltakv"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string output_dir = "deltakv-out";
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "Run seed (random and recorded when omitted)");
    app.add_option("--output-dir", output_dir, "Directory for outputs and the manifest");
    app.add_option("--set", overrides, "Config override key=value (repeatable)");

    RatioFlags rf;
    std::optional<std::size_t> steps;
    std::optional<double> budget;
    bool identity = false;
    bool compare_dense = false;

    auto* analyze = app.add_subcommand("analyze", "Trace statistics of original vs residual KV");
    auto* train_cmd = app.add_subcommand("train", "Train the codec with the hybrid loss");
    train_cmd->add_option("--steps", steps, "Override train.total_steps");
    auto* generate = app.add_subcommand("generate", "Greedy generation through the sparse engine");
    generate->add_flag("--identity-codec", identity, "Use the identity codec");
    generate->add_option("--budget", budget, "Override controller.budget_ratio");
    generate->add_flag("--compare-dense", compare_dense, "Compare step logits with the dense model");
    auto* audit = app.add_subcommand("audit", "Prefill and report cache memory accounting");
    auto* bench = app.add_subcommand("bench", "Relative timings of search, compression and reconstruction");
    auto* ratios = app.add_subcommand("ratios", "Keep and compute ratios for a layer layout");
    ratios->add_option("--l-full", rf.l_full, "Uncompressed (filter) layers");
    ratios->add_option("--l-total", rf.l_total, "Total layers");
    ratios->add_option("--stride", rf.stride, "Reference stride s");
    ratios->add_option("--dc-ratio", rf.dc_ratio, "d_c / 2d_k");
    ratios->add_option("--q", rf.q, "Byte shrink of latents (4 for 4-bit)");
    ratios->add_option("--r", rf.r, "Sparse-layer budget ratio");
    (void)analyze;
    (void)audit;
    (void)bench;

    std::vector<std::string> args(argv.begin() + (argv.empty() ? 0 : 1), argv.end());
    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return kOk;
        }
        err << "usage error: " << e.what() << "\n" << app.help();
        return kUsage;
    }

    Run run;
    run.command = app.get_subcommands().front()->get_name();
    run.argv = argv;
    run.out = &out;
    run.err = &err;
    run.output_dir = output_dir;
    if (seed) {
        run.seed = *seed;
        run.seed_from_flag = true;
    } else {
        run.seed = (static_cast<std::uint64_t>(std::random_device{}()) << 32) ^ std::random_device{}();
    }

    try {
        run.config = default_config();
        if (!config_path.empty()) {
            run.inputs["config"] = {{"path", config_path}, {"fnv1a64", file_checksum(config_path)}};
            std::ifstream in(config_path);
            json file = json::parse(in, nullptr, false);
            if (file.is_discarded()) throw ConfigError("config file is not valid JSON: " + config_path);
            merge_known(run.config, file, "");
        }
        for (const auto& o : overrides) apply_override(run.config, o);
        if (steps) run.config["train"]["total_steps"] = *steps;
        if (budget) run.config["controller"]["budget_ratio"] = *budget;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kRuntime;
    }

    try {
        fs::create_directories(run.output_dir);
        if (run.command == "ratios") return cmd_ratios(run, rf);
        return verification_mode() ? dispatch<double>(run, identity, compare_dense)
                                   : dispatch<float>(run, identity, compare_dense);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kRuntime;
    }
}

int run(int argc, const char* const* argv) {
    std::vector<std::string> args(argv, argv + argc);
    return run(args, std::cout, std::cerr);
}

}  // namespace deltakv::cli
