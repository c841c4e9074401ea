#include "deltakv/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "deltakv/errors.hpp"
#include "deltakv/reference_index.hpp"
#include "json.hpp"

namespace deltakv {

std::size_t Histogram::total() const {
    std::size_t n = 0;
    for (std::size_t c : counts) n += c;
    return n;
}

Histogram make_histogram(const std::vector<double>& values, std::vector<double> edges) {
    if (edges.size() < 2) throw InputError("histogram needs at least two edges");
    for (std::size_t i = 1; i < edges.size(); ++i) {
        if (!(edges[i] > edges[i - 1])) throw InputError("histogram edges must be strictly increasing");
    }
    Histogram h;
    h.counts.assign(edges.size() - 1, 0);
    const std::size_t last = h.counts.size() - 1;
    for (double v : values) {
        std::size_t b;
        if (std::isnan(v)) throw InputError("histogram value is NaN");
        if (v <= edges.front()) {
            b = 0;
        } else if (v >= edges.back()) {
            b = last;
        } else {
            auto it = std::upper_bound(edges.begin(), edges.end(), v);
            b = static_cast<std::size_t>(it - edges.begin()) - 1;
        }
        ++h.counts[b];
    }
    h.edges = std::move(edges);
    return h;
}

std::vector<double> linear_edges(double lo, double hi, std::size_t n_bins) {
    if (n_bins == 0 || !(hi > lo)) throw InputError("linear_edges: need n_bins > 0 and hi > lo");
    std::vector<double> e(n_bins + 1);
    for (std::size_t i = 0; i <= n_bins; ++i) e[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n_bins);
    e.back() = hi;
    return e;
}

double nearest_rank(std::vector<double> values, double p) {
    if (values.empty()) throw DegenerateInputError("percentile of an empty sample");
    if (p < 0.0 || p > 1.0) throw InputError("percentile outside [0, 1]");
    std::sort(values.begin(), values.end());
    auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(values.size())));
    if (rank == 0) rank = 1;
    return values[std::min(rank, values.size()) - 1];
}

template <typename T>
NormStats norm_stats(const Matrix<T>& rows) {
    if (rows.rows() == 0) throw DegenerateInputError("norm stats of an empty trace");
    std::vector<double> norms(rows.rows());
    double sum = 0.0;
    for (std::size_t i = 0; i < rows.rows(); ++i) {
        double s = 0.0;
        for (T v : rows.row(i)) s += static_cast<double>(v) * static_cast<double>(v);
        norms[i] = std::sqrt(s);
        sum += norms[i];
    }
    NormStats st;
    st.mean = sum / static_cast<double>(norms.size());
    st.p50 = nearest_rank(norms, 0.5);
    st.p90 = nearest_rank(norms, 0.9);
    return st;
}

template <typename T>
Matrix<T> residualize_trace(const Matrix<T>& trace, std::size_t stride, std::size_t k) {
    if (stride == 0) throw ConfigError("residualize_trace: stride must be positive");
    Matrix<T> out(trace.rows(), trace.cols());
    ReferenceSet<T> refs(stride, trace.cols());
    for (std::size_t i = 0; i < trace.rows(); ++i) {
        auto row = trace.row(i);
        auto entries = refs.topk(row, k, i);
        Vector<T> mean = refs.mean_reference(entries);
        auto dst = out.row(i);
        for (std::size_t c = 0; c < row.size(); ++c) dst[c] = row[c] - mean[c];
        refs.maybe_append(i, row);
    }
    return out;
}

template <typename T>
KvTrace<T> residualize_trace(const KvTrace<T>& trace, std::size_t stride, std::size_t k) {
    KvTrace<T> out;
    out.layers.reserve(trace.layers.size());
    for (const auto& m : trace.layers) out.layers.push_back(residualize_trace(m, stride, k));
    return out;
}

template <typename T>
Matrix<T> latent_trace(const CodecParams<T>& codec, const Matrix<T>& trace, std::size_t stride, std::size_t k) {
    if (stride == 0) throw ConfigError("latent_trace: stride must be positive");
    if (codec.config.input_dim != trace.cols()) throw ShapeError("latent_trace: codec input width differs from the trace");
    Matrix<T> out(trace.rows(), codec.config.latent_dim);
    ReferenceSet<T> refs(stride, trace.cols());
    for (std::size_t i = 0; i < trace.rows(); ++i) {
        auto row = trace.row(i);
        const auto entries = refs.topk(row, k, i);
        const Vector<T> mean = refs.mean_reference(entries);
        const auto z = compress(codec, row, std::span<const T>(mean));
        std::copy(z.begin(), z.end(), out.row(i).begin());
        refs.maybe_append(i, row);
    }
    return out;
}

template <typename T>
double cosine_similarity(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) throw ShapeError("cosine_similarity: length mismatch");
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i], y = b[i];
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if (aa == 0.0 || bb == 0.0) return 0.0;
    return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

template <typename T>
std::vector<std::size_t> nearest_similar_tokens(const Matrix<T>& trace) {
    std::vector<std::size_t> out;
    for (std::size_t i = 1; i < trace.rows(); ++i) {
        std::size_t best = 0;
        double best_sim = -2.0;
        for (std::size_t j = 0; j < i; ++j) {
            const double s = cosine_similarity(trace.row(i), trace.row(j));
            if (s >= best_sim) {
                best_sim = s;
                best = j;
            }
        }
        out.push_back(best);
    }
    return out;
}

namespace {

template <typename T>
std::vector<double> flat_values(const Matrix<T>& m) {
    return std::vector<double>(m.flat().begin(), m.flat().end());
}

Histogram value_histogram(const std::vector<double>& values, std::size_t bins, double quantile) {
    std::vector<double> mags(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) mags[i] = std::fabs(values[i]);
    double range = nearest_rank(mags, quantile);
    if (!(range > 0.0)) range = 1.0;
    return make_histogram(values, linear_edges(-range, range, bins));
}

// Traces narrower than m use their last singular value.
double safe_flatness(const std::vector<double>& spectrum, std::size_t m) {
    try {
        return spectrum_flatness(spectrum, std::min(m, spectrum.size()));
    } catch (const DegenerateInputError&) {
        return 0.0;
    }
}

}  // namespace

template <typename T>
AnalysisReport build_report(const Matrix<T>& original, const Matrix<T>& residual, const Matrix<T>* latent,
                            const AnalysisConfig& config) {
    if (original.rows() < 2) throw DegenerateInputError("analysis needs at least two tokens");
    if (residual.rows() != original.rows() || residual.cols() != original.cols()) {
        throw ShapeError("residual trace shape differs from the original");
    }
    if (config.cosine_step <= 0.0 || config.value_bins == 0) throw InputError("analysis bins must be positive");

    AnalysisReport r;
    r.tokens = original.rows();

    ReferenceSet<T> refs(config.stride, original.cols());
    refs.maybe_append(0, original.row(0));
    for (std::size_t i = 1; i < original.rows(); ++i) {
        auto e = refs.topk(original.row(i), 1, i);
        r.similarity.push_back(e.empty() ? 0.0 : cosine_similarity(original.row(i), refs.kv(e[0])));
        refs.maybe_append(i, original.row(i));
    }
    const auto n_cos = static_cast<std::size_t>(std::llround(2.0 / config.cosine_step));
    r.similarity_histogram = make_histogram(r.similarity, linear_edges(-1.0, 1.0, std::max<std::size_t>(n_cos, 1)));

    r.nearest_similar = nearest_similar_tokens(original);
    std::size_t max_exp = 1;
    for (std::size_t i = 1; i < original.rows(); ++i) {
        const double d = std::log2(static_cast<double>(i - r.nearest_similar[i - 1]));
        r.log2_distance.push_back(d);
        max_exp = std::max(max_exp, static_cast<std::size_t>(std::floor(d)) + 1);
    }
    std::vector<double> dist_edges;
    for (std::size_t e = 0; e <= max_exp; ++e) dist_edges.push_back(static_cast<double>(e));
    r.distance_histogram = make_histogram(r.log2_distance, dist_edges);

    r.svd_spectrum_original = svd_singular_values(original);
    r.svd_spectrum_residual = svd_singular_values(residual);
    r.flatness_original = safe_flatness(r.svd_spectrum_original, config.flatness_m);
    r.flatness_residual = safe_flatness(r.svd_spectrum_residual, config.flatness_m);
    r.norm_stats_original = norm_stats(original);
    r.norm_stats_residual = norm_stats(residual);

    r.value_histogram_original = value_histogram(flat_values(original), config.value_bins, config.value_quantile);
    r.value_histogram_residual = value_histogram(flat_values(residual), config.value_bins, config.value_quantile);
    if (latent != nullptr && !latent->empty()) {
        r.value_histogram_latent = value_histogram(flat_values(*latent), config.value_bins, config.value_quantile);
    }
    return r;
}

double spectrum_flatness(const std::vector<double>& spectrum, std::size_t m) {
    if (spectrum.empty() || !(spectrum.front() > 0.0)) {
        throw DegenerateInputError("spectrum flatness needs a positive leading singular value");
    }
    if (m == 0) m = std::min<std::size_t>(10, spectrum.size());
    if (m > spectrum.size()) throw InputError("spectrum flatness index beyond the spectrum");
    return spectrum[m - 1] / spectrum.front();
}

namespace {

nlohmann::json histogram_json(const Histogram& h) {
    return {{"edges", h.edges}, {"counts", h.counts}};
}

nlohmann::json stats_json(const NormStats& s) {
    return {{"mean", s.mean}, {"p50", s.p50}, {"p90", s.p90}};
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write " + path.string());
    return out;
}

std::vector<std::vector<std::string>> read_csv_rows(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot read " + path.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        rows.push_back(std::move(cells));
    }
    return rows;
}

}  // namespace

std::string AnalysisReport::to_json() const {
    nlohmann::json j;
    j["tokens"] = tokens;
    j["similarity_histogram"] = histogram_json(similarity_histogram);
    j["distance_histogram"] = histogram_json(distance_histogram);
    j["svd_spectrum_original"] = svd_spectrum_original;
    j["svd_spectrum_residual"] = svd_spectrum_residual;
    j["flatness_original"] = flatness_original;
    j["flatness_residual"] = flatness_residual;
    j["norm_stats_original"] = stats_json(norm_stats_original);
    j["norm_stats_residual"] = stats_json(norm_stats_residual);
    j["value_histogram_original"] = histogram_json(value_histogram_original);
    j["value_histogram_residual"] = histogram_json(value_histogram_residual);
    if (!value_histogram_latent.counts.empty()) j["value_histogram_latent"] = histogram_json(value_histogram_latent);
    return j.dump(2);
}

void write_histogram_csv(const Histogram& h, const std::filesystem::path& path) {
    if (h.edges.size() != h.counts.size() + 1) throw InputError("histogram edges and counts disagree");
    auto out = open_out(path);
    out << "bin_lo,bin_hi,count\n";
    for (std::size_t b = 0; b < h.counts.size(); ++b) {
        out << fmt(h.edges[b]) << ',' << fmt(h.edges[b + 1]) << ',' << h.counts[b] << '\n';
    }
}

Histogram read_histogram_csv(const std::filesystem::path& path) {
    Histogram h;
    for (const auto& cells : read_csv_rows(path)) {
        if (cells.size() != 3) throw InputError("malformed histogram row in " + path.string());
        if (h.edges.empty()) h.edges.push_back(std::stod(cells[0]));
        h.edges.push_back(std::stod(cells[1]));
        h.counts.push_back(static_cast<std::size_t>(std::stoull(cells[2])));
    }
    return h;
}

void write_series_csv(const std::vector<double>& values, const std::string& column, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "index," << column << '\n';
    for (std::size_t i = 0; i < values.size(); ++i) out << i << ',' << fmt(values[i]) << '\n';
}

std::vector<double> read_series_csv(const std::filesystem::path& path) {
    std::vector<double> v;
    for (const auto& cells : read_csv_rows(path)) {
        if (cells.size() != 2) throw InputError("malformed series row in " + path.string());
        v.push_back(std::stod(cells[1]));
    }
    return v;
}

void write_report(const AnalysisReport& report, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_histogram_csv(report.similarity_histogram, dir / "similarity_hist.csv");
    write_histogram_csv(report.distance_histogram, dir / "distance_hist.csv");
    write_series_csv(report.svd_spectrum_original, "sigma", dir / "svd_original.csv");
    write_series_csv(report.svd_spectrum_residual, "sigma", dir / "svd_residual.csv");
    write_histogram_csv(report.value_histogram_original, dir / "values_original.csv");
    write_histogram_csv(report.value_histogram_residual, dir / "values_residual.csv");
    if (!report.value_histogram_latent.counts.empty()) {
        write_histogram_csv(report.value_histogram_latent, dir / "values_latent.csv");
    }
    auto out = open_out(dir / "report.json");
    out << report.to_json() << '\n';
}

#define DELTAKV_INSTANTIATE(T)                                                                             \
    template NormStats norm_stats(const Matrix<T>&);                                                       \
    template Matrix<T> residualize_trace(const Matrix<T>&, std::size_t, std::size_t);                     \
    template KvTrace<T> residualize_trace(const KvTrace<T>&, std::size_t, std::size_t);                   \
    template Matrix<T> latent_trace(const CodecParams<T>&, const Matrix<T>&, std::size_t, std::size_t);        \
    template double cosine_similarity(std::span<const T>, std::span<const T>);                            \
    template std::vector<std::size_t> nearest_similar_tokens(const Matrix<T>&);                           \
    template AnalysisReport build_report(const Matrix<T>&, const Matrix<T>&, const Matrix<T>*,            \
                                         const AnalysisConfig&);

DELTAKV_INSTANTIATE(float)
DELTAKV_INSTANTIATE(double)
#undef DELTAKV_INSTANTIATE

}  // namespace deltakv
