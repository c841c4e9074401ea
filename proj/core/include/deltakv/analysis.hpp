#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "deltakv/codec.hpp"
#include "deltakv/model.hpp"
#include "deltakv/tensor.hpp"

namespace deltakv {

struct Histogram {
    std::vector<double> edges;  // bins [edges[b], edges[b+1]); the last bin is closed
    std::vector<std::size_t> counts;

    std::size_t total() const;
};

// Values outside [edges.front(), edges.back()] land in the edge bins.
// Fewer than two edges or non-increasing edges throw InputError.
Histogram make_histogram(const std::vector<double>& values, std::vector<double> edges);

// n_bins equal-width bins over [lo, hi].
std::vector<double> linear_edges(double lo, double hi, std::size_t n_bins);

struct NormStats {
    double mean = 0.0;
    double p50 = 0.0;
    double p90 = 0.0;
};

// Nearest-rank percentile of row L2 norms.
template <typename T>
NormStats norm_stats(const Matrix<T>& rows);

double nearest_rank(std::vector<double> values, double p);

// Row i minus the mean of its k nearest strided references (raw rows,
// token index < i); rows without a reference keep their raw value.
template <typename T>
Matrix<T> residualize_trace(const Matrix<T>& trace, std::size_t stride, std::size_t k);

template <typename T>
KvTrace<T> residualize_trace(const KvTrace<T>& trace, std::size_t stride, std::size_t k);

// Latent codes z_i = compress(kv_i, mean of the same references residualize_trace uses).
template <typename T>
Matrix<T> latent_trace(const CodecParams<T>& codec, const Matrix<T>& trace, std::size_t stride, std::size_t k);

template <typename T>
double cosine_similarity(std::span<const T> a, std::span<const T> b);

struct AnalysisConfig {
    std::size_t stride = 10;
    std::size_t k = 4;
    double cosine_step = 0.05;
    std::size_t value_bins = 50;
    double value_quantile = 0.999;
    std::size_t flatness_m = 10;
};

struct AnalysisReport {
    std::size_t tokens = 0;
    std::vector<double> similarity;             // token i >= 1 vs its nearest reference
    std::vector<std::size_t> nearest_similar;   // most similar earlier token j of token i >= 1
    std::vector<double> log2_distance;          // log2(i - nearest_similar)
    Histogram similarity_histogram;
    Histogram distance_histogram;
    std::vector<double> svd_spectrum_original;
    std::vector<double> svd_spectrum_residual;
    NormStats norm_stats_original;
    NormStats norm_stats_residual;
    Histogram value_histogram_original;
    Histogram value_histogram_residual;
    Histogram value_histogram_latent;  // empty when no latent trace is given
    double flatness_original = 0.0;
    double flatness_residual = 0.0;

    std::string to_json() const;
};

// Index of the most cosine-similar row j < i; ties go to the larger j.
template <typename T>
std::vector<std::size_t> nearest_similar_tokens(const Matrix<T>& trace);

template <typename T>
AnalysisReport build_report(const Matrix<T>& original, const Matrix<T>& residual, const Matrix<T>* latent,
                            const AnalysisConfig& config);

// sigma_m / sigma_1 with m = min(10, len) when m == 0.
double spectrum_flatness(const std::vector<double>& spectrum, std::size_t m = 0);

void write_histogram_csv(const Histogram& h, const std::filesystem::path& path);
Histogram read_histogram_csv(const std::filesystem::path& path);
void write_series_csv(const std::vector<double>& values, const std::string& column, const std::filesystem::path& path);
std::vector<double> read_series_csv(const std::filesystem::path& path);
// One CSV per panel plus report.json.
void write_report(const AnalysisReport& report, const std::filesystem::path& dir);

}  // namespace deltakv
