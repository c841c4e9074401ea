#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "deltakv/rng.hpp"
#include "deltakv/tensor.hpp"

namespace deltakv::testing {

template <typename T>
Matrix<T> random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
    Matrix<T> m(rows, cols);
    for (auto& v : m.flat()) v = static_cast<T>(rng.uniform(-scale, scale));
    return m;
}

template <typename T>
std::vector<T> random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(rng.uniform(-scale, scale));
    return v;
}

template <typename T>
double max_abs_diff(std::span<const T> a, std::span<const T> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(static_cast<double>(a[i]) - b[i]));
    return m;
}

template <typename T>
double max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
    return max_abs_diff(a.flat(), b.flat());
}

}  // namespace deltakv::testing
