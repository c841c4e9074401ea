#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "deltakv/errors.hpp"

namespace deltakv {

// Dense row-major matrix. Value type; copies are deep.
template <typename T>
class Matrix {
public:
    using value_type = T;

    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T{})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError("Matrix: data length does not match rows*cols");
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<T> flat() { return data_; }
    std::span<const T> flat() const { return data_; }
    const std::vector<T>& values() const noexcept { return data_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    // Appends one row; the matrix must be empty or have matching cols.
    void append_row(std::span<const T> r) {
        if (rows_ == 0 && cols_ == 0) cols_ = r.size();
        if (r.size() != cols_) throw ShapeError("Matrix::append_row: width mismatch");
        data_.insert(data_.end(), r.begin(), r.end());
        ++rows_;
    }

    template <typename U>
    Matrix<U> cast() const {
        return Matrix<U>(rows_, cols_, std::vector<U>(data_.begin(), data_.end()));
    }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

template <typename T>
using Vector = std::vector<T>;

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b);

template <typename T>
Matrix<T> transpose(const Matrix<T>& a);

// out = x * w, where x is a row vector of length w.rows().
template <typename T>
void vecmat(std::span<const T> x, const Matrix<T>& w, std::span<T> out);

template <typename T>
Vector<T> vecmat(std::span<const T> x, const Matrix<T>& w);

// out = g * w^T; the input-gradient of vecmat.
template <typename T>
void vecmat_transposed(std::span<const T> g, const Matrix<T>& w, std::span<T> out);

// grad += x^T g; the weight-gradient of vecmat.
template <typename T>
void accumulate_outer(std::span<const T> x, std::span<const T> g, Matrix<T>& grad);

template <typename T>
T dot(std::span<const T> a, std::span<const T> b);

template <typename T>
T squared_l2(std::span<const T> a, std::span<const T> b);

template <typename T>
T squared_norm(std::span<const T> a);

// Exact Gaussian-CDF GeLU: x * Phi(x).
template <typename T>
T gelu(T x);
template <typename T>
T gelu_derivative(T x);

template <typename T>
T sigmoid(T x);
template <typename T>
T swish(T x);
template <typename T>
T swish_derivative(T x);

template <typename T>
Vector<T> softmax_row(std::span<const T> v);

template <typename T>
void softmax_inplace(std::span<T> v);

template <typename T>
double frobenius_norm_squared(const Matrix<T>& a);

// Thin SVD, A = U diag(s) V^T, computed in double by one-sided Jacobi.
// s is non-increasing; U is rows x k, V is cols x k with k = min(rows, cols).
struct SvdResult {
    Matrix<double> u;
    std::vector<double> s;
    Matrix<double> v;
    int sweeps = 0;
};

inline constexpr double kSvdTolerance = 1e-10;
inline constexpr int kSvdMaxSweeps = 100;

template <typename T>
SvdResult svd(const Matrix<T>& a);

template <typename T>
std::vector<double> svd_singular_values(const Matrix<T>& a);

// True when DELTAKV_VERIFY=1 selects 64-bit arithmetic.
bool verification_mode();

}  // namespace deltakv
