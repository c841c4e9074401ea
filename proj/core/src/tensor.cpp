#include "deltakv/tensor.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <limits>
#include <numbers>
#include <numeric>

namespace deltakv {

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.rows()) + ")");
    }
    Matrix<T> c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            T acc{};
            for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
            c(i, j) = acc;
        }
    }
    return c;
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
    Matrix<T> t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

template <typename T>
void vecmat(std::span<const T> x, const Matrix<T>& w, std::span<T> out) {
    if (x.size() != w.rows() || out.size() != w.cols()) throw ShapeError("vecmat: shape mismatch");
    std::fill(out.begin(), out.end(), T{});
    // Each output accumulates over the shared dimension in index order, matching matmul.
    for (std::size_t k = 0; k < w.rows(); ++k) {
        const T xk = x[k];
        const auto wr = w.row(k);
        for (std::size_t j = 0; j < w.cols(); ++j) out[j] += xk * wr[j];
    }
}

template <typename T>
Vector<T> vecmat(std::span<const T> x, const Matrix<T>& w) {
    Vector<T> out(w.cols());
    vecmat<T>(x, w, out);
    return out;
}

template <typename T>
void vecmat_transposed(std::span<const T> g, const Matrix<T>& w, std::span<T> out) {
    if (g.size() != w.cols() || out.size() != w.rows()) {
        throw ShapeError("vecmat_transposed: shape mismatch");
    }
    for (std::size_t k = 0; k < w.rows(); ++k) out[k] = dot<T>(g, w.row(k));
}

template <typename T>
void accumulate_outer(std::span<const T> x, std::span<const T> g, Matrix<T>& grad) {
    if (x.size() != grad.rows() || g.size() != grad.cols()) {
        throw ShapeError("accumulate_outer: shape mismatch");
    }
    for (std::size_t k = 0; k < x.size(); ++k) {
        const T xk = x[k];
        if (xk == T{}) continue;
        auto gr = grad.row(k);
        for (std::size_t j = 0; j < g.size(); ++j) gr[j] += xk * g[j];
    }
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
    T acc{};
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

template <typename T>
T squared_l2(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) throw ShapeError("squared_l2: length mismatch");
    T acc{};
    for (std::size_t i = 0; i < a.size(); ++i) {
        const T d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

template <typename T>
T squared_norm(std::span<const T> a) {
    T acc{};
    for (T v : a) acc += v * v;
    return acc;
}

template <typename T>
T gelu(T x) {
    return static_cast<T>(0.5) * x * (T{1} + std::erf(x / std::sqrt(T{2})));
}

template <typename T>
T gelu_derivative(T x) {
    const T cdf = static_cast<T>(0.5) * (T{1} + std::erf(x / std::sqrt(T{2})));
    const T pdf = std::exp(static_cast<T>(-0.5) * x * x) / std::sqrt(T{2} * std::numbers::pi_v<T>);
    return cdf + x * pdf;
}

template <typename T>
T sigmoid(T x) {
    if (x >= T{}) return T{1} / (T{1} + std::exp(-x));
    const T e = std::exp(x);
    return e / (T{1} + e);
}

template <typename T>
T swish(T x) {
    return x * sigmoid(x);
}

template <typename T>
T swish_derivative(T x) {
    const T s = sigmoid(x);
    return s + x * s * (T{1} - s);
}

template <typename T>
void softmax_inplace(std::span<T> v) {
    if (v.empty()) throw ShapeError("softmax: empty input");
    const T mx = *std::max_element(v.begin(), v.end());
    T sum{};
    for (T& x : v) {
        x = std::exp(x - mx);
        sum += x;
    }
    for (T& x : v) x /= sum;
}

template <typename T>
Vector<T> softmax_row(std::span<const T> v) {
    Vector<T> out(v.begin(), v.end());
    softmax_inplace<T>(out);
    return out;
}

template <typename T>
double frobenius_norm_squared(const Matrix<T>& a) {
    double acc = 0.0;
    for (T v : a.flat()) acc += static_cast<double>(v) * static_cast<double>(v);
    return acc;
}

namespace {

// One-sided Jacobi on the columns of w (m x n, m >= n). Returns sweeps used.
int jacobi_orthogonalize(Matrix<double>& w, Matrix<double>& v) {
    const std::size_t m = w.rows();
    const std::size_t n = w.cols();
    // Columns at rounding-noise level relative to A count as zero; otherwise
    // rank-deficient inputs keep a residue parallel to the surviving columns.
    const double noise = std::numeric_limits<double>::epsilon() * static_cast<double>(std::max(m, n));
    const double floor = noise * noise * frobenius_norm_squared(w);
    double off = 0.0;
    for (int sweep = 1; sweep <= kSvdMaxSweeps; ++sweep) {
        off = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    const double wp = w(i, p), wq = w(i, q);
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if (alpha <= floor || beta <= floor || gamma == 0.0) continue;
                const double rel = std::abs(gamma) / std::sqrt(alpha * beta);
                off = std::max(off, rel);
                if (rel < kSvdTolerance) continue;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double wp = w(i, p), wq = w(i, q);
                    w(i, p) = c * wp - s * wq;
                    w(i, q) = s * wp + c * wq;
                }
                for (std::size_t i = 0; i < v.rows(); ++i) {
                    const double vp = v(i, p), vq = v(i, q);
                    v(i, p) = c * vp - s * vq;
                    v(i, q) = s * vp + c * vq;
                }
            }
        }
        if (off < kSvdTolerance) return sweep;
    }
    throw NumericalError("svd: one-sided Jacobi did not converge", off);
}

}  // namespace

template <typename T>
SvdResult svd(const Matrix<T>& a) {
    for (T x : a.flat()) {
        if (!std::isfinite(static_cast<double>(x))) throw InputError("svd: non-finite entry");
    }
    const bool wide = a.rows() < a.cols();
    Matrix<double> w = wide ? transpose(a).template cast<double>() : a.template cast<double>();
    const std::size_t m = w.rows();
    const std::size_t n = w.cols();
    Matrix<double> v = Matrix<double>::identity(n);

    SvdResult out;
    out.sweeps = n > 1 ? jacobi_orthogonalize(w, v) : 0;

    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < m; ++i) acc += w(i, j) * w(i, j);
        sigma[j] = std::sqrt(acc);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    Matrix<double> u(m, n);
    Matrix<double> vs(n, n);
    out.s.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = order[k];
        out.s[k] = sigma[j];
        for (std::size_t i = 0; i < m; ++i) u(i, k) = sigma[j] > 0.0 ? w(i, j) / sigma[j] : 0.0;
        for (std::size_t i = 0; i < n; ++i) vs(i, k) = v(i, j);
    }
    if (wide) {
        out.u = std::move(vs);
        out.v = std::move(u);
    } else {
        out.u = std::move(u);
        out.v = std::move(vs);
    }
    return out;
}

template <typename T>
std::vector<double> svd_singular_values(const Matrix<T>& a) {
    return svd(a).s;
}

bool verification_mode() {
    const char* env = std::getenv("DELTAKV_VERIFY");
    return env != nullptr && std::strcmp(env, "1") == 0;
}

#define DELTAKV_INSTANTIATE_TENSOR(T)                                                    \
    template Matrix<T> matmul(const Matrix<T>&, const Matrix<T>&);                       \
    template Matrix<T> transpose(const Matrix<T>&);                                      \
    template void vecmat(std::span<const T>, const Matrix<T>&, std::span<T>);            \
    template Vector<T> vecmat(std::span<const T>, const Matrix<T>&);                     \
    template void vecmat_transposed(std::span<const T>, const Matrix<T>&, std::span<T>); \
    template void accumulate_outer(std::span<const T>, std::span<const T>, Matrix<T>&);  \
    template T dot(std::span<const T>, std::span<const T>);                              \
    template T squared_l2(std::span<const T>, std::span<const T>);                       \
    template T squared_norm(std::span<const T>);                                         \
    template T gelu(T);                                                                  \
    template T gelu_derivative(T);                                                       \
    template T sigmoid(T);                                                               \
    template T swish(T);                                                                 \
    template T swish_derivative(T);                                                      \
    template Vector<T> softmax_row(std::span<const T>);                                  \
    template void softmax_inplace(std::span<T>);                                         \
    template double frobenius_norm_squared(const Matrix<T>&);                            \
    template SvdResult svd(const Matrix<T>&);                                            \
    template std::vector<double> svd_singular_values(const Matrix<T>&);

DELTAKV_INSTANTIATE_TENSOR(float)
DELTAKV_INSTANTIATE_TENSOR(double)

}  // namespace deltakv
