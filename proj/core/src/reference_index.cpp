#include "deltakv/reference_index.hpp"

#include <algorithm>
#include <string>

namespace deltakv {

template <typename T>
ReferenceSet<T>::ReferenceSet(std::size_t stride, std::size_t width) : stride_(stride), width_(width) {
    if (stride == 0) throw ConfigError("ReferenceSet: stride must be >= 1");
    if (width == 0) throw ConfigError("ReferenceSet: width must be >= 1");
}

template <typename T>
bool ReferenceSet<T>::maybe_append(std::size_t token_index, std::span<const T> kv) {
    if (!token_indices_.empty() && token_index <= token_indices_.back()) {
        throw OrderingError("ReferenceSet: token index " + std::to_string(token_index) +
                            " not greater than " + std::to_string(token_indices_.back()));
    }
    if (kv.size() != width_) throw ShapeError("ReferenceSet: kv width mismatch");
    if (token_index % stride_ != 0) return false;
    token_indices_.push_back(token_index);
    data_.insert(data_.end(), kv.begin(), kv.end());
    return true;
}

template <typename T>
std::span<const T> ReferenceSet<T>::kv(std::size_t entry) const {
    if (entry >= size()) throw IndexError("ReferenceSet: entry " + std::to_string(entry) + " out of range");
    return {data_.data() + entry * width_, width_};
}

template <typename T>
std::size_t ReferenceSet<T>::count_below(std::size_t bound) const {
    return static_cast<std::size_t>(std::lower_bound(token_indices_.begin(), token_indices_.end(), bound) -
                                    token_indices_.begin());
}

namespace {

template <typename T>
std::vector<std::size_t> select_nearest(std::vector<std::pair<T, std::size_t>>& scored, std::size_t k) {
    // Entries are in token-index order, so the entry position is the tie-break key.
    const std::size_t take = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end());
    std::vector<std::size_t> out(take);
    for (std::size_t i = 0; i < take; ++i) out[i] = scored[i].second;
    return out;
}

}  // namespace

template <typename T>
std::vector<std::size_t> ReferenceSet<T>::topk(std::span<const T> query, std::size_t k,
                                               std::size_t exclusive_below) const {
    if (k == 0) throw InputError("topk: k must be >= 1");
    if (query.size() != width_) throw ShapeError("topk: query width mismatch");
    const std::size_t n = count_below(exclusive_below);
    std::vector<std::pair<T, std::size_t>> scored(n);
    for (std::size_t e = 0; e < n; ++e) scored[e] = {squared_l2<T>(query, kv(e)), e};
    return select_nearest(scored, k);
}

template <typename T>
std::vector<std::size_t> ReferenceSet<T>::topk_batched(std::span<const T> query, std::size_t k,
                                                       std::size_t exclusive_below) const {
    if (k == 0) throw InputError("topk: k must be >= 1");
    if (query.size() != width_) throw ShapeError("topk: query width mismatch");
    const std::size_t n = count_below(exclusive_below);
    if (n == 0) return {};
    const Matrix<T> q(1, width_, std::vector<T>(query.begin(), query.end()));
    const Matrix<T> refs(n, width_, std::vector<T>(data_.begin(), data_.begin() + static_cast<std::ptrdiff_t>(n * width_)));
    const Matrix<T> dist = batch_l2(q, refs);
    std::vector<std::pair<T, std::size_t>> scored(n);
    for (std::size_t e = 0; e < n; ++e) scored[e] = {dist(0, e), e};
    return select_nearest(scored, k);
}

template <typename T>
Vector<T> ReferenceSet<T>::mean_reference(std::span<const std::size_t> entries) const {
    Vector<T> mean(width_, T{});
    if (entries.empty()) return mean;
    for (std::size_t e : entries) {
        const auto r = kv(e);
        for (std::size_t i = 0; i < width_; ++i) mean[i] += r[i];
    }
    const T inv = T{1} / static_cast<T>(entries.size());
    for (T& v : mean) v *= inv;
    return mean;
}

template <typename T>
Matrix<T> batch_l2(const Matrix<T>& queries, const Matrix<T>& refs) {
    if (queries.cols() != refs.cols()) throw ShapeError("batch_l2: inner dimensions differ");
    std::vector<T> qn(queries.rows()), rn(refs.rows());
    for (std::size_t i = 0; i < queries.rows(); ++i) qn[i] = squared_norm<T>(queries.row(i));
    for (std::size_t j = 0; j < refs.rows(); ++j) rn[j] = squared_norm<T>(refs.row(j));
    Matrix<T> out(queries.rows(), refs.rows());
    for (std::size_t i = 0; i < queries.rows(); ++i) {
        for (std::size_t j = 0; j < refs.rows(); ++j) {
            const T d = qn[i] - T{2} * dot<T>(queries.row(i), refs.row(j)) + rn[j];
            out(i, j) = std::max(d, T{});
        }
    }
    return out;
}

template class ReferenceSet<float>;
template class ReferenceSet<double>;
template Matrix<float> batch_l2(const Matrix<float>&, const Matrix<float>&);
template Matrix<double> batch_l2(const Matrix<double>&, const Matrix<double>&);

}  // namespace deltakv
