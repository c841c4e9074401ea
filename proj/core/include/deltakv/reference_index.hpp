#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "deltakv/tensor.hpp"

namespace deltakv {

// Strided reference set: keeps the KV of every token whose index is a
// multiple of the stride, searchable by squared L2 distance.
template <typename T>
class ReferenceSet {
public:
    ReferenceSet(std::size_t stride, std::size_t width);

    // Appends iff token_index % stride == 0. A token_index not greater than
    // every stored index throws OrderingError.
    bool maybe_append(std::size_t token_index, std::span<const T> kv);

    // Up to k entry positions with token_index < exclusive_below, nearest
    // first; equal distances resolve to the smaller token index.
    std::vector<std::size_t> topk(std::span<const T> query, std::size_t k, std::size_t exclusive_below) const;

    // Same contract as topk, with distances from the batch_l2 expansion.
    std::vector<std::size_t> topk_batched(std::span<const T> query, std::size_t k,
                                          std::size_t exclusive_below) const;

    // Mean of the listed entries; the zero vector for an empty list.
    Vector<T> mean_reference(std::span<const std::size_t> entries) const;

    std::size_t stride() const noexcept { return stride_; }
    std::size_t width() const noexcept { return width_; }
    std::size_t size() const noexcept { return token_indices_.size(); }
    bool empty() const noexcept { return token_indices_.empty(); }

    std::size_t token_index(std::size_t entry) const { return token_indices_.at(entry); }
    std::span<const T> kv(std::size_t entry) const;
    const std::vector<std::size_t>& token_indices() const noexcept { return token_indices_; }

    // Number of entries with token_index < bound.
    std::size_t count_below(std::size_t bound) const;

    bool operator==(const ReferenceSet&) const = default;

private:
    std::size_t stride_;
    std::size_t width_;
    std::vector<std::size_t> token_indices_;
    std::vector<T> data_;
};

// Squared L2 distances, ||q||^2 - 2 q.r + ||r||^2 clamped at 0.
template <typename T>
Matrix<T> batch_l2(const Matrix<T>& queries, const Matrix<T>& refs);

}  // namespace deltakv
