#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "deltakv/reference_index.hpp"
#include "test_util.hpp"

using namespace deltakv;
using namespace deltakv::testing;

namespace {

// Exhaustive sort over eligible entries by (distance, token index).
std::vector<std::size_t> sort_oracle(const ReferenceSet<double>& set, std::span<const double> q, std::size_t k,
                                     std::size_t below) {
    std::vector<std::pair<std::pair<double, std::size_t>, std::size_t>> all;
    for (std::size_t e = 0; e < set.size(); ++e) {
        if (set.token_index(e) >= below) continue;
        double d = 0.0;
        for (std::size_t i = 0; i < q.size(); ++i) d += (q[i] - set.kv(e)[i]) * (q[i] - set.kv(e)[i]);
        all.push_back({{d, set.token_index(e)}, e});
    }
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < std::min(k, all.size()); ++i) out.push_back(all[i].second);
    return out;
}

}  // namespace

TEST(ReferenceSet, AppendRule) {
    ReferenceSet<double> s(10, 2);
    std::vector<double> v{1, 2};
    EXPECT_TRUE(s.maybe_append(0, v));
    EXPECT_FALSE(s.maybe_append(5, v));
    for (std::size_t i = 6; i < 100; ++i) s.maybe_append(i, v);
    EXPECT_EQ(s.size(), 10u);
    EXPECT_THROW(s.maybe_append(50, v), OrderingError);
    std::vector<double> wrong{1, 2, 3};
    EXPECT_THROW(s.maybe_append(100, wrong), ShapeError);
}

TEST(ReferenceSet, SizeFollowsFloorRule) {
    for (std::size_t stride : {1, 3, 10}) {
        ReferenceSet<float> s(stride, 1);
        std::vector<float> v{0};
        for (std::size_t i = 0; i < 57; ++i) s.maybe_append(i, v);
        EXPECT_EQ(s.size(), 56 / stride + 1);
    }
}

TEST(ReferenceSet, TopkTieRuleAndSingleCandidate) {
    ReferenceSet<double> s(1, 2);
    std::vector<double> a{1, 0}, b{-1, 0}, c{5, 5};
    s.maybe_append(0, c);
    auto one = s.topk(std::vector<double>{0, 0}, 1, 1);
    ASSERT_EQ(one.size(), 1u);
    EXPECT_EQ(one[0], 0u);
    s.maybe_append(1, a);
    s.maybe_append(2, b);
    auto r = s.topk(std::vector<double>{0, 0}, 2, 3);
    EXPECT_EQ(r, (std::vector<std::size_t>{1, 2}));
    EXPECT_TRUE(s.topk(std::vector<double>{0, 0}, 3, 0).empty());
    EXPECT_EQ(s.topk(std::vector<double>{0, 0}, 10, 3).size(), 3u);
}

TEST(ReferenceSet, QueryInSetFindsItself) {
    Rng rng(1);
    ReferenceSet<double> s(1, 4);
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < 20; ++i) {
        rows.push_back(random_vector<double>(rng, 4));
        s.maybe_append(i, rows.back());
    }
    s.maybe_append(20, rows[3]);  // duplicate of entry 3
    for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(s.topk(rows[i], 1, 21)[0], i);
}

TEST(ReferenceSet, TopkMatchesSortOracle) {
    Rng rng(2);
    for (int trial = 0; trial < 100; ++trial) {
        ReferenceSet<double> s(1 + rng.below(3), 6);
        for (std::size_t i = 0; i < 64 * 3; ++i) {
            // coarse values make exact distance ties common
            std::vector<double> v(6);
            for (auto& x : v) x = static_cast<double>(rng.below(3));
            s.maybe_append(i, v);
        }
        std::vector<double> q(6);
        for (auto& x : q) x = static_cast<double>(rng.below(3));
        const std::size_t below = rng.below(200);
        EXPECT_EQ(s.topk(q, 4, below), sort_oracle(s, q, 4, below));
        EXPECT_EQ(s.topk_batched(q, 4, below), sort_oracle(s, q, 4, below));
    }
}

TEST(ReferenceSet, MeanReference) {
    Rng rng(3);
    ReferenceSet<double> s(1, 5);
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < 4; ++i) {
        rows.push_back(random_vector<double>(rng, 5));
        s.maybe_append(i, rows.back());
    }
    std::vector<std::size_t> single{2};
    EXPECT_EQ(s.mean_reference(single), rows[2]);
    EXPECT_EQ(s.mean_reference({}), std::vector<double>(5, 0.0));
    std::vector<std::size_t> all{0, 1, 2, 3};
    auto m = s.mean_reference(all);
    for (std::size_t c = 0; c < 5; ++c) {
        EXPECT_NEAR(m[c], (rows[0][c] + rows[1][c] + rows[2][c] + rows[3][c]) / 4.0, 1e-7);
    }
    std::vector<std::size_t> bad{9};
    EXPECT_THROW(s.mean_reference(bad), IndexError);
}

TEST(BatchL2, KnownValuesAndLoopOracle) {
    Matrix<double> q(1, 2), r(1, 2, std::vector<double>{3, 4});
    EXPECT_DOUBLE_EQ(batch_l2(q, r)(0, 0), 25.0);
    Rng rng(4);
    auto a = random_matrix<float>(rng, 16, 8);
    auto b = random_matrix<float>(rng, 32, 8);
    auto d = batch_l2(a, b);
    for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t j = 0; j < 32; ++j) EXPECT_NEAR(d(i, j), squared_l2<float>(a.row(i), b.row(j)), 1e-5);
    auto self = batch_l2(a, a);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(self(i, i), 0.0, 1e-5);
    EXPECT_THROW(batch_l2(a, random_matrix<float>(rng, 2, 3)), ShapeError);
}
