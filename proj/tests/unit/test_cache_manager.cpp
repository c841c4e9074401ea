#include <gtest/gtest.h>

#include <set>

#include "cache_sim.hpp"
#include "deltakv/cache_manager.hpp"

using namespace deltakv;
using namespace deltakv::testing;

namespace {

CacheConfig small_config(bool identity = true) {
    CacheConfig c;
    c.n_layers = 3;
    c.kv_width = 8;
    c.latent_dim = identity ? 8 : 2;
    c.filter_layers = {0};
    c.n_sink = 2;
    c.n_recent = 3;
    c.stride = 4;
    c.top_k = 2;
    c.full_capacity = 512;
    c.latent_capacity = 512;
    return c;
}

CodecBank<float> bank_for(const CacheConfig& c, bool identity = true) {
    const auto v = identity ? CodecVariant::identity_linear : CodecVariant::heavy;
    return make_codec_bank<float>(CodecConfig::defaults(v, c.kv_width), c.n_layers, c.filter_layers, 5);
}

}  // namespace

TEST(SlotAllocator, LowestFirstReuseAndErrors) {
    SlotAllocator a(4);
    EXPECT_EQ(a.alloc_one(), 0u);
    auto more = a.alloc(2);
    EXPECT_EQ(more, (std::vector<std::size_t>{1, 2}));
    a.free_one(1);
    EXPECT_EQ(a.alloc_one(), 1u);
    EXPECT_THROW(a.alloc(2), PoolExhaustedError);
    a.free_one(2);
    EXPECT_THROW(a.free_one(2), LifecycleError);
    std::vector<std::size_t> twice{0, 0};
    EXPECT_THROW(a.free(twice), LifecycleError);
    EXPECT_TRUE(a.is_live(0));
    EXPECT_EQ(a.live_count(), 2u);
}

TEST(SlotAllocator, RandomInterleavingsMatchSimulator) {
    Rng rng(1);
    SlotAllocator a(32);
    SimAlloc sim(32);
    std::set<std::size_t> live;
    for (int op = 0; op < 1000; ++op) {
        if (live.empty() || (rng.below(2) == 0 && !sim.free.empty())) {
            const std::size_t s = a.alloc_one();
            ASSERT_EQ(s, sim.take());
            live.insert(s);
        } else {
            auto it = live.begin();
            std::advance(it, static_cast<long>(rng.below(live.size())));
            a.free_one(*it);
            sim.give(*it);
            live.erase(it);
        }
        ASSERT_EQ(a.live_slots(), std::vector<std::size_t>(live.begin(), live.end()));
    }
}

TEST(Pools, FullAndLatentStorage) {
    FullPool<float> full(4, 3, 2);
    const auto s = full.allocator().alloc_one();
    std::vector<float> a{1, 2, 3}, b{4, 5, 6};
    full.write(s, a, 0);
    full.write(s, b, 1);
    EXPECT_EQ(std::vector<float>(full.read(s, 0).begin(), full.read(s, 0).end()), a);
    EXPECT_EQ(std::vector<float>(full.read(s, 1).begin(), full.read(s, 1).end()), b);
    EXPECT_THROW(full.read(3), LifecycleError);
    EXPECT_THROW(full.write(s, std::vector<float>{1}), ShapeError);

    LatentPool<float> q(2, 5, true);
    const auto t = q.allocator().alloc_one();
    std::vector<float> z{0.f, 1.f, 2.f, 3.f, 15.f};
    q.write(t, z);
    EXPECT_EQ(q.read(t), z);
    EXPECT_EQ(q.bytes_per_slot(), quantized_bytes(5));
    EXPECT_TRUE(std::holds_alternative<QuantizedLatent>(q.stored(t)));
    LatentPool<float> raw(2, 5, false);
    EXPECT_EQ(raw.bytes_per_slot(), 5 * sizeof(float));
}

TEST(CacheConfig, Validation) {
    auto c = small_config();
    c.n_recent = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    auto g = small_config();
    g.slot_map = SlotMapVariant::global;
    EXPECT_THROW(g.validate(), ConfigError);
    g.filter_layers = {0, 1, 2};
    EXPECT_NO_THROW(g.validate());
    auto bank = bank_for(small_config());
    auto mismatch = small_config();
    mismatch.latent_dim = 3;
    EXPECT_THROW(CacheManager<float>(mismatch, &bank), ShapeError);
    EXPECT_THROW(CacheManager<float>(small_config(), nullptr), ConfigError);
}

TEST(CacheManager, AppendMigrationAndReferences) {
    auto c = small_config();
    auto bank = bank_for(c);
    CacheManager<float> cm(c, &bank);
    cm.register_request(1);
    EXPECT_THROW(cm.register_request(1), LifecycleError);
    Rng rng(2);
    const std::size_t warm = c.n_sink + c.n_recent;
    for (std::size_t i = 0; i < warm; ++i) cm.append_token(1, 1, random_vector<float>(rng, 8));
    EXPECT_EQ(cm.latent_pool().allocator().live_count(), 0u);
    EXPECT_FALSE(cm.overflow_migrate(1, 0));  // filter layer
    cm.append_token(1, 1, random_vector<float>(rng, 8));
    EXPECT_EQ(cm.latent_pool().allocator().live_count(), 1u);
    EXPECT_EQ(cm.region_of(1, 1, c.n_sink), Region::compressed);
    EXPECT_EQ(cm.slot_of(1, 1, c.n_sink).tier, Tier::latent);
    EXPECT_EQ(cm.positions_in(1, 1, Region::recent), (std::vector<std::size_t>{3, 4, 5}));
    // positions 0 and 4 are references (s = 4)
    EXPECT_EQ(cm.reference_set(1, 1).token_indices(), (std::vector<std::size_t>{0, 4}));
    EXPECT_EQ(cm.reference_slots(1, 1).size(), 2u);
    cm.check_invariants();
}

TEST(CacheManager, ExplicitOverflowMigrate) {
    auto c = small_config();
    auto bank = bank_for(c);
    CacheManager<float> cm(c, &bank);
    cm.register_request(1);
    Rng rng(3);
    for (std::size_t i = 0; i < c.n_sink + 2; ++i) cm.append_token(1, 1, random_vector<float>(rng, 8));
    EXPECT_FALSE(cm.overflow_migrate(1, 1));
    cm.append_token(1, 1, random_vector<float>(rng, 8));
    const auto full_before = cm.full_pool().allocator().live_count();
    EXPECT_TRUE(cm.overflow_migrate(1, 1));
    EXPECT_EQ(cm.full_pool().allocator().live_count(), full_before - 1);
    EXPECT_EQ(cm.latent_pool().allocator().live_count(), 1u);
}

TEST(CacheManager, ViewsEmptyAndFullSelection) {
    auto c = small_config();
    auto bank = bank_for(c);
    CacheManager<float> cm(c, &bank);
    cm.register_request(7);
    Rng rng(4);
    std::vector<std::vector<float>> shadow;
    for (std::size_t i = 0; i < 20; ++i) {
        shadow.push_back(random_vector<float>(rng, 8));
        cm.append_token(7, 2, shadow.back());
    }
    auto empty = cm.build_view(7, 2, {});
    EXPECT_EQ(empty.entries.size(), c.n_sink + c.n_recent);
    auto compressed = cm.positions_in(7, 2, Region::compressed);
    auto all = cm.build_view(7, 2, compressed);
    ASSERT_EQ(all.entries.size(), 20u);
    for (const auto& e : all.entries) {
        auto got = cm.read(2, e.slot);
        EXPECT_LT(max_abs_diff<float>(got, shadow[e.position]), 1e-5) << e.position;
    }
    EXPECT_THROW(cm.read(2, cm.slot_of(7, 2, c.n_sink)), LifecycleError);
    std::vector<std::size_t> beyond{99};
    EXPECT_THROW(cm.build_view(7, 2, beyond), IndexError);
    EXPECT_GT(cm.temp_slot_count(7), 0u);
    cm.post_forward(7);
    EXPECT_EQ(cm.temp_slot_count(7), 0u);
    cm.release_request(7);
    EXPECT_EQ(cm.full_pool().allocator().live_count(), 0u);
    EXPECT_EQ(cm.latent_pool().allocator().live_count(), 0u);
}

TEST(CacheManager, TempSlotsSharedWithinGroup) {
    auto c = small_config();
    c.n_layers = 4;
    auto bank = bank_for(c);
    CacheManager<float> cm(c, &bank);
    cm.register_request(1);
    Rng rng(5);
    for (std::size_t l : {1, 2}) {
        for (std::size_t i = 0; i < 12; ++i) cm.append_token(1, l, random_vector<float>(rng, 8));
    }
    std::vector<std::size_t> sel{2, 3, 5};  // 2, 3 and 5 are compressed; none is a reference
    auto v1 = cm.build_view(1, 1, sel);
    const auto temps = cm.temp_slot_count(1);
    auto v2 = cm.build_view(1, 2, sel);
    EXPECT_EQ(cm.temp_slot_count(1), temps);
    EXPECT_EQ(v1.reconstructed, 3u);
    EXPECT_EQ(v2.reconstructed, 3u);
    cm.post_forward(1);
    cm.check_invariants();
}

TEST(CacheManager, EvictionPerLayerAndGlobalRejection) {
    auto c = small_config();
    auto bank = bank_for(c);
    CacheManager<float> cm(c, &bank);
    cm.register_request(1);
    Rng rng(6);
    for (std::size_t i = 0; i < 15; ++i) {
        for (std::size_t l = 0; l < 3; ++l) cm.append_token(1, l, random_vector<float>(rng, 8));
    }
    std::vector<std::size_t> victims{2, 3};
    cm.evict_tokens(1, 1, victims);
    EXPECT_THROW(cm.region_of(1, 1, 2), IndexError);
    EXPECT_EQ(cm.region_of(1, 2, 2), Region::compressed);
    std::vector<std::size_t> sink{0};
    EXPECT_THROW(cm.evict_tokens(1, 1, sink), IndexError);
    EXPECT_EQ(cm.audit(1).layers[1].evicted, 2u);
    cm.check_invariants();

    auto g = small_config();
    g.filter_layers = {0, 1, 2};
    g.slot_map = SlotMapVariant::global;
    CacheManager<float> gm(g, &bank);
    gm.register_request(1);
    for (std::size_t l = 0; l < 3; ++l) gm.append_token(1, l, random_vector<float>(rng, 8));
    EXPECT_EQ(gm.slot_map(1).table_count(), 1u);
    EXPECT_EQ(gm.slot_of(1, 0, 0), gm.slot_of(1, 2, 0));
    EXPECT_EQ(gm.full_pool().allocator().live_count(), 1u);
    std::vector<std::size_t> p0{0};
    EXPECT_THROW(gm.evict_tokens(1, 1, p0), ConfigError);
}

TEST(CacheManager, RandomizedModelCheck) {
    for (std::uint64_t seed : {7, 8}) {
        const auto r = run_model_check(10000, seed);
        EXPECT_EQ(r.failure, "") << "seed " << seed;
        EXPECT_EQ(r.ops, 10000u);
    }
}

TEST(CacheManager, LongRunFullSlotBoundAndAudit) {
    for (bool quantize : {false, true}) {
        CacheConfig c;
        c.n_layers = 4;
        c.kv_width = 32;
        c.latent_dim = 8;
        c.filter_layers = {0};
        c.quantize = quantize;
        c.full_capacity = 20000;
        c.latent_capacity = 20000;
        auto bank = bank_for(c, false);
        CacheManager<float> cm(c, &bank);
        cm.register_request(1);
        Rng rng(8);
        const std::size_t T = 3000;
        for (std::size_t i = 0; i < T; ++i) {
            for (std::size_t l = 0; l < 4; ++l) cm.append_token(1, l, random_vector<float>(rng, 32));
        }
        const auto a = cm.audit(1);
        for (std::size_t l = 1; l < 4; ++l) {
            EXPECT_EQ(a.layers[l].full_slots, c.n_sink + c.n_recent + (T + c.stride - 1) / c.stride);
            EXPECT_EQ(a.layers[l].latent_slots, T - c.n_sink - c.n_recent);
        }
        EXPECT_EQ(a.layers[0].full_slots, T);
        EXPECT_NEAR(a.measured_kr_net / a.predicted_kr, 1.0, 0.02);
        cm.check_invariants();
    }
}

TEST(CacheManager, TempSlotsDoNotLeakOverManySteps) {
    auto c = small_config();
    auto bank = bank_for(c);
    CacheManager<float> cm(c, &bank);
    cm.register_request(1);
    Rng rng(9);
    for (std::size_t i = 0; i < 30; ++i) cm.append_token(1, 1, random_vector<float>(rng, 8));
    const auto baseline = cm.full_pool().allocator().live_count();
    auto comp = cm.positions_in(1, 1, Region::compressed);
    for (int step = 0; step < 10000; ++step) {
        cm.build_view(1, 1, comp);
        cm.post_forward(1);
    }
    EXPECT_EQ(cm.full_pool().allocator().live_count(), baseline);
}
