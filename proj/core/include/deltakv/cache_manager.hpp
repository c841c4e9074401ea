#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "deltakv/codec.hpp"
#include "deltakv/quantizer.hpp"
#include "deltakv/reference_index.hpp"
#include "deltakv/tensor.hpp"

namespace deltakv {

// Free-list allocator handing out the lowest free ids first.
class SlotAllocator {
public:
    explicit SlotAllocator(std::size_t capacity);

    std::vector<std::size_t> alloc(std::size_t n);
    std::size_t alloc_one();
    // Throws LifecycleError for ids that are not live (double free).
    void free(std::span<const std::size_t> slots);
    void free_one(std::size_t slot);

    bool is_live(std::size_t slot) const { return slot < live_.size() && live_[slot]; }
    std::size_t capacity() const noexcept { return live_.size(); }
    std::size_t live_count() const noexcept { return live_.size() - free_.size(); }
    std::size_t free_count() const noexcept { return free_.size(); }
    std::vector<std::size_t> live_slots() const;

private:
    std::set<std::size_t> free_;
    std::vector<bool> live_;
};

// Uncompressed KV rows. `planes` > 1 gives every slot id one row per layer,
// which is how the global slot table addresses all layers with one id.
template <typename T>
class FullPool {
public:
    FullPool(std::size_t capacity, std::size_t width, std::size_t planes = 1);

    SlotAllocator& allocator() { return alloc_; }
    const SlotAllocator& allocator() const { return alloc_; }

    void write(std::size_t slot, std::span<const T> kv, std::size_t plane = 0);
    std::span<const T> read(std::size_t slot, std::size_t plane = 0) const;

    std::size_t width() const noexcept { return width_; }
    std::size_t planes() const noexcept { return planes_; }
    std::size_t bytes_per_row() const noexcept { return width_ * sizeof(T); }

private:
    std::size_t row_index(std::size_t slot, std::size_t plane) const;

    SlotAllocator alloc_;
    std::size_t width_;
    std::size_t planes_;
    std::vector<T> data_;
};

// Latent codes, stored raw or as 4-bit token-wise codes.
template <typename T>
class LatentPool {
public:
    LatentPool(std::size_t capacity, std::size_t latent_dim, bool quantized);

    SlotAllocator& allocator() { return alloc_; }
    const SlotAllocator& allocator() const { return alloc_; }

    void write(std::size_t slot, std::span<const T> z);
    Vector<T> read(std::size_t slot) const;
    // Stored form: Vector<T> in raw mode, QuantizedLatent in 4-bit mode.
    std::variant<Vector<T>, QuantizedLatent> stored(std::size_t slot) const;

    bool quantized() const noexcept { return quantized_; }
    std::size_t latent_dim() const noexcept { return latent_dim_; }
    std::size_t bytes_per_slot() const noexcept;

private:
    void check_live(std::size_t slot) const;

    SlotAllocator alloc_;
    std::size_t latent_dim_;
    bool quantized_;
    std::vector<T> raw_;
    std::vector<QuantizedLatent> packed_;
};

enum class Tier : std::uint8_t { full, latent, temp };
std::string to_string(Tier t);

struct SlotRef {
    Tier tier = Tier::full;
    std::size_t slot = 0;
    bool operator==(const SlotRef&) const = default;
};

enum class SlotMapVariant { per_layer, global };
std::string to_string(SlotMapVariant v);
SlotMapVariant slot_map_variant_from_string(const std::string& s);

// Logical position -> physical slot, either one table per layer or one
// table shared by all layers.
class SlotMap {
public:
    SlotMap(SlotMapVariant variant, std::size_t n_layers);

    SlotMapVariant variant() const noexcept { return variant_; }
    std::size_t table_count() const noexcept { return tables_.size(); }

    void set(std::size_t layer, std::size_t position, SlotRef ref);
    void erase(std::size_t layer, std::size_t position);
    bool contains(std::size_t layer, std::size_t position) const;
    SlotRef get(std::size_t layer, std::size_t position) const;
    const std::map<std::size_t, SlotRef>& table(std::size_t layer) const;

private:
    std::size_t table_index(std::size_t layer) const;

    SlotMapVariant variant_;
    std::size_t n_layers_;
    std::vector<std::map<std::size_t, SlotRef>> tables_;
};

enum class Region : std::uint8_t { dense, sink, recent, compressed };
std::string to_string(Region r);

struct CacheConfig {
    std::size_t n_layers = 4;
    std::size_t kv_width = 32;
    std::size_t latent_dim = 8;
    std::vector<std::size_t> filter_layers;
    std::size_t n_sink = 4;
    std::size_t n_recent = 32;
    std::size_t stride = 10;
    std::size_t top_k = 4;
    bool quantize = false;
    SlotMapVariant slot_map = SlotMapVariant::per_layer;
    std::size_t full_capacity = 4096;
    std::size_t latent_capacity = 4096;

    bool is_filter(std::size_t layer) const;
    void validate() const;
};

using RequestId = std::uint64_t;

struct ViewEntry {
    std::size_t position = 0;
    SlotRef slot;
    Region region = Region::dense;
};

// Ordered (logical position ascending) list of the rows one attention call reads.
struct VirtualSlotMapping {
    std::size_t layer = 0;
    std::vector<ViewEntry> entries;
    std::size_t reconstructed = 0;  // decompressions performed for this view
};

struct CodecCallCounters {
    std::size_t compress = 0;
    std::size_t reconstruct = 0;
    std::size_t latent_reads = 0;
    std::size_t reference_queries = 0;
};

struct LayerAudit {
    std::size_t layer = 0;
    bool compressed = false;
    std::size_t sink = 0;
    std::size_t recent = 0;
    std::size_t compressed_tokens = 0;
    std::size_t evicted = 0;
    std::size_t references = 0;
    std::size_t full_slots = 0;    // sink + recent + reference (+ dense rows)
    std::size_t latent_slots = 0;
    std::size_t full_bytes = 0;
    std::size_t latent_bytes = 0;
};

struct MemoryAudit {
    std::size_t tokens = 0;
    std::vector<LayerAudit> layers;
    std::size_t temp_slots = 0;
    std::size_t full_bytes = 0;
    std::size_t latent_bytes = 0;
    std::size_t temp_bytes = 0;
    std::size_t fixed_bytes = 0;  // sink + recent rows of compressed layers
    double measured_kr = 0.0;           // live full + latent bytes over the dense cache size
    double measured_kr_net = 0.0;       // same, fixed_bytes removed
    double predicted_kr = 0.0;          // layer formula with the effective byte shrink

    std::string to_json() const;
};

// Per-request, per-layer tiered KV storage.
template <typename T>
class CacheManager {
public:
    CacheManager(const CacheConfig& config, const CodecBank<T>* codec);

    const CacheConfig& config() const noexcept { return config_; }

    void register_request(RequestId id);
    void release_request(RequestId id);
    bool has_request(RequestId id) const { return requests_.count(id) != 0; }

    // Stores the pre-RoPE kv of the layer's next position and returns that
    // position. Compressed layers migrate the oldest recent token first
    // when the recent buffer is full.
    std::size_t append_token(RequestId id, std::size_t layer, std::span<const T> kv);

    // Compresses the oldest recent token into the latent tier when the
    // recent buffer is full; returns false (no-op) otherwise.
    bool overflow_migrate(RequestId id, std::size_t layer);

    // Sink + selected compressed tokens + recent, in logical order.
    // Selected non-reference tokens are decompressed into temp slots that
    // all sparse layers of the layer's group share until post_forward.
    VirtualSlotMapping build_view(RequestId id, std::size_t layer, std::span<const std::size_t> selected);

    // Every live row of the layer (filter layers, or full views).
    VirtualSlotMapping full_view(RequestId id, std::size_t layer);

    std::span<const T> read(std::size_t layer, SlotRef ref) const;

    void post_forward(RequestId id);

    // Drops positions from one layer (per-layer tables only).
    void evict_tokens(RequestId id, std::size_t layer, std::span<const std::size_t> positions);

    std::size_t length(RequestId id, std::size_t layer) const;
    Region region_of(RequestId id, std::size_t layer, std::size_t position) const;
    std::vector<std::size_t> positions_in(RequestId id, std::size_t layer, Region region) const;
    SlotRef slot_of(RequestId id, std::size_t layer, std::size_t position) const;
    const SlotMap& slot_map(RequestId id) const;
    const ReferenceSet<T>& reference_set(RequestId id, std::size_t layer) const;
    std::map<std::size_t, std::size_t> reference_slots(RequestId id, std::size_t layer) const;
    std::map<std::size_t, std::variant<Vector<T>, QuantizedLatent>> latent_codes(RequestId id, std::size_t layer) const;
    std::size_t temp_slot_count(RequestId id) const;
    std::size_t group_of(std::size_t layer) const { return group_of_.at(layer); }

    const std::vector<CodecCallCounters>& counters() const noexcept { return counters_; }
    void reset_counters();

    const FullPool<T>& full_pool() const noexcept { return full_; }
    const LatentPool<T>& latent_pool() const noexcept { return latent_; }

    MemoryAudit audit(RequestId id) const;

    // Partition, ownership and free-list consistency; throws LifecycleError.
    void check_invariants() const;

private:
    struct Migrated {
        std::size_t latent_slot = 0;
        std::vector<std::size_t> ref_tokens;
    };

    struct TempSlot {
        std::size_t slot = 0;
        std::size_t filled_by = SIZE_MAX;  // layer whose reconstruction it holds
    };

    struct LayerState {
        bool compressed = false;
        std::size_t next_position = 0;
        std::map<std::size_t, Region> regions;
        std::deque<std::size_t> recent;
        std::map<std::size_t, Migrated> migrated;
        std::map<std::size_t, std::size_t> reference_slots;  // token -> full slot
        std::set<std::size_t> evicted;
        ReferenceSet<T> refs;

        LayerState(bool c, std::size_t stride, std::size_t width) : compressed(c), refs(stride, width) {}
    };

    struct RequestState {
        SlotMap slots;
        std::vector<LayerState> layers;
        std::vector<std::map<std::size_t, TempSlot>> temps;  // per group

        RequestState(const CacheConfig& c);
    };

    RequestState& request(RequestId id);
    const RequestState& request(RequestId id) const;
    std::size_t plane(std::size_t layer) const;
    Vector<T> mean_of(const LayerState& ls, std::span<const std::size_t> ref_tokens) const;
    void check_layer(std::size_t layer) const;

    CacheConfig config_;
    const CodecBank<T>* codec_;
    FullPool<T> full_;
    LatentPool<T> latent_;
    std::vector<std::size_t> group_of_;
    std::size_t group_count_ = 1;
    std::map<RequestId, RequestState> requests_;
    std::vector<CodecCallCounters> counters_;
};

}  // namespace deltakv
