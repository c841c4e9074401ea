#include "deltakv/cache_manager.hpp"

#include <algorithm>

#include "deltakv/ratios.hpp"
#include "json.hpp"

namespace deltakv {

SlotAllocator::SlotAllocator(std::size_t capacity) : live_(capacity, false) {
    for (std::size_t i = 0; i < capacity; ++i) free_.insert(free_.end(), i);
}

std::vector<std::size_t> SlotAllocator::alloc(std::size_t n) {
    if (n > free_.size()) {
        throw PoolExhaustedError("pool exhausted: requested " + std::to_string(n) + " slots, " +
                                 std::to_string(free_.size()) + " free");
    }
    std::vector<std::size_t> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t s = *free_.begin();
        free_.erase(free_.begin());
        live_[s] = true;
        out.push_back(s);
    }
    return out;
}

std::size_t SlotAllocator::alloc_one() { return alloc(1).front(); }

void SlotAllocator::free(std::span<const std::size_t> slots) {
    for (std::size_t i = 0; i < slots.size(); ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            if (slots[j] == slots[i]) throw LifecycleError("free: slot " + std::to_string(slots[i]) + " listed twice");
        }
        if (!is_live(slots[i])) throw LifecycleError("free: slot " + std::to_string(slots[i]) + " is not live");
    }
    for (std::size_t s : slots) {
        live_[s] = false;
        free_.insert(s);
    }
}

void SlotAllocator::free_one(std::size_t slot) { free(std::span<const std::size_t>(&slot, 1)); }

std::vector<std::size_t> SlotAllocator::live_slots() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < live_.size(); ++i) {
        if (live_[i]) out.push_back(i);
    }
    return out;
}

template <typename T>
FullPool<T>::FullPool(std::size_t capacity, std::size_t width, std::size_t planes)
    : alloc_(capacity), width_(width), planes_(planes), data_(capacity * width * planes) {
    if (width == 0 || planes == 0) throw ConfigError("FullPool: width and planes must be >= 1");
}

template <typename T>
std::size_t FullPool<T>::row_index(std::size_t slot, std::size_t plane) const {
    if (!alloc_.is_live(slot)) throw LifecycleError("FullPool: slot " + std::to_string(slot) + " is not live");
    if (plane >= planes_) throw IndexError("FullPool: plane out of range");
    return slot * planes_ + plane;
}

template <typename T>
void FullPool<T>::write(std::size_t slot, std::span<const T> kv, std::size_t plane) {
    if (kv.size() != width_) throw ShapeError("FullPool::write: width mismatch");
    std::copy(kv.begin(), kv.end(), data_.begin() + static_cast<std::ptrdiff_t>(row_index(slot, plane) * width_));
}

template <typename T>
std::span<const T> FullPool<T>::read(std::size_t slot, std::size_t plane) const {
    return {data_.data() + row_index(slot, plane) * width_, width_};
}

template <typename T>
LatentPool<T>::LatentPool(std::size_t capacity, std::size_t latent_dim, bool quantized)
    : alloc_(capacity), latent_dim_(latent_dim), quantized_(quantized) {
    if (latent_dim == 0) throw ConfigError("LatentPool: latent_dim must be >= 1");
    if (quantized) {
        packed_.resize(capacity);
    } else {
        raw_.resize(capacity * latent_dim);
    }
}

template <typename T>
void LatentPool<T>::check_live(std::size_t slot) const {
    if (!alloc_.is_live(slot)) throw LifecycleError("LatentPool: slot " + std::to_string(slot) + " is not live");
}

template <typename T>
void LatentPool<T>::write(std::size_t slot, std::span<const T> z) {
    check_live(slot);
    if (z.size() != latent_dim_) throw ShapeError("LatentPool::write: latent width mismatch");
    if (quantized_) {
        packed_[slot] = quantize_token<T>(z);
    } else {
        std::copy(z.begin(), z.end(), raw_.begin() + static_cast<std::ptrdiff_t>(slot * latent_dim_));
    }
}

template <typename T>
Vector<T> LatentPool<T>::read(std::size_t slot) const {
    check_live(slot);
    if (quantized_) return dequantize_token<T>(packed_[slot], latent_dim_);
    const auto* p = raw_.data() + slot * latent_dim_;
    return Vector<T>(p, p + latent_dim_);
}

template <typename T>
std::variant<Vector<T>, QuantizedLatent> LatentPool<T>::stored(std::size_t slot) const {
    check_live(slot);
    if (quantized_) return packed_[slot];
    const auto* p = raw_.data() + slot * latent_dim_;
    return Vector<T>(p, p + latent_dim_);
}

template <typename T>
std::size_t LatentPool<T>::bytes_per_slot() const noexcept {
    return quantized_ ? quantized_bytes(latent_dim_) : latent_dim_ * sizeof(T);
}

std::string to_string(Tier t) {
    switch (t) {
        case Tier::full: return "full";
        case Tier::latent: return "latent";
        case Tier::temp: return "temp";
    }
    return "unknown";
}

std::string to_string(SlotMapVariant v) { return v == SlotMapVariant::global ? "global" : "per_layer"; }

SlotMapVariant slot_map_variant_from_string(const std::string& s) {
    if (s == "per_layer") return SlotMapVariant::per_layer;
    if (s == "global") return SlotMapVariant::global;
    throw ConfigError("unknown slot map variant '" + s + "'");
}

std::string to_string(Region r) {
    switch (r) {
        case Region::dense: return "dense";
        case Region::sink: return "sink";
        case Region::recent: return "recent";
        case Region::compressed: return "compressed";
    }
    return "unknown";
}

SlotMap::SlotMap(SlotMapVariant variant, std::size_t n_layers)
    : variant_(variant), n_layers_(n_layers), tables_(variant == SlotMapVariant::global ? 1 : n_layers) {
    if (n_layers == 0) throw ConfigError("SlotMap: n_layers must be >= 1");
}

std::size_t SlotMap::table_index(std::size_t layer) const {
    if (layer >= n_layers_) throw IndexError("SlotMap: layer " + std::to_string(layer) + " out of range");
    return variant_ == SlotMapVariant::global ? 0 : layer;
}

void SlotMap::set(std::size_t layer, std::size_t position, SlotRef ref) { tables_[table_index(layer)][position] = ref; }

void SlotMap::erase(std::size_t layer, std::size_t position) {
    if (tables_[table_index(layer)].erase(position) == 0) {
        throw IndexError("SlotMap: position " + std::to_string(position) + " not mapped");
    }
}

bool SlotMap::contains(std::size_t layer, std::size_t position) const {
    return tables_[table_index(layer)].count(position) != 0;
}

SlotRef SlotMap::get(std::size_t layer, std::size_t position) const {
    const auto& t = tables_[table_index(layer)];
    const auto it = t.find(position);
    if (it == t.end()) throw IndexError("SlotMap: position " + std::to_string(position) + " not mapped");
    return it->second;
}

const std::map<std::size_t, SlotRef>& SlotMap::table(std::size_t layer) const { return tables_[table_index(layer)]; }

bool CacheConfig::is_filter(std::size_t layer) const {
    return std::find(filter_layers.begin(), filter_layers.end(), layer) != filter_layers.end();
}

void CacheConfig::validate() const {
    if (n_layers == 0 || kv_width == 0 || latent_dim == 0) throw ConfigError("CacheConfig: dims must be >= 1");
    if (n_recent == 0) throw ConfigError("CacheConfig: n_recent must be >= 1");
    if (stride == 0 || top_k == 0) throw ConfigError("CacheConfig: stride and top_k must be >= 1");
    for (std::size_t l : filter_layers) {
        if (l >= n_layers) throw ConfigError("CacheConfig: filter layer out of range");
    }
    if (slot_map == SlotMapVariant::global) {
        for (std::size_t l = 0; l < n_layers; ++l) {
            if (!is_filter(l)) {
                throw ConfigError("CacheConfig: the global slot table cannot hold layer-specific compressed regions");
            }
        }
    }
}

std::string MemoryAudit::to_json() const {
    nlohmann::json j;
    j["tokens"] = tokens;
    j["temp_slots"] = temp_slots;
    j["full_bytes"] = full_bytes;
    j["latent_bytes"] = latent_bytes;
    j["temp_bytes"] = temp_bytes;
    j["fixed_bytes"] = fixed_bytes;
    j["measured_kr"] = measured_kr;
    j["measured_kr_net"] = measured_kr_net;
    j["predicted_kr"] = predicted_kr;
    auto& arr = j["layers"] = nlohmann::json::array();
    for (const auto& l : layers) {
        arr.push_back({{"layer", l.layer},
                       {"compressed", l.compressed},
                       {"sink", l.sink},
                       {"recent", l.recent},
                       {"compressed_tokens", l.compressed_tokens},
                       {"evicted", l.evicted},
                       {"references", l.references},
                       {"full_slots", l.full_slots},
                       {"latent_slots", l.latent_slots},
                       {"full_bytes", l.full_bytes},
                       {"latent_bytes", l.latent_bytes}});
    }
    return j.dump(2);
}

template <typename T>
CacheManager<T>::RequestState::RequestState(const CacheConfig& c)
    : slots(c.slot_map, c.n_layers), temps(c.filter_layers.size() + 1) {
    layers.reserve(c.n_layers);
    for (std::size_t l = 0; l < c.n_layers; ++l) layers.emplace_back(!c.is_filter(l), c.stride, c.kv_width);
}

template <typename T>
CacheManager<T>::CacheManager(const CacheConfig& config, const CodecBank<T>* codec)
    : config_((config.validate(), config)),
      codec_(codec),
      full_(config.full_capacity, config.kv_width, config.slot_map == SlotMapVariant::global ? config.n_layers : 1),
      latent_(config.latent_capacity, config.latent_dim, config.quantize),
      counters_(config.n_layers) {
    group_of_.resize(config_.n_layers);
    std::size_t g = 0;
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        if (config_.is_filter(l)) ++g;
        group_of_[l] = g;
    }
    group_count_ = config_.filter_layers.size() + 1;
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        if (config_.is_filter(l)) continue;
        if (codec_ == nullptr || !codec_->has(l)) {
            throw ConfigError("CacheManager: compressed layer " + std::to_string(l) + " has no codec");
        }
        const auto& cc = codec_->at(l).config;
        if (cc.input_dim != config_.kv_width || cc.latent_dim != config_.latent_dim) {
            throw ShapeError("CacheManager: codec dims do not match the cache layout");
        }
    }
}

template <typename T>
typename CacheManager<T>::RequestState& CacheManager<T>::request(RequestId id) {
    const auto it = requests_.find(id);
    if (it == requests_.end()) throw IndexError("unknown request " + std::to_string(id));
    return it->second;
}

template <typename T>
const typename CacheManager<T>::RequestState& CacheManager<T>::request(RequestId id) const {
    const auto it = requests_.find(id);
    if (it == requests_.end()) throw IndexError("unknown request " + std::to_string(id));
    return it->second;
}

template <typename T>
void CacheManager<T>::check_layer(std::size_t layer) const {
    if (layer >= config_.n_layers) throw IndexError("layer " + std::to_string(layer) + " out of range");
}

template <typename T>
std::size_t CacheManager<T>::plane(std::size_t layer) const {
    return full_.planes() == 1 ? 0 : layer;
}

template <typename T>
void CacheManager<T>::register_request(RequestId id) {
    if (requests_.count(id) != 0) throw LifecycleError("request " + std::to_string(id) + " already registered");
    requests_.emplace(id, RequestState(config_));
}

template <typename T>
void CacheManager<T>::release_request(RequestId id) {
    post_forward(id);
    auto& rs = request(id);
    std::set<std::size_t> full, latent;
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        for (const auto& [pos, ref] : rs.slots.table(l)) {
            (ref.tier == Tier::latent ? latent : full).insert(ref.slot);
        }
        for (const auto& [tok, slot] : rs.layers[l].reference_slots) full.insert(slot);
    }
    full_.allocator().free(std::vector<std::size_t>(full.begin(), full.end()));
    latent_.allocator().free(std::vector<std::size_t>(latent.begin(), latent.end()));
    requests_.erase(id);
}

template <typename T>
std::size_t CacheManager<T>::append_token(RequestId id, std::size_t layer, std::span<const T> kv) {
    check_layer(layer);
    if (kv.size() != config_.kv_width) throw ShapeError("append_token: kv width mismatch");
    auto& rs = request(id);
    auto& ls = rs.layers[layer];
    const std::size_t p = ls.next_position;

    if (!ls.compressed) {
        SlotRef ref{Tier::full, 0};
        if (rs.slots.variant() == SlotMapVariant::global && rs.slots.contains(layer, p)) {
            ref = rs.slots.get(layer, p);
        } else {
            ref.slot = full_.allocator().alloc_one();
            rs.slots.set(layer, p, ref);
        }
        full_.write(ref.slot, kv, plane(layer));
        ls.regions[p] = Region::dense;
        ++ls.next_position;
        return p;
    }

    if (p >= config_.n_sink) overflow_migrate(id, layer);
    const bool is_ref = p % config_.stride == 0;
    const auto slots = full_.allocator().alloc(is_ref ? 2 : 1);
    full_.write(slots[0], kv, plane(layer));
    rs.slots.set(layer, p, {Tier::full, slots[0]});
    if (p < config_.n_sink) {
        ls.regions[p] = Region::sink;
    } else {
        ls.regions[p] = Region::recent;
        ls.recent.push_back(p);
    }
    if (is_ref) {
        full_.write(slots[1], kv, plane(layer));
        ls.reference_slots[p] = slots[1];
        ls.refs.maybe_append(p, kv);
    }
    ++ls.next_position;
    return p;
}

template <typename T>
bool CacheManager<T>::overflow_migrate(RequestId id, std::size_t layer) {
    check_layer(layer);
    auto& rs = request(id);
    auto& ls = rs.layers[layer];
    if (!ls.compressed || ls.recent.size() < config_.n_recent) return false;
    if (latent_.allocator().free_count() == 0) throw PoolExhaustedError("latent pool exhausted");

    const std::size_t p = ls.recent.front();
    const SlotRef old = rs.slots.get(layer, p);
    const auto src = full_.read(old.slot, plane(layer));
    const Vector<T> kv(src.begin(), src.end());

    auto& cnt = counters_[layer];
    ++cnt.reference_queries;
    const auto entries = ls.refs.topk(kv, config_.top_k, p);
    const auto bar = ls.refs.mean_reference(entries);
    const auto z = compress<T>(codec_->at(layer), kv, bar);
    ++cnt.compress;

    Migrated m;
    m.latent_slot = latent_.allocator().alloc_one();
    latent_.write(m.latent_slot, z);
    for (std::size_t e : entries) m.ref_tokens.push_back(ls.refs.token_index(e));

    full_.allocator().free_one(old.slot);
    rs.slots.set(layer, p, {Tier::latent, m.latent_slot});
    ls.regions[p] = Region::compressed;
    ls.migrated[p] = std::move(m);
    ls.recent.pop_front();
    return true;
}

template <typename T>
Vector<T> CacheManager<T>::mean_of(const LayerState& ls, std::span<const std::size_t> ref_tokens) const {
    const auto& idx = ls.refs.token_indices();
    std::vector<std::size_t> entries;
    entries.reserve(ref_tokens.size());
    for (std::size_t t : ref_tokens) {
        const auto it = std::lower_bound(idx.begin(), idx.end(), t);
        if (it == idx.end() || *it != t) throw LifecycleError("reference token " + std::to_string(t) + " missing");
        entries.push_back(static_cast<std::size_t>(it - idx.begin()));
    }
    return ls.refs.mean_reference(entries);
}

template <typename T>
VirtualSlotMapping CacheManager<T>::build_view(RequestId id, std::size_t layer, std::span<const std::size_t> selected) {
    check_layer(layer);
    auto& rs = request(id);
    auto& ls = rs.layers[layer];
    if (!ls.compressed) return full_view(id, layer);

    std::set<std::size_t> wanted;
    for (std::size_t p : selected) {
        if (p >= ls.next_position || ls.evicted.count(p) != 0) {
            throw IndexError("build_view: position " + std::to_string(p) + " is not live");
        }
        if (ls.regions.at(p) == Region::compressed) wanted.insert(p);
    }

    VirtualSlotMapping view;
    view.layer = layer;
    auto& temps = rs.temps[group_of_[layer]];
    auto& cnt = counters_[layer];
    for (const auto& [p, region] : ls.regions) {
        if (region != Region::compressed) {
            view.entries.push_back({p, rs.slots.get(layer, p), region});
            continue;
        }
        if (wanted.count(p) == 0) continue;
        if (const auto r = ls.reference_slots.find(p); r != ls.reference_slots.end()) {
            view.entries.push_back({p, {Tier::full, r->second}, region});
            continue;
        }
        auto it = temps.find(p);
        if (it == temps.end()) it = temps.emplace(p, TempSlot{full_.allocator().alloc_one(), SIZE_MAX}).first;
        if (it->second.filled_by != layer) {
            const auto& m = ls.migrated.at(p);
            const auto z = latent_.read(m.latent_slot);
            ++cnt.latent_reads;
            const auto bar = mean_of(ls, m.ref_tokens);
            const auto hat = reconstruct<T>(codec_->at(layer), z, bar);
            ++cnt.reconstruct;
            ++view.reconstructed;
            full_.write(it->second.slot, hat, plane(layer));
            it->second.filled_by = layer;
        }
        view.entries.push_back({p, {Tier::temp, it->second.slot}, region});
    }
    return view;
}

template <typename T>
VirtualSlotMapping CacheManager<T>::full_view(RequestId id, std::size_t layer) {
    check_layer(layer);
    auto& rs = request(id);
    const auto& ls = rs.layers[layer];
    if (ls.compressed) {
        std::vector<std::size_t> all;
        for (const auto& [p, region] : ls.regions) {
            if (region == Region::compressed) all.push_back(p);
        }
        return build_view(id, layer, all);
    }
    VirtualSlotMapping view;
    view.layer = layer;
    for (const auto& [p, region] : ls.regions) view.entries.push_back({p, rs.slots.get(layer, p), region});
    return view;
}

template <typename T>
std::span<const T> CacheManager<T>::read(std::size_t layer, SlotRef ref) const {
    check_layer(layer);
    if (ref.tier == Tier::latent) throw LifecycleError("latent slots must be reconstructed before reading");
    return full_.read(ref.slot, plane(layer));
}

template <typename T>
void CacheManager<T>::post_forward(RequestId id) {
    auto& rs = request(id);
    for (auto& group : rs.temps) {
        std::vector<std::size_t> slots;
        for (const auto& [p, t] : group) slots.push_back(t.slot);
        full_.allocator().free(slots);
        group.clear();
    }
}

template <typename T>
void CacheManager<T>::evict_tokens(RequestId id, std::size_t layer, std::span<const std::size_t> positions) {
    check_layer(layer);
    if (config_.slot_map == SlotMapVariant::global) {
        throw ConfigError("evict_tokens: the global slot table cannot drop tokens from a single layer");
    }
    auto& rs = request(id);
    auto& ls = rs.layers[layer];
    for (std::size_t p : positions) {
        const auto it = ls.regions.find(p);
        if (it == ls.regions.end()) throw IndexError("evict_tokens: position " + std::to_string(p) + " is not live");
        if (it->second == Region::sink || it->second == Region::recent) {
            throw IndexError("evict_tokens: sink and recent tokens stay resident");
        }
    }
    // Temp rows of evicted positions are released with the rest at post_forward.
    for (std::size_t p : positions) {
        const SlotRef ref = rs.slots.get(layer, p);
        (ref.tier == Tier::latent ? latent_.allocator() : full_.allocator()).free_one(ref.slot);
        rs.slots.erase(layer, p);
        ls.regions.erase(p);
        ls.migrated.erase(p);
        ls.evicted.insert(p);
    }
}

template <typename T>
std::size_t CacheManager<T>::length(RequestId id, std::size_t layer) const {
    check_layer(layer);
    return request(id).layers[layer].next_position;
}

template <typename T>
Region CacheManager<T>::region_of(RequestId id, std::size_t layer, std::size_t position) const {
    check_layer(layer);
    const auto& ls = request(id).layers[layer];
    const auto it = ls.regions.find(position);
    if (it == ls.regions.end()) throw IndexError("position " + std::to_string(position) + " is not live");
    return it->second;
}

template <typename T>
std::vector<std::size_t> CacheManager<T>::positions_in(RequestId id, std::size_t layer, Region region) const {
    check_layer(layer);
    std::vector<std::size_t> out;
    for (const auto& [p, r] : request(id).layers[layer].regions) {
        if (r == region) out.push_back(p);
    }
    return out;
}

template <typename T>
SlotRef CacheManager<T>::slot_of(RequestId id, std::size_t layer, std::size_t position) const {
    return request(id).slots.get(layer, position);
}

template <typename T>
const SlotMap& CacheManager<T>::slot_map(RequestId id) const {
    return request(id).slots;
}

template <typename T>
const ReferenceSet<T>& CacheManager<T>::reference_set(RequestId id, std::size_t layer) const {
    check_layer(layer);
    return request(id).layers[layer].refs;
}

template <typename T>
std::map<std::size_t, std::size_t> CacheManager<T>::reference_slots(RequestId id, std::size_t layer) const {
    check_layer(layer);
    return request(id).layers[layer].reference_slots;
}

template <typename T>
std::map<std::size_t, std::variant<Vector<T>, QuantizedLatent>> CacheManager<T>::latent_codes(RequestId id,
                                                                                               std::size_t layer) const {
    check_layer(layer);
    std::map<std::size_t, std::variant<Vector<T>, QuantizedLatent>> out;
    for (const auto& [p, m] : request(id).layers[layer].migrated) out.emplace(p, latent_.stored(m.latent_slot));
    return out;
}

template <typename T>
std::size_t CacheManager<T>::temp_slot_count(RequestId id) const {
    std::size_t n = 0;
    for (const auto& g : request(id).temps) n += g.size();
    return n;
}

template <typename T>
void CacheManager<T>::reset_counters() {
    counters_.assign(config_.n_layers, CodecCallCounters{});
}

template <typename T>
MemoryAudit CacheManager<T>::audit(RequestId id) const {
    const auto& rs = request(id);
    MemoryAudit a;
    const std::size_t row = full_.bytes_per_row();
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        const auto& ls = rs.layers[l];
        LayerAudit la;
        la.layer = l;
        la.compressed = ls.compressed;
        for (const auto& [p, r] : ls.regions) {
            switch (r) {
                case Region::sink: ++la.sink; break;
                case Region::recent: ++la.recent; break;
                case Region::compressed: ++la.compressed_tokens; break;
                case Region::dense: break;
            }
        }
        la.evicted = ls.evicted.size();
        la.references = ls.reference_slots.size();
        for (const auto& [p, ref] : rs.slots.table(l)) {
            if (rs.slots.variant() == SlotMapVariant::global && ls.regions.count(p) == 0) continue;
            if (ref.tier == Tier::latent) {
                ++la.latent_slots;
            } else {
                ++la.full_slots;
            }
        }
        la.full_slots += la.references;
        la.full_bytes = la.full_slots * row;
        la.latent_bytes = la.latent_slots * latent_.bytes_per_slot();
        a.full_bytes += la.full_bytes;
        a.latent_bytes += la.latent_bytes;
        if (ls.compressed) a.fixed_bytes += (la.sink + la.recent) * row;
        a.tokens = std::max(a.tokens, ls.next_position);
        a.layers.push_back(la);
    }
    a.temp_slots = temp_slot_count(id);
    a.temp_bytes = a.temp_slots * row;
    if (a.tokens > 0) {
        const double dense = static_cast<double>(config_.n_layers * a.tokens * row);
        a.measured_kr = static_cast<double>(a.full_bytes + a.latent_bytes) / dense;
        a.measured_kr_net = static_cast<double>(a.full_bytes + a.latent_bytes - a.fixed_bytes) / dense;
    }
    const double shrink = static_cast<double>(config_.latent_dim * sizeof(T)) /
                          static_cast<double>(latent_.bytes_per_slot());
    a.predicted_kr = compute_budget_ratios(config_.filter_layers.size(), config_.n_layers, config_.stride,
                                           static_cast<double>(config_.latent_dim) /
                                               static_cast<double>(config_.kv_width),
                                           shrink, 1.0)
                         .keep_ratio;
    return a;
}

template <typename T>
void CacheManager<T>::check_invariants() const {
    auto fail = [](const std::string& what) { throw LifecycleError("cache invariant violated: " + what); };
    std::set<std::size_t> full_owned, latent_owned;
    auto own = [&](std::set<std::size_t>& set, std::size_t slot, const std::string& who) {
        if (!set.insert(slot).second) fail("slot " + std::to_string(slot) + " owned twice (" + who + ")");
    };
    for (const auto& [id, rs] : requests_) {
        std::set<std::size_t> global_seen;
        for (std::size_t l = 0; l < config_.n_layers; ++l) {
            const auto& ls = rs.layers[l];
            const std::string where = "request " + std::to_string(id) + " layer " + std::to_string(l);
            for (std::size_t p = 0; p < ls.next_position; ++p) {
                const bool live = ls.regions.count(p) != 0;
                const bool gone = ls.evicted.count(p) != 0;
                if (live == gone) fail(where + ": position " + std::to_string(p) + " not partitioned");
            }
            if (ls.regions.size() + ls.evicted.size() != ls.next_position) fail(where + ": stray positions");
            if (ls.recent.size() > config_.n_recent) fail(where + ": recent buffer over capacity");
            std::size_t recent_count = 0;
            for (std::size_t i = 0; i < ls.recent.size(); ++i) {
                if (i > 0 && ls.recent[i] <= ls.recent[i - 1]) fail(where + ": recent ring out of order");
                if (ls.regions.count(ls.recent[i]) == 0 || ls.regions.at(ls.recent[i]) != Region::recent) {
                    fail(where + ": recent ring disagrees with regions");
                }
            }
            const auto& table = rs.slots.table(l);
            for (const auto& [p, r] : ls.regions) {
                if (!table.count(p)) fail(where + ": live position without a slot");
                const SlotRef ref = table.at(p);
                switch (r) {
                    case Region::sink:
                        if (p >= config_.n_sink || !ls.compressed || ref.tier != Tier::full) fail(where + ": bad sink row");
                        break;
                    case Region::recent:
                        ++recent_count;
                        if (p < config_.n_sink || ref.tier != Tier::full) fail(where + ": bad recent row");
                        break;
                    case Region::compressed:
                        if (ref.tier != Tier::latent || !ls.migrated.count(p) || ls.migrated.at(p).latent_slot != ref.slot) {
                            fail(where + ": compressed row without its latent");
                        }
                        break;
                    case Region::dense:
                        if (ls.compressed || ref.tier != Tier::full) fail(where + ": bad dense row");
                        break;
                }
                if (!ls.compressed && rs.slots.variant() == SlotMapVariant::global) {
                    global_seen.insert(ref.slot);
                } else if (ref.tier == Tier::latent) {
                    own(latent_owned, ref.slot, where);
                } else {
                    own(full_owned, ref.slot, where);
                }
            }
            if (recent_count != ls.recent.size()) fail(where + ": recent count mismatch");
            if (rs.slots.variant() == SlotMapVariant::per_layer && table.size() != ls.regions.size()) {
                fail(where + ": slot table has entries for dead positions");
            }
            if (ls.migrated.size() != static_cast<std::size_t>(std::count_if(
                                          ls.regions.begin(), ls.regions.end(),
                                          [](const auto& kv) { return kv.second == Region::compressed; }))) {
                fail(where + ": migrated bookkeeping mismatch");
            }
            for (const auto& [t, slot] : ls.reference_slots) {
                if (t % config_.stride != 0 || t >= ls.next_position) fail(where + ": bad reference token");
                own(full_owned, slot, where + " reference");
            }
            if (ls.reference_slots.size() != ls.refs.size()) fail(where + ": reference set and slots disagree");
        }
        if (rs.slots.variant() == SlotMapVariant::global) {
            if (rs.slots.table(0).size() != global_seen.size()) fail("global table has unreferenced entries");
            for (std::size_t s : global_seen) own(full_owned, s, "global table");
        }
        for (const auto& g : rs.temps) {
            for (const auto& [p, t] : g) own(full_owned, t.slot, "temp");
        }
    }
    for (std::size_t s : full_owned) {
        if (!full_.allocator().is_live(s)) fail("full slot " + std::to_string(s) + " owned but free");
    }
    for (std::size_t s : latent_owned) {
        if (!latent_.allocator().is_live(s)) fail("latent slot " + std::to_string(s) + " owned but free");
    }
    if (full_.allocator().live_count() != full_owned.size()) fail("full pool leak");
    if (latent_.allocator().live_count() != latent_owned.size()) fail("latent pool leak");
}

template class FullPool<float>;
template class FullPool<double>;
template class LatentPool<float>;
template class LatentPool<double>;
template class CacheManager<float>;
template class CacheManager<double>;

}  // namespace deltakv
