#include "deltakv/container.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>

#include "deltakv/errors.hpp"
#include "json.hpp"

namespace deltakv {

namespace {

constexpr std::array<char, 4> kMagic = {'D', 'K', 'V', '1'};

std::uint32_t to_le(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) {
        return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
    }
    return v;
}

void write_u32(std::ostream& out, std::uint32_t v) {
    const std::uint32_t le = to_le(v);
    out.write(reinterpret_cast<const char*>(&le), sizeof(le));
}

std::uint32_t read_u32(std::istream& in) {
    std::uint32_t le = 0;
    in.read(reinterpret_cast<char*>(&le), sizeof(le));
    if (!in) throw InputError("DKV1: truncated header length");
    return to_le(le);
}

}  // namespace

std::size_t ContainerTensor::element_count() const {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

const ContainerTensor& Container::find(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return t;
    }
    throw InputError("DKV1: tensor '" + name + "' not found");
}

void write_container(const Container& c, std::ostream& out) {
    nlohmann::json header;
    header["format"] = "DKV1";
    header["kind"] = c.kind;
    header["metadata"] = nlohmann::json::parse(c.metadata_json.empty() ? "{}" : c.metadata_json);
    header["tensors"] = nlohmann::json::array();
    for (const auto& t : c.tensors) {
        if (t.element_count() != t.data.size()) {
            throw ShapeError("DKV1: tensor '" + t.name + "' shape does not match data length");
        }
        header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}});
    }
    const std::string text = header.dump();
    out.write(kMagic.data(), kMagic.size());
    write_u32(out, static_cast<std::uint32_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : c.tensors) {
        for (float v : t.data) {
            std::uint32_t bits = to_le(std::bit_cast<std::uint32_t>(v));
            out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
        }
    }
    if (!out) throw InputError("DKV1: write failed");
}

Container read_container(std::istream& in) {
    std::array<char, 4> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kMagic) throw InputError("DKV1: bad magic");
    const std::uint32_t len = read_u32(in);
    std::string text(len, '\0');
    in.read(text.data(), len);
    if (!in) throw InputError("DKV1: truncated header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("DKV1: malformed header: ") + e.what());
    }
    Container c;
    c.kind = header.value("kind", "");
    c.metadata_json = header.contains("metadata") ? header["metadata"].dump() : "{}";
    for (const auto& entry : header.at("tensors")) {
        ContainerTensor t;
        t.name = entry.at("name").get<std::string>();
        t.shape = entry.at("shape").get<std::vector<std::size_t>>();
        t.data.resize(t.element_count());
        for (float& v : t.data) {
            std::uint32_t bits = 0;
            in.read(reinterpret_cast<char*>(&bits), sizeof(bits));
            if (!in) throw InputError("DKV1: truncated payload in tensor '" + t.name + "'");
            v = std::bit_cast<float>(to_le(bits));
        }
        c.tensors.push_back(std::move(t));
    }
    return c;
}

void write_container_file(const Container& c, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("DKV1: cannot open '" + path.string() + "' for writing");
    write_container(c, out);
}

Container read_container_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("DKV1: cannot open '" + path.string() + "'");
    return read_container(in);
}

}  // namespace deltakv
