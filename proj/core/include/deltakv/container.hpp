#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace deltakv {

// "DKV1" tensor container:
//   4 bytes   magic "DKV1"
//   u32 LE    header length in bytes
//   header    UTF-8 JSON {"format","kind","metadata","tensors":[{"name","shape"}]}
//   payload   raw little-endian float32 tensors, in header order
struct ContainerTensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<float> data;

    std::size_t element_count() const;
};

struct Container {
    std::string kind;
    std::string metadata_json = "{}";
    std::vector<ContainerTensor> tensors;

    const ContainerTensor& find(const std::string& name) const;
};

void write_container(const Container& c, std::ostream& out);
Container read_container(std::istream& in);

void write_container_file(const Container& c, const std::filesystem::path& path);
Container read_container_file(const std::filesystem::path& path);

}  // namespace deltakv
