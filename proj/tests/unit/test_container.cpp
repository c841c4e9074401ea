#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "deltakv/container.hpp"
#include "deltakv/errors.hpp"

using namespace deltakv;

namespace {

Container sample() {
    Container c;
    c.kind = "test";
    c.metadata_json = R"({"answer":42})";
    c.tensors.push_back({"a", {2, 3}, {1, 2, 3, 4, 5, 6}});
    c.tensors.push_back({"b", {1, 1}, {-0.5F}});
    return c;
}

}  // namespace

TEST(Container, StreamRoundTrip) {
    std::stringstream ss;
    write_container(sample(), ss);
    const std::string bytes = ss.str();
    EXPECT_EQ(bytes.substr(0, 4), "DKV1");
    auto back = read_container(ss);
    EXPECT_EQ(back.kind, "test");
    EXPECT_EQ(back.find("a").data, sample().tensors[0].data);
    EXPECT_EQ(back.find("b").shape, (std::vector<std::size_t>{1, 1}));
    EXPECT_THROW((void)back.find("missing"), Error);
}

TEST(Container, RejectsBadMagicAndTruncation) {
    std::stringstream bad("XXXX0000");
    EXPECT_THROW(read_container(bad), InputError);
    std::stringstream ss;
    write_container(sample(), ss);
    std::string cut = ss.str();
    cut.resize(cut.size() - 3);
    std::stringstream truncated(cut);
    EXPECT_THROW(read_container(truncated), InputError);
}

TEST(Container, FileRoundTrip) {
    const auto path = std::filesystem::temp_directory_path() / "deltakv_container_test.dkv";
    write_container_file(sample(), path);
    auto back = read_container_file(path);
    EXPECT_EQ(back.tensors.size(), 2u);
    std::filesystem::remove(path);
    EXPECT_THROW(read_container_file(path), InputError);
}
