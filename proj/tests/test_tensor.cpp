#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mmdfer/rng.hpp"
#include "mmdfer/tensor.hpp"

using namespace mmdfer;

namespace {
std::filesystem::path tmp_dir() {
    auto p = std::filesystem::temp_directory_path() / "mmdfer_tensor_test";
    std::filesystem::create_directories(p);
    return p;
}
}  // namespace

TEST_CASE("flat indexing is row major") {
    Tensor t = Tensor::zeros({2, 3, 4});
    CHECK(t.numel() == 24);
    t.at({1, 2, 3}) = 7.0;
    CHECK(t.data[23] == 7.0);
    t.at({0, 1, 0}) = 3.0;
    CHECK(t.data[4] == 3.0);
}

TEST_CASE("file round trip preserves doubles bit for bit") {
    Tensor t = Tensor::zeros({3, 5});
    Rng rng(42);
    rng.fill_normal(t, 1.0);
    t.data[0] = 1e-300;
    t.data[1] = -0.0;
    auto path = (tmp_dir() / "roundtrip.bin").string();
    write_tensor_file(path, t);
    Tensor back = read_tensor_file(path);
    REQUIRE(back.same_shape(t));
    for (size_t i = 0; i < t.data.size(); ++i) CHECK(back.data[i] == t.data[i]);
}

TEST_CASE("int tensor round trip") {
    IntTensor t;
    t.shape = {2, 2};
    t.data = {1, -5, 100000, 0};
    auto path = (tmp_dir() / "ints.bin").string();
    write_tensor_file(path, t);
    IntTensor back = read_int_tensor_file(path);
    REQUIRE(back.shape == t.shape);
    CHECK(back.data == t.data);
}

TEST_CASE("header layout is stable") {
    Tensor t = Tensor::full({2}, 1.5);
    auto path = (tmp_dir() / "header.bin").string();
    write_tensor_file(path, t);
    std::ifstream f(path, std::ios::binary);
    char magic[4];
    f.read(magic, 4);
    CHECK(std::string(magic, 4) == "FCK1");
    char dtype;
    f.read(&dtype, 1);
    CHECK(dtype == 0);
    unsigned char rank_bytes[8];
    f.read(reinterpret_cast<char*>(rank_bytes), 8);
    CHECK(rank_bytes[0] == 1);
    for (int i = 1; i < 8; ++i) CHECK(rank_bytes[i] == 0);
    unsigned char dim_bytes[8];
    f.read(reinterpret_cast<char*>(dim_bytes), 8);
    CHECK(dim_bytes[0] == 2);
    CHECK(std::filesystem::file_size(path) == 4 + 1 + 8 + 8 + 2 * 8);
}

TEST_CASE("corrupt files are rejected with the path in the message") {
    auto path = (tmp_dir() / "bad_magic.bin").string();
    {
        std::ofstream f(path, std::ios::binary);
        f.write("NOPE", 4);
    }
    bool threw = false;
    try {
        read_tensor_file(path);
    } catch (const std::exception& e) {
        threw = true;
        CHECK(std::string(e.what()).find("bad_magic.bin") != std::string::npos);
    }
    CHECK(threw);
    CHECK_THROWS(read_tensor_file((tmp_dir() / "missing.bin").string()));
}

TEST_CASE("fnv1a64 matches reference vectors") {
    CHECK(fnv1a64("", 0) == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a", 1) == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a64("foobar", 6) == 0x85944171f73967e8ull);
}

TEST_CASE("rng streams are deterministic and label separated") {
    Rng a(7), b(7);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(7);
    Rng s1 = c.substream("sample_0");
    Rng s2 = c.substream("sample_1");
    Rng s1_again = c.substream("sample_0");
    CHECK(s1.next_u64() == s1_again.next_u64());
    CHECK(s1.next_u64() != s2.next_u64());
}

TEST_CASE("rng normal moments are sane") {
    Rng rng(123);
    double sum = 0.0, sumsq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        double v = rng.normal();
        sum += v;
        sumsq += v * v;
    }
    double mean = sum / n;
    double var = sumsq / n - mean * mean;
    CHECK(std::abs(mean) < 0.03);
    CHECK(std::abs(var - 1.0) < 0.05);
}
