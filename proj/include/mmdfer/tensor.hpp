#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mmdfer {

// Dense row-major tensor of doubles. Shapes are explicit; there is no
// implicit broadcasting outside the ops that document it.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s);

    static Tensor zeros(std::vector<int64_t> s);
    static Tensor full(std::vector<int64_t> s, double v);

    int64_t numel() const;
    int64_t rank() const { return static_cast<int64_t>(shape.size()); }

    double& at(std::initializer_list<int64_t> idx);
    double at(std::initializer_list<int64_t> idx) const;

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;
    double max_abs() const;
};

// Integer tensor, used for region-id maps and token ids on disk.
struct IntTensor {
    std::vector<int64_t> shape;
    std::vector<int32_t> data;

    IntTensor() = default;
    explicit IntTensor(std::vector<int64_t> s);

    int64_t numel() const;
};

int64_t shape_numel(const std::vector<int64_t>& s);
std::string shape_str(const std::vector<int64_t>& s);

// Binary tensor files: magic "FCK1", u8 dtype (0 = f64, 1 = i32),
// u64 rank, u64 dims, then the row-major payload. All little-endian.
void write_tensor_file(const std::filesystem::path& p, const Tensor& t);
void write_tensor_file(const std::filesystem::path& p, const IntTensor& t);
Tensor read_tensor_file(const std::filesystem::path& p);
IntTensor read_int_tensor_file(const std::filesystem::path& p);

// FNV-1a 64-bit, used for content fingerprints.
uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ull);
uint64_t hash_file(const std::filesystem::path& p);
std::string hash_hex(uint64_t h);

}  // namespace mmdfer
