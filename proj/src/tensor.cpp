#include "mmdfer/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mmdfer {

int64_t shape_numel(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const std::vector<int64_t>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
}

Tensor Tensor::zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

Tensor Tensor::full(std::vector<int64_t> s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
}

int64_t Tensor::numel() const { return static_cast<int64_t>(data.size()); }

static size_t flat_index(const std::vector<int64_t>& shape, std::initializer_list<int64_t> idx) {
    if (idx.size() != shape.size()) throw std::invalid_argument("tensor index rank mismatch");
    size_t flat = 0;
    size_t k = 0;
    for (int64_t i : idx) {
        flat = flat * static_cast<size_t>(shape[k]) + static_cast<size_t>(i);
        ++k;
    }
    return flat;
}

double& Tensor::at(std::initializer_list<int64_t> idx) { return data[flat_index(shape, idx)]; }
double Tensor::at(std::initializer_list<int64_t> idx) const { return data[flat_index(shape, idx)]; }

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

double Tensor::max_abs() const {
    double m = 0.0;
    for (double v : data) m = std::max(m, std::fabs(v));
    return m;
}

IntTensor::IntTensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(shape_numel(shape)), 0);
}

int64_t IntTensor::numel() const { return static_cast<int64_t>(data.size()); }

namespace {

constexpr char kMagic[4] = {'F', 'C', 'K', '1'};
constexpr uint8_t kDtypeF64 = 0;
constexpr uint8_t kDtypeI32 = 1;

void put_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

void write_header(std::ostream& os, uint8_t dtype, const std::vector<int64_t>& shape) {
    os.write(kMagic, 4);
    os.put(static_cast<char>(dtype));
    put_u64(os, static_cast<uint64_t>(shape.size()));
    for (int64_t d : shape) put_u64(os, static_cast<uint64_t>(d));
}

std::vector<int64_t> read_header(std::istream& is, const std::filesystem::path& p, uint8_t want_dtype) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("bad tensor file magic: " + p.string());
    int dtype = is.get();
    if (dtype != want_dtype)
        throw std::runtime_error("unexpected dtype " + std::to_string(dtype) + " in " + p.string());
    uint64_t rank = get_u64(is);
    if (rank > 8) throw std::runtime_error("implausible tensor rank in " + p.string());
    std::vector<int64_t> shape(rank);
    for (auto& d : shape) d = static_cast<int64_t>(get_u64(is));
    return shape;
}

}  // namespace

void write_tensor_file(const std::filesystem::path& p, const Tensor& t) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + p.string());
    write_header(os, kDtypeF64, t.shape);
    // Doubles are written as-is: this code targets little-endian IEEE hosts.
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!os) throw std::runtime_error("short write: " + p.string());
}

void write_tensor_file(const std::filesystem::path& p, const IntTensor& t) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + p.string());
    write_header(os, kDtypeI32, t.shape);
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(int32_t)));
    if (!os) throw std::runtime_error("short write: " + p.string());
}

Tensor read_tensor_file(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + p.string());
    Tensor t(read_header(is, p, kDtypeF64));
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!is) throw std::runtime_error("truncated tensor payload: " + p.string());
    return t;
}

IntTensor read_int_tensor_file(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + p.string());
    IntTensor t(read_header(is, p, kDtypeI32));
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(int32_t)));
    if (!is) throw std::runtime_error("truncated tensor payload: " + p.string());
    return t;
}

uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t hash_file(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + p.string());
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 16];
    while (is) {
        is.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<size_t>(is.gcount()), h);
    }
    return h;
}

std::string hash_hex(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return s;
}

}  // namespace mmdfer
