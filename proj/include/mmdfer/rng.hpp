#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "mmdfer/tensor.hpp"

namespace mmdfer {

// splitmix64-based generator. Self-contained so that streams are identical
// across platforms and standard-library versions; std distributions are not.
class Rng {
   public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Uniform integer in [0, n). Modulo bias is irrelevant at our scales.
    int64_t uniform_int(int64_t n) { return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n)); }

    bool bernoulli(double p) { return uniform() < p; }

    // Independent substream keyed by a label, e.g. one per sample id.
    Rng substream(std::string_view label) const {
        uint64_t h = fnv1a64(label.data(), label.size());
        return Rng(state_ ^ (h * 0x9e3779b97f4a7c15ull) ^ 0x5851f42d4c957f2dull);
    }

    void fill_normal(Tensor& t, double stddev) {
        for (double& v : t.data) v = normal() * stddev;
    }

   private:
    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace mmdfer
