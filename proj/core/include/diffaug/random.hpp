#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "diffaug/tensor.hpp"

namespace diffaug {

// Deterministic RNG built on std::mt19937_64 (its output sequence is fixed by
// the standard). All value transforms are implemented here instead of using
// std::*_distribution, whose sequences are implementation-defined.
class Rng {
  public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0,1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) by rejection.
    int uniform_int(int n);

    // Standard normal via Box-Muller; caches the spare draw.
    double gaussian();

    void fill_gaussian(Tensor& t) {
        for (int64_t i = 0; i < t.size(); ++i) t[i] = gaussian();
    }
    Tensor gaussian_tensor(std::vector<int> shape) {
        Tensor t(std::move(shape));
        fill_gaussian(t);
        return t;
    }

    // Fisher-Yates permutation of 0..n-1.
    std::vector<int> permutation(int n);

    // Stage/stream seed derivation: one global seed deterministically expands
    // into per-stage and per-sample streams (splitmix64 over seed ^ FNV-1a tag).
    static uint64_t derive(uint64_t seed, std::string_view tag);
    static uint64_t derive(uint64_t seed, uint64_t index);

  private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace diffaug
