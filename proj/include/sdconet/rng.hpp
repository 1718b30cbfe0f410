#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace sdconet {

// Deterministic RNG. All sampling goes through hand-rolled transforms so the
// stream is identical across standard libraries, not just across runs.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range.
    int64_t uniform_int(int64_t lo, int64_t hi);

    // Box-Muller standard normal (cached spare for the pair).
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Rejection-sampled normal truncated at +-limit stddevs.
    double trunc_normal(double stddev, double limit = 2.0);

    // Derive an independent child seed; tag decorrelates siblings.
    uint64_t split(uint64_t tag);
    Rng child(uint64_t tag) { return Rng(split(tag)); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace sdconet
