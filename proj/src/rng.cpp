#include "sdconet/rng.hpp"

#include <cmath>

namespace sdconet {

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
    if (hi <= lo) return lo;
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    // Rejection sampling to avoid modulo bias.
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t r;
    do {
        r = eng_();
    } while (r >= limit);
    return lo + static_cast<int64_t>(r % span);
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1, u2;
    do {
        u1 = uniform();
    } while (u1 <= 1e-300);
    u2 = uniform();
    double mag = std::sqrt(-2.0 * std::log(u1));
    double ang = 2.0 * M_PI * u2;
    spare_ = mag * std::sin(ang);
    has_spare_ = true;
    return mag * std::cos(ang);
}

double Rng::trunc_normal(double stddev, double limit) {
    for (int i = 0; i < 1000; ++i) {
        double z = normal();
        if (std::fabs(z) <= limit) return stddev * z;
    }
    return 0.0;
}

uint64_t Rng::split(uint64_t tag) {
    // splitmix64 over (state sample, tag) so children are decorrelated.
    uint64_t x = eng_() ^ (tag * 0x9e3779b97f4a7c15ULL);
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

} // namespace sdconet
