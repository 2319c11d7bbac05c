#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace trm {

// Deterministic RNG with explicit distributions so results do not depend
// on the standard library's implementation of <random> distributions.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    double uniform() { return (eng_() >> 11) * 0x1.0p-53; }  // [0,1)

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int64_t uniform_int(int64_t n) {  // [0, n)
        return static_cast<int64_t>(uniform() * static_cast<double>(n)) % n;
    }

    double normal() {
        // Box-Muller; one value per call keeps the stream position simple.
        double u1 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double trunc_normal(double std_dev) {  // resample beyond 2 sigma
        double x;
        do {
            x = normal();
        } while (std::abs(x) > 2.0);
        return x * std_dev;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(uniform_int(static_cast<int64_t>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace trm
