#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace mmo {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Independent child seed for stream `k` of `seed`. Replicate k always gets the
// same stream whatever the thread count.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t k) {
    return splitmix64(splitmix64(seed) ^ splitmix64(k + 0x632be59bd9b4e019ULL));
}

using Rng = std::mt19937_64;

// Box-Muller keeps draws identical across standard libraries, unlike
// std::normal_distribution.
class Normal {
public:
    double operator()(Rng& rng) {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform(rng);
        } while (u1 <= 0.0);
        const double u2 = uniform(rng);
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    static double uniform(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

private:
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline Eigen::VectorXd standard_normal(Rng& rng, Eigen::Index n) {
    Normal nd;
    Eigen::VectorXd z(n);
    for (Eigen::Index i = 0; i < n; ++i) z[i] = nd(rng);
    return z;
}

}  // namespace mmo
