#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <random>

namespace kmmvae {

/// Mixes an arbitrary number of 64-bit words into one seed (splitmix64
/// finalizer per word). Used to derive independent, order-free streams
/// from (master seed, stream tag, epoch, item index, ...).
inline std::uint64_t mix_seed(std::uint64_t h) {
    h += 0x9e3779b97f4a7c15ULL;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ULL;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebULL;
    return h ^ (h >> 31);
}

template <typename... Rest>
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, Rest... rest) {
    return mix_seed(mix_seed(a) ^ (b + 0x9e3779b97f4a7c15ULL), rest...);
}

/// Deterministic random source. The mt19937_64 engine is fully specified
/// by the standard; the distribution transforms below are hand-rolled so
/// that streams are reproducible across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t raw() { return engine_(); }

    /// Uniform on [0, 1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller. One fresh pair per two calls.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    /// Rayleigh with scale sigma (mode sigma), via inverse CDF.
    double rayleigh(double sigma) {
        double u = 1.0 - uniform(); // in (0, 1]
        return sigma * std::sqrt(-2.0 * std::log(u));
    }

    /// Circularly-symmetric complex normal with E|x|^2 = var.
    std::complex<double> complex_normal(double var) {
        double s = std::sqrt(0.5 * var);
        return {s * normal(), s * normal()};
    }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // unbiased rejection sampling
        std::uint64_t lim = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t v;
        do {
            v = engine_();
        } while (v >= lim);
        return v % n;
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace kmmvae
