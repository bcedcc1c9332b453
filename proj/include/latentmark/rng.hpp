#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "latentmark/tensor.hpp"

namespace latentmark {

// splitmix64 step; the workhorse for seed derivation and hashing.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Deterministic substream seed: hash of (master, stream index). Distinct
// streams give statistically independent generators on every platform.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
    std::uint64_t s = master;
    std::uint64_t a = splitmix64(s);
    s ^= stream * 0xD6E8FEB86659FD93ULL + 0x2545F4914F6CDD1DULL;
    std::uint64_t b = splitmix64(s);
    return a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
}

// Deterministic random source. Gaussians use the Box-Muller transform with a
// cached spare rather than std::normal_distribution, whose output sequence is
// implementation-defined; all artifacts must be bit-reproducible across runs.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform on the open interval (0, 1); never returns an endpoint, so it is
    // safe to feed through quantile functions.
    double uniform_open() {
        return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
    }

    // Uniform on [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(engine_() % span);
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform_open();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    void fill_normal(LatentTensor& t) {
        for (double& v : t.data) v = normal();
    }

    LatentTensor normal_latent(const Shape& s) {
        LatentTensor t(s);
        fill_normal(t);
        return t;
    }

  private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace latentmark
