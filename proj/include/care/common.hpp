#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

namespace care {

// ----------------------------------------------------------------------------
// Error taxonomy. Everything user-facing derives from Error so the CLI can
// map validation failures to exit 1 and runtime failures to exit 2.
// ----------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape/dimension mismatch between tensors.
class DimError : public Error {
public:
    using Error::Error;
};

// Bad configuration value, unknown key, unknown kind.
class ConfigError : public Error {
public:
    using Error::Error;
};

// API misuse (e.g. backward on a non-scalar).
class ContractError : public Error {
public:
    using Error::Error;
};

// Bad user-supplied input data (empty waveform, malformed manifest row).
class InputError : public Error {
public:
    using Error::Error;
};

// Filesystem-level failure.
class IoError : public Error {
public:
    using Error::Error;
};

// Checkpoint-specific failure: CRC, version, truncation, shape mismatch.
class CheckpointError : public Error {
public:
    using Error::Error;
};

// Non-finite value where a finite one is required (rejected optimizer step).
class NonFiniteError : public Error {
public:
    using Error::Error;
};

// ----------------------------------------------------------------------------
// Deterministic RNG. splitmix64 for seeding/stream derivation, xoshiro256++
// for the stream itself. Self-contained so that every platform and every
// standard library produces the same values.
// ----------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Stable mixing of several seed components into one stream seed.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t s = a;
    std::uint64_t h = splitmix64(s);
    s ^= b + 0x9e3779b97f4a7c15ULL;
    h ^= splitmix64(s);
    s ^= c + 0xc2b2ae3d27d4eb4fULL;
    h ^= splitmix64(s);
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& word : state_) word = splitmix64(sm);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0,1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Index in [0,n). Modulo bias is irrelevant at our n.
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

    // Box-Muller; consumes two uniforms per call, no cached spare.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::uint64_t state_[4];
};

// ----------------------------------------------------------------------------
// Formatting helpers shared by report writers. Reports must be byte-stable
// across runs, so all float formatting funnels through here.
// ----------------------------------------------------------------------------

inline std::string fmt_float(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

inline std::string fmt_fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
    return buf;
}

}  // namespace care
