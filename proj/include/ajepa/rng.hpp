#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

namespace ajepa {

/// Deterministic random source used everywhere in the library.
///
/// Wraps std::mt19937_64 (whose output sequence is pinned by the standard) and
/// derives all values with fixed arithmetic instead of std::*_distribution,
/// whose results are implementation-defined. Same seed, same draws, on every
/// platform. State round-trips through a string for checkpointing.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    /// Unbiased integer in [0, bound) via rejection sampling. bound must be > 0.
    std::uint64_t uniform_below(std::uint64_t bound) {
        const std::uint64_t residue = (0ULL - bound) % bound;  // 2^64 mod bound
        for (;;) {
            const std::uint64_t x = eng_();
            if (residue == 0 || x < 0ULL - residue) return x % bound;
        }
    }

    /// Double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller. One value per call; no cached state,
    /// so serialization stays exact.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    /// Normal truncated to +/- 2 sigma, the usual ViT init.
    double trunc_normal(double stddev) {
        for (;;) {
            const double z = normal();
            if (std::fabs(z) <= 2.0) return z * stddev;
        }
    }

    /// Fisher-Yates shuffle.
    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            const std::uint64_t j = uniform_below(i);
            std::swap(first[i - 1], first[j]);
        }
    }

    std::string state() const {
        std::ostringstream os;
        os << eng_;
        return os.str();
    }

    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> eng_;
        if (is.fail()) throw std::runtime_error("Rng::set_state: unparsable engine state");
    }

    bool operator==(const Rng& other) const { return eng_ == other.eng_; }

private:
    std::mt19937_64 eng_;
};

/// FNV-1a, used to derive per-item seeds from a master seed and a string id.
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 14695981039346656037ULL) {
    std::uint64_t h = seed;
    for (const char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace ajepa
