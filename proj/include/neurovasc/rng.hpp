#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace neurovasc {

/// Deterministic RNG wrapper. The engine (mt19937_64) is bit-exact across
/// platforms; the distributions below are implemented here rather than with
/// std::*_distribution, whose output is implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi], inclusive.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(eng_() % span);
    }

    /// Standard normal via Box-Muller; pairs are cached so draws stay cheap.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double std) { return mean + std * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    /// Derive an independent child stream (splitmix64 of seed ^ stream id).
    Rng fork(std::uint64_t stream) {
        std::uint64_t z = next_u64() ^ (0x9E3779B97F4A7C15ull * (stream + 1));
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return Rng(z ^ (z >> 31));
    }

    std::string serialize() const {
        std::ostringstream os;
        os << eng_ << " " << (have_spare_ ? 1 : 0) << " " << spare_;
        return os.str();
    }
    void deserialize(const std::string& s) {
        std::istringstream is(s);
        int flag = 0;
        is >> eng_ >> flag >> spare_;
        have_spare_ = (flag != 0);
    }

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace neurovasc
