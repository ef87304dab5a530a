#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace lmfnet {

// Error taxonomy. The CLI maps these onto its exit codes, so every layer
// below it throws one of the four.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using ShapeVec = std::vector<std::int64_t>;

std::string shape_to_string(const ShapeVec& s);
std::int64_t shape_numel(const ShapeVec& s);

// SplitMix64; used to derive independent deterministic streams from
// (seed, counter) pairs so parallel/resumed work replays bit-exactly.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic RNG built on mt19937_64 with hand-rolled transforms so the
// sampled values do not depend on the standard library implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(splitmix64(seed ^ 0x6a09e667f3bcc908ULL)) {
        // warm up through a second splitmix stage to decorrelate tiny seeds
        state_ = splitmix64(state_);
    }

    std::uint64_t next_u64() {
        state_ = state_ * 6364136223846793005ULL + 1442695040888963407ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::int64_t uniform_int(std::int64_t n) {
        return static_cast<std::int64_t>(uniform() * static_cast<double>(n)) % n;
    }

    // Box-Muller; second value cached
    double normal();

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // normal redrawn until within [-2, 2] sigma, then scaled
    double truncated_normal(double stddev);

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace lmfnet
