#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace usip {

// Error taxonomy. Preconditions violations use std::invalid_argument; the
// classes below cover the remaining failure modes the CLI maps to exit codes.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DegenerateGeometryError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IndeterminateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainingDivergedError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// splitmix64 finalizer; used to derive sub-seeds.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Seed splitting rule: sub_seed = mix64(seed ^ stage ^ mix64(index)).
// Every source of randomness in the library derives its seed this way from
// the single run seed, so replays are exact.
namespace seed_stage {
inline constexpr std::uint64_t kTransform   = 0x5452414e53464d31ULL;
inline constexpr std::uint64_t kNoise       = 0x4e4f495345303031ULL;
inline constexpr std::uint64_t kDownsample  = 0x444f574e53414d50ULL;
inline constexpr std::uint64_t kSubsample   = 0x53554253414d5031ULL;
inline constexpr std::uint64_t kParamInit   = 0x504152414d494e49ULL;
inline constexpr std::uint64_t kPairs       = 0x5041495253000001ULL;
inline constexpr std::uint64_t kProposeA    = 0x50524f504f534541ULL;
inline constexpr std::uint64_t kProposeB    = 0x50524f504f534542ULL;
inline constexpr std::uint64_t kBaseline    = 0x424153454c494e45ULL;
inline constexpr std::uint64_t kEval        = 0x4556414c00000001ULL;
inline constexpr std::uint64_t kRansac      = 0x52414e5341430001ULL;
inline constexpr std::uint64_t kShape       = 0x5348415045000001ULL;
inline constexpr std::uint64_t kMining      = 0x4d494e494e470001ULL;
}  // namespace seed_stage

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stage,
                                 std::uint64_t index = 0) {
    return mix64(seed ^ stage ^ mix64(index));
}

// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// uniform/normal transforms below are hand-rolled so the byte streams do not
// depend on the standard library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Uniform integer in [0, n). Rejection sampling, exactly uniform.
    int uniform_int(int n) {
        if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
        const std::uint64_t un = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return static_cast<int>(x % un);
    }

    // k distinct indices from [0, n), by partial Fisher-Yates.
    std::vector<int> sample_without_replacement(int n, int k) {
        if (k < 0 || k > n) {
            throw std::invalid_argument("sample_without_replacement: need 0 <= k <= n");
        }
        std::vector<int> pool(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
        std::vector<int> out;
        out.reserve(static_cast<std::size_t>(k));
        for (int i = 0; i < k; ++i) {
            const int j = i + uniform_int(n - i);
            std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
            out.push_back(pool[static_cast<std::size_t>(i)]);
        }
        return out;
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace usip
