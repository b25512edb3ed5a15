#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace levi {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Every random draw in the artifact flows from one root seed, split
// deterministically by (purpose, index). Keeps independent runs isolated and
// replays byte-identical.
enum class SeedPurpose : std::uint64_t {
    data = 1,
    backbone_init = 2,
    task_init = 3,
    head_init = 4,
    batch_order = 5,
    pretrain_batch = 6,
    member = 7,
    suite = 8,
};

inline std::uint64_t derive_seed(std::uint64_t root, SeedPurpose purpose, std::uint64_t index = 0) {
    const std::uint64_t tag = 0x517cc1b727220a95ULL * static_cast<std::uint64_t>(purpose);
    return splitmix64(splitmix64(root ^ tag) ^ (0xd1342543de82ef95ULL * (index + 1)));
}

// mt19937_64 engine with hand-rolled distributions, so streams do not depend
// on the standard library's distribution implementations.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    // uniform in [0, 1) with 53 random bits
    double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    double normal(double mean = 0.0, double stddev = 1.0) {
        if (have_spare_) {
            have_spare_ = false;
            return mean + stddev * spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform01();
        } while (u1 <= 0.0);
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return mean + stddev * r * std::cos(theta);
    }

    // unbiased integer in [0, n)
    std::int64_t below(std::int64_t n) {
        const std::uint64_t un = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        std::uint64_t v = 0;
        do {
            v = next();
        } while (v >= limit);
        return static_cast<std::int64_t>(v % un);
    }

    void shuffle(std::vector<std::int64_t>& v) {
        for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
            const std::int64_t j = below(i + 1);
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
        }
    }

  private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace levi
