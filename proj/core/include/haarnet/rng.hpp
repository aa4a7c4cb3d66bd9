#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace haarnet {

// Deterministic random source. Draw helpers are hand-rolled on top of the
// mt19937 word stream so sequences are identical across standard libraries;
// std::*_distribution is avoided on purpose.
class Rng {
  public:
    explicit Rng(uint64_t seed) : engine_(static_cast<uint32_t>(seed ^ (seed >> 32))) {}

    uint32_t next_u32() { return engine_(); }

    // Uniform in [0, 1) with 24 bits of resolution.
    float canonical() { return static_cast<float>(engine_() >> 8) * (1.0f / 16777216.0f); }

    float uniform(float lo, float hi) { return lo + (hi - lo) * canonical(); }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        const uint32_t span = static_cast<uint32_t>(hi - lo) + 1u;
        return lo + static_cast<int>(engine_() % span);
    }

    // Box-Muller; consumes two words per pair, caches the second draw.
    float normal(float mean = 0.0f, float stddev = 1.0f) {
        if (has_cached_) {
            has_cached_ = false;
            return mean + stddev * cached_;
        }
        float u1 = canonical();
        float u2 = canonical();
        if (u1 < 1e-12f) u1 = 1e-12f;
        const float r = std::sqrt(-2.0f * std::log(u1));
        const float a = 6.28318530717958647692f * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return mean + stddev * (r * std::cos(a));
    }

    // Fisher-Yates using our own index draws.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = engine_() % i;
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derive an independent stream, e.g. one per epoch.
    static uint64_t mix(uint64_t seed, uint64_t salt) {
        uint64_t x = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ull;
        x ^= x >> 27;
        x *= 0x94d049bb133111ebull;
        x ^= x >> 31;
        return x;
    }

  private:
    std::mt19937 engine_;
    float cached_ = 0.0f;
    bool has_cached_ = false;
};

}  // namespace haarnet
