#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "fedmob/errors.hpp"
#include "fedmob/hash.hpp"

namespace fedmob {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Every random stream in the project derives from the single top-level seed
// through this function. Adding components never perturbs existing streams.
inline uint64_t derive_seed(uint64_t root, std::string_view component, uint64_t index = 0) {
    uint64_t h = hash_u64(root);
    h = fnv1a64(component, h);
    h = hash_u64(index, h);
    return splitmix64(h);
}

// Deterministic random source. The engine is the fully specified std
// mersenne twister; all distributions are hand-rolled here so that equal
// seeds give bit-identical streams on every platform.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 bits of randomness.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi], inclusive, rejection sampled to avoid bias.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (hi < lo) throw NumericError("uniform_int: empty range");
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        if (span == 0) return static_cast<int64_t>(next_u64()); // full 64-bit range
        uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return lo + static_cast<int64_t>(v % span);
    }

    // Box-Muller without caching; two engine draws per variate.
    double normal(double mean = 0.0, double sigma = 1.0) {
        double u1 = 1.0 - uniform(); // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        return mean + sigma * r * std::cos(2.0 * M_PI * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

// Weighted choice by cumulative-sum inversion.
class DiscreteDist {
public:
    explicit DiscreteDist(std::span<const double> weights) {
        cumulative_.reserve(weights.size());
        double acc = 0.0;
        for (double w : weights) {
            if (w < 0.0) throw ConfigError("discrete distribution: negative weight");
            acc += w;
            cumulative_.push_back(acc);
        }
        if (cumulative_.empty() || acc <= 0.0)
            throw ConfigError("discrete distribution: weights must sum to a positive value");
    }

    size_t sample(Rng& rng) const {
        double u = rng.uniform() * cumulative_.back();
        size_t lo = 0, hi = cumulative_.size() - 1;
        while (lo < hi) {
            size_t mid = (lo + hi) / 2;
            if (cumulative_[mid] > u)
                hi = mid;
            else
                lo = mid + 1;
        }
        return lo;
    }

private:
    std::vector<double> cumulative_;
};

} // namespace fedmob
