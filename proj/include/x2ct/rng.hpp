#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "x2ct/tensor.hpp"

namespace x2ct {

/// Seeded generator with pinned uniform/normal algorithms so outputs are
/// reproducible byte-for-byte across runs of the same binary.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    /// Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {  // inclusive bounds
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo + 1);
        return lo + static_cast<std::int64_t>(eng_() % span);
    }

    /// Box-Muller; one fresh pair per two draws.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    Tensor uniform_tensor(const Shape& shape, double lo, double hi) {
        std::vector<double> v(static_cast<std::size_t>(shape_size(shape)));
        for (auto& x : v) x = uniform(lo, hi);
        return Tensor(shape, std::move(v));
    }

    Tensor normal_tensor(const Shape& shape, double mean = 0.0, double stdev = 1.0) {
        std::vector<double> v(static_cast<std::size_t>(shape_size(shape)));
        for (auto& x : v) x = mean + stdev * normal();
        return Tensor(shape, std::move(v));
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(items[i - 1], items[j]);
        }
    }

    /// Derive an independent stream, e.g. per (epoch, sample).
    static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
        std::uint64_t x = a + 0x9e3779b97f4a7c15ULL * (b + 1);
        x ^= x >> 30;
        x *= 0xbf58476d1ce4e5b9ULL;
        x ^= x >> 27;
        x *= 0x94d049bb133111ebULL;
        x ^= x >> 31;
        return x;
    }

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace x2ct
