#include "tbwm/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace tbwm {

std::int64_t Rng::uniform_int(std::int64_t n) {
    if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
    // Rejection sampling to avoid modulo bias.
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return static_cast<std::int64_t>(x % un);
}

double Rng::normal() {
    // u1 in (0, 1] so the log is finite.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
}

int Rng::categorical(std::span<const double> weights) {
    if (weights.empty())
        throw std::invalid_argument("categorical: empty weights");
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0))
            throw std::invalid_argument("categorical: negative weight");
        total += w;
    }
    if (total <= 0.0)
        throw std::invalid_argument("categorical: zero total weight");
    double r = uniform() * total;
    for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
        r -= weights[i];
        if (r < 0.0) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size() - 1);
}

std::vector<int> Rng::permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    for (int i = n - 1; i > 0; --i) {
        const int j = static_cast<int>(uniform_int(i + 1));
        std::swap(p[i], p[j]);
    }
    return p;
}

void Rng::save(std::ostream& os) const { os << engine_; }

void Rng::load(std::istream& is) { is >> engine_; }

std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream_id) {
    std::uint64_t z = root + (stream_id + 1) * 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace tbwm
