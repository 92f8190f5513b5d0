#include "efem/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "efem/error.hpp"

namespace efem {

namespace {

constexpr double kMinWeight = 1e-6;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

double uniform(Rng& rng, double lo, double hi) {
    // 53 random bits -> [0, 1); avoids implementation-defined distributions.
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
}

double gaussian(Rng& rng, double sigma) {
    // Box-Muller; u1 in (0, 1].
    const double u1 = 1.0 - uniform(rng);
    const double u2 = uniform(rng);
    return sigma * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

Vec3 random_unit_vector(Rng& rng) {
    for (;;) {
        Vec3 v(gaussian(rng, 1.0), gaussian(rng, 1.0), gaussian(rng, 1.0));
        const double n = v.norm();
        if (n > 1e-9) return v / n;
    }
}

Mat3 random_rotation(Rng& rng) {
    for (;;) {
        const double w = gaussian(rng, 1.0), x = gaussian(rng, 1.0);
        const double y = gaussian(rng, 1.0), z = gaussian(rng, 1.0);
        if (w * w + x * x + y * y + z * z > 1e-12) return rotation_from_quaternion(w, x, y, z);
    }
}

std::optional<std::vector<std::size_t>> weighted_sample(std::span<const double> weights,
                                                        std::size_t count, Rng& rng) {
    if (weights.empty() || count == 0) {
        throw Error(ErrorCode::InvalidArgument, "weighted_sample needs weights and count >= 1");
    }
    std::vector<std::size_t> kept;
    bool any = false;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double w = weights[i];
        if (!(w >= kMinWeight)) continue;
        any = true;
        // Bernoulli(w); draw unconditionally so the stream is data-independent.
        if (uniform(rng) < w) kept.push_back(i);
    }
    if (!any) return std::nullopt;
    if (kept.empty()) {
        for (std::size_t i = 0; i < weights.size(); ++i) {
            if (weights[i] >= kMinWeight) kept.push_back(i);
        }
    }

    std::vector<std::size_t> out;
    out.reserve(count);
    if (kept.size() >= count) {
        // Efraimidis-Spirakis: the `count` largest keys log(u)/w form a
        // weighted sample without replacement.
        std::vector<std::pair<double, std::size_t>> keys;
        keys.reserve(kept.size());
        for (std::size_t i : kept) {
            const double u = 1.0 - uniform(rng);
            keys.emplace_back(std::log(u) / weights[i], i);
        }
        std::partial_sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(count), keys.end(),
                          [](const auto& a, const auto& b) {
                              return a.first > b.first || (a.first == b.first && a.second < b.second);
                          });
        for (std::size_t j = 0; j < count; ++j) out.push_back(keys[j].second);
        return out;
    }

    std::vector<double> cdf(kept.size());
    double acc = 0.0;
    for (std::size_t j = 0; j < kept.size(); ++j) {
        acc += weights[kept[j]];
        cdf[j] = acc;
    }
    for (std::size_t n = 0; n < count; ++n) {
        const double u = uniform(rng, 0.0, acc);
        auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
        if (it == cdf.end()) --it;
        out.push_back(kept[static_cast<std::size_t>(it - cdf.begin())]);
    }
    return out;
}

}  // namespace efem
