#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "efem/geometry.hpp"

namespace efem {

/// The library-wide generator: 64-bit Mersenne Twister (std::mt19937_64).
/// Every stochastic routine takes one explicitly; nothing reads ambient entropy.
using Rng = std::mt19937_64;

/// Seed for an independent stream, derived from (seed, stream) with SplitMix64.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream) {
    return Rng(derive_seed(seed, stream));
}

double uniform(Rng& rng, double lo = 0.0, double hi = 1.0);
double gaussian(Rng& rng, double sigma);

Vec3 random_unit_vector(Rng& rng);

/// Uniformly distributed rotation (normalized Gaussian quaternion).
Mat3 random_rotation(Rng& rng);

/// Two-step foreground sampling. Each index i is first kept with
/// probability weights[i]; then `count` indices are drawn from the kept set
/// proportionally to their weights, without replacement when the kept set
/// has at least `count` members and with replacement otherwise.
///
/// Returns std::nullopt (the FG_EMPTY signal) when every weight is below
/// 1e-6. If the Bernoulli step happens to keep nothing, the multinomial step
/// runs over all indices with weight >= 1e-6 instead.
std::optional<std::vector<std::size_t>> weighted_sample(std::span<const double> weights,
                                                        std::size_t count, Rng& rng);

}  // namespace efem
