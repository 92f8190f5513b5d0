#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include <json.hpp>

#include "efem/learned_prior.hpp"
#include "efem/shapes.hpp"

namespace efem {

struct AugmentConfig {
    bool enabled = true;
    double crop_prob = 0.5;
    double crop_min_keep = 0.4;     // half-space crop keeps at least this fraction
    double clutter_prob = 0.3;
    double clutter_max_frac = 0.2;  // at most this fraction replaced by a neighbour
    double plane_prob = 0.5;
    double plane_max_frac = 0.4;    // at most this fraction replaced by a supporting plane patch
    double noise_sigma = 0.005;
    double near_surface_frac = 0.7;
    double near_surface_std = 0.05;
    double uniform_extent = 1.1;    // uniform queries in [-e, e]^3

    void validate() const;
    nlohmann::json to_json() const;
    static AugmentConfig from_json(const nlohmann::json& j);
};

struct TrainingSample {
    std::vector<Vec3> surface_points;  // encoder input, n_o points
    std::vector<Vec3> query_points;
    std::vector<double> target_sdf;    // exact SDF of the generating shape
};

/// Encoder input from `shape` with crop, clutter, support plane and noise
/// applied in that order, plus `queries` SDF queries. Clutter shapes come from `family`.
TrainingSample make_training_sample(const ProceduralShape& shape, const FamilyConfig& family,
                                    const AugmentConfig& augment, std::size_t n_o, std::size_t queries,
                                    Rng& rng);

/// mean (pred - target)^2 + lambda_c |theta_c|^2 + lambda_s (theta_s - 1)^2.
double loss(std::span<const double> pred, std::span<const double> target, const LatentCode& code,
            double lambda_c, double lambda_s);

struct TrainConfig {
    FamilyConfig family;
    AugmentConfig augment;
    NetTopology net;
    int steps = 2000;
    int batch_shapes = 8;
    int queries_per_shape = 512;
    vecnet::AdamConfig adam;
    double lambda_c = 0.01;
    double lambda_s = 0.1;
    double anneal_after = 1.0;  // regularizers drop to zero after this fraction of steps
    double grad_clip = 10.0;    // global gradient-norm clip; 0 disables
    double final_lr_frac = 1.0; // cosine decay of the learning rate to this fraction of lr
    int library_size = 64;
    int heldout_shapes = 16;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct LossRecord {
    int step = 0;
    double loss = 0.0;
    double mse = 0.0;
    double smoothed = 0.0;
};

struct TrainResult {
    std::unique_ptr<LearnedPrior> prior;
    LatentLibrary library;
    std::vector<LossRecord> curve;
    double heldout_mae = 0.0;  // mean |theta_s Psi - sdf| on clean held-out shapes
    bool divergence_flagged = false;
};

using TrainProgress = std::function<void(const LossRecord&)>;

/// Adam over minibatches of fresh samples; throws Error(Numeric) on a
/// non-finite loss. Identical configs give bit-identical results.
TrainResult train(const TrainConfig& config, const TrainProgress& progress = {});

/// Mean absolute metric SDF error of `prior` on `shapes` freshly sampled
/// held-out shapes without augmentation.
double heldout_error(const LearnedPrior& prior, const TrainConfig& config, int shapes, Rng& rng);

/// Encodes `count` clean canonical shapes drawn from `family`.
LatentLibrary build_library(const PriorModel& prior, const FamilyConfig& family, int count, Rng& rng);

}  // namespace efem
