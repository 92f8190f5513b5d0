#pragma once

#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "efem/geometry.hpp"
#include "efem/nearest.hpp"
#include "efem/prior.hpp"
#include "efem/sampling.hpp"

namespace efem {

enum class CropShape { Ball, Cylinder };
enum class ConfidencePenalty { Min, AsPrinted };
enum class DistanceMode { Metric, Raw };

struct EngineConfig {
    int n_proposals = 60;
    CropShape crop_shape = CropShape::Ball;
    double crop_radius = 0.4;
    int n_o = 0;  // encoder input size; 0 uses the prior's own
    double alpha_d = 20.0;
    double alpha_n = 1.0 / std::numbers::pi;
    double omega = 0.1;
    double delta_d = 0.03;
    double delta_n = std::numbers::pi / 6.0;
    double delta_c = 0.5;
    int phase1_steps = 15;
    int phase2_steps = 10;
    int min_survivor_points = 64;
    double dedupe_iou = 0.3;
    double containment_frac = 0.8;
    int containment_steps = 3;  // final phase-2 iterations with containment filtering
    double scale_min = 0.05;
    double scale_max = 1.0;
    double output_delta_d = 0.05;
    double output_delta_n = std::numbers::pi / 4.0;
    bool use_normals = true;
    bool use_phase2 = true;
    bool strict_normal_sign = false;
    bool disjoint_masks = false;
    ConfidencePenalty confidence_penalty = ConfidencePenalty::Min;
    DistanceMode distance_mode = DistanceMode::Metric;
    int mesh_resolution = 48;
    // Points farther than locality_extent * theta_s + locality_energy / alpha_d
    // from theta_c get zero weight without evaluating the prior; their
    // background odds are below exp(-locality_energy). 0 disables the cutoff.
    double locality_extent = 1.5;
    double locality_energy = 12.0;
    std::uint64_t seed = 0;
    int workers = 1;

    void validate() const;
    /// Copy with every length scaled by `s` (and alpha_d by 1 / s).
    EngineConfig scaled_lengths(double s) const;

    nlohmann::json to_json() const;
    /// Missing keys keep their defaults; unknown keys are rejected.
    static EngineConfig from_json(const nlohmann::json& j);
};

enum class ProposalStatus { Active, Terminated, Merged, Filtered };
const char* to_string(ProposalStatus status);

struct Proposal {
    std::size_t index = 0;
    std::vector<double> weights;
    std::optional<LatentCode> code;
    std::vector<std::size_t> encoder_input;  // scene indices of the last M-step sample
    ProposalStatus status = ProposalStatus::Active;
    double s1 = 0.0;
    double s2 = 0.0;
    double confidence = 0.0;
    std::optional<TriangleMesh> mesh;
    std::optional<Sim3> pose;
};

/// Per-point fitting errors for one code. Points skipped by the locality
/// cutoff carry infinite e_d and energy.
struct PointErrors {
    std::vector<double> e_d;
    std::vector<double> e_n;
    std::vector<double> energy;
};

std::vector<Proposal> init_proposals(const ScenePointCloud& scene, const EngineConfig& config, Rng& rng);

struct MStep {
    LatentCode code;
    std::vector<std::size_t> sample;
};

/// Weighted foreground sample of n_o points, encoded. std::nullopt is the
/// FG_EMPTY signal (also returned when the sample is degenerate).
std::optional<MStep> m_step(const ScenePointCloud& scene, std::span<const double> weights,
                            const PriorModel& prior, std::size_t n_o, Rng& rng);

/// Angle between an observed normal and a field gradient, honoring the
/// unsigned-orientation guard unless `strict_sign`.
double normal_angle(const Vec3& normal, const Vec3& gradient, bool strict_sign);

PointErrors fitting_error(const ScenePointCloud& scene, const LatentCode& code, const PriorModel& prior,
                          const EngineConfig& config);

/// W_i = exp(-E_i) / (exp(-E_i) + omega).
std::vector<double> e_step(std::span<const double> energy, double omega);

/// W_k,i = s1_k exp(-E_k,i) / (sum_j s1_j exp(-E_j,i) + omega).
std::vector<std::vector<double>> e_step_joint(const std::vector<std::vector<double>>& energy,
                                              std::span<const double> s1, double omega);

struct Scores {
    double s1 = 0.0;
    double s2 = 0.0;
    double confidence = 0.0;
};

/// Fraction of encoder-input points with e_d < delta_d and e_n < delta_n.
double fitting_score(std::span<const std::size_t> encoder_input, const PointErrors& errors,
                     const EngineConfig& config);

/// Fraction of mesh vertices whose nearest scene point lies within delta_d
/// with a normal angle below delta_n.
double coverage_score(const TriangleMesh& mesh, const ScenePointCloud& scene, const PointIndex& index,
                      const EngineConfig& config);

double confidence_score(double s1, double s2, const EngineConfig& config);

Scores score_proposal(std::span<const std::size_t> encoder_input, const PointErrors& errors,
                      const TriangleMesh& mesh, const ScenePointCloud& scene, const PointIndex& index,
                      const EngineConfig& config);

/// Marching cubes over the cube of half-width 1.5 theta_s about theta_c.
TriangleMesh extract_proposal_mesh(const LatentCode& code, const PriorModel& prior, const EngineConfig& config);

/// Procrustes registration against the closest library entry in theta_inv.
/// std::nullopt is the NO_POSE signal.
std::optional<Sim3> estimate_pose(const LatentCode& code, const LatentLibrary& library);

/// Binarized mask (W >= 0.5) as sorted indices.
std::vector<std::size_t> binarize(std::span<const double> weights);

/// Marks active proposals whose mask IoU with a higher-S1 proposal exceeds
/// dedupe_iou as merged. Ties prefer the lower index.
void dedupe(std::vector<Proposal>& proposals, const EngineConfig& config);

/// Marks active proposals with theta_s outside [scale_min, scale_max] or an
/// empty mesh as filtered.
void filter_scale(std::vector<Proposal>& proposals, const EngineConfig& config);

/// Marks active proposals mostly contained in a kept proposal with S1 at
/// least as high as filtered.
void filter_containment(std::vector<Proposal>& proposals, const EngineConfig& config);

struct Instance {
    std::size_t proposal = 0;
    std::vector<std::size_t> point_indices;
    double confidence = 0.0;
    double s1 = 0.0;
    double s2 = 0.0;
    LatentCode code;
    TriangleMesh mesh;
    std::optional<Sim3> pose;
};

struct Diagnostics {
    int iterations = 0;
    int proposals_spawned = 0;
    int terminated = 0;
    int merged = 0;
    int filtered = 0;
};

struct Segmentation {
    std::vector<Instance> instances;
    Diagnostics diagnostics;
};

/// Full two-phase pipeline. Each proposal k draws from the stream
/// derive_seed(config.seed, k + 1), so the result does not depend on the
/// number of workers.
Segmentation run(const ScenePointCloud& scene, const PriorModel& prior, const LatentLibrary* library,
                 const EngineConfig& config);

}  // namespace efem
