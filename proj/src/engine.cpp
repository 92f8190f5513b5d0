#include "efem/engine.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include "efem/error.hpp"
#include "efem/marching_cubes.hpp"

namespace efem {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kPi = std::numbers::pi;

template <class F>
void parallel_for(std::size_t n, int workers, F&& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto body = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        }
    };
    const auto count = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
    std::vector<std::thread> threads;
    threads.reserve(count - 1);
    for (std::size_t t = 0; t + 1 < count; ++t) threads.emplace_back(body);
    body();
    for (auto& t : threads) t.join();
    if (error) std::rethrow_exception(error);
}

std::size_t intersection_size(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    std::size_t i = 0, j = 0, n = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i] < b[j]) {
            ++i;
        } else if (b[j] < a[i]) {
            ++j;
        } else {
            ++n;
            ++i;
            ++j;
        }
    }
    return n;
}

// Active proposals ordered by S1 descending, lower index first on ties.
std::vector<std::size_t> by_fitting_score(const std::vector<Proposal>& proposals) {
    std::vector<std::size_t> order;
    for (std::size_t k = 0; k < proposals.size(); ++k)
        if (proposals[k].status == ProposalStatus::Active) order.push_back(k);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return proposals[a].s1 > proposals[b].s1; });
    return order;
}

bool small_error(const PointErrors& e, std::size_t i, double delta_d, double delta_n) {
    return e.e_d[i] < delta_d && e.e_n[i] < delta_n;
}

std::size_t survivor_count(const PointErrors& e, const EngineConfig& config) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < e.e_d.size(); ++i)
        if (small_error(e, i, config.output_delta_d, config.output_delta_n)) ++n;
    return n;
}

void require_config(bool ok, const std::string& what) {
    if (!ok) throw Error(ErrorCode::Config, "engine config: " + what);
}

const char* to_string(CropShape c) { return c == CropShape::Ball ? "ball" : "cylinder"; }
const char* to_string(ConfidencePenalty c) { return c == ConfidencePenalty::Min ? "min" : "as_printed"; }
const char* to_string(DistanceMode d) { return d == DistanceMode::Metric ? "metric" : "raw"; }

}  // namespace

const char* to_string(ProposalStatus status) {
    switch (status) {
        case ProposalStatus::Active: return "active";
        case ProposalStatus::Terminated: return "terminated";
        case ProposalStatus::Merged: return "merged";
        case ProposalStatus::Filtered: return "filtered";
    }
    return "unknown";
}

void EngineConfig::validate() const {
    require_config(n_proposals >= 1, "n_proposals must be >= 1");
    require_config(crop_radius >= 0.0 && std::isfinite(crop_radius), "crop_radius must be >= 0");
    require_config(n_o >= 0, "n_o must be >= 0");
    require_config(alpha_d > 0.0 && alpha_n >= 0.0, "alpha_d must be positive and alpha_n >= 0");
    require_config(omega > 0.0, "omega must be positive");
    require_config(delta_d > 0.0 && delta_n > 0.0 && delta_c > 0.0, "delta thresholds must be positive");
    require_config(phase1_steps >= 1 && phase2_steps >= 1, "phase step counts must be >= 1");
    require_config(min_survivor_points >= 0, "min_survivor_points must be >= 0");
    require_config(dedupe_iou > 0.0 && dedupe_iou <= 1.0, "dedupe_iou must lie in (0, 1]");
    require_config(containment_frac > 0.0 && containment_frac <= 1.0, "containment_frac must lie in (0, 1]");
    require_config(containment_steps >= 0, "containment_steps must be >= 0");
    require_config(scale_min > 0.0 && scale_max >= scale_min, "scale range must satisfy 0 < scale_min <= scale_max");
    require_config(output_delta_d >= delta_d && output_delta_n >= delta_n,
                   "output thresholds must be at least the scoring thresholds");
    require_config(mesh_resolution >= 2, "mesh_resolution must be >= 2");
    require_config(locality_extent >= 0.0 && locality_energy >= 0.0, "locality settings must be >= 0");
    require_config(workers >= 1, "workers must be >= 1");
}

EngineConfig EngineConfig::scaled_lengths(double s) const {
    EngineConfig c = *this;
    c.crop_radius *= s;
    c.alpha_d /= s;
    c.delta_d *= s;
    c.output_delta_d *= s;
    c.scale_min *= s;
    c.scale_max *= s;
    return c;
}

nlohmann::json EngineConfig::to_json() const {
    return {{"n_proposals", n_proposals},
            {"crop_shape", to_string(crop_shape)},
            {"crop_radius", crop_radius},
            {"n_o", n_o},
            {"alpha_d", alpha_d},
            {"alpha_n", alpha_n},
            {"omega", omega},
            {"delta_d", delta_d},
            {"delta_n", delta_n},
            {"delta_c", delta_c},
            {"phase1_steps", phase1_steps},
            {"phase2_steps", phase2_steps},
            {"min_survivor_points", min_survivor_points},
            {"dedupe_iou", dedupe_iou},
            {"containment_frac", containment_frac},
            {"containment_steps", containment_steps},
            {"scale_min", scale_min},
            {"scale_max", scale_max},
            {"output_delta_d", output_delta_d},
            {"output_delta_n", output_delta_n},
            {"use_normals", use_normals},
            {"use_phase2", use_phase2},
            {"strict_normal_sign", strict_normal_sign},
            {"disjoint_masks", disjoint_masks},
            {"confidence_penalty", to_string(confidence_penalty)},
            {"distance_mode", to_string(distance_mode)},
            {"mesh_resolution", mesh_resolution},
            {"locality_extent", locality_extent},
            {"locality_energy", locality_energy},
            {"seed", seed},
            {"workers", workers}};
}

EngineConfig EngineConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw Error(ErrorCode::Config, "engine config must be a JSON object");
    EngineConfig c;
    const nlohmann::json defaults = c.to_json();
    for (const auto& [key, value] : j.items()) {
        if (!defaults.contains(key)) throw Error(ErrorCode::Config, "engine config: unknown key '" + key + "'");
    }
    try {
        c.n_proposals = j.value("n_proposals", c.n_proposals);
        if (j.contains("crop_shape")) {
            const auto s = j.at("crop_shape").get<std::string>();
            require_config(s == "ball" || s == "cylinder", "crop_shape must be ball or cylinder");
            c.crop_shape = s == "ball" ? CropShape::Ball : CropShape::Cylinder;
        }
        c.crop_radius = j.value("crop_radius", c.crop_radius);
        c.n_o = j.value("n_o", c.n_o);
        c.alpha_d = j.value("alpha_d", c.alpha_d);
        c.alpha_n = j.value("alpha_n", c.alpha_n);
        c.omega = j.value("omega", c.omega);
        c.delta_d = j.value("delta_d", c.delta_d);
        c.delta_n = j.value("delta_n", c.delta_n);
        c.delta_c = j.value("delta_c", c.delta_c);
        c.phase1_steps = j.value("phase1_steps", c.phase1_steps);
        c.phase2_steps = j.value("phase2_steps", c.phase2_steps);
        c.min_survivor_points = j.value("min_survivor_points", c.min_survivor_points);
        c.dedupe_iou = j.value("dedupe_iou", c.dedupe_iou);
        c.containment_frac = j.value("containment_frac", c.containment_frac);
        c.containment_steps = j.value("containment_steps", c.containment_steps);
        c.scale_min = j.value("scale_min", c.scale_min);
        c.scale_max = j.value("scale_max", c.scale_max);
        c.output_delta_d = j.value("output_delta_d", c.output_delta_d);
        c.output_delta_n = j.value("output_delta_n", c.output_delta_n);
        c.use_normals = j.value("use_normals", c.use_normals);
        c.use_phase2 = j.value("use_phase2", c.use_phase2);
        c.strict_normal_sign = j.value("strict_normal_sign", c.strict_normal_sign);
        c.disjoint_masks = j.value("disjoint_masks", c.disjoint_masks);
        if (j.contains("confidence_penalty")) {
            const auto s = j.at("confidence_penalty").get<std::string>();
            require_config(s == "min" || s == "as_printed", "confidence_penalty must be min or as_printed");
            c.confidence_penalty = s == "min" ? ConfidencePenalty::Min : ConfidencePenalty::AsPrinted;
        }
        if (j.contains("distance_mode")) {
            const auto s = j.at("distance_mode").get<std::string>();
            require_config(s == "metric" || s == "raw", "distance_mode must be metric or raw");
            c.distance_mode = s == "metric" ? DistanceMode::Metric : DistanceMode::Raw;
        }
        c.mesh_resolution = j.value("mesh_resolution", c.mesh_resolution);
        c.locality_extent = j.value("locality_extent", c.locality_extent);
        c.locality_energy = j.value("locality_energy", c.locality_energy);
        c.seed = j.value("seed", c.seed);
        c.workers = j.value("workers", c.workers);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Config, std::string("engine config: ") + e.what());
    }
    c.validate();
    return c;
}

std::vector<Proposal> init_proposals(const ScenePointCloud& scene, const EngineConfig& config, Rng& rng) {
    if (scene.empty()) throw Error(ErrorCode::EmptyCloud, "init_proposals: empty scene");
    std::vector<Proposal> out(static_cast<std::size_t>(config.n_proposals));
    const double r2 = config.crop_radius * config.crop_radius;
    for (std::size_t k = 0; k < out.size(); ++k) {
        auto pick = static_cast<std::size_t>(uniform(rng) * static_cast<double>(scene.size()));
        pick = std::min(pick, scene.size() - 1);
        const Vec3 c = scene.positions[pick];
        Proposal& p = out[k];
        p.index = k;
        p.weights.assign(scene.size(), 0.0);
        for (std::size_t i = 0; i < scene.size(); ++i) {
            Vec3 d = scene.positions[i] - c;
            if (config.crop_shape == CropShape::Cylinder) d.z() = 0.0;
            if (d.squaredNorm() <= r2) p.weights[i] = 1.0;
        }
        p.weights[pick] = 1.0;
    }
    return out;
}

std::optional<MStep> m_step(const ScenePointCloud& scene, std::span<const double> weights, const PriorModel& prior,
                            std::size_t n_o, Rng& rng) {
    auto sample = weighted_sample(weights, n_o, rng);
    if (!sample) return std::nullopt;
    std::vector<Vec3> pts;
    pts.reserve(sample->size());
    for (std::size_t i : *sample) pts.push_back(scene.positions[i]);
    try {
        return MStep{prior.encode(pts), std::move(*sample)};
    } catch (const Error& e) {
        if (e.code() == ErrorCode::DegenerateFeature || e.code() == ErrorCode::DegenerateScale) return std::nullopt;
        throw;
    }
}

double normal_angle(const Vec3& normal, const Vec3& gradient, bool strict_sign) {
    const double gn = gradient.norm();
    if (!(gn >= 1e-9)) return kPi;
    const double c = std::clamp(normal.dot(gradient) / gn, -1.0, 1.0);
    const double a = std::acos(c);
    return (!strict_sign && a > kPi / 2.0) ? kPi - a : a;
}

PointErrors fitting_error(const ScenePointCloud& scene, const LatentCode& code, const PriorModel& prior,
                          const EngineConfig& config) {
    const std::size_t n = scene.size();
    PointErrors e;
    e.e_d.assign(n, kInf);
    e.e_n.assign(n, config.use_normals ? kPi : 0.0);
    e.energy.assign(n, kInf);

    std::vector<std::size_t> near;
    std::vector<Vec3> queries;
    near.reserve(n);
    queries.reserve(n);
    const bool cut = config.locality_energy > 0.0;
    const double reach = config.locality_extent * code.theta_s + config.locality_energy / config.alpha_d;
    const double reach2 = reach * reach;
    for (std::size_t i = 0; i < n; ++i) {
        if (cut && (scene.positions[i] - code.theta_c).squaredNorm() > reach2) continue;
        near.push_back(i);
        queries.push_back(scene.positions[i]);
    }
    std::vector<double> values(queries.size());
    std::vector<Vec3> grads(config.use_normals ? queries.size() : 0);
    prior.decode_batch(queries, code, values, grads);
    const double scale = config.distance_mode == DistanceMode::Metric ? prior.metric_scale(code) : 1.0;
    for (std::size_t q = 0; q < near.size(); ++q) {
        const std::size_t i = near[q];
        e.e_d[i] = scale * std::abs(values[q]);
        e.e_n[i] = config.use_normals ? normal_angle(scene.normals[i], grads[q], config.strict_normal_sign) : 0.0;
        e.energy[i] = config.alpha_d * e.e_d[i] + (config.use_normals ? config.alpha_n * e.e_n[i] : 0.0);
    }
    return e;
}

std::vector<double> e_step(std::span<const double> energy, double omega) {
    if (!(omega > 0.0)) throw Error(ErrorCode::InvalidArgument, "e_step: omega must be positive");
    std::vector<double> w(energy.size());
    for (std::size_t i = 0; i < energy.size(); ++i) {
        const double e = std::isnan(energy[i]) ? kInf : std::max(energy[i], 0.0);
        const double p = std::exp(-e);
        w[i] = p / (p + omega);
    }
    return w;
}

std::vector<std::vector<double>> e_step_joint(const std::vector<std::vector<double>>& energy,
                                              std::span<const double> s1, double omega) {
    if (energy.empty()) throw Error(ErrorCode::InvalidArgument, "e_step_joint: no proposals");
    if (s1.size() != energy.size()) throw Error(ErrorCode::ShapeMismatch, "e_step_joint: s1 size mismatch");
    if (!(omega > 0.0)) throw Error(ErrorCode::InvalidArgument, "e_step_joint: omega must be positive");
    const std::size_t k = energy.size();
    const std::size_t n = energy.front().size();
    for (const auto& row : energy)
        if (row.size() != n) throw Error(ErrorCode::ShapeMismatch, "e_step_joint: ragged energy matrix");
    std::vector<std::vector<double>> w(k, std::vector<double>(n, 0.0));
    std::vector<double> num(k);
    for (std::size_t i = 0; i < n; ++i) {
        double denom = omega;
        for (std::size_t j = 0; j < k; ++j) {
            const double e = std::isnan(energy[j][i]) ? kInf : std::max(energy[j][i], 0.0);
            num[j] = std::clamp(s1[j], 0.0, 1.0) * std::exp(-e);
            denom += num[j];
        }
        for (std::size_t j = 0; j < k; ++j) w[j][i] = num[j] / denom;
    }
    return w;
}

double fitting_score(std::span<const std::size_t> encoder_input, const PointErrors& errors,
                     const EngineConfig& config) {
    if (encoder_input.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i : encoder_input)
        if (small_error(errors, i, config.delta_d, config.use_normals ? config.delta_n : kInf)) ++hits;
    return static_cast<double>(hits) / static_cast<double>(encoder_input.size());
}

double coverage_score(const TriangleMesh& mesh, const ScenePointCloud& scene, const PointIndex& index,
                      const EngineConfig& config) {
    if (mesh.vertices.empty() || index.size() == 0) return 0.0;
    std::size_t hits = 0;
    for (std::size_t v = 0; v < mesh.vertices.size(); ++v) {
        const Neighbor nb = index.nearest(mesh.vertices[v]);
        if (!(nb.distance < config.delta_d)) continue;
        if (config.use_normals &&
            !(normal_angle(scene.normals[nb.index], mesh.vertex_normals[v], config.strict_normal_sign) <
              config.delta_n)) {
            continue;
        }
        ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(mesh.vertices.size());
}

double confidence_score(double s1, double s2, const EngineConfig& config) {
    const double ratio = s2 / config.delta_c;
    return config.confidence_penalty == ConfidencePenalty::Min ? s1 * std::min(1.0, ratio)
                                                               : s1 * std::max(1.0, ratio);
}

Scores score_proposal(std::span<const std::size_t> encoder_input, const PointErrors& errors,
                      const TriangleMesh& mesh, const ScenePointCloud& scene, const PointIndex& index,
                      const EngineConfig& config) {
    Scores s;
    s.s1 = fitting_score(encoder_input, errors, config);
    s.s2 = coverage_score(mesh, scene, index, config);
    s.confidence = confidence_score(s.s1, s.s2, config);
    return s;
}

TriangleMesh extract_proposal_mesh(const LatentCode& code, const PriorModel& prior, const EngineConfig& config) {
    const double h = 1.5 * code.theta_s;
    Box box{code.theta_c - Vec3::Constant(h), code.theta_c + Vec3::Constant(h)};
    const BatchField field = [&](std::span<const Vec3> pts, std::span<double> out) {
        prior.decode_batch(pts, code, out, {});
    };
    const int r = config.mesh_resolution;
    return marching_cubes(field, box, {r, r, r});
}

std::optional<Sim3> estimate_pose(const LatentCode& code, const LatentLibrary& library) {
    const LatentLibrary::Entry* best = nullptr;
    double best_d = kInf;
    for (const auto& e : library.entries) {
        if (e.code.theta_inv.size() != code.theta_inv.size() || e.code.theta_r.rows() != code.theta_r.rows()) continue;
        const double d = latent_distance(code, e.code);
        if (d < best_d) {
            best_d = d;
            best = &e;
        }
    }
    if (best == nullptr) return std::nullopt;
    // argmin_R |A - B R|_F over SO(3): R = U diag(1, 1, det) V^T with B^T A = U S V^T.
    const Mat3 m = best->code.theta_r.transpose() * code.theta_r;
    Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Vec3 sv = svd.singularValues();
    if (!(sv(0) > 0.0) || sv(1) < 1e-9 * sv(0)) return std::nullopt;
    Mat3 d = Mat3::Identity();
    d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0 ? -1.0 : 1.0;
    Sim3 g;
    g.rotation = svd.matrixU() * d * svd.matrixV().transpose();
    g.scale = code.theta_s / best->code.theta_s;
    g.translation = code.theta_c - g.scale * (g.rotation.transpose() * best->code.theta_c);
    return g;
}

std::vector<std::size_t> binarize(std::span<const double> weights) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < weights.size(); ++i)
        if (weights[i] >= 0.5) out.push_back(i);
    return out;
}

void dedupe(std::vector<Proposal>& proposals, const EngineConfig& config) {
    std::vector<std::vector<std::size_t>> kept_masks;
    for (std::size_t k : by_fitting_score(proposals)) {
        auto mask = binarize(proposals[k].weights);
        bool duplicate = false;
        for (const auto& other : kept_masks) {
            const std::size_t inter = intersection_size(mask, other);
            const std::size_t uni = mask.size() + other.size() - inter;
            if (uni > 0 && static_cast<double>(inter) / static_cast<double>(uni) > config.dedupe_iou) {
                duplicate = true;
                break;
            }
        }
        if (duplicate) {
            proposals[k].status = ProposalStatus::Merged;
        } else {
            kept_masks.push_back(std::move(mask));
        }
    }
}

void filter_scale(std::vector<Proposal>& proposals, const EngineConfig& config) {
    for (auto& p : proposals) {
        if (p.status != ProposalStatus::Active || !p.code) continue;
        const double s = p.code->theta_s;
        const bool empty_mesh = p.mesh && p.mesh->empty();
        if (s < config.scale_min || s > config.scale_max || empty_mesh) p.status = ProposalStatus::Filtered;
    }
}

void filter_containment(std::vector<Proposal>& proposals, const EngineConfig& config) {
    std::vector<std::vector<std::size_t>> kept_masks;
    for (std::size_t k : by_fitting_score(proposals)) {
        auto mask = binarize(proposals[k].weights);
        bool contained = false;
        if (!mask.empty()) {
            for (const auto& other : kept_masks) {
                const double frac =
                    static_cast<double>(intersection_size(mask, other)) / static_cast<double>(mask.size());
                if (frac > config.containment_frac) {
                    contained = true;
                    break;
                }
            }
        }
        if (contained) {
            proposals[k].status = ProposalStatus::Filtered;
        } else {
            kept_masks.push_back(std::move(mask));
        }
    }
}

Segmentation run(const ScenePointCloud& scene, const PriorModel& prior, const LatentLibrary* library,
                 const EngineConfig& config) {
    config.validate();
    scene.validate();
    const std::size_t n_o = config.n_o > 0 ? static_cast<std::size_t>(config.n_o) : prior.input_points();

    Rng init_rng = make_rng(config.seed, 0);
    std::vector<Proposal> proposals = init_proposals(scene, config, init_rng);
    std::vector<Rng> rngs;
    for (std::size_t k = 0; k < proposals.size(); ++k) rngs.push_back(make_rng(config.seed, k + 1));
    std::vector<PointErrors> errors(proposals.size());

    Segmentation seg;
    seg.diagnostics.proposals_spawned = static_cast<int>(proposals.size());

    auto active = [&] {
        std::vector<std::size_t> ids;
        for (std::size_t k = 0; k < proposals.size(); ++k)
            if (proposals[k].status == ProposalStatus::Active) ids.push_back(k);
        return ids;
    };

    // M-step and fitting errors for every active proposal.
    auto fit_all = [&](const std::vector<std::size_t>& ids, bool update_weights) {
        parallel_for(ids.size(), config.workers, [&](std::size_t t) {
            Proposal& p = proposals[ids[t]];
            auto ms = m_step(scene, p.weights, prior, n_o, rngs[ids[t]]);
            if (!ms) {
                p.status = ProposalStatus::Terminated;
                return;
            }
            p.code = std::move(ms->code);
            p.encoder_input = std::move(ms->sample);
            errors[ids[t]] = fitting_error(scene, *p.code, prior, config);
            p.s1 = fitting_score(p.encoder_input, errors[ids[t]], config);
            if (update_weights) p.weights = e_step(errors[ids[t]].energy, config.omega);
        });
    };

    auto terminate_weak = [&] {
        for (std::size_t k : active()) {
            if (survivor_count(errors[k], config) < static_cast<std::size_t>(config.min_survivor_points)) {
                proposals[k].status = ProposalStatus::Terminated;
            }
        }
    };

    const int phase1 = config.phase1_steps + (config.use_phase2 ? 0 : config.phase2_steps);
    for (int it = 0; it < phase1; ++it) {
        fit_all(active(), true);
        terminate_weak();
        dedupe(proposals, config);
        ++seg.diagnostics.iterations;
    }

    if (config.use_phase2) {
        {
            const auto ids = active();
            parallel_for(ids.size(), config.workers, [&](std::size_t t) {
                Proposal& p = proposals[ids[t]];
                p.mesh = extract_proposal_mesh(*p.code, prior, config);
            });
            filter_scale(proposals, config);
        }
        for (int it = 0; it < config.phase2_steps; ++it) {
            fit_all(active(), false);
            const auto ids = active();
            if (!ids.empty()) {
                std::vector<std::vector<double>> energy;
                std::vector<double> s1;
                for (std::size_t k : ids) {
                    energy.push_back(errors[k].energy);
                    s1.push_back(proposals[k].s1);
                }
                auto w = e_step_joint(energy, s1, config.omega);
                for (std::size_t t = 0; t < ids.size(); ++t) proposals[ids[t]].weights = std::move(w[t]);
            }
            terminate_weak();
            dedupe(proposals, config);
            if (it >= config.phase2_steps - config.containment_steps) filter_containment(proposals, config);
            ++seg.diagnostics.iterations;
        }
    }

    // Final meshes, scores, masks and poses.
    const PointIndex index(scene.positions);
    {
        const auto ids = active();
        parallel_for(ids.size(), config.workers, [&](std::size_t t) {
            Proposal& p = proposals[ids[t]];
            p.mesh = extract_proposal_mesh(*p.code, prior, config);
            const Scores s = score_proposal(p.encoder_input, errors[ids[t]], *p.mesh, scene, index, config);
            p.s1 = s.s1;
            p.s2 = s.s2;
            p.confidence = s.confidence;
            if (library != nullptr && !library->empty()) p.pose = estimate_pose(*p.code, *library);
        });
        filter_scale(proposals, config);
    }

    std::vector<std::size_t> ids = active();
    std::vector<std::vector<std::size_t>> masks(ids.size());
    for (std::size_t t = 0; t < ids.size(); ++t) {
        const PointErrors& e = errors[ids[t]];
        for (std::size_t i = 0; i < scene.size(); ++i)
            if (small_error(e, i, config.output_delta_d, config.output_delta_n)) masks[t].push_back(i);
    }
    if (config.disjoint_masks && ids.size() > 1) {
        // Contested points go to the proposal with the larger weight.
        std::vector<int> owner(scene.size(), -1);
        for (std::size_t t = 0; t < ids.size(); ++t) {
            for (std::size_t i : masks[t]) {
                const int o = owner[i];
                if (o < 0 || proposals[ids[t]].weights[i] > proposals[ids[static_cast<std::size_t>(o)]].weights[i]) {
                    owner[i] = static_cast<int>(t);
                }
            }
        }
        for (std::size_t t = 0; t < ids.size(); ++t) {
            std::erase_if(masks[t], [&](std::size_t i) { return owner[i] != static_cast<int>(t); });
        }
    }
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (masks[t].empty()) continue;
        Proposal& p = proposals[ids[t]];
        Instance inst;
        inst.proposal = p.index;
        inst.point_indices = std::move(masks[t]);
        inst.confidence = p.confidence;
        inst.s1 = p.s1;
        inst.s2 = p.s2;
        inst.code = *p.code;
        inst.mesh = std::move(*p.mesh);
        inst.pose = p.pose;
        seg.instances.push_back(std::move(inst));
    }
    for (const auto& p : proposals) {
        if (p.status == ProposalStatus::Terminated) ++seg.diagnostics.terminated;
        if (p.status == ProposalStatus::Merged) ++seg.diagnostics.merged;
        if (p.status == ProposalStatus::Filtered) ++seg.diagnostics.filtered;
    }
    return seg;
}

}  // namespace efem
