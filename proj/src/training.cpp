#include "efem/training.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numbers>
#include <numeric>

#include <spdlog/spdlog.h>

#include "efem/error.hpp"

namespace efem {

namespace {

using vecnet::Matrix;

void check_prob(double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::Config, std::string(name) + " must lie in [0, 1]");
}

std::vector<Vec3> resample(const std::vector<Vec3>& pts, std::size_t n, Rng& rng) {
    if (pts.size() == n) return pts;
    std::vector<Vec3> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto j = static_cast<std::size_t>(uniform(rng) * static_cast<double>(pts.size()));
        out.push_back(pts[std::min(j, pts.size() - 1)]);
    }
    return out;
}

}  // namespace

void AugmentConfig::validate() const {
    check_prob(crop_prob, "crop_prob");
    check_prob(crop_min_keep, "crop_min_keep");
    check_prob(clutter_prob, "clutter_prob");
    check_prob(clutter_max_frac, "clutter_max_frac");
    check_prob(plane_prob, "plane_prob");
    check_prob(plane_max_frac, "plane_max_frac");
    check_prob(near_surface_frac, "near_surface_frac");
    if (crop_min_keep <= 0.0) throw Error(ErrorCode::Config, "crop_min_keep must be positive");
    if (!(noise_sigma >= 0.0)) throw Error(ErrorCode::Config, "noise_sigma must be >= 0");
    if (!(near_surface_std > 0.0)) throw Error(ErrorCode::Config, "near_surface_std must be positive");
    if (!(uniform_extent > 0.0)) throw Error(ErrorCode::Config, "uniform_extent must be positive");
}

nlohmann::json AugmentConfig::to_json() const {
    return {{"enabled", enabled},
            {"crop_prob", crop_prob},
            {"crop_min_keep", crop_min_keep},
            {"clutter_prob", clutter_prob},
            {"clutter_max_frac", clutter_max_frac},
            {"plane_prob", plane_prob},
            {"plane_max_frac", plane_max_frac},
            {"noise_sigma", noise_sigma},
            {"near_surface_frac", near_surface_frac},
            {"near_surface_std", near_surface_std},
            {"uniform_extent", uniform_extent}};
}

AugmentConfig AugmentConfig::from_json(const nlohmann::json& j) {
    AugmentConfig a;
    a.enabled = j.value("enabled", a.enabled);
    a.crop_prob = j.value("crop_prob", a.crop_prob);
    a.crop_min_keep = j.value("crop_min_keep", a.crop_min_keep);
    a.clutter_prob = j.value("clutter_prob", a.clutter_prob);
    a.clutter_max_frac = j.value("clutter_max_frac", a.clutter_max_frac);
    a.plane_prob = j.value("plane_prob", a.plane_prob);
    a.plane_max_frac = j.value("plane_max_frac", a.plane_max_frac);
    a.noise_sigma = j.value("noise_sigma", a.noise_sigma);
    a.near_surface_frac = j.value("near_surface_frac", a.near_surface_frac);
    a.near_surface_std = j.value("near_surface_std", a.near_surface_std);
    a.uniform_extent = j.value("uniform_extent", a.uniform_extent);
    a.validate();
    return a;
}

TrainingSample make_training_sample(const ProceduralShape& shape, const FamilyConfig& family,
                                    const AugmentConfig& augment, std::size_t n_o, std::size_t queries,
                                    Rng& rng) {
    if (n_o == 0) throw Error(ErrorCode::InvalidArgument, "n_o must be >= 1");
    TrainingSample s;
    std::vector<Vec3> pts = sample_surface(shape, n_o, rng).points;

    if (augment.enabled) {
        // Half-space crop as a stand-in for a partial depth view.
        if (uniform(rng) < augment.crop_prob) {
            const Vec3 dir = random_unit_vector(rng);
            const double keep = uniform(rng, augment.crop_min_keep, 1.0);
            std::vector<double> proj(pts.size());
            for (std::size_t i = 0; i < pts.size(); ++i) proj[i] = pts[i].dot(dir);
            std::vector<double> sorted = proj;
            const auto k = std::max<std::size_t>(
                1, static_cast<std::size_t>(std::ceil(keep * static_cast<double>(pts.size()))));
            std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(k - 1), sorted.end());
            const double cut = sorted[k - 1];
            std::vector<Vec3> kept;
            for (std::size_t i = 0; i < pts.size(); ++i)
                if (proj[i] <= cut) kept.push_back(pts[i]);
            pts = resample(kept, n_o, rng);
        }
        // Neighbouring clutter: the part of another shape closest to this one.
        if (uniform(rng) < augment.clutter_prob && augment.clutter_max_frac > 0.0) {
            const auto k = static_cast<std::size_t>(uniform(rng) * augment.clutter_max_frac * static_cast<double>(n_o));
            if (k > 0) {
                const ProceduralShape other = sample_shape(family, rng).scaled(uniform(rng, 0.3, 0.7));
                const Mat3 rot = random_rotation(rng);
                const Vec3 dir = random_unit_vector(rng);
                const Vec3 offset = dir * (shape.bounding_radius() + other.bounding_radius() * uniform(rng, 0.6, 1.0));
                std::vector<Vec3> cpts = sample_surface(other, 4 * k, rng).points;
                for (auto& p : cpts) p = rot.transpose() * p + offset;
                std::sort(cpts.begin(), cpts.end(), [](const Vec3& a, const Vec3& b) {
                    return a.squaredNorm() < b.squaredNorm();
                });
                for (std::size_t i = 0; i < k; ++i) {
                    const auto j = static_cast<std::size_t>(uniform(rng) * static_cast<double>(n_o));
                    pts[std::min(j, n_o - 1)] = cpts[i];
                }
            }
        }
        // A patch of a plane touching the shape from one side, like a table top.
        if (uniform(rng) < augment.plane_prob && augment.plane_max_frac > 0.0) {
            const auto k = static_cast<std::size_t>(uniform(rng) * augment.plane_max_frac * static_cast<double>(n_o));
            if (k > 0) {
                const Vec3 d = random_unit_vector(rng);
                double lowest = std::numeric_limits<double>::infinity();
                for (const auto& p : pts) lowest = std::min(lowest, p.dot(d));
                const Vec3 e1 = d.unitOrthogonal();
                const Vec3 e2 = d.cross(e1);
                const double radius = uniform(rng, 1.0, 2.0) * shape.bounding_radius();
                for (std::size_t i = 0; i < k; ++i) {
                    const double r = radius * std::sqrt(uniform(rng));
                    const double a = uniform(rng, 0.0, 2.0 * std::numbers::pi);
                    const auto j = static_cast<std::size_t>(uniform(rng) * static_cast<double>(n_o));
                    pts[std::min(j, n_o - 1)] = lowest * d + r * std::cos(a) * e1 + r * std::sin(a) * e2;
                }
            }
        }
        if (augment.noise_sigma > 0.0) {
            for (auto& p : pts) p += Vec3(gaussian(rng, augment.noise_sigma), gaussian(rng, augment.noise_sigma),
                                          gaussian(rng, augment.noise_sigma));
        }
    }
    s.surface_points = std::move(pts);

    const auto near = static_cast<std::size_t>(std::round(augment.near_surface_frac * static_cast<double>(queries)));
    const auto anchors = sample_surface(shape, near, rng).points;
    s.query_points.reserve(queries);
    for (const auto& a : anchors) {
        s.query_points.push_back(a + Vec3(gaussian(rng, augment.near_surface_std),
                                          gaussian(rng, augment.near_surface_std),
                                          gaussian(rng, augment.near_surface_std)));
    }
    const double e = augment.uniform_extent;
    while (s.query_points.size() < queries) {
        s.query_points.emplace_back(uniform(rng, -e, e), uniform(rng, -e, e), uniform(rng, -e, e));
    }
    s.target_sdf.reserve(queries);
    for (const auto& q : s.query_points) s.target_sdf.push_back(analytic_sdf(shape, q));
    return s;
}

double loss(std::span<const double> pred, std::span<const double> target, const LatentCode& code,
            double lambda_c, double lambda_s) {
    if (pred.size() != target.size()) throw Error(ErrorCode::ShapeMismatch, "loss: length mismatch");
    double mse = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) mse += (pred[i] - target[i]) * (pred[i] - target[i]);
    if (!pred.empty()) mse /= static_cast<double>(pred.size());
    return mse + lambda_c * code.theta_c.squaredNorm() + lambda_s * (code.theta_s - 1.0) * (code.theta_s - 1.0);
}

void TrainConfig::validate() const {
    family.validate();
    augment.validate();
    net.validate();
    if (steps < 0) throw Error(ErrorCode::Config, "steps must be >= 0");
    if (batch_shapes < 1) throw Error(ErrorCode::Config, "batch_shapes must be >= 1");
    if (queries_per_shape < 256) throw Error(ErrorCode::Config, "queries_per_shape must be >= 256");
    if (!(adam.lr > 0.0)) throw Error(ErrorCode::Config, "lr must be positive");
    if (!(lambda_c >= 0.0) || !(lambda_s >= 0.0)) throw Error(ErrorCode::Config, "lambdas must be >= 0");
    if (!(final_lr_frac > 0.0 && final_lr_frac <= 1.0)) throw Error(ErrorCode::Config, "final_lr_frac must lie in (0, 1]");
    if (library_size < 0 || heldout_shapes < 0) throw Error(ErrorCode::Config, "counts must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"family", family.to_json()},
            {"augment", augment.to_json()},
            {"net", net.to_json()},
            {"steps", steps},
            {"batch_shapes", batch_shapes},
            {"queries_per_shape", queries_per_shape},
            {"lr", adam.lr},
            {"beta1", adam.beta1},
            {"beta2", adam.beta2},
            {"eps", adam.eps},
            {"lambda_c", lambda_c},
            {"lambda_s", lambda_s},
            {"anneal_after", anneal_after},
            {"grad_clip", grad_clip},
            {"final_lr_frac", final_lr_frac},
            {"library_size", library_size},
            {"heldout_shapes", heldout_shapes},
            {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw Error(ErrorCode::Config, "training config must be a JSON object");
    TrainConfig c;
    try {
        if (j.contains("family")) c.family = FamilyConfig::from_json(j.at("family"));
        if (j.contains("augment")) c.augment = AugmentConfig::from_json(j.at("augment"));
        if (j.contains("net")) c.net = NetTopology::from_json(j.at("net"));
        c.steps = j.value("steps", c.steps);
        c.batch_shapes = j.value("batch_shapes", c.batch_shapes);
        c.queries_per_shape = j.value("queries_per_shape", c.queries_per_shape);
        c.adam.lr = j.value("lr", c.adam.lr);
        c.adam.beta1 = j.value("beta1", c.adam.beta1);
        c.adam.beta2 = j.value("beta2", c.adam.beta2);
        c.adam.eps = j.value("eps", c.adam.eps);
        c.lambda_c = j.value("lambda_c", c.lambda_c);
        c.lambda_s = j.value("lambda_s", c.lambda_s);
        c.anneal_after = j.value("anneal_after", c.anneal_after);
        c.grad_clip = j.value("grad_clip", c.grad_clip);
        c.final_lr_frac = j.value("final_lr_frac", c.final_lr_frac);
        c.library_size = j.value("library_size", c.library_size);
        c.heldout_shapes = j.value("heldout_shapes", c.heldout_shapes);
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Config, std::string("training config: ") + e.what());
    }
    c.validate();
    return c;
}

double heldout_error(const LearnedPrior& prior, const TrainConfig& config, int shapes, Rng& rng) {
    AugmentConfig clean = config.augment;
    clean.enabled = false;
    double total = 0.0;
    std::size_t n = 0;
    for (int i = 0; i < shapes; ++i) {
        const ProceduralShape shape = sample_shape(config.family, rng);
        const TrainingSample s = make_training_sample(shape, config.family, clean, prior.input_points(),
                                                      static_cast<std::size_t>(config.queries_per_shape), rng);
        const LatentCode code = prior.encode(s.surface_points);
        std::vector<double> values(s.query_points.size());
        prior.decode_batch(s.query_points, code, values, {});
        for (std::size_t q = 0; q < values.size(); ++q) {
            total += std::abs(code.theta_s * values[q] - s.target_sdf[q]);
            ++n;
        }
    }
    return n == 0 ? 0.0 : total / static_cast<double>(n);
}

LatentLibrary build_library(const PriorModel& prior, const FamilyConfig& family, int count, Rng& rng) {
    LatentLibrary lib;
    for (int i = 0; i < count; ++i) {
        const ProceduralShape shape = sample_shape(family, rng);
        const auto pts = sample_surface(shape, prior.input_points(), rng).points;
        lib.entries.push_back({prior.encode(pts), shape.to_json()});
    }
    return lib;
}

TrainResult train(const TrainConfig& config, const TrainProgress& progress) {
    config.validate();
    TrainResult result;
    Rng init_rng = make_rng(config.seed, 0);
    Rng data_rng = make_rng(config.seed, 1);
    Rng library_rng = make_rng(config.seed, 2);
    Rng heldout_rng = make_rng(config.seed, 3);

    auto prior = std::make_unique<LearnedPrior>(config.net, init_rng);
    const auto n_o = prior->input_points();
    const auto nq = static_cast<std::size_t>(config.queries_per_shape);
    const double inv_b = 1.0 / config.batch_shapes;

    vecnet::AdamState adam;
    std::deque<double> window;
    double window_sum = 0.0;
    double best_smoothed = std::numeric_limits<double>::infinity();

    for (int step = 0; step < config.steps; ++step) {
        const bool regularize = step < static_cast<int>(config.anneal_after * config.steps);
        const double lc = regularize ? config.lambda_c : 0.0;
        const double ls = regularize ? config.lambda_s : 0.0;
        std::vector<Matrix> grads = prior->zero_grads();
        double batch_loss = 0.0;
        double batch_mse = 0.0;

        for (int b = 0; b < config.batch_shapes; ++b) {
            const ProceduralShape shape = sample_shape(config.family, data_rng);
            const TrainingSample sample =
                make_training_sample(shape, config.family, config.augment, n_o, nq, data_rng);
            vecnet::Tape enc_tape = prior->new_tape();
            const LatentCode code = [&] {
                try {
                    return prior->encode(sample.surface_points, enc_tape);
                } catch (const Error& e) {
                    // A collapsed feature here means the weights have blown up.
                    if (e.code() != ErrorCode::DegenerateFeature && e.code() != ErrorCode::DegenerateScale) throw;
                    throw Error(ErrorCode::Numeric, "encoder collapsed at step " + std::to_string(step) + ": " + e.what());
                }
            }();
            vecnet::Tape dec_tape = prior->new_tape();
            const Matrix psi = prior->decode(sample.query_points, code, dec_tape);

            std::vector<double> pred(nq);
            for (std::size_t q = 0; q < nq; ++q) pred[q] = code.theta_s * psi(0, static_cast<Eigen::Index>(q));
            const double l = loss(pred, sample.target_sdf, code, lc, ls);
            if (!std::isfinite(l)) {
                throw Error(ErrorCode::Numeric, "non-finite training loss at step " + std::to_string(step) +
                                                    " (shape " + shape.to_json().dump() + ", theta_s " +
                                                    std::to_string(code.theta_s) + ")");
            }
            batch_loss += l * inv_b;
            batch_mse += (l - lc * code.theta_c.squaredNorm() - ls * (code.theta_s - 1.0) * (code.theta_s - 1.0)) * inv_b;

            Matrix grad_psi(1, static_cast<Eigen::Index>(nq));
            double grad_s = 0.0;
            for (std::size_t q = 0; q < nq; ++q) {
                const double dpred = 2.0 * (pred[q] - sample.target_sdf[q]) / static_cast<double>(nq) * inv_b;
                grad_psi(0, static_cast<Eigen::Index>(q)) = dpred * code.theta_s;
                grad_s += dpred * psi(0, static_cast<Eigen::Index>(q));
            }
            CodeGrad cg = prior->decode_backward(dec_tape, code, grad_psi, grads);
            cg.theta_s += grad_s + 2.0 * ls * (code.theta_s - 1.0) * inv_b;
            cg.theta_c += 2.0 * lc * code.theta_c * inv_b;
            prior->encode_backward(enc_tape, cg, grads);
        }

        if (config.grad_clip > 0.0) {
            double sq = 0.0;
            for (const auto& g : grads) sq += g.squaredNorm();
            const double norm = std::sqrt(sq);
            if (!std::isfinite(norm)) throw Error(ErrorCode::Numeric, "non-finite gradient at step " + std::to_string(step));
            if (norm > config.grad_clip)
                for (auto& g : grads) g *= config.grad_clip / norm;
        }
        const auto params = prior->mutable_parameters();
        vecnet::AdamConfig adam_cfg = config.adam;
        const double progress_frac = static_cast<double>(step) / static_cast<double>(config.steps);
        adam_cfg.lr *= config.final_lr_frac +
                       (1.0 - config.final_lr_frac) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress_frac));
        vecnet::adam_step(params, grads, adam, adam_cfg);

        window.push_back(batch_loss);
        window_sum += batch_loss;
        if (window.size() > 100) {
            window_sum -= window.front();
            window.pop_front();
        }
        LossRecord rec{step, batch_loss, batch_mse, window_sum / static_cast<double>(window.size())};
        if (window.size() == 100) {
            if (rec.smoothed > 1.1 * best_smoothed && !result.divergence_flagged) {
                result.divergence_flagged = true;
                spdlog::warn("smoothed training loss {:.5f} is more than 10% above its minimum {:.5f} at step {}",
                             rec.smoothed, best_smoothed, step);
            }
            best_smoothed = std::min(best_smoothed, rec.smoothed);
        }
        result.curve.push_back(rec);
        if (progress) progress(rec);
    }

    result.library = build_library(*prior, config.family, config.library_size, library_rng);
    result.heldout_mae = heldout_error(*prior, config, config.heldout_shapes, heldout_rng);
    result.prior = std::move(prior);
    return result;
}

}  // namespace efem
