#include "efem/prior.hpp"

#include <cmath>

#include "efem/error.hpp"

namespace efem {

void LatentCode::validate() const {
    if (!(theta_s > 0.0) || !std::isfinite(theta_s)) {
        throw Error(ErrorCode::DegenerateScale, "latent code: theta_s must be positive and finite");
    }
    if (theta_r.cols() != 3 && theta_r.size() != 0) {
        throw Error(ErrorCode::ShapeMismatch, "latent code: theta_R must have 3 columns");
    }
    if (!theta_r.allFinite() || !theta_inv.allFinite() || !theta_c.allFinite()) {
        throw Error(ErrorCode::Numeric, "latent code has non-finite entries");
    }
}

LatentCode act(const Sim3& g, const LatentCode& code) {
    LatentCode out;
    out.theta_r = code.theta_r * g.rotation;
    out.theta_inv = code.theta_inv;
    out.theta_c = g.apply_point(code.theta_c);
    out.theta_s = g.scale * code.theta_s;
    return out;
}

double latent_distance(const LatentCode& a, const LatentCode& b) {
    if (a.theta_inv.size() != b.theta_inv.size()) {
        throw Error(ErrorCode::ShapeMismatch, "latent_distance: invariant parts differ in size");
    }
    if (a.theta_inv.size() == 0) return 0.0;
    return (a.theta_inv - b.theta_inv).norm();
}

double PriorModel::decode(const Vec3& x, const LatentCode& code) const {
    double value = 0.0;
    decode_batch(std::span<const Vec3>(&x, 1), code, std::span<double>(&value, 1), {});
    return value;
}

std::optional<Vec3> PriorModel::decode_gradient(const Vec3& x, const LatentCode& code) const {
    double value = 0.0;
    Vec3 grad = Vec3::Zero();
    decode_batch(std::span<const Vec3>(&x, 1), code, std::span<double>(&value, 1), std::span<Vec3>(&grad, 1));
    if (!(grad.norm() >= 1e-9)) return std::nullopt;
    return grad;
}

LatentCode SphereOracle::make_code(const Vec3& center, double radius) {
    LatentCode code;
    code.theta_r = vecnet::Matrix::Identity(3, 3);
    code.theta_inv = vecnet::Vector(0);
    code.theta_c = center;
    code.theta_s = radius;
    return code;
}

LatentCode SphereOracle::encode(std::span<const Vec3> points) const {
    if (points.empty()) throw Error(ErrorCode::EmptyCloud, "encode: no points");
    Vec3 c = Vec3::Zero();
    for (const auto& p : points) c += p;
    c /= static_cast<double>(points.size());
    double r = 0.0;
    for (const auto& p : points) r += (p - c).norm();
    r /= static_cast<double>(points.size());
    if (!(r > 1e-12)) throw Error(ErrorCode::DegenerateFeature, "encoder input points all coincide");
    return make_code(c, r);
}

void SphereOracle::decode_batch(std::span<const Vec3> queries, const LatentCode& code, std::span<double> values,
                                std::span<Vec3> gradients) const {
    if (!(code.theta_s > 1e-9)) throw Error(ErrorCode::DegenerateScale, "decode: theta_s must exceed 1e-9");
    if (values.size() != queries.size() || (!gradients.empty() && gradients.size() != queries.size())) {
        throw Error(ErrorCode::ShapeMismatch, "decode_batch: output size mismatch");
    }
    for (std::size_t i = 0; i < queries.size(); ++i) {
        const Vec3 d = queries[i] - code.theta_c;
        const double n = d.norm();
        values[i] = n - code.theta_s;
        if (!gradients.empty()) gradients[i] = n > 0.0 ? Vec3(d / n) : Vec3::Zero();
    }
}

}  // namespace efem
