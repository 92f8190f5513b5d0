#include "efem/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "efem/error.hpp"

namespace efem {

const char* to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidArgument: return "INVALID_ARGUMENT";
        case ErrorCode::ShapeMismatch: return "SHAPE_MISMATCH";
        case ErrorCode::EmptyCloud: return "EMPTY_CLOUD";
        case ErrorCode::DegenerateFeature: return "DEGENERATE_FEATURE";
        case ErrorCode::DegenerateScale: return "DEGENERATE_SCALE";
        case ErrorCode::TapeMismatch: return "TAPE_MISMATCH";
        case ErrorCode::SamplingFailed: return "SAMPLING_FAILED";
        case ErrorCode::PlacementFailed: return "PLACEMENT_FAILED";
        case ErrorCode::MissingNormals: return "MISSING_NORMALS";
        case ErrorCode::Io: return "IO";
        case ErrorCode::Config: return "CONFIG";
        case ErrorCode::Numeric: return "NUMERIC";
    }
    return "UNKNOWN";
}

Mat3 rotation_about(const Vec3& axis, double angle) {
    const double n = axis.norm();
    if (!(n > 0.0)) {
        throw Error(ErrorCode::InvalidArgument, "rotation axis has zero length");
    }
    // Eigen builds the column-convention matrix; transpose for x -> x R.
    return Eigen::AngleAxisd(angle, axis / n).toRotationMatrix().transpose();
}

Mat3 rotation_from_quaternion(double w, double x, double y, double z) {
    Eigen::Quaterniond q(w, x, y, z);
    if (!(q.norm() > 0.0)) {
        throw Error(ErrorCode::InvalidArgument, "zero quaternion");
    }
    q.normalize();
    return q.toRotationMatrix().transpose();
}

bool is_rotation(const Mat3& r, double tol) {
    if (!r.allFinite()) return false;
    if ((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() > tol) return false;
    return std::abs(r.determinant() - 1.0) <= tol;
}

double rotation_distance(const Mat3& a, const Mat3& b) {
    const double c = std::clamp(((a.transpose() * b).trace() - 1.0) / 2.0, -1.0, 1.0);
    return std::acos(c);
}

Sim3 Sim3::inverse() const {
    Sim3 inv;
    inv.scale = 1.0 / scale;
    inv.rotation = rotation.transpose();
    // x = (x' - t) R^T / s
    inv.translation = -(inv.rotation.transpose() * translation) / scale;
    return inv;
}

void Sim3::validate() const {
    if (!(scale > 0.0) || !std::isfinite(scale)) {
        throw Error(ErrorCode::InvalidArgument, "Sim3 scale must be positive and finite");
    }
    if (!is_rotation(rotation)) {
        throw Error(ErrorCode::InvalidArgument, "Sim3 rotation is not in SO(3)");
    }
    if (!translation.allFinite()) {
        throw Error(ErrorCode::InvalidArgument, "Sim3 translation is not finite");
    }
}

Sim3 compose(const Sim3& a, const Sim3& b) {
    // a(b(x)) = s_a (s_b x R_b + t_b) R_a + t_a
    Sim3 g;
    g.scale = a.scale * b.scale;
    g.rotation = b.rotation * a.rotation;
    g.translation = a.apply_point(b.translation);
    return g;
}

void ScenePointCloud::validate() const {
    if (positions.empty()) {
        throw Error(ErrorCode::EmptyCloud, "point cloud is empty");
    }
    if (normals.size() != positions.size()) {
        throw Error(ErrorCode::MissingNormals, "point cloud needs one normal per position");
    }
    for (std::size_t i = 0; i < positions.size(); ++i) {
        if (!positions[i].allFinite()) {
            throw Error(ErrorCode::InvalidArgument,
                        "non-finite position at index " + std::to_string(i));
        }
        if (std::abs(normals[i].norm() - 1.0) > 1e-4) {
            throw Error(ErrorCode::InvalidArgument,
                        "normal at index " + std::to_string(i) + " is not unit length");
        }
    }
}

void TriangleMesh::validate() const {
    if (vertex_normals.size() != vertices.size()) {
        throw Error(ErrorCode::ShapeMismatch, "mesh needs one normal per vertex");
    }
    const auto n = static_cast<std::uint32_t>(vertices.size());
    for (const auto& t : triangles) {
        if (t[0] >= n || t[1] >= n || t[2] >= n) {
            throw Error(ErrorCode::InvalidArgument, "triangle index out of range");
        }
        if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) {
            throw Error(ErrorCode::InvalidArgument, "degenerate triangle");
        }
    }
}

Box bounding_box(std::span<const Vec3> points) {
    Box box;
    if (points.empty()) return box;
    box.lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    box.hi = -box.lo;
    for (const auto& p : points) {
        box.lo = box.lo.cwiseMin(p);
        box.hi = box.hi.cwiseMax(p);
    }
    return box;
}

ScenePointCloud apply_sim3(const Sim3& g, const ScenePointCloud& cloud) {
    ScenePointCloud out;
    out.positions.reserve(cloud.positions.size());
    out.normals.reserve(cloud.normals.size());
    for (const auto& p : cloud.positions) out.positions.push_back(g.apply_point(p));
    for (const auto& n : cloud.normals) out.normals.push_back(g.apply_direction(n));
    return out;
}

Vec3 safe_normalized(const Vec3& v, double eps) {
    const double n = v.norm();
    if (n < eps) return Vec3::Zero();
    return v / n;
}

}  // namespace efem
