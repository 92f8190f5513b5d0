#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace efem {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Rotations follow the row-vector convention used throughout the library:
// a point x (as a row) maps to x R. Internally Vec3 is a column, so the
// same action is written R^T x.

/// Rotation by `angle` radians counterclockwise about `axis` (row convention).
Mat3 rotation_about(const Vec3& axis, double angle);

/// Rotation from a (not necessarily normalized) quaternion w + xi + yj + zk.
Mat3 rotation_from_quaternion(double w, double x, double y, double z);

bool is_rotation(const Mat3& r, double tol = 1e-6);

/// Geodesic angle between two rotations, in radians.
double rotation_distance(const Mat3& a, const Mat3& b);

/// Similarity transform g = (s, R, t) acting as x -> s x R + t.
struct Sim3 {
    double scale = 1.0;
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    static Sim3 identity() { return {}; }

    Vec3 apply_point(const Vec3& x) const {
        return scale * (rotation.transpose() * x) + translation;
    }
    // Normals and other directions rotate only.
    Vec3 apply_direction(const Vec3& n) const { return rotation.transpose() * n; }

    Sim3 inverse() const;
    void validate() const;
};

/// compose(a, b) applies b first, then a.
Sim3 compose(const Sim3& a, const Sim3& b);

struct ScenePointCloud {
    std::vector<Vec3> positions;
    std::vector<Vec3> normals;

    std::size_t size() const { return positions.size(); }
    bool empty() const { return positions.empty(); }
    void validate() const;
};

using Triangle = std::array<std::uint32_t, 3>;

struct TriangleMesh {
    std::vector<Vec3> vertices;
    std::vector<Vec3> vertex_normals;
    std::vector<Triangle> triangles;

    bool empty() const { return vertices.empty(); }
    void validate() const;
};

struct Box {
    Vec3 lo = Vec3::Zero();
    Vec3 hi = Vec3::Zero();

    Vec3 extent() const { return hi - lo; }
    Vec3 center() const { return 0.5 * (lo + hi); }
};

Box bounding_box(std::span<const Vec3> points);

ScenePointCloud apply_sim3(const Sim3& g, const ScenePointCloud& cloud);

/// Returns `v / |v|`, or zero when the norm is below `eps`.
Vec3 safe_normalized(const Vec3& v, double eps = 1e-12);

}  // namespace efem
