#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "efem/geometry.hpp"
#include "efem/sampling.hpp"

namespace efem {

enum class ShapeKind { Sphere, Capsule, RoundedBox, PseudoMug, Cone };

const char* to_string(ShapeKind kind);
ShapeKind shape_kind_from_string(const std::string& name);

/// Analytic shape in its canonical frame, centered near the origin.
///
///   sphere       radius
///   capsule      radius, half_length (segment along x)
///   rounded_box  half_extents, rounding
///   pseudo_mug   radius, half_height, wall, handle_major, handle_minor
///                (open-top cylinder shell along z, handle torus on +x)
///   cone         radius, half_height (apex at +z)
struct ProceduralShape {
    ShapeKind kind = ShapeKind::Sphere;
    double radius = 0.5;
    double half_length = 0.0;
    double half_height = 0.0;
    Vec3 half_extents = Vec3::Zero();
    double rounding = 0.0;
    double wall = 0.0;
    double handle_major = 0.0;
    double handle_minor = 0.0;

    static ProceduralShape sphere(double radius);
    static ProceduralShape capsule(double radius, double half_length);
    static ProceduralShape rounded_box(const Vec3& half_extents, double rounding);
    static ProceduralShape pseudo_mug(double radius, double half_height, double wall, double handle_major,
                                      double handle_minor);
    static ProceduralShape cone(double radius, double half_height);

    void validate() const;

    /// Radius of a ball about the origin containing the shape.
    double bounding_radius() const;
    ProceduralShape scaled(double factor) const;

    nlohmann::json to_json() const;
    static ProceduralShape from_json(const nlohmann::json& j);
};

/// Signed distance. Exact for sphere, capsule, rounded box and cone; the
/// pseudo-mug composes exact pieces with min/max and is a bound away from
/// its surface.
double analytic_sdf(const ProceduralShape& shape, const Vec3& x);

/// Value and exact gradient (a one-sided choice at creases).
double analytic_sdf(const ProceduralShape& shape, const Vec3& x, Vec3& gradient);

struct SurfaceSamples {
    std::vector<Vec3> points;
    std::vector<Vec3> normals;
};

/// Draws `count` near-uniform surface points: uniform candidates in the
/// bounding box are kept inside a thin shell and projected onto the zero set
/// by Newton steps. Throws SamplingFailed after 1e5 consecutive rejections.
SurfaceSamples sample_surface(const ProceduralShape& shape, std::size_t count, Rng& rng);

struct Range {
    double lo = 0.0;
    double hi = 0.0;
};

/// Parameter ranges per kind; a draw picks a kind uniformly from `kinds`.
struct FamilyConfig {
    std::vector<ShapeKind> kinds = {ShapeKind::Sphere};
    Range sphere_radius{0.5, 1.0};
    Range capsule_radius{0.25, 0.45};
    Range capsule_half_length{0.2, 0.55};
    Range box_half_extent{0.3, 0.7};
    Range box_rounding{0.02, 0.1};
    Range mug_radius{0.35, 0.5};
    Range mug_half_height{0.35, 0.5};
    Range mug_wall{0.04, 0.08};
    Range handle_major{0.15, 0.22};
    Range handle_minor{0.03, 0.05};
    Range cone_radius{0.3, 0.6};
    Range cone_half_height{0.3, 0.6};

    void validate() const;
    nlohmann::json to_json() const;
    static FamilyConfig from_json(const nlohmann::json& j);
};

/// Draws parameters uniformly from the configured ranges. The result is
/// scaled down to fit the unit ball when it would not.
ProceduralShape sample_shape(const FamilyConfig& family, Rng& rng);

}  // namespace efem
