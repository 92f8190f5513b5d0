#include "efem/shapes.hpp"

#include <algorithm>
#include <cmath>

#include "efem/error.hpp"

namespace efem {

namespace {

// Forward-mode dual number carrying d/dx of a scalar.
struct Dual {
    double v = 0.0;
    Vec3 d = Vec3::Zero();

    Dual() = default;
    Dual(double value) : v(value) {}  // NOLINT: constants promote implicitly
    Dual(double value, const Vec3& deriv) : v(value), d(deriv) {}
};

Dual operator+(const Dual& a, const Dual& b) { return {a.v + b.v, a.d + b.d}; }
Dual operator-(const Dual& a, const Dual& b) { return {a.v - b.v, a.d - b.d}; }
Dual operator-(const Dual& a) { return {-a.v, -a.d}; }
Dual operator*(const Dual& a, const Dual& b) { return {a.v * b.v, a.v * b.d + b.v * a.d}; }
Dual operator/(const Dual& a, const Dual& b) { return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)}; }

Dual sqrt(const Dual& a) {
    const double s = std::sqrt(std::max(a.v, 0.0));
    return {s, s > 1e-300 ? Vec3(a.d / (2.0 * s)) : Vec3::Zero()};
}
Dual abs(const Dual& a) { return a.v < 0.0 ? -a : a; }
const Dual& min(const Dual& a, const Dual& b) { return b.v < a.v ? b : a; }
const Dual& max(const Dual& a, const Dual& b) { return b.v > a.v ? b : a; }
Dual clamp(const Dual& a, double lo, double hi) { return a.v < lo ? Dual(lo) : (a.v > hi ? Dual(hi) : a); }

Dual length(const Dual& a, const Dual& b) { return sqrt(a * a + b * b); }
Dual length(const Dual& a, const Dual& b, const Dual& c) { return sqrt(a * a + b * b + c * c); }

struct P3 {
    Dual x, y, z;
};

P3 seed(const Vec3& p) {
    return {Dual(p.x(), Vec3::UnitX()), Dual(p.y(), Vec3::UnitY()), Dual(p.z(), Vec3::UnitZ())};
}

Dual sd_sphere(const P3& p, double r) { return length(p.x, p.y, p.z) - r; }

Dual sd_capsule(const P3& p, double r, double h) {
    const Dual qx = p.x - clamp(p.x, -h, h);
    return length(qx, p.y, p.z) - r;
}

Dual sd_rounded_box(const P3& p, const Vec3& b, double rho) {
    const Dual qx = abs(p.x) - (b.x() - rho);
    const Dual qy = abs(p.y) - (b.y() - rho);
    const Dual qz = abs(p.z) - (b.z() - rho);
    const Dual outside = length(max(qx, 0.0), max(qy, 0.0), max(qz, 0.0));
    const Dual inside = min(max(qx, max(qy, qz)), 0.0);
    return outside + inside - rho;
}

// Capped cylinder about z: radius r, z in [zlo, zhi].
Dual sd_cylinder(const P3& p, double r, double zlo, double zhi) {
    const double zc = 0.5 * (zlo + zhi);
    const double hh = 0.5 * (zhi - zlo);
    const Dual dx = length(p.x, p.y) - r;
    const Dual dz = abs(p.z - zc) - hh;
    return min(max(dx, dz), 0.0) + length(max(dx, 0.0), max(dz, 0.0));
}

Dual sd_mug(const P3& p, const ProceduralShape& s) {
    const double h = s.half_height;
    const Dual outer = sd_cylinder(p, s.radius, -h, h);
    const Dual inner = sd_cylinder(p, s.radius - s.wall, -h + s.wall, h + s.wall);
    const Dual shell = max(outer, -inner);
    // Handle: torus in the xz plane centered at (radius, 0, 0).
    const Dual ring = length(p.x - s.radius, p.z) - s.handle_major;
    const Dual handle = length(ring, p.y) - s.handle_minor;
    return min(shell, handle);
}

// Cone about z with base radius r at z = -h and apex at z = +h.
Dual sd_cone(const P3& p, double r, double h) {
    const Dual qx = length(p.x, p.y);
    const Dual qy = p.z;
    // k1 = (0, h), k2 = (-r, 2h)
    const double k2x = -r;
    const double k2y = 2.0 * h;
    const Dual cax = qx - min(qx, qy.v < 0.0 ? Dual(r) : Dual(0.0));
    const Dual cay = abs(qy) - h;
    const Dual t = clamp(((0.0 - qx) * k2x + (h - qy) * k2y) / (k2x * k2x + k2y * k2y), 0.0, 1.0);
    const Dual cbx = qx + t * k2x;
    const Dual cby = qy - h + t * k2y;
    const double sign = (cbx.v < 0.0 && cay.v < 0.0) ? -1.0 : 1.0;
    const Dual da = cax * cax + cay * cay;
    const Dual db = cbx * cbx + cby * cby;
    return sign * sqrt(min(da, db));
}

Dual eval(const ProceduralShape& s, const Vec3& x) {
    const P3 p = seed(x);
    switch (s.kind) {
        case ShapeKind::Sphere: return sd_sphere(p, s.radius);
        case ShapeKind::Capsule: return sd_capsule(p, s.radius, s.half_length);
        case ShapeKind::RoundedBox: return sd_rounded_box(p, s.half_extents, s.rounding);
        case ShapeKind::PseudoMug: return sd_mug(p, s);
        case ShapeKind::Cone: return sd_cone(p, s.radius, s.half_height);
    }
    return Dual(0.0);
}

double draw(const Range& r, Rng& rng) { return r.lo == r.hi ? r.lo : uniform(rng, r.lo, r.hi); }

nlohmann::json range_json(const Range& r) { return nlohmann::json::array({r.lo, r.hi}); }

Range range_from(const nlohmann::json& j, const char* key, Range fallback) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    if (!v.is_array() || v.size() != 2) throw Error(ErrorCode::Config, std::string("range '") + key + "' must be [lo, hi]");
    return {v.at(0).get<double>(), v.at(1).get<double>()};
}

}  // namespace

const char* to_string(ShapeKind kind) {
    switch (kind) {
        case ShapeKind::Sphere: return "sphere";
        case ShapeKind::Capsule: return "capsule";
        case ShapeKind::RoundedBox: return "rounded_box";
        case ShapeKind::PseudoMug: return "pseudo_mug";
        case ShapeKind::Cone: return "cone";
    }
    return "unknown";
}

ShapeKind shape_kind_from_string(const std::string& name) {
    for (ShapeKind k : {ShapeKind::Sphere, ShapeKind::Capsule, ShapeKind::RoundedBox, ShapeKind::PseudoMug,
                        ShapeKind::Cone}) {
        if (name == to_string(k)) return k;
    }
    throw Error(ErrorCode::Config, "unknown shape kind '" + name + "'");
}

ProceduralShape ProceduralShape::sphere(double radius) {
    ProceduralShape s;
    s.kind = ShapeKind::Sphere;
    s.radius = radius;
    return s;
}

ProceduralShape ProceduralShape::capsule(double radius, double half_length) {
    ProceduralShape s;
    s.kind = ShapeKind::Capsule;
    s.radius = radius;
    s.half_length = half_length;
    return s;
}

ProceduralShape ProceduralShape::rounded_box(const Vec3& half_extents, double rounding) {
    ProceduralShape s;
    s.kind = ShapeKind::RoundedBox;
    s.radius = 0.0;
    s.half_extents = half_extents;
    s.rounding = rounding;
    return s;
}

ProceduralShape ProceduralShape::pseudo_mug(double radius, double half_height, double wall, double handle_major,
                                            double handle_minor) {
    ProceduralShape s;
    s.kind = ShapeKind::PseudoMug;
    s.radius = radius;
    s.half_height = half_height;
    s.wall = wall;
    s.handle_major = handle_major;
    s.handle_minor = handle_minor;
    return s;
}

ProceduralShape ProceduralShape::cone(double radius, double half_height) {
    ProceduralShape s;
    s.kind = ShapeKind::Cone;
    s.radius = radius;
    s.half_height = half_height;
    return s;
}

void ProceduralShape::validate() const {
    auto positive = [](double v, const char* what) {
        if (!(v > 0.0) || !std::isfinite(v)) throw Error(ErrorCode::Config, std::string(what) + " must be positive");
    };
    switch (kind) {
        case ShapeKind::Sphere: positive(radius, "radius"); break;
        case ShapeKind::Capsule:
            positive(radius, "radius");
            positive(half_length, "half_length");
            break;
        case ShapeKind::RoundedBox:
            for (int a = 0; a < 3; ++a) positive(half_extents[a], "half_extents");
            if (!(rounding >= 0.0) || rounding >= half_extents.minCoeff()) {
                throw Error(ErrorCode::Config, "rounding must lie in [0, min half extent)");
            }
            break;
        case ShapeKind::PseudoMug:
            positive(radius, "radius");
            positive(half_height, "half_height");
            positive(wall, "wall");
            positive(handle_major, "handle_major");
            positive(handle_minor, "handle_minor");
            if (wall >= radius || wall >= half_height) throw Error(ErrorCode::Config, "mug wall too thick");
            if (handle_minor >= handle_major) throw Error(ErrorCode::Config, "handle_minor must be < handle_major");
            break;
        case ShapeKind::Cone:
            positive(radius, "radius");
            positive(half_height, "half_height");
            break;
    }
}

double ProceduralShape::bounding_radius() const {
    switch (kind) {
        case ShapeKind::Sphere: return radius;
        case ShapeKind::Capsule: return radius + half_length;
        case ShapeKind::RoundedBox: return half_extents.norm();
        case ShapeKind::PseudoMug:
            return std::max(std::hypot(radius, half_height), radius + handle_major + handle_minor);
        case ShapeKind::Cone: return std::hypot(radius, half_height);
    }
    return radius;
}

ProceduralShape ProceduralShape::scaled(double f) const {
    ProceduralShape s = *this;
    s.radius *= f;
    s.half_length *= f;
    s.half_height *= f;
    s.half_extents *= f;
    s.rounding *= f;
    s.wall *= f;
    s.handle_major *= f;
    s.handle_minor *= f;
    return s;
}

nlohmann::json ProceduralShape::to_json() const {
    nlohmann::json j{{"kind", to_string(kind)}};
    switch (kind) {
        case ShapeKind::Sphere: j["radius"] = radius; break;
        case ShapeKind::Capsule:
            j["radius"] = radius;
            j["half_length"] = half_length;
            break;
        case ShapeKind::RoundedBox:
            j["half_extents"] = {half_extents.x(), half_extents.y(), half_extents.z()};
            j["rounding"] = rounding;
            break;
        case ShapeKind::PseudoMug:
            j["radius"] = radius;
            j["half_height"] = half_height;
            j["wall"] = wall;
            j["handle_major"] = handle_major;
            j["handle_minor"] = handle_minor;
            break;
        case ShapeKind::Cone:
            j["radius"] = radius;
            j["half_height"] = half_height;
            break;
    }
    return j;
}

ProceduralShape ProceduralShape::from_json(const nlohmann::json& j) {
    ProceduralShape s;
    s.kind = shape_kind_from_string(j.at("kind").get<std::string>());
    s.radius = j.value("radius", 0.0);
    s.half_length = j.value("half_length", 0.0);
    s.half_height = j.value("half_height", 0.0);
    if (j.contains("half_extents")) {
        const auto& e = j.at("half_extents");
        s.half_extents = Vec3(e.at(0).get<double>(), e.at(1).get<double>(), e.at(2).get<double>());
    }
    s.rounding = j.value("rounding", 0.0);
    s.wall = j.value("wall", 0.0);
    s.handle_major = j.value("handle_major", 0.0);
    s.handle_minor = j.value("handle_minor", 0.0);
    s.validate();
    return s;
}

double analytic_sdf(const ProceduralShape& shape, const Vec3& x) { return eval(shape, x).v; }

double analytic_sdf(const ProceduralShape& shape, const Vec3& x, Vec3& gradient) {
    const Dual d = eval(shape, x);
    gradient = d.d;
    return d.v;
}

SurfaceSamples sample_surface(const ProceduralShape& shape, std::size_t count, Rng& rng) {
    SurfaceSamples out;
    out.points.reserve(count);
    out.normals.reserve(count);
    const double extent = shape.bounding_radius() * 1.05;
    const double shell = 0.05 * extent;
    std::size_t misses = 0;
    while (out.points.size() < count) {
        if (misses >= 100000) {
            throw Error(ErrorCode::SamplingFailed, std::string("surface sampling of ") + to_string(shape.kind) +
                                                       " failed after 1e5 consecutive rejections");
        }
        Vec3 x(uniform(rng, -extent, extent), uniform(rng, -extent, extent), uniform(rng, -extent, extent));
        Vec3 g;
        double f = analytic_sdf(shape, x, g);
        if (std::abs(f) >= shell) {
            ++misses;
            continue;
        }
        bool ok = false;
        for (int it = 0; it < 32; ++it) {
            const double gg = g.squaredNorm();
            if (gg < 1e-12) break;
            x -= f * g / gg;
            f = analytic_sdf(shape, x, g);
            if (std::abs(f) < 1e-10) {
                ok = true;
                break;
            }
        }
        const double gn = g.norm();
        if (!ok || gn < 1e-9) {
            ++misses;
            continue;
        }
        misses = 0;
        out.points.push_back(x);
        out.normals.push_back(g / gn);
    }
    return out;
}

void FamilyConfig::validate() const {
    if (kinds.empty()) throw Error(ErrorCode::Config, "family: at least one shape kind is required");
    const std::pair<const char*, const Range*> ranges[] = {
        {"sphere_radius", &sphere_radius},   {"capsule_radius", &capsule_radius},
        {"capsule_half_length", &capsule_half_length}, {"box_half_extent", &box_half_extent},
        {"box_rounding", &box_rounding},     {"mug_radius", &mug_radius},
        {"mug_half_height", &mug_half_height}, {"mug_wall", &mug_wall},
        {"handle_major", &handle_major},     {"handle_minor", &handle_minor},
        {"cone_radius", &cone_radius},       {"cone_half_height", &cone_half_height}};
    for (const auto& [name, r] : ranges) {
        if (!(r->lo <= r->hi)) throw Error(ErrorCode::Config, std::string("family: empty range ") + name);
        if (!(r->lo > 0.0)) throw Error(ErrorCode::Config, std::string("family: range ") + name + " must be positive");
    }
}

nlohmann::json FamilyConfig::to_json() const {
    nlohmann::json k = nlohmann::json::array();
    for (ShapeKind kind : kinds) k.push_back(to_string(kind));
    return {{"kinds", k},
            {"sphere_radius", range_json(sphere_radius)},
            {"capsule_radius", range_json(capsule_radius)},
            {"capsule_half_length", range_json(capsule_half_length)},
            {"box_half_extent", range_json(box_half_extent)},
            {"box_rounding", range_json(box_rounding)},
            {"mug_radius", range_json(mug_radius)},
            {"mug_half_height", range_json(mug_half_height)},
            {"mug_wall", range_json(mug_wall)},
            {"handle_major", range_json(handle_major)},
            {"handle_minor", range_json(handle_minor)},
            {"cone_radius", range_json(cone_radius)},
            {"cone_half_height", range_json(cone_half_height)}};
}

FamilyConfig FamilyConfig::from_json(const nlohmann::json& j) {
    FamilyConfig f;
    if (j.contains("kinds")) {
        f.kinds.clear();
        for (const auto& k : j.at("kinds")) f.kinds.push_back(shape_kind_from_string(k.get<std::string>()));
    }
    f.sphere_radius = range_from(j, "sphere_radius", f.sphere_radius);
    f.capsule_radius = range_from(j, "capsule_radius", f.capsule_radius);
    f.capsule_half_length = range_from(j, "capsule_half_length", f.capsule_half_length);
    f.box_half_extent = range_from(j, "box_half_extent", f.box_half_extent);
    f.box_rounding = range_from(j, "box_rounding", f.box_rounding);
    f.mug_radius = range_from(j, "mug_radius", f.mug_radius);
    f.mug_half_height = range_from(j, "mug_half_height", f.mug_half_height);
    f.mug_wall = range_from(j, "mug_wall", f.mug_wall);
    f.handle_major = range_from(j, "handle_major", f.handle_major);
    f.handle_minor = range_from(j, "handle_minor", f.handle_minor);
    f.cone_radius = range_from(j, "cone_radius", f.cone_radius);
    f.cone_half_height = range_from(j, "cone_half_height", f.cone_half_height);
    f.validate();
    return f;
}

ProceduralShape sample_shape(const FamilyConfig& family, Rng& rng) {
    family.validate();
    const auto pick = static_cast<std::size_t>(uniform(rng) * static_cast<double>(family.kinds.size()));
    const ShapeKind kind = family.kinds[std::min(pick, family.kinds.size() - 1)];
    ProceduralShape s;
    switch (kind) {
        case ShapeKind::Sphere: s = ProceduralShape::sphere(draw(family.sphere_radius, rng)); break;
        case ShapeKind::Capsule: {
            const double r = draw(family.capsule_radius, rng);
            s = ProceduralShape::capsule(r, draw(family.capsule_half_length, rng));
            break;
        }
        case ShapeKind::RoundedBox: {
            Vec3 b;
            for (int a = 0; a < 3; ++a) b[a] = draw(family.box_half_extent, rng);
            const double rho = std::min(draw(family.box_rounding, rng), 0.5 * b.minCoeff());
            s = ProceduralShape::rounded_box(b, rho);
            break;
        }
        case ShapeKind::PseudoMug: {
            const double r = draw(family.mug_radius, rng);
            const double h = draw(family.mug_half_height, rng);
            const double w = std::min(draw(family.mug_wall, rng), 0.5 * std::min(r, h));
            const double a = draw(family.handle_major, rng);
            const double m = std::min(draw(family.handle_minor, rng), 0.5 * a);
            s = ProceduralShape::pseudo_mug(r, h, w, a, m);
            break;
        }
        case ShapeKind::Cone: {
            const double r = draw(family.cone_radius, rng);
            s = ProceduralShape::cone(r, draw(family.cone_half_height, rng));
            break;
        }
    }
    const double br = s.bounding_radius();
    if (br > 1.0) s = s.scaled(1.0 / br);
    s.validate();
    return s;
}

}  // namespace efem
