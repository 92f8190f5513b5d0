#include "efem/scenegen.hpp"

#include <algorithm>
#include <cmath>

#include "efem/error.hpp"
#include "efem/sampling.hpp"

namespace efem {

namespace {

constexpr int kPlacementTries = 2000;

struct Candidate {
    PlacedShape placed;
    std::vector<Vec3> points;   // scene frame
    std::vector<Vec3> normals;
    double radius = 0.0;        // scene-frame bounding radius
};

Candidate make_candidate(const ProceduralShape& shape, double scale, const Mat3& rot, int points, Rng& rng) {
    Candidate c;
    c.placed.shape = shape;
    c.placed.pose.scale = scale;
    c.placed.pose.rotation = rot;
    const SurfaceSamples s = sample_surface(shape, static_cast<std::size_t>(points), rng);
    for (std::size_t i = 0; i < s.points.size(); ++i) {
        c.points.push_back(c.placed.pose.apply_point(s.points[i]));
        c.normals.push_back(c.placed.pose.apply_direction(s.normals[i]).normalized());
    }
    c.radius = scale * shape.bounding_radius();
    return c;
}

void translate(Candidate& c, const Vec3& t) {
    c.placed.pose.translation += t;
    for (auto& p : c.points) p += t;
}

double min_z(const Candidate& c) {
    double z = std::numeric_limits<double>::infinity();
    for (const auto& p : c.points) z = std::min(z, p.z());
    return z;
}

// Smallest signed distance from the points of `a` to the surface of `b`.
double gap(const Candidate& a, const Candidate& b) {
    double g = std::numeric_limits<double>::infinity();
    for (const auto& p : a.points) g = std::min(g, b.placed.sdf(p));
    return g;
}

double pair_gap(const Candidate& a, const Candidate& b) {
    const double centers = (a.placed.pose.translation - b.placed.pose.translation).norm();
    if (centers > a.radius + b.radius + 1.0) return centers - a.radius - b.radius;
    return std::min(gap(a, b), gap(b, a));
}

Mat3 setup_rotation(SceneSetup setup, Rng& rng) {
    if (setup == SceneSetup::Z) return rotation_about(Vec3::UnitZ(), uniform(rng, 0.0, 2.0 * std::numbers::pi));
    return random_rotation(rng);
}

// Rests the object on the table at a uniform position; separated placement.
bool place_separated(Candidate& c, const std::vector<Candidate>& placed, double half, double clearance, Rng& rng) {
    const double lim = half - c.radius;
    if (lim <= 0.0) return false;
    const Vec3 start = c.placed.pose.translation;
    const double lift = -min_z(c);
    for (int attempt = 0; attempt < kPlacementTries; ++attempt) {
        const Vec3 t(uniform(rng, -lim, lim), uniform(rng, -lim, lim), lift);
        translate(c, t - (c.placed.pose.translation - start));
        bool ok = true;
        for (const auto& other : placed) {
            // A small margin keeps denser audits above the clearance.
            if (pair_gap(c, other) < clearance * 1.25) {
                ok = false;
                break;
            }
        }
        if (ok) return true;
    }
    return false;
}

// Drops the object from above onto the pile until the overlap budget is hit.
bool place_pile(Candidate& c, const std::vector<Candidate>& placed, double extent, double budget, Rng& rng) {
    const double x = uniform(rng, -extent, extent);
    const double y = uniform(rng, -extent, extent);
    double top = 0.0;
    for (const auto& o : placed) top = std::max(top, o.placed.pose.translation.z() + o.radius);
    const Vec3& t = c.placed.pose.translation;
    translate(c, Vec3(x - t.x(), y - t.y(), top + 0.01 - min_z(c)));
    const double step = std::max(0.5 * budget, 1e-4);
    for (;;) {
        const double drop = std::min(step, min_z(c));
        if (drop <= 0.0) return true;  // resting on the table
        translate(c, Vec3(0, 0, -drop));
        for (const auto& o : placed) {
            if (pair_gap(c, o) < -budget) {
                translate(c, Vec3(0, 0, drop));
                return true;
            }
        }
    }
}

nlohmann::json placed_json(const PlacedShape& p) {
    return {{"kind", to_string(p.shape.kind)}, {"params", p.shape.to_json()}, {"pose", sim3_to_json(p.pose)}};
}

PlacedShape placed_from(const nlohmann::json& j) {
    return {ProceduralShape::from_json(j.at("params")), sim3_from_json(j.at("pose"))};
}

}  // namespace

const char* to_string(SceneSetup setup) {
    switch (setup) {
        case SceneSetup::Z: return "Z";
        case SceneSetup::SO3: return "SO3";
        case SceneSetup::Pile: return "Pile";
    }
    return "unknown";
}

SceneSetup scene_setup_from_string(const std::string& name) {
    if (name == "Z" || name == "z") return SceneSetup::Z;
    if (name == "SO3" || name == "so3") return SceneSetup::SO3;
    if (name == "Pile" || name == "pile") return SceneSetup::Pile;
    throw Error(ErrorCode::Config, "unknown scene setup '" + name + "' (expected Z, SO3 or Pile)");
}

double PlacedShape::sdf(const Vec3& x) const {
    const Vec3 local = pose.rotation * ((x - pose.translation) / pose.scale);
    return pose.scale * analytic_sdf(shape, local);
}

void SceneSpec::validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::Config, "scene spec: " + m); };
    if (min_objects < 1 || max_objects < min_objects) fail("object count range must satisfy 1 <= min <= max");
    family.validate();
    distractor_family.validate();
    if (!(scale.lo > 0.0) || scale.hi < scale.lo) fail("scale range must be positive and non-empty");
    if (!(plane_extent > 0.0) || !(plane_density > 0.0)) fail("plane extent and density must be positive");
    if (points_per_object < 1) fail("points_per_object must be >= 1");
    if (distractors < 0) fail("distractors must be >= 0");
    if (!(noise_sigma >= 0.0)) fail("noise_sigma must be >= 0");
    if (!(clearance >= 0.0) || !(pile_penetration >= 0.0) || !(pile_extent > 0.0)) fail("placement settings out of range");
}

nlohmann::json SceneSpec::to_json() const {
    return {{"setup", to_string(setup)},
            {"n_objects", {min_objects, max_objects}},
            {"family", family.to_json()},
            {"scale", {scale.lo, scale.hi}},
            {"background", background},
            {"plane_extent", plane_extent},
            {"plane_density", plane_density},
            {"points_per_object", points_per_object},
            {"distractors", distractors},
            {"distractor_family", distractor_family.to_json()},
            {"noise_sigma", noise_sigma},
            {"clearance", clearance},
            {"pile_penetration", pile_penetration},
            {"pile_extent", pile_extent},
            {"single_view", single_view},
            {"seed", seed}};
}

SceneSpec SceneSpec::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw Error(ErrorCode::Config, "scene spec must be a JSON object");
    SceneSpec s;
    try {
        if (j.contains("setup")) s.setup = scene_setup_from_string(j.at("setup").get<std::string>());
        if (j.contains("n_objects")) {
            s.min_objects = j.at("n_objects").at(0).get<int>();
            s.max_objects = j.at("n_objects").at(1).get<int>();
        }
        if (j.contains("family")) s.family = FamilyConfig::from_json(j.at("family"));
        if (j.contains("scale")) s.scale = {j.at("scale").at(0).get<double>(), j.at("scale").at(1).get<double>()};
        s.background = j.value("background", s.background);
        s.plane_extent = j.value("plane_extent", s.plane_extent);
        s.plane_density = j.value("plane_density", s.plane_density);
        s.points_per_object = j.value("points_per_object", s.points_per_object);
        s.distractors = j.value("distractors", s.distractors);
        if (j.contains("distractor_family")) s.distractor_family = FamilyConfig::from_json(j.at("distractor_family"));
        s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
        s.clearance = j.value("clearance", s.clearance);
        s.pile_penetration = j.value("pile_penetration", s.pile_penetration);
        s.pile_extent = j.value("pile_extent", s.pile_extent);
        s.single_view = j.value("single_view", s.single_view);
        s.seed = j.value("seed", s.seed);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Config, std::string("scene spec: ") + e.what());
    }
    s.validate();
    return s;
}

GeneratedScene generate(const SceneSpec& spec) {
    spec.validate();
    Rng rng = make_rng(spec.seed, 0);
    const double half = 0.5 * spec.plane_extent;
    const int count = spec.min_objects == spec.max_objects
                          ? spec.min_objects
                          : std::min(spec.max_objects,
                                     spec.min_objects + static_cast<int>(uniform(rng) * (spec.max_objects - spec.min_objects + 1)));
    const double budget = spec.pile_penetration * spec.scale.lo;

    std::vector<Candidate> objects;
    for (int k = 0; k < count; ++k) {
        const ProceduralShape shape = sample_shape(spec.family, rng);
        const double target = spec.scale.lo == spec.scale.hi ? spec.scale.lo : uniform(rng, spec.scale.lo, spec.scale.hi);
        Candidate c = make_candidate(shape, target / shape.bounding_radius(), setup_rotation(spec.setup, rng),
                                     spec.points_per_object, rng);
        const bool ok = spec.setup == SceneSetup::Pile
                            ? place_pile(c, objects, spec.pile_extent, budget, rng)
                            : place_separated(c, objects, half, spec.clearance, rng);
        if (!ok) {
            throw Error(ErrorCode::PlacementFailed, "could not place object " + std::to_string(k) + " of " +
                                                        std::to_string(count) + " (" + to_string(spec.setup) +
                                                        " setup, seed " + std::to_string(spec.seed) + ")");
        }
        objects.push_back(std::move(c));
    }
    std::vector<Candidate> distractors;
    for (int k = 0; k < spec.distractors; ++k) {
        const ProceduralShape shape = sample_shape(spec.distractor_family, rng);
        const double target = spec.scale.lo == spec.scale.hi ? spec.scale.lo : uniform(rng, spec.scale.lo, spec.scale.hi);
        Candidate c = make_candidate(shape, target / shape.bounding_radius(),
                                     rotation_about(Vec3::UnitZ(), uniform(rng, 0.0, 2.0 * std::numbers::pi)),
                                     spec.points_per_object, rng);
        std::vector<Candidate> all = objects;
        all.insert(all.end(), distractors.begin(), distractors.end());
        if (!place_separated(c, all, half, spec.clearance, rng)) {
            throw Error(ErrorCode::PlacementFailed, "could not place distractor " + std::to_string(k) + " (seed " +
                                                        std::to_string(spec.seed) + ")");
        }
        distractors.push_back(std::move(c));
    }

    Vec3 view = Vec3::UnitZ();
    if (spec.single_view) {
        do {
            view = random_unit_vector(rng);
        } while (view.z() < 0.3);
    }

    std::vector<const Candidate*> solids;
    for (const auto& o : objects) solids.push_back(&o);
    for (const auto& d : distractors) solids.push_back(&d);
    auto hidden = [&](const Vec3& p, const Candidate* self) {
        for (const Candidate* s : solids) {
            if (s == self) continue;
            if ((p - s->placed.pose.translation).norm() > s->radius + 1e-9) continue;
            if (s->placed.sdf(p) < 0.0) return true;
        }
        return false;
    };

    GeneratedScene out;
    auto add = [&](const Vec3& p, const Vec3& n, int id) {
        out.cloud.positions.push_back(p);
        out.cloud.normals.push_back(n);
        out.gt.point_ids.push_back(id);
    };
    if (spec.background) {
        const auto n = static_cast<std::size_t>(std::llround(spec.plane_density * spec.plane_extent * spec.plane_extent));
        for (std::size_t i = 0; i < n; ++i) {
            const Vec3 p(uniform(rng, -half, half), uniform(rng, -half, half), 0.0);
            if (!hidden(p, nullptr)) add(p, Vec3::UnitZ(), -1);
        }
    }
    auto add_object = [&](const Candidate& c, int id) {
        for (std::size_t i = 0; i < c.points.size(); ++i) {
            const Vec3& p = c.points[i];
            if (spec.background && p.z() < 0.0) continue;
            if (spec.single_view && c.normals[i].dot(view) < 0.0) continue;
            if (hidden(p, &c)) continue;
            add(p, c.normals[i], id);
        }
    };
    for (std::size_t k = 0; k < objects.size(); ++k) {
        const std::size_t before = out.cloud.size();
        add_object(objects[k], static_cast<int>(k));
        if (out.cloud.size() == before) {
            throw Error(ErrorCode::PlacementFailed, "object " + std::to_string(k) + " is fully occluded (seed " +
                                                        std::to_string(spec.seed) + ")");
        }
        out.gt.instances.push_back(objects[k].placed);
    }
    for (const auto& d : distractors) {
        add_object(d, -1);
        out.gt.distractors.push_back(d.placed);
    }
    if (spec.noise_sigma > 0.0) {
        for (auto& p : out.cloud.positions)
            p += Vec3(gaussian(rng, spec.noise_sigma), gaussian(rng, spec.noise_sigma), gaussian(rng, spec.noise_sigma));
    }
    return out;
}

std::vector<std::vector<std::size_t>> gt_masks(const GroundTruth& gt) {
    int max_id = -1;
    for (int id : gt.point_ids) max_id = std::max(max_id, id);
    std::vector<std::vector<std::size_t>> masks(static_cast<std::size_t>(max_id + 1));
    for (std::size_t i = 0; i < gt.point_ids.size(); ++i) {
        if (gt.point_ids[i] >= 0) masks[static_cast<std::size_t>(gt.point_ids[i])].push_back(i);
    }
    return masks;
}

void GroundTruth::validate(std::size_t points) const {
    if (point_ids.size() != points) {
        throw Error(ErrorCode::ShapeMismatch, "ground truth has " + std::to_string(point_ids.size()) +
                                                  " ids for " + std::to_string(points) + " points");
    }
    std::vector<std::size_t> counts(instances.size(), 0);
    for (int id : point_ids) {
        if (id < -1 || id >= static_cast<int>(instances.size())) {
            throw Error(ErrorCode::InvalidArgument, "ground truth id " + std::to_string(id) + " out of range");
        }
        if (id >= 0) ++counts[static_cast<std::size_t>(id)];
    }
    for (std::size_t k = 0; k < counts.size(); ++k) {
        if (counts[k] == 0) throw Error(ErrorCode::InvalidArgument, "instance " + std::to_string(k) + " has no points");
    }
}

nlohmann::json GroundTruth::to_json() const {
    nlohmann::json inst = nlohmann::json::array();
    for (const auto& p : instances) inst.push_back(placed_json(p));
    nlohmann::json dis = nlohmann::json::array();
    for (const auto& p : distractors) dis.push_back(placed_json(p));
    return {{"point_ids", point_ids}, {"instances", inst}, {"distractors", dis}};
}

GroundTruth GroundTruth::from_json(const nlohmann::json& j) {
    GroundTruth gt;
    try {
        gt.point_ids = j.at("point_ids").get<std::vector<int>>();
        for (const auto& p : j.at("instances")) gt.instances.push_back(placed_from(p));
        if (j.contains("distractors"))
            for (const auto& p : j.at("distractors")) gt.distractors.push_back(placed_from(p));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Config, std::string("ground truth: ") + e.what());
    }
    return gt;
}

nlohmann::json sim3_to_json(const Sim3& g) {
    nlohmann::json r = nlohmann::json::array();
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) r.push_back(g.rotation(i, k));
    return {{"s", g.scale}, {"R", r}, {"t", {g.translation.x(), g.translation.y(), g.translation.z()}}};
}

Sim3 sim3_from_json(const nlohmann::json& j) {
    Sim3 g;
    g.scale = j.at("s").get<double>();
    const auto& r = j.at("R");
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) g.rotation(i, k) = r.at(static_cast<std::size_t>(3 * i + k)).get<double>();
    const auto& t = j.at("t");
    g.translation = Vec3(t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>());
    return g;
}

}  // namespace efem
