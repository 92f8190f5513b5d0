#include <doctest.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <set>

#include "efem/error.hpp"
#include "efem/io.hpp"
#include "efem/scenegen.hpp"
#include "helpers.hpp"

using namespace efem;

namespace {

SceneSpec bare_spec(SceneSetup setup, int objects, std::uint64_t seed) {
    SceneSpec s;
    s.setup = setup;
    s.min_objects = s.max_objects = objects;
    s.background = false;
    s.noise_sigma = 0.0;
    s.seed = seed;
    return s;
}

std::vector<Vec3> dense_surface(const PlacedShape& p, std::size_t count, Rng& rng) {
    const SurfaceSamples s = sample_surface(p.shape, count, rng);
    std::vector<Vec3> out;
    for (const auto& x : s.points) out.push_back(p.pose.apply_point(x));
    return out;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("single noiseless sphere lies on its surface") {
    const GeneratedScene sc = generate(bare_spec(SceneSetup::Z, 1, 3));
    REQUIRE(sc.gt.instances.size() == 1);
    REQUIRE(sc.cloud.size() == 400);
    for (std::size_t i = 0; i < sc.cloud.size(); ++i) {
        CHECK(std::abs(sc.gt.instances[0].sdf(sc.cloud.positions[i])) < 1e-6);
        CHECK(sc.gt.point_ids[i] == 0);
    }
}

TEST_CASE("Z placements keep their clearance and stay upright") {
    FamilyConfig fam;
    fam.kinds = {ShapeKind::Sphere, ShapeKind::Capsule, ShapeKind::RoundedBox, ShapeKind::PseudoMug};
    Rng rng = make_rng(21, 0);
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        SceneSpec spec = bare_spec(SceneSetup::Z, 5, seed);
        spec.family = fam;
        const GeneratedScene sc = generate(spec);
        const auto& inst = sc.gt.instances;
        REQUIRE(inst.size() == 5);
        for (const auto& p : inst) {
            // Yaw only: the z axis is fixed.
            CHECK((p.pose.rotation * Vec3::UnitZ() - Vec3::UnitZ()).norm() < 1e-12);
        }
        for (std::size_t a = 0; a < inst.size(); ++a) {
            const auto pts = dense_surface(inst[a], 4000, rng);
            for (std::size_t b = 0; b < inst.size(); ++b) {
                if (a == b) continue;
                double gap = std::numeric_limits<double>::infinity();
                for (const auto& x : pts) gap = std::min(gap, inst[b].sdf(x));
                CHECK(gap >= 0.02);
            }
        }
    }
}

TEST_CASE("fixed seed gives identical scene bytes") {
    efem::test::TempDir dir("scene");
    SceneSpec spec;
    spec.setup = SceneSetup::SO3;
    spec.seed = 77;
    const GeneratedScene a = generate(spec);
    const GeneratedScene b = generate(spec);
    write_ply(dir.path() / "a.ply", a.cloud);
    write_ply(dir.path() / "b.ply", b.cloud);
    CHECK(slurp(dir.path() / "a.ply") == slurp(dir.path() / "b.ply"));
    CHECK(a.gt.to_json().dump() == b.gt.to_json().dump());
    spec.seed = 78;
    CHECK(generate(spec).cloud.positions != a.cloud.positions);
}

TEST_CASE("noiseless normals follow the analytic gradient") {
    FamilyConfig fam;
    fam.kinds = {ShapeKind::Sphere, ShapeKind::Capsule, ShapeKind::RoundedBox, ShapeKind::Cone};
    SceneSpec spec = bare_spec(SceneSetup::SO3, 4, 5);
    spec.family = fam;
    spec.background = true;
    const GeneratedScene sc = generate(spec);
    std::size_t checked = 0;
    for (std::size_t i = 0; i < sc.cloud.size(); ++i) {
        const Vec3& n = sc.cloud.normals[i];
        CHECK(std::abs(n.norm() - 1.0) < 1e-9);
        const int id = sc.gt.point_ids[i];
        if (id < 0) {
            CHECK(n == Vec3::UnitZ());
            continue;
        }
        const PlacedShape& p = sc.gt.instances[static_cast<std::size_t>(id)];
        const Vec3 local = p.pose.rotation * ((sc.cloud.positions[i] - p.pose.translation) / p.pose.scale);
        Vec3 g;
        analytic_sdf(p.shape, local, g);
        const Vec3 expected = p.pose.apply_direction(g).normalized();
        const double angle = std::atan2(n.cross(expected).norm(), n.dot(expected));
        CHECK(angle < 1e-4);
        ++checked;
    }
    CHECK(checked > 100);
}

TEST_CASE("ground truth ids partition the points") {
    for (SceneSetup setup : {SceneSetup::Z, SceneSetup::SO3, SceneSetup::Pile}) {
        SceneSpec spec;
        spec.setup = setup;
        spec.seed = 9;
        spec.distractors = 1;
        const GeneratedScene sc = generate(spec);
        CHECK_NOTHROW(sc.gt.validate(sc.cloud.size()));
        const auto masks = gt_masks(sc.gt);
        CHECK(masks.size() == sc.gt.instance_count());
        std::vector<int> seen(sc.cloud.size(), 0);
        for (const auto& m : masks) {
            CHECK(!m.empty());
            for (auto i : m) ++seen[i];
        }
        for (std::size_t i = 0; i < seen.size(); ++i) {
            CHECK(seen[i] == (sc.gt.point_ids[i] >= 0 ? 1 : 0));
        }
    }
}

TEST_CASE("uniform rotations have the expected mean angle") {
    Rng rng = make_rng(1234, 0);
    double sum = 0.0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const Mat3 r = random_rotation(rng);
        sum += std::acos(std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0));
    }
    const double mean_deg = sum / n * 180.0 / std::numbers::pi;
    const double analytic_deg = (std::numbers::pi / 2.0 + 2.0 / std::numbers::pi) * 180.0 / std::numbers::pi;
    CHECK(analytic_deg == doctest::Approx(126.47).epsilon(1e-4));
    CHECK(std::abs(mean_deg - analytic_deg) < 0.02 * analytic_deg);
}

TEST_CASE("pile overlaps respect the penetration budget") {
    Rng rng = make_rng(8, 0);
    std::size_t touching = 0;
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        SceneSpec spec = bare_spec(SceneSetup::Pile, 6, seed);
        spec.background = true;
        const GeneratedScene sc = generate(spec);
        const double budget = spec.pile_penetration * spec.scale.lo;
        const auto& inst = sc.gt.instances;
        for (std::size_t a = 0; a < inst.size(); ++a) {
            const auto pts = dense_surface(inst[a], 4000, rng);
            for (std::size_t b = 0; b < inst.size(); ++b) {
                if (a == b) continue;
                double gap = std::numeric_limits<double>::infinity();
                for (const auto& x : pts) gap = std::min(gap, inst[b].sdf(x));
                // The drop checks a sparser sample; allow a small audit slack.
                CHECK(gap >= -1.5 * budget);
                if (gap < spec.clearance) ++touching;
            }
        }
    }
    // Piles actually stack.
    CHECK(touching > 0);
}

TEST_CASE("gt_masks examples") {
    GroundTruth gt;
    gt.instances.resize(2);
    for (int i = 0; i < 20; ++i) gt.point_ids.push_back(i % 2);
    const auto masks = gt_masks(gt);
    REQUIRE(masks.size() == 2);
    CHECK(masks[0].size() == 10);
    CHECK(masks[1].size() == 10);
    std::set<std::size_t> u(masks[0].begin(), masks[0].end());
    for (auto i : masks[1]) CHECK(u.count(i) == 0);

    GroundTruth bg;
    bg.point_ids.assign(7, -1);
    CHECK(gt_masks(bg).empty());
}

TEST_CASE("impossible placement reports an error") {
    SceneSpec spec = bare_spec(SceneSetup::Z, 8, 1);
    spec.plane_extent = 0.6;
    spec.scale = {0.25, 0.25};
    try {
        generate(spec);
        FAIL("expected PlacementFailed");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::PlacementFailed);
        CHECK(std::string(e.what()).find("seed 1") != std::string::npos);
    }
}

TEST_CASE("distractors are labeled background") {
    SceneSpec spec = bare_spec(SceneSetup::Z, 2, 4);
    spec.distractors = 2;
    const GeneratedScene sc = generate(spec);
    CHECK(sc.gt.distractors.size() == 2);
    CHECK(sc.gt.instances.size() == 2);
    // Distractor points are unlabeled since there is no background plane.
    std::size_t unlabeled = 0;
    for (int id : sc.gt.point_ids) unlabeled += id == -1;
    CHECK(unlabeled > 0);
    for (std::size_t i = 0; i < sc.cloud.size(); ++i) {
        if (sc.gt.point_ids[i] != -1) continue;
        double best = std::numeric_limits<double>::infinity();
        for (const auto& d : sc.gt.distractors) best = std::min(best, std::abs(d.sdf(sc.cloud.positions[i])));
        CHECK(best < 1e-6);
    }
}

TEST_CASE("scene spec and ground truth round trip through JSON") {
    SceneSpec spec;
    spec.setup = SceneSetup::Pile;
    spec.min_objects = 2;
    spec.max_objects = 4;
    spec.seed = 99;
    spec.single_view = true;
    const SceneSpec back = SceneSpec::from_json(spec.to_json());
    CHECK(back.to_json() == spec.to_json());
    CHECK_THROWS_AS(SceneSpec::from_json(nlohmann::json{{"setup", "Tree"}}), Error);
    CHECK_THROWS_AS(SceneSpec::from_json(nlohmann::json{{"n_objects", {3, 1}}}), Error);

    const GeneratedScene sc = generate(spec);
    const GroundTruth gt = GroundTruth::from_json(nlohmann::json::parse(sc.gt.to_json().dump()));
    CHECK(gt.point_ids == sc.gt.point_ids);
    REQUIRE(gt.instances.size() == sc.gt.instances.size());
    for (std::size_t k = 0; k < gt.instances.size(); ++k) {
        const Vec3 x(0.1, -0.2, 0.3);
        CHECK(gt.instances[k].sdf(x) == doctest::Approx(sc.gt.instances[k].sdf(x)).epsilon(1e-12));
    }
}

TEST_CASE("single view drops back-facing points") {
    SceneSpec spec = bare_spec(SceneSetup::SO3, 1, 2);
    const std::size_t full = generate(spec).cloud.size();
    spec.single_view = true;
    const std::size_t half = generate(spec).cloud.size();
    CHECK(half < full);
    CHECK(half > full / 5);
}
