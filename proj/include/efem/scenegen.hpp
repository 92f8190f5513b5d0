#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "efem/geometry.hpp"
#include "efem/shapes.hpp"

namespace efem {

enum class SceneSetup { Z, SO3, Pile };

const char* to_string(SceneSetup setup);
SceneSetup scene_setup_from_string(const std::string& name);

struct SceneSpec {
    SceneSetup setup = SceneSetup::Z;
    int min_objects = 3;
    int max_objects = 8;
    FamilyConfig family;            // canonical shapes, rescaled by `scale`
    Range scale{0.15, 0.25};        // object bounding radius in scene units
    bool background = true;
    double plane_extent = 2.5;      // square table side length
    double plane_density = 750.0;   // background points per unit area
    int points_per_object = 400;
    int distractors = 0;
    FamilyConfig distractor_family = [] {
        FamilyConfig f;
        f.kinds = {ShapeKind::Cone};
        return f;
    }();
    double noise_sigma = 0.002;
    double clearance = 0.02;         // Z and SO3 surface gap
    double pile_penetration = 0.1;   // Pile overlap budget, fraction of the smallest scale
    double pile_extent = 0.8;        // Pile drop area half-width
    bool single_view = false;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static SceneSpec from_json(const nlohmann::json& j);
};

struct PlacedShape {
    ProceduralShape shape;  // canonical
    Sim3 pose;              // canonical -> scene

    double sdf(const Vec3& x) const;
};

struct GroundTruth {
    std::vector<int> point_ids;  // instance id per point, -1 for background and distractors
    std::vector<PlacedShape> instances;
    std::vector<PlacedShape> distractors;

    std::size_t instance_count() const { return instances.size(); }
    void validate(std::size_t points) const;
    nlohmann::json to_json() const;
    static GroundTruth from_json(const nlohmann::json& j);
};

struct GeneratedScene {
    ScenePointCloud cloud;
    GroundTruth gt;
};

/// Throws PlacementFailed when an object cannot be placed.
GeneratedScene generate(const SceneSpec& spec);

/// One sorted index mask per instance id.
std::vector<std::vector<std::size_t>> gt_masks(const GroundTruth& gt);

nlohmann::json sim3_to_json(const Sim3& g);
Sim3 sim3_from_json(const nlohmann::json& j);

}  // namespace efem
