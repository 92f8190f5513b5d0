#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "efem/engine.hpp"
#include "efem/evalkit.hpp"

namespace efem {

/// Scene id of a file: its name up to the first '.'.
std::string scene_id(const std::filesystem::path& path);

/// Engine report: instances (point indices, scores, pose, mesh file) and
/// diagnostics. `mesh_files` is aligned with seg.instances (may be empty).
nlohmann::json segmentation_report(const Segmentation& seg, const std::string& scene, const std::string& method,
                                   const std::vector<std::string>& mesh_files);

/// Predictions from a report written by segmentation_report.
std::vector<Prediction> predictions_from_report(const nlohmann::json& report);

nlohmann::json read_json(const std::filesystem::path& path);

/// Pretty-printed with a trailing newline, written atomically.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

/// Command, resolved config, seed, version, timestamps and outputs.
struct RunManifest {
    std::string command;
    nlohmann::json config;
    std::uint64_t seed = 0;
    std::string version;
    std::string started;
    std::string finished;
    std::string status = "running";
    std::vector<std::string> outputs;

    nlohmann::json to_json() const;
};

/// Current UTC time in ISO 8601.
std::string utc_timestamp();

}  // namespace efem
