#include "efem/report.hpp"

#include <chrono>
#include <ctime>

#include "efem/error.hpp"
#include "efem/io.hpp"
#include "efem/scenegen.hpp"

namespace efem {

std::string scene_id(const std::filesystem::path& path) {
    const std::string name = path.filename().string();
    return name.substr(0, name.find('.'));
}

nlohmann::json segmentation_report(const Segmentation& seg, const std::string& scene, const std::string& method,
                                   const std::vector<std::string>& mesh_files) {
    nlohmann::json instances = nlohmann::json::array();
    for (std::size_t k = 0; k < seg.instances.size(); ++k) {
        const Instance& inst = seg.instances[k];
        nlohmann::json j;
        j["proposal"] = inst.proposal;
        j["point_indices"] = inst.point_indices;
        j["confidence"] = inst.confidence;
        j["s1"] = inst.s1;
        j["s2"] = inst.s2;
        j["pose"] = inst.pose ? sim3_to_json(*inst.pose) : nlohmann::json(nullptr);
        j["theta_c"] = {inst.code.theta_c.x(), inst.code.theta_c.y(), inst.code.theta_c.z()};
        j["theta_s"] = inst.code.theta_s;
        j["mesh_file"] = k < mesh_files.size() ? nlohmann::json(mesh_files[k]) : nlohmann::json(nullptr);
        instances.push_back(std::move(j));
    }
    const Diagnostics& d = seg.diagnostics;
    return {{"scene", scene},
            {"method", method},
            {"instances", instances},
            {"diagnostics",
             {{"iterations", d.iterations},
              {"proposals_spawned", d.proposals_spawned},
              {"terminated", d.terminated},
              {"merged", d.merged},
              {"filtered", d.filtered},
              {"instances", seg.instances.size()}}}};
}

std::vector<Prediction> predictions_from_report(const nlohmann::json& report) {
    std::vector<Prediction> out;
    try {
        for (const auto& inst : report.at("instances")) {
            Prediction p;
            p.points = inst.at("point_indices").get<IndexSet>();
            std::sort(p.points.begin(), p.points.end());
            p.confidence = inst.at("confidence").get<double>();
            out.push_back(std::move(p));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Config, std::string("malformed report: ") + e.what());
    }
    return out;
}

nlohmann::json read_json(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Config, path.string() + ": invalid JSON: " + e.what());
    }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    write_file_atomic(path, j.dump(2) + "\n");
}

nlohmann::json RunManifest::to_json() const {
    return {{"command", command}, {"config", config},     {"seed", seed},       {"version", version},
            {"started", started}, {"finished", finished}, {"status", status}, {"outputs", outputs}};
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace efem
