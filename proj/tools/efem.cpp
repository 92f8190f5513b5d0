#include <glob.h>

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "efem/checkpoint.hpp"
#include "efem/engine.hpp"
#include "efem/error.hpp"
#include "efem/evalkit.hpp"
#include "efem/io.hpp"
#include "efem/report.hpp"
#include "efem/scenegen.hpp"
#include "efem/training.hpp"

#ifndef EFEM_VERSION
#define EFEM_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace efem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUser = 2;
constexpr int kExitNumeric = 3;

struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    int workers = 1;
    std::string out = ".";
};

void setup_logging() {
    spdlog::set_default_logger(spdlog::stderr_color_mt("efem"));
    spdlog::set_pattern("[%l] %v");
    const char* env = std::getenv("EFEM_LOG");
    const std::string level = env ? env : "info";
    if (level == "error") {
        spdlog::set_level(spdlog::level::err);
    } else if (level == "debug") {
        spdlog::set_level(spdlog::level::debug);
    } else {
        spdlog::set_level(spdlog::level::info);
        if (level != "info") spdlog::warn("EFEM_LOG='{}' not recognized, using info", level);
    }
}

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    if (!fs::exists(path)) throw Error(ErrorCode::Io, "config file not found: " + path);
    return read_json(path);
}

std::vector<std::string> expand_glob(const std::string& pattern) {
    glob_t g{};
    std::vector<std::string> out;
    if (::glob(pattern.c_str(), 0, nullptr, &g) == 0) {
        for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
    }
    globfree(&g);
    return out;
}

// Written once before the work starts and again when it ends.
class ManifestFile {
public:
    ManifestFile(fs::path path, std::string command, json config, std::uint64_t seed) : path_(std::move(path)) {
        m_.command = std::move(command);
        m_.config = std::move(config);
        m_.seed = seed;
        m_.version = EFEM_VERSION;
        m_.started = utc_timestamp();
        write_json(path_, m_.to_json());
    }

    void add_output(const fs::path& p) { m_.outputs.push_back(p.string()); }

    void finish() {
        m_.status = "ok";
        m_.finished = utc_timestamp();
        write_json(path_, m_.to_json());
    }

private:
    fs::path path_;
    RunManifest m_;
};

std::string fixed(double v, int digits) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

// ---- train ----

struct TrainOptions {
    std::optional<int> steps;
};

int cmd_train(const CommonOptions& common, const TrainOptions& opt) {
    TrainConfig cfg = TrainConfig::from_json(load_config(common.config));
    if (opt.steps) cfg.steps = *opt.steps;
    if (common.seed) cfg.seed = *common.seed;
    cfg.validate();

    const fs::path out = common.out;
    fs::create_directories(out);
    ManifestFile manifest(out / "train.manifest.json", "train", cfg.to_json(), cfg.seed);

    spdlog::info("training {} steps (seed {})", cfg.steps, cfg.seed);
    const int every = std::max(1, cfg.steps / 20);
    TrainResult result = train(cfg, [&](const LossRecord& r) {
        if ((r.step + 1) % every == 0) spdlog::info("step {:>5}  loss {:.6f}  smoothed {:.6f}", r.step + 1, r.loss, r.smoothed);
        spdlog::debug("step {} loss {} mse {}", r.step + 1, r.loss, r.mse);
    });

    save_checkpoint(out / "prior.ckpt", *result.prior);
    save_library(out / "library.ckpt", result.library);

    std::ostringstream csv;
    csv << "step,loss,mse,smoothed\n" << std::setprecision(9);
    for (const auto& r : result.curve) csv << r.step << ',' << r.loss << ',' << r.mse << ',' << r.smoothed << '\n';
    write_file_atomic(out / "loss.csv", csv.str());

    const json summary = {{"steps", cfg.steps},
                          {"heldout_mae", result.heldout_mae},
                          {"final_loss", result.curve.empty() ? json(nullptr) : json(result.curve.back().loss)},
                          {"divergence_flagged", result.divergence_flagged},
                          {"library_size", result.library.size()}};
    write_json(out / "summary.json", summary);

    for (const char* name : {"prior.ckpt", "library.ckpt", "loss.csv", "summary.json"}) manifest.add_output(out / name);
    manifest.finish();
    std::cout << "held-out mean |SDF error|: " << fixed(result.heldout_mae, 5) << '\n';
    return kExitOk;
}

// ---- synth ----

struct SynthOptions {
    int count = 1;
    std::string setup;
};

int cmd_synth(const CommonOptions& common, const SynthOptions& opt) {
    SceneSpec spec = SceneSpec::from_json(load_config(common.config));
    if (!opt.setup.empty()) spec.setup = scene_setup_from_string(opt.setup);
    if (common.seed) spec.seed = *common.seed;
    if (opt.count < 1) throw Error(ErrorCode::Config, "--count must be >= 1");
    spec.validate();

    const fs::path out = common.out;
    fs::create_directories(out);
    ManifestFile manifest(out / "synth.manifest.json", "synth", spec.to_json(), spec.seed);

    for (int i = 0; i < opt.count; ++i) {
        SceneSpec s = spec;
        s.seed = spec.seed + static_cast<std::uint64_t>(i);
        GeneratedScene scene;
        try {
            scene = generate(s);
        } catch (const Error& e) {
            throw Error(e.code(), "scene " + std::to_string(i) + ": " + e.what());
        }
        std::ostringstream name;
        name << "scene_" << std::setw(4) << std::setfill('0') << i;
        const fs::path ply = out / (name.str() + ".ply");
        const fs::path gt = out / (name.str() + ".gt.json");
        write_ply(ply, scene.cloud);
        json j = scene.gt.to_json();
        j["setup"] = to_string(s.setup);
        j["seed"] = s.seed;
        write_json(gt, j);
        manifest.add_output(ply);
        manifest.add_output(gt);
        spdlog::debug("{}: {} points, {} instances", name.str(), scene.cloud.size(), scene.gt.instance_count());
    }
    manifest.finish();
    spdlog::info("wrote {} scene(s) to {}", opt.count, out.string());
    return kExitOk;
}

// ---- segment ----

struct SegmentOptions {
    std::vector<std::string> scenes;
    std::string prior = "oracle:sphere";
    std::string library;
    std::string method;
    bool no_phase2 = false;
    bool no_normals = false;
    bool disjoint_masks = false;
    bool meshes = true;
};

std::string method_label(const EngineConfig& cfg) {
    if (!cfg.use_phase2 && !cfg.use_normals) return "no-phase2-no-normals";
    if (!cfg.use_phase2) return "no-phase2";
    if (!cfg.use_normals) return "no-normals";
    return "full";
}

int cmd_segment(const CommonOptions& common, const SegmentOptions& opt) {
    EngineConfig cfg = EngineConfig::from_json(load_config(common.config));
    if (common.seed) cfg.seed = *common.seed;
    cfg.workers = common.workers;
    if (opt.no_phase2) cfg.use_phase2 = false;
    if (opt.no_normals) cfg.use_normals = false;
    if (opt.disjoint_masks) cfg.disjoint_masks = true;
    cfg.validate();

    const auto prior = load_prior(opt.prior);
    std::optional<LatentLibrary> library;
    if (!opt.library.empty()) {
        if (!fs::exists(opt.library)) throw Error(ErrorCode::Io, "library not found: " + opt.library);
        library = load_library(opt.library);
    }
    const std::string method = opt.method.empty() ? method_label(cfg) : opt.method;

    // Read every scene up front so a bad input fails before any output.
    std::vector<ScenePointCloud> clouds;
    for (const auto& path : opt.scenes) clouds.push_back(read_ply(path));

    const fs::path out = common.out;
    fs::create_directories(out);
    json snapshot = cfg.to_json();
    snapshot["prior"] = opt.prior;
    snapshot["library"] = opt.library.empty() ? json(nullptr) : json(opt.library);
    snapshot["method"] = method;
    ManifestFile manifest(out / "segment.manifest.json", "segment", snapshot, cfg.seed);

    for (std::size_t s = 0; s < clouds.size(); ++s) {
        const std::string id = scene_id(opt.scenes[s]);
        const Segmentation seg = run(clouds[s], *prior, library ? &*library : nullptr, cfg);
        std::vector<std::string> meshes;
        if (opt.meshes) {
            for (std::size_t k = 0; k < seg.instances.size(); ++k) {
                const std::string name = id + ".inst" + std::to_string(k) + ".obj";
                write_obj(out / name, seg.instances[k].mesh);
                manifest.add_output(out / name);
                meshes.push_back(name);
            }
        }
        const fs::path report = out / (id + ".report.json");
        write_json(report, segmentation_report(seg, id, method, meshes));
        manifest.add_output(report);
        spdlog::info("{}: {} instance(s) after {} iterations", id, seg.instances.size(), seg.diagnostics.iterations);
    }
    manifest.finish();
    return kExitOk;
}

// ---- eval ----

struct EvalOptions {
    std::string reports;
    std::string gt;
};

struct GtEntry {
    std::string setup;
    std::vector<IndexSet> masks;
};

std::string percent(double v) { return std::isnan(v) ? "-" : fixed(100.0 * v, 1); }

json nan_to_null(double v) { return std::isnan(v) ? json(nullptr) : json(v); }

// Rows are methods; each setup gets an AP / AP50 / AP25 column group.
std::string results_table(const std::vector<std::string>& setups, const std::vector<std::string>& methods,
                          const std::map<std::pair<std::string, std::string>, APReport>& cells) {
    std::size_t mw = std::string("Method").size();
    for (const auto& m : methods) mw = std::max(mw, m.size());
    constexpr int cw = 6;
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(mw)) << "" << " ";
    for (const auto& s : setups) os << " | " << std::left << std::setw(3 * cw + 2) << s;
    os << '\n' << std::left << std::setw(static_cast<int>(mw)) << "Method" << " ";
    for (std::size_t i = 0; i < setups.size(); ++i)
        os << " | " << std::right << std::setw(cw) << "AP" << ' ' << std::setw(cw) << "AP50" << ' ' << std::setw(cw)
           << "AP25";
    os << '\n' << std::string(mw + 1 + setups.size() * (3 * cw + 5), '-') << '\n';
    for (const auto& m : methods) {
        os << std::left << std::setw(static_cast<int>(mw)) << m << " ";
        for (const auto& s : setups) {
            const auto it = cells.find({s, m});
            os << " | " << std::right;
            if (it == cells.end()) {
                os << std::setw(cw) << "-" << ' ' << std::setw(cw) << "-" << ' ' << std::setw(cw) << "-";
            } else {
                os << std::setw(cw) << percent(it->second.ap) << ' ' << std::setw(cw) << percent(it->second.ap50)
                   << ' ' << std::setw(cw) << percent(it->second.ap25);
            }
        }
        os << '\n';
    }
    return os.str();
}

int cmd_eval(const CommonOptions& common, const EvalOptions& opt) {
    const auto report_paths = expand_glob(opt.reports);
    if (report_paths.empty()) throw Error(ErrorCode::Config, "no reports match '" + opt.reports + "'");
    const auto gt_paths = expand_glob(opt.gt);
    if (gt_paths.empty()) throw Error(ErrorCode::Config, "no ground-truth files match '" + opt.gt + "'");

    std::map<std::string, GtEntry> gts;
    for (const auto& path : gt_paths) {
        const json j = read_json(path);
        const std::string id = scene_id(path);
        if (gts.count(id)) throw Error(ErrorCode::Config, "duplicate ground truth for scene '" + id + "'");
        gts[id] = {j.value("setup", std::string("scene")), gt_masks(GroundTruth::from_json(j))};
    }

    std::map<std::string, std::map<std::string, std::vector<Prediction>>> by_method;
    for (const auto& path : report_paths) {
        const json j = read_json(path);
        const std::string id = j.value("scene", scene_id(path));
        const std::string method = j.value("method", std::string("full"));
        auto& scenes = by_method[method];
        if (scenes.count(id)) throw Error(ErrorCode::Config, "duplicate report for scene '" + id + "' (" + method + ")");
        scenes[id] = predictions_from_report(j);
    }

    std::set<std::string> unmatched;
    for (const auto& [method, scenes] : by_method) {
        for (const auto& [id, preds] : scenes)
            if (!gts.count(id)) unmatched.insert(id);
        for (const auto& [id, gt] : gts)
            if (!scenes.count(id)) unmatched.insert(id);
    }
    if (!unmatched.empty()) {
        std::string list;
        for (const auto& id : unmatched) list += (list.empty() ? "" : ", ") + id;
        throw Error(ErrorCode::Config, "unmatched scene ids: " + list);
    }

    std::vector<std::string> setups;
    for (const char* s : {"Z", "SO3", "Pile"}) {
        for (const auto& [id, gt] : gts)
            if (gt.setup == s) {
                setups.push_back(s);
                break;
            }
    }
    for (const auto& [id, gt] : gts)
        if (std::find(setups.begin(), setups.end(), gt.setup) == setups.end()) setups.push_back(gt.setup);
    std::vector<std::string> methods;
    for (const char* m : {"full", "no-phase2", "no-normals", "no-phase2-no-normals"})
        if (by_method.count(m)) methods.push_back(m);
    for (const auto& [m, scenes] : by_method)
        if (std::find(methods.begin(), methods.end(), m) == methods.end()) methods.push_back(m);

    std::map<std::pair<std::string, std::string>, APReport> cells;
    json results = json::array();
    json per_scene = json::array();
    for (const auto& setup : setups) {
        for (const auto& method : methods) {
            std::vector<SceneEval> evals;
            for (const auto& [id, gt] : gts) {
                if (gt.setup != setup) continue;
                SceneEval e{by_method[method][id], gt.masks};
                const APReport r = evaluate(e.predictions, e.ground_truth);
                per_scene.push_back({{"scene", id},
                                     {"setup", setup},
                                     {"method", method},
                                     {"ap", nan_to_null(r.ap)},
                                     {"ap50", nan_to_null(r.ap50)},
                                     {"ap25", nan_to_null(r.ap25)}});
                evals.push_back(std::move(e));
            }
            const APReport report = evaluate(evals);
            json entry = report.to_json();
            entry["setup"] = setup;
            entry["method"] = method;
            results.push_back(std::move(entry));
            cells[{setup, method}] = report;
        }
    }

    const fs::path out = common.out;
    fs::create_directories(out);
    write_json(out / "results.json", {{"setups", setups}, {"methods", methods}, {"results", results}, {"scenes", per_scene}});
    const std::string table = results_table(setups, methods, cells);
    write_file_atomic(out / "results.txt", table);
    std::cout << table;
    return kExitOk;
}

// ---- inspect ----

int cmd_inspect(const std::string& path) {
    if (!fs::exists(path)) throw Error(ErrorCode::Io, "file not found: " + path);
    const json header = inspect_container(path);
    const std::string section = header.value("section", std::string("?"));
    std::cout << "section: " << section << '\n';
    if (section == "NETWORK") {
        const auto& t = header.at("topology");
        std::cout << "topology: " << t.dump() << '\n';
        std::size_t params = 0;
        for (const auto& layer : header.value("layers", json::array())) {
            params += layer.value("rows", std::size_t{0}) * layer.value("cols", std::size_t{0});
        }
        std::cout << "parameters: " << params << '\n';
    } else if (section == "LIBRARY") {
        std::cout << "library entries: " << header.value("count", 0) << '\n';
    }
    std::cout << "payload bytes: " << header.value("payload_bytes", 0) << '\n';
    spdlog::debug("header: {}", header.dump());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    setup_logging();

    CLI::App app{"Unsupervised 3D instance segmentation with an equivariant shape prior"};
    app.set_version_flag("--version", std::string(EFEM_VERSION));
    app.require_subcommand(1);

    CommonOptions common;
    auto add_common = [&](CLI::App* sub, bool seed, bool workers) {
        sub->add_option("--config", common.config, "JSON config file");
        sub->add_option("--out", common.out, "Output directory");
        if (seed) sub->add_option("--seed", common.seed, "Random seed (overrides the config)");
        if (workers) sub->add_option("--workers", common.workers, "Worker threads")->check(CLI::PositiveNumber);
    };

    TrainOptions train_opt;
    auto* train_cmd = app.add_subcommand("train", "Train the learned shape prior");
    add_common(train_cmd, true, false);
    train_cmd->add_option("--steps", train_opt.steps, "Optimizer steps (overrides the config)")->check(CLI::NonNegativeNumber);

    SynthOptions synth_opt;
    auto* synth_cmd = app.add_subcommand("synth", "Generate synthetic scenes with ground truth");
    add_common(synth_cmd, true, false);
    synth_cmd->add_option("--count", synth_opt.count, "Number of scenes");
    synth_cmd->add_option("--setup", synth_opt.setup, "Z, SO3 or Pile (overrides the config)");

    SegmentOptions seg_opt;
    auto* seg_cmd = app.add_subcommand("segment", "Segment point cloud scenes");
    add_common(seg_cmd, true, true);
    seg_cmd->add_option("scenes", seg_opt.scenes, "Scene PLY files with normals")->required();
    seg_cmd->add_option("--prior", seg_opt.prior, "oracle:sphere or a checkpoint path");
    seg_cmd->add_option("--library", seg_opt.library, "Latent library for pose estimation");
    seg_cmd->add_option("--method", seg_opt.method, "Method label written to reports");
    seg_cmd->add_flag("--no-phase2", seg_opt.no_phase2, "Skip the joint phase");
    seg_cmd->add_flag("--no-normals", seg_opt.no_normals, "Ignore normals in the fitting error");
    seg_cmd->add_flag("--disjoint-masks", seg_opt.disjoint_masks, "Assign contested points to one instance");
    seg_cmd->add_flag("!--no-meshes", seg_opt.meshes, "Do not write instance meshes");

    EvalOptions eval_opt;
    auto* eval_cmd = app.add_subcommand("eval", "Score reports against ground truth");
    add_common(eval_cmd, false, true);
    eval_cmd->add_option("--reports", eval_opt.reports, "Glob of *.report.json files")->required();
    eval_cmd->add_option("--gt", eval_opt.gt, "Glob of *.gt.json files")->required();

    std::string inspect_path;
    auto* inspect_cmd = app.add_subcommand("inspect", "Describe a checkpoint or library file");
    inspect_cmd->add_option("path", inspect_path, "Container file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUser;
    }

    try {
        if (*train_cmd) return cmd_train(common, train_opt);
        if (*synth_cmd) return cmd_synth(common, synth_opt);
        if (*seg_cmd) return cmd_segment(common, seg_opt);
        if (*eval_cmd) return cmd_eval(common, eval_opt);
        if (*inspect_cmd) return cmd_inspect(inspect_path);
    } catch (const Error& e) {
        spdlog::error("{}", e.what());
        return e.code() == ErrorCode::Numeric ? kExitNumeric : kExitUser;
    } catch (const json::exception& e) {
        spdlog::error("invalid JSON: {}", e.what());
        return kExitUser;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return kExitUser;
}
