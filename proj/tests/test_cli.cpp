#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <string>

#include "efem/evalkit.hpp"
#include "efem/io.hpp"
#include "efem/report.hpp"
#include "efem/scenegen.hpp"
#include "efem/training.hpp"
#include "helpers.hpp"

using namespace efem;
namespace fs = std::filesystem;

namespace {

int efem_cli(const std::string& args) {
    const std::string cmd = std::string("EFEM_LOG=error '") + EFEM_CLI_PATH + "' " + args + " > /dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

// Small synthetic dataset of three-sphere Z scenes.
void synth(const fs::path& dir, int count, std::uint64_t seed, const std::string& setup = "Z") {
    write_text(dir / "spec.json", nlohmann::json{{"n_objects", {3, 3}}}.dump());
    REQUIRE(efem_cli("synth --config " + q(dir / "spec.json") + " --count " + std::to_string(count) + " --seed " +
                     std::to_string(seed) + " --setup " + setup + " --out " + q(dir)) == 0);
}

}  // namespace

TEST_CASE("user errors exit with code 2") {
    efem::test::TempDir dir("cli_err");
    const fs::path d = dir.path();
    write_text(d / "bad.json", "{ not json");
    CHECK(efem_cli("synth --config " + q(d / "bad.json") + " --out " + q(d)) == 2);
    CHECK(efem_cli("synth --config " + q(d / "missing.json") + " --out " + q(d)) == 2);
    CHECK(efem_cli("frobnicate") == 2);

    synth(d, 1, 5);
    const fs::path scene = d / "scene_0000.ply";
    CHECK(efem_cli("segment " + q(scene) + " --prior " + q(d / "nope.ckpt") + " --out " + q(d)) == 2);
    CHECK(efem_cli("eval --reports " + q(d / "*.report.json") + " --gt " + q(d / "*.gt.json") + " --out " + q(d)) == 2);

    // A scene without normals.
    write_text(d / "bare.ply",
               "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\n"
               "end_header\n0 0 0\n1 0 0\n");
    CHECK(efem_cli("segment " + q(d / "bare.ply") + " --out " + q(d)) == 2);

    // A report whose scene has no ground truth.
    REQUIRE(efem_cli("segment " + q(scene) + " --no-meshes --out " + q(d)) == 0);
    fs::copy_file(d / "scene_0000.gt.json", d / "other.gt.json");
    CHECK(efem_cli("eval --reports " + q(d / "*.report.json") + " --gt " + q(d / "*.gt.json") + " --out " + q(d)) == 2);
}

TEST_CASE("train writes a usable checkpoint") {
    efem::test::TempDir dir("cli_train");
    const fs::path d = dir.path();
    TrainConfig c;
    c.family.kinds = {ShapeKind::Sphere};
    c.net.n_o = 64;
    c.net.hidden = {8, 8};
    c.net.theta_r_channels = 4;
    c.net.inv_channels = 2;
    c.net.decoder_hidden = {16, 16};
    c.batch_shapes = 2;
    c.queries_per_shape = 256;
    c.library_size = 3;
    c.heldout_shapes = 2;
    write_text(d / "train.json", c.to_json().dump());
    REQUIRE(efem_cli("train --config " + q(d / "train.json") + " --steps 3 --out " + q(d)) == 0);
    for (const char* f : {"prior.ckpt", "library.ckpt", "loss.csv", "summary.json", "train.manifest.json"})
        CHECK(fs::exists(d / f));
    CHECK(read_json(d / "train.manifest.json").at("status") == "ok");
    CHECK(efem_cli("inspect " + q(d / "prior.ckpt")) == 0);
    CHECK(efem_cli("inspect " + q(d / "library.ckpt")) == 0);

    const fs::path out = d / "seg";
    synth(d, 1, 2);
    CHECK(efem_cli("segment " + q(d / "scene_0000.ply") + " --prior " + q(d / "prior.ckpt") + " --library " +
                   q(d / "library.ckpt") + " --out " + q(out)) == 0);
    CHECK(fs::exists(out / "scene_0000.report.json"));
}

TEST_CASE("synth is deterministic") {
    efem::test::TempDir a("cli_sa"), b("cli_sb");
    synth(a.path(), 2, 9, "Pile");
    synth(b.path(), 2, 9, "Pile");
    for (const char* f : {"scene_0000.ply", "scene_0001.ply", "scene_0000.gt.json", "scene_0001.gt.json"}) {
        CHECK(slurp(a.path() / f) == slurp(b.path() / f));
    }
    CHECK(slurp(a.path() / "scene_0000.ply") != slurp(a.path() / "scene_0001.ply"));
    CHECK(read_json(a.path() / "scene_0000.gt.json").at("setup") == "Pile");
}

TEST_CASE("segment reports are identical across worker counts") {
    efem::test::TempDir dir("cli_seg");
    const fs::path d = dir.path();
    synth(d, 1, 4);
    const std::string scene = q(d / "scene_0000.ply");
    REQUIRE(efem_cli("segment " + scene + " --seed 3 --workers 1 --out " + q(d / "w1")) == 0);
    REQUIRE(efem_cli("segment " + scene + " --seed 3 --workers 4 --out " + q(d / "w4")) == 0);
    REQUIRE(efem_cli("segment " + scene + " --seed 3 --workers 1 --out " + q(d / "again")) == 0);
    const std::string r1 = slurp(d / "w1" / "scene_0000.report.json");
    CHECK(r1 == slurp(d / "w4" / "scene_0000.report.json"));
    CHECK(r1 == slurp(d / "again" / "scene_0000.report.json"));

    const nlohmann::json report = nlohmann::json::parse(r1);
    CHECK(report.at("method") == "full");
    CHECK(report.at("instances").size() == 3);
    for (const auto& inst : report.at("instances")) {
        CHECK(fs::exists(d / "w1" / inst.at("mesh_file").get<std::string>()));
    }
    CHECK(read_json(d / "w1" / "segment.manifest.json").at("status") == "ok");

    REQUIRE(efem_cli("segment " + scene + " --no-phase2 --no-normals --no-meshes --out " + q(d / "abl")) == 0);
    CHECK(read_json(d / "abl" / "scene_0000.report.json").at("method") == "no-phase2-no-normals");
}

TEST_CASE("eval scores a perfect report as 1") {
    efem::test::TempDir dir("cli_perfect");
    const fs::path d = dir.path();
    synth(d, 2, 6);
    for (int i = 0; i < 2; ++i) {
        const std::string id = "scene_000" + std::to_string(i);
        const GroundTruth gt = GroundTruth::from_json(read_json(d / (id + ".gt.json")));
        Segmentation seg;
        for (const auto& m : gt_masks(gt)) {
            Instance inst;
            inst.point_indices = m;
            inst.confidence = 1.0;
            inst.code = SphereOracle::make_code(Vec3::Zero(), 1.0);
            seg.instances.push_back(inst);
        }
        write_json(d / (id + ".report.json"), segmentation_report(seg, id, "full", {}));
    }
    REQUIRE(efem_cli("eval --reports " + q(d / "*.report.json") + " --gt " + q(d / "*.gt.json") + " --out " + q(d)) ==
            0);
    const nlohmann::json res = read_json(d / "results.json");
    REQUIRE(res.at("results").size() == 1);
    const auto& r = res.at("results")[0];
    CHECK(r.at("setup") == "Z");
    CHECK(r.at("ap").get<double>() == 1.0);
    CHECK(r.at("ap50").get<double>() == 1.0);
    CHECK(r.at("ap25").get<double>() == 1.0);
    CHECK(slurp(d / "results.txt").find("100.0") != std::string::npos);
}

TEST_CASE("eval matches the library evaluator") {
    efem::test::TempDir dir("cli_eval");
    const fs::path d = dir.path();
    synth(d, 10, 30, "SO3");
    std::string scenes;
    for (int i = 0; i < 10; ++i) scenes += q(d / ("scene_000" + std::to_string(i) + ".ply")) + " ";
    REQUIRE(efem_cli("segment " + scenes + "--no-meshes --out " + q(d / "seg_full")) == 0);
    REQUIRE(efem_cli("segment " + scenes + "--no-meshes --no-normals --out " + q(d / "seg_nn")) == 0);
    REQUIRE(efem_cli("eval --reports " + q(d / "seg_*" / "*.report.json") + " --gt " + q(d / "*.gt.json") +
                     " --out " + q(d)) == 0);

    const nlohmann::json res = read_json(d / "results.json");
    CHECK(res.at("methods") == nlohmann::json{"full", "no-normals"});
    for (const auto& entry : res.at("results")) {
        const std::string method = entry.at("method");
        std::vector<SceneEval> evals;
        for (int i = 0; i < 10; ++i) {
            const std::string id = "scene_000" + std::to_string(i);
            const fs::path sub = method == "full" ? "seg_full" : "seg_nn";
            evals.push_back({predictions_from_report(read_json(d / sub / (id + ".report.json"))),
                             gt_masks(GroundTruth::from_json(read_json(d / (id + ".gt.json"))))});
        }
        REQUIRE(evals.size() == 10);
        const APReport expected = evaluate(evals);
        CHECK(entry.at("ap").get<double>() == expected.ap);
        CHECK(entry.at("ap50").get<double>() == expected.ap50);
        CHECK(entry.at("ap25").get<double>() == expected.ap25);
    }
}
