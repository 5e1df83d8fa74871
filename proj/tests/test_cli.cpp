// End-to-end tests of the command-line binary: subcommand round trips,
// output file formats, config handling, and exit codes.

#include <catch2/catch_amalgamated.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ccn/contrastive.hpp"

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(CCN_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string read_file(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

json read_json(const fs::path& p) { return json::parse(read_file(p)); }

struct TempDir {
    fs::path path;
    TempDir() : path(fs::temp_directory_path() / ("ccn_cli_" + std::to_string(std::rand()))) {
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& s) const { return (path / s).string(); }
};

// Shared tiny workload: 2 scenes x 2 views at 32x32.
std::string gen_args(const TempDir& d) {
    return "generate --out " + (d / "data") + " --scenes 2 --views 2 --objects 2 --image 32 --seed 7";
}

}  // namespace

TEST_CASE("generate writes a readable dataset with manifest and config") {
    TempDir d;
    REQUIRE(run_cli(gen_args(d)) == 0);

    auto records = ccn::read_dataset(d / "data/dataset.ccd1");
    CHECK(records.size() == 4);  // 2 scenes x 2 views
    CHECK(records[0].rgb.shape == std::vector<int64_t>{32, 32, 3});

    json manifest = read_json(d / "data/manifest.json");
    CHECK(manifest["scenes"] == 2);
    CHECK(manifest["views_per_scene"] == 2);
    CHECK(manifest["records"] == 4);

    json cfg = read_json(d / "data/config.json");
    CHECK(cfg["command"] == "generate");
    CHECK(cfg["seed"] == 7);

    // scenes.txt round-trips through the scene text format.
    std::ifstream st(d / "data/scenes.txt");
    std::string first_line;
    std::getline(st, first_line);
    CHECK((first_line.rfind("sphere ", 0) == 0 || first_line.rfind("box ", 0) == 0));
}

TEST_CASE("metrics reports carry name, value, n, and config hash") {
    TempDir d;
    REQUIRE(run_cli(gen_args(d)) == 0);
    json metrics = read_json(d / "data/metrics.json");
    REQUIRE(metrics.is_array());
    REQUIRE(metrics.size() == 1);
    CHECK(metrics[0]["metric"] == "dataset_records");
    CHECK(metrics[0]["value"] == 4.0);
    CHECK(metrics[0]["n"] == 4);
    const std::string hash = metrics[0]["config"].get<std::string>();
    CHECK(hash.size() == 16);
    CHECK(hash.find_first_not_of("0123456789abcdef") == std::string::npos);
}

TEST_CASE("train produces checkpoint, CSV log, and step count") {
    TempDir d;
    REQUIRE(run_cli(gen_args(d)) == 0);
    REQUIRE(run_cli("train --out " + (d / "run") + " --data " + (d / "data/dataset.ccd1") +
                    " --grid 8 --steps 2 --seed 7") == 0);

    // Checkpoint loads and reports the trained step count.
    ccn::ParameterStore store;
    store.load(d / "run/model.ccn1");
    CHECK(store.step_count == 2);

    std::ifstream log(d / "run/train_log.csv");
    std::string header;
    std::getline(log, header);
    CHECK(header == "step,l_nce,l_occ,l_rgb,wall_ms");
    int rows = 0;
    for (std::string line; std::getline(log, line) && !line.empty();) ++rows;
    CHECK(rows == 2);
}

TEST_CASE("train resumes from an existing checkpoint") {
    TempDir d;
    REQUIRE(run_cli(gen_args(d)) == 0);
    const std::string train = "train --out " + (d / "run") + " --data " + (d / "data/dataset.ccd1") +
                              " --grid 8 --seed 7 --steps ";
    REQUIRE(run_cli(train + "2") == 0);
    REQUIRE(run_cli(train + "4") == 0);  // continues 2 -> 4 against the same checkpoint
    ccn::ParameterStore store;
    store.load(d / "run/model.ccn1");
    CHECK(store.step_count == 4);
    std::ifstream log(d / "run/train_log.csv");
    int lines = 0;
    for (std::string line; std::getline(log, line) && !line.empty();) ++lines;
    CHECK(lines == 5);  // header + 4 appended rows
}

TEST_CASE("identical seeds give bitwise-identical checkpoints") {
    TempDir d;
    REQUIRE(run_cli(gen_args(d)) == 0);
    for (const char* run : {"a", "b"})
        REQUIRE(run_cli("train --out " + (d / run) + " --data " + (d / "data/dataset.ccd1") +
                        " --grid 8 --steps 2 --seed 7") == 0);
    CHECK(read_file(d / "a/model.ccn1") == read_file(d / "b/model.ccn1"));
}

TEST_CASE("eval subcommands emit their metric") {
    TempDir d;
    REQUIRE(run_cli(gen_args(d)) == 0);
    REQUIRE(run_cli("train --out " + (d / "run") + " --data " + (d / "data/dataset.ccd1") +
                    " --grid 8 --steps 1 --seed 7") == 0);
    const std::string common =
        " --checkpoint " + (d / "run/model.ccn1") + " --grid 8 --scenes 1 --objects 2 --image 32 --seed 7";

    SECTION("eval-occ") {
        REQUIRE(run_cli("eval-occ --out " + (d / "occ") + common + " --queries 100") == 0);
        json m = read_json(d / "occ/metrics.json");
        CHECK(m[0]["metric"] == "occupancy_iou");
        CHECK(m[0]["value"].get<double>() >= 0.0);
        CHECK(m[0]["value"].get<double>() <= 1.0);
    }
    SECTION("eval-track writes per-frame CSV") {
        REQUIRE(run_cli("eval-track --out " + (d / "tr") + common +
                        " --frames 3 --queries 50 --ransac-iters 50") == 0);
        json m = read_json(d / "tr/metrics.json");
        CHECK(m[0]["metric"] == "tracking_mean_iou");
        CHECK(m[0]["n"] == 2);  // 2 tracked frames after frame 0
        std::ifstream csv(d / "tr/tracking.csv");
        std::string header;
        std::getline(csv, header);
        CHECK(header == "sequence,frame,iou,occlusion,lost");
        int rows = 0;
        for (std::string line; std::getline(csv, line) && !line.empty();) ++rows;
        CHECK(rows == 2);
    }
    SECTION("eval-align writes per-trial CSV") {
        REQUIRE(run_cli("eval-align --out " + (d / "al") + common +
                        " --queries 50 --ransac-iters 50") == 0);
        json m = read_json(d / "al/metrics.json");
        CHECK(m[0]["metric"] == "alignment_rotation_accuracy_10deg");
        std::ifstream csv(d / "al/alignment.csv");
        std::string header;
        std::getline(csv, header);
        CHECK(header == "trial,rot_err_deg,trans_err,correct_10deg");
    }
}

TEST_CASE("render emits view, feature PCA, head slices, and a grid dump") {
    TempDir d;
    REQUIRE(run_cli("render --out " + (d / "r") + " --grid 8 --objects 2 --image 32 --seed 7") == 0);
    for (const char* name : {"view.ppm", "feat_pca.ppm", "occ_slice.ppm", "rgb_slice.ppm"}) {
        const std::string ppm = read_file(d / (std::string("r/") + name));
        CHECK(ppm.substr(0, 2) == "P6");
    }
    // view.ppm is 32x32, slices are 8x8.
    CHECK(read_file(d / "r/view.ppm").find("32 32") != std::string::npos);
    CHECK(read_file(d / "r/occ_slice.ppm").find("8 8") != std::string::npos);
    CHECK(fs::file_size(d / "r/grid.bin") > 0);
}

TEST_CASE("config file supplies defaults and explicit flags override it") {
    TempDir d;
    {
        std::ofstream f(d / "cfg.json");
        f << R"({"scenes": 1, "views": 2, "objects": 2, "image": 32, "seed": 99})";
    }
    REQUIRE(run_cli("generate --config " + (d / "cfg.json") + " --out " + (d / "data") + " --seed 7") == 0);
    json cfg = read_json(d / "data/config.json");
    CHECK(cfg["seed"] == 7);    // flag wins
    CHECK(cfg["scenes"] == 1);  // file wins where no flag was given
    CHECK(cfg["image"] == 32);
    auto records = ccn::read_dataset(d / "data/dataset.ccd1");
    CHECK(records.size() == 2);
}

TEST_CASE("failures exit non-zero") {
    TempDir d;
    CHECK(run_cli("train --out " + (d / "x") + " --data " + (d / "missing.ccd1")) != 0);
    CHECK(run_cli("generate --config " + (d / "missing.json") + " --out " + (d / "y")) != 0);
    CHECK(run_cli("not-a-subcommand") != 0);
    CHECK(run_cli("generate --no-such-flag") != 0);
}
