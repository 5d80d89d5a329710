// End-to-end checks of the command-line tool: each case drives the real
// binary through a pipeline stage (phantom -> simulate -> track -> evaluate /
// kinematics) in a scratch directory and inspects the files it writes.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "bonereg/evaluation.hpp"
#include "bonereg/phantom.hpp"
#include "bonereg/projector.hpp"
#include "bonereg/serialize.hpp"
#include "bonereg/volume.hpp"
#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

const fs::path& scratch() {
    static const fs::path root = [] {
        fs::path p = fs::temp_directory_path() / "bonereg_cli_scratch";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return root;
}

/// Runs the CLI with `args`, captures stdout/stderr, returns the exit code.
int run_cli(const std::string& args, std::string* out = nullptr, std::string* err = nullptr) {
    static int counter = 0;
    const fs::path o = scratch() / ("stdout_" + std::to_string(counter));
    const fs::path e = scratch() / ("stderr_" + std::to_string(counter));
    ++counter;
    const std::string cmd = std::string(BONEREG_CLI_PATH) + " " + args + " >" + o.string() +
                            " 2>" + e.string();
    const int rc = std::system(cmd.c_str());
    if (out) *out = slurp(o);
    if (err) *err = slurp(e);
    REQUIRE(WIFEXITED(rc));
    return WEXITSTATUS(rc);
}

/// Small detector + light search budgets so pipeline runs stay fast.
const fs::path& config_path() {
    static const fs::path path = [] {
        const fs::path p = scratch() / "small.json";
        std::ofstream out(p);
        out << R"({
  "geometry": {"nu": 128, "nv": 128, "pu": 2.4, "pv": 2.4},
  "registration": {
    "de": {"population": 10, "max_generations": 10},
    "hybrid": {"powell_max_iter": 3, "nelder_mead_max_iter": 40, "max_rounds": 1}
  },
  "evaluate": {"threshold_mm": 1.5}
})";
        return p;
    }();
    return path;
}

const fs::path& phantom_dir() {
    static const fs::path dir = [] {
        const fs::path p = scratch() / "phantom";
        REQUIRE(run_cli("phantom --out " + p.string()) == 0);
        return p;
    }();
    return dir;
}

const fs::path& frames_dir() {
    static const fs::path dir = [] {
        const fs::path p = scratch() / "frames";
        REQUIRE(run_cli("simulate --phantom " + phantom_dir().string() + " --out " + p.string() +
                        " --frames 3 --flexion-end 8 --config " + config_path().string()) == 0);
        return p;
    }();
    return dir;
}

const fs::path& track_dir() {
    static const fs::path dir = [] {
        const fs::path p = scratch() / "track";
        REQUIRE(run_cli("track --phantom " + phantom_dir().string() + " --frames " +
                        frames_dir().string() + " --bones femur,tibia_fibula --out " + p.string() +
                        " --config " + config_path().string() + " --seed 5") == 0);
        return p;
    }();
    return dir;
}

/// A track file whose poses are exactly the simulated ground truth.
fs::path exact_track_path() {
    static const fs::path path = [] {
        const json gt = json::parse(slurp(frames_dir() / "ground_truth.json"));
        json frames = json::array();
        for (const json& fj : gt.at("frames")) {
            json bones = json::array();
            for (const auto& [bone, pose] : fj.at("poses").items())
                bones.push_back(json{{"bone", bone},
                                     {"pose", pose},
                                     {"cost", 0.0},
                                     {"used_kpm", false},
                                     {"failed", false},
                                     {"message", ""},
                                     {"evals", 0},
                                     {"stages", json::array()}});
            frames.push_back(json{{"frame", fj.at("frame")}, {"flagged", false}, {"bones", bones}});
        }
        const fs::path p = scratch() / "exact_track.json";
        std::ofstream out(p);
        out << json{{"frames", frames}}.dump(2) << "\n";
        return p;
    }();
    return path;
}

}  // namespace

TEST_CASE("phantom command writes a loadable volume set") {
    const fs::path& dir = phantom_dir();
    const bonereg::Volume vol = bonereg::load_volume((dir / "volume.vol").string());
    CHECK(vol.dims[0] == 128);
    CHECK(vol.dims[2] == 128);
    const bonereg::BoneMask3D femur = bonereg::load_mask((dir / "femur.mask").string());
    CHECK(femur.count_true() > 0);
    const bonereg::KneeLandmarks lm =
        bonereg::load_landmarks((dir / "landmarks.json").string());
    CHECK(lm.condyle_radius == doctest::Approx(11.0));

    const json run = json::parse(slurp(dir / "run.json"));
    CHECK(run.at("command") == "phantom");
    CHECK(run.at("seed") == 0);
    CHECK(run.contains("config"));

    SUBCASE("regeneration is byte-identical") {
        const fs::path again = scratch() / "phantom_again";
        REQUIRE(run_cli("phantom --out " + again.string()) == 0);
        CHECK(slurp(dir / "volume.vol") == slurp(again / "volume.vol"));
        CHECK(slurp(dir / "femur.mask") == slurp(again / "femur.mask"));
    }

    SUBCASE("a grid below the supported size is a config error") {
        std::string err;
        CHECK(run_cli("phantom --dims 10 --out " + (scratch() / "phantom_bad").string(), nullptr,
                      &err) == 2);
        const json e = json::parse(err);
        CHECK(e.contains("error"));
    }
}

TEST_CASE("simulate writes frames, silhouettes, and ground truth") {
    const fs::path& dir = frames_dir();
    const bonereg::Image2D frame0 = bonereg::load_image((dir / "frame_000.img").string());
    CHECK(frame0.nu == 128);
    CHECK(frame0.pu == doctest::Approx(2.4));
    for (const char* bone : {"femur", "patella", "tibia_fibula"})
        CHECK(fs::exists(dir / ("frame_001.mask_" + std::string(bone) + ".img")));

    const json gt = json::parse(slurp(dir / "ground_truth.json"));
    REQUIRE(gt.at("frames").size() == 3);
    REQUIRE(gt.at("frames")[0].at("poses").size() == 3);

    // Flexion 0 -> 8 deg about the medial-lateral (+x) axis: the femur pose
    // is the identity on frame 0 and a pure r_alpha = 4 rotation on frame 1.
    const auto p0 = gt.at("frames")[0].at("poses").at("femur").get<bonereg::Pose6DoF>();
    const auto p1 = gt.at("frames")[1].at("poses").at("femur").get<bonereg::Pose6DoF>();
    for (double q : p0.params()) CHECK(q == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(p1.r_alpha == doctest::Approx(4.0).epsilon(1e-9));
    CHECK(p1.r_beta == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(p1.r_gamma == doctest::Approx(0.0).epsilon(1e-9));
    const auto t0 = gt.at("frames")[0].at("poses").at("tibia_fibula").get<bonereg::Pose6DoF>();
    for (double q : t0.params()) CHECK(q == doctest::Approx(0.0).epsilon(1e-12));

    SUBCASE("a constant pose renders byte-identical frames") {
        const fs::path flat = scratch() / "frames_flat";
        REQUIRE(run_cli("simulate --phantom " + phantom_dir().string() + " --out " +
                        flat.string() + " --frames 2 --flexion-start 0 --flexion-end 0 --config " +
                        config_path().string()) == 0);
        CHECK(slurp(flat / "frame_000.img") == slurp(flat / "frame_001.img"));
    }

    SUBCASE("transmission noise is seed-reproducible and actually applied") {
        const fs::path n1 = scratch() / "frames_noise1";
        const fs::path n2 = scratch() / "frames_noise2";
        const std::string base = "simulate --phantom " + phantom_dir().string() +
                                 " --frames 1 --photons 1e4 --seed 9 --config " +
                                 config_path().string() + " --out ";
        REQUIRE(run_cli(base + n1.string()) == 0);
        REQUIRE(run_cli(base + n2.string()) == 0);
        CHECK(slurp(n1 / "frame_000.img") == slurp(n2 / "frame_000.img"));
        CHECK(slurp(n1 / "frame_000.img") != slurp(dir / "frame_000.img"));
    }
}

TEST_CASE("track threads the kinematic prior and honors --no-kpm") {
    const json track = json::parse(slurp(track_dir() / "track.json"));
    REQUIRE(track.at("frames").size() == 3);
    // The prior needs a measured velocity, so frames 0 and 1 run the global
    // search and the kinematic path engages on frame 2.
    for (int f : {0, 1})
        for (const json& bj : track.at("frames")[f].at("bones")) {
            CHECK_FALSE(bj.at("used_kpm").get<bool>());
            CHECK_FALSE(bj.at("failed").get<bool>());
            bool has_de = false;
            for (const json& s : bj.at("stages")) has_de |= s.at("name") == "de";
            CHECK(has_de);
        }
    for (const json& bj : track.at("frames")[2].at("bones")) {
        CHECK(bj.at("used_kpm").get<bool>());
        for (const json& s : bj.at("stages")) CHECK(s.at("name") != "de");
    }

    const json run = json::parse(slurp(track_dir() / "run.json"));
    CHECK(run.at("seed") == 5);
    CHECK(run.at("config").at("registration").at("de").at("population") == 10);

    SUBCASE("--no-kpm reruns the global search on every frame") {
        const fs::path dir = scratch() / "track_nokpm";
        REQUIRE(run_cli("track --phantom " + phantom_dir().string() + " --frames " +
                        frames_dir().string() + " --bones femur --out " + dir.string() +
                        " --config " + config_path().string() + " --seed 5 --no-kpm") == 0);
        const json ablation = json::parse(slurp(dir / "track.json"));
        for (const json& fj : ablation.at("frames"))
            for (const json& bj : fj.at("bones")) {
                CHECK_FALSE(bj.at("used_kpm").get<bool>());
                bool has_de = false;
                for (const json& s : bj.at("stages")) has_de |= s.at("name") == "de";
                CHECK(has_de);
            }
    }

    SUBCASE("results are byte-identical across seeds and thread counts") {
        const fs::path a = scratch() / "track_rep1";
        const fs::path b = scratch() / "track_rep2";
        const std::string base = "track --phantom " + phantom_dir().string() + " --frames " +
                                 frames_dir().string() + " --bones femur --config " +
                                 config_path().string() + " --seed 5 ";
        REQUIRE(run_cli(base + "--threads 1 --out " + a.string()) == 0);
        REQUIRE(run_cli(base + "--threads 2 --out " + b.string()) == 0);
        CHECK(slurp(a / "track.json") == slurp(b / "track.json"));
    }
}

TEST_CASE("register runs one frame from scratch") {
    const fs::path dir = scratch() / "register1";
    REQUIRE(run_cli("register --phantom " + phantom_dir().string() + " --frames " +
                    frames_dir().string() + " --frame 1 --bones femur --out " + dir.string() +
                    " --config " + config_path().string()) == 0);
    const json r = json::parse(slurp(dir / "registration.json"));
    CHECK(r.at("frame") == 1);
    REQUIRE(r.at("bones").size() == 1);
    CHECK(r.at("bones")[0].at("bone") == "femur");
    CHECK_FALSE(r.at("bones")[0].at("used_kpm").get<bool>());
    CHECK(r.at("bones")[0].at("evals").get<int>() > 0);
}

TEST_CASE("evaluate on an exact track reports zero error and full success") {
    const fs::path dir = scratch() / "eval_exact";
    std::string table;
    REQUIRE(run_cli("evaluate --phantom " + phantom_dir().string() + " --frames " +
                    frames_dir().string() + " --track " + exact_track_path().string() +
                    " --out " + dir.string(),
                    &table) == 0);

    const json s = json::parse(slurp(dir / "summary.json"));
    CHECK(s.at("trials") == 9);  // 3 frames x 3 bones
    CHECK(s.at("tre_mm").get<double>() == 0.0);
    CHECK(s.at("rsr_percent").get<double>() == 100.0);
    CHECK(s.at("mtrans_mm").get<double>() == 0.0);
    CHECK(s.at("mrot_deg").get<double>() == 0.0);
    CHECK(s.at("t_y_mm").get<double>() == 0.0);

    // stdout shows the same table that lands in summary.txt.
    CHECK(table == slurp(dir / "summary.txt"));

    SUBCASE("a missing ground-truth file is a runtime failure") {
        std::string err;
        CHECK(run_cli("evaluate --phantom " + phantom_dir().string() + " --frames " +
                      (scratch() / "nowhere").string() + " --track " +
                      exact_track_path().string() + " --out " + (scratch() / "eval_bad").string(),
                      nullptr, &err) == 1);
        CHECK(json::parse(err).contains("error"));
    }
}

TEST_CASE("kinematics writes one contact row per frame") {
    const fs::path dir = scratch() / "kin_exact";
    REQUIRE(run_cli("kinematics --phantom " + phantom_dir().string() + " --track " +
                    exact_track_path().string() + " --out " + dir.string()) == 0);

    const std::string csv = slurp(dir / "contact.csv");
    CHECK(csv.rfind("frame,extension_deg,medial_mm,lateral_mm,MLD_mm", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);  // header + 3 frames

    const json k = json::parse(slurp(dir / "kinematics.json"));
    CHECK(k.at("frames") == 3);
    CHECK_FALSE(k.at("malalignment").get<bool>());
    // Exact poses at 0 and 4 degrees of flexion: contact stays balanced.
    CHECK(k.at("max_abs_mld_mm").get<double>() < 0.5);

    SUBCASE("the pre-surgery plane shifts distances by its inferior offset") {
        const fs::path pre = scratch() / "kin_pre";
        REQUIRE(run_cli("kinematics --phantom " + phantom_dir().string() + " --track " +
                        exact_track_path().string() + " --pre-tka --out " + pre.string()) == 0);
        std::istringstream post_csv(csv), pre_csv(slurp(pre / "contact.csv"));
        std::string post_line, pre_line;
        std::getline(post_csv, post_line);  // headers
        std::getline(pre_csv, pre_line);
        std::getline(post_csv, post_line);
        std::getline(pre_csv, pre_line);
        const auto field = [](const std::string& line, int idx) {
            std::istringstream in(line);
            std::string cell;
            for (int i = 0; i <= idx; ++i) std::getline(in, cell, ',');
            return std::stod(cell);
        };
        // medial_mm grows by the 9 mm plane offset on the same frame.
        CHECK(field(pre_line, 2) - field(post_line, 2) == doctest::Approx(9.0).epsilon(1e-9));
    }
}
