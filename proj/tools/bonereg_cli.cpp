// Command-line front end: phantom generation, flexion-sequence simulation,
// single-frame registration, sequence tracking, metric evaluation, and
// kinematic reporting. Every command resolves defaults -> --config file ->
// explicit flags, writes its products into --out, and records the resolved
// configuration in <out>/run.json.

#include <array>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bonereg/evaluation.hpp"
#include "bonereg/kinematics.hpp"
#include "bonereg/phantom.hpp"
#include "bonereg/projector.hpp"
#include "bonereg/registration.hpp"
#include "bonereg/serialize.hpp"
#include "bonereg/volume.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using bonereg::Vec3;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "1.0.0";

// ---------------------------------------------------------------------------
// JSON plumbing

json vec3_to_json(const Vec3& v) { return json{v.x, v.y, v.z}; }

Vec3 vec3_from_json(const json& j) {
    return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

json geometry_to_json(const bonereg::ProjectionGeometry& g) {
    return json{{"source_mm", vec3_to_json(g.source)},
                {"det_center_mm", vec3_to_json(g.det_center)},
                {"u", vec3_to_json(g.u)},
                {"v", vec3_to_json(g.v)},
                {"nu", g.nu},
                {"nv", g.nv},
                {"pu", g.pu},
                {"pv", g.pv}};
}

bonereg::ProjectionGeometry geometry_from_json(const json& j) {
    bonereg::ProjectionGeometry g;
    if (j.contains("source_mm")) g.source = vec3_from_json(j.at("source_mm"));
    if (j.contains("det_center_mm")) g.det_center = vec3_from_json(j.at("det_center_mm"));
    if (j.contains("u")) g.u = vec3_from_json(j.at("u"));
    if (j.contains("v")) g.v = vec3_from_json(j.at("v"));
    g.nu = j.value("nu", g.nu);
    g.nv = j.value("nv", g.nv);
    g.pu = j.value("pu", g.pu);
    g.pv = j.value("pv", g.pv);
    g.validate();
    return g;
}

json registration_to_json(const bonereg::RegistrationConfig& c) {
    return json{
        {"de",
         {{"population", c.de.population},
          {"weight", c.de.weight},
          {"crossover", c.de.crossover},
          {"max_generations", c.de.max_generations}}},
        {"hybrid",
         {{"powell_max_iter", c.hybrid.powell.max_iter},
          {"powell_xtol", c.hybrid.powell.xtol},
          {"powell_ftol", c.hybrid.powell.ftol},
          {"nelder_mead_max_iter", c.hybrid.nelder_mead.max_iter},
          {"nelder_mead_xtol", c.hybrid.nelder_mead.xtol},
          {"nelder_mead_ftol", c.hybrid.nelder_mead.ftol},
          {"round_ftol", c.hybrid.round_ftol},
          {"max_rounds", c.hybrid.max_rounds}}},
        {"pyramid", c.pyramid},
        {"init_search_factor", c.init_search_factor},
        {"bound_translation_mm", c.bound_translation_mm},
        {"bound_rotation_deg", c.bound_rotation_deg},
        {"kpm",
         {{"enabled", c.kpm.enabled},
          {"step", c.kpm.step},
          {"velocity_weight", c.kpm.velocity_weight},
          {"window_translation_mm", c.kpm.window_translation_mm},
          {"window_rotation_deg", c.kpm.window_rotation_deg},
          {"flexion_axis", vec3_to_json(c.kpm.flexion_axis)}}},
        {"background_attenuation", c.background_attenuation},
        {"failure_cost", c.failure_cost},
        {"seed", c.seed},
        {"threads", c.threads}};
}

bonereg::RegistrationConfig registration_from_json(const json& j) {
    bonereg::RegistrationConfig c;
    if (j.contains("de")) {
        const json& d = j.at("de");
        c.de.population = d.value("population", c.de.population);
        c.de.weight = d.value("weight", c.de.weight);
        c.de.crossover = d.value("crossover", c.de.crossover);
        c.de.max_generations = d.value("max_generations", c.de.max_generations);
    }
    if (j.contains("hybrid")) {
        const json& h = j.at("hybrid");
        c.hybrid.powell.max_iter = h.value("powell_max_iter", c.hybrid.powell.max_iter);
        c.hybrid.powell.xtol = h.value("powell_xtol", c.hybrid.powell.xtol);
        c.hybrid.powell.ftol = h.value("powell_ftol", c.hybrid.powell.ftol);
        c.hybrid.nelder_mead.max_iter =
            h.value("nelder_mead_max_iter", c.hybrid.nelder_mead.max_iter);
        c.hybrid.nelder_mead.xtol = h.value("nelder_mead_xtol", c.hybrid.nelder_mead.xtol);
        c.hybrid.nelder_mead.ftol = h.value("nelder_mead_ftol", c.hybrid.nelder_mead.ftol);
        c.hybrid.round_ftol = h.value("round_ftol", c.hybrid.round_ftol);
        c.hybrid.max_rounds = h.value("max_rounds", c.hybrid.max_rounds);
    }
    if (j.contains("pyramid")) c.pyramid = j.at("pyramid").get<std::vector<int>>();
    c.init_search_factor = j.value("init_search_factor", c.init_search_factor);
    c.bound_translation_mm = j.value("bound_translation_mm", c.bound_translation_mm);
    c.bound_rotation_deg = j.value("bound_rotation_deg", c.bound_rotation_deg);
    if (j.contains("kpm")) {
        const json& k = j.at("kpm");
        c.kpm.enabled = k.value("enabled", c.kpm.enabled);
        if (k.contains("step")) c.kpm.step = k.at("step").get<std::array<double, 6>>();
        c.kpm.velocity_weight = k.value("velocity_weight", c.kpm.velocity_weight);
        c.kpm.window_translation_mm =
            k.value("window_translation_mm", c.kpm.window_translation_mm);
        c.kpm.window_rotation_deg = k.value("window_rotation_deg", c.kpm.window_rotation_deg);
        if (k.contains("flexion_axis")) c.kpm.flexion_axis = vec3_from_json(k.at("flexion_axis"));
    }
    c.background_attenuation = j.value("background_attenuation", c.background_attenuation);
    c.failure_cost = j.value("failure_cost", c.failure_cost);
    c.seed = j.value("seed", c.seed);
    c.threads = j.value("threads", c.threads);
    return c;
}

void write_json_file(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    return json::parse(in);
}

// ---------------------------------------------------------------------------
// Shared command context

struct CommandContext {
    std::string config_path;
    std::string out_dir = "bonereg_out";
    std::uint64_t seed = 0;
    int threads = 1;

    json config = json::object();  // parsed --config file

    /// Reads the config file and fills seed/threads from it unless the flag
    /// was given explicitly on `cmd`.
    void load(const CLI::App& cmd) {
        if (!config_path.empty()) {
            config = read_json_file(config_path);
            if (!config.is_object())
                throw std::invalid_argument("config file must hold a JSON object");
        }
        if (cmd.count("--seed") == 0) seed = config.value("seed", seed);
        if (cmd.count("--threads") == 0) threads = config.value("threads", threads);
        if (threads < 1) throw std::invalid_argument("--threads must be >= 1");
        fs::create_directories(out_dir);
    }

    bonereg::ProjectionGeometry geometry() const {
        return config.contains("geometry") ? geometry_from_json(config.at("geometry"))
                                           : bonereg::ProjectionGeometry{};
    }

    bonereg::RegistrationConfig registration() const {
        bonereg::RegistrationConfig c = config.contains("registration")
                                            ? registration_from_json(config.at("registration"))
                                            : bonereg::RegistrationConfig{};
        c.seed = seed;
        c.threads = threads;
        c.validate();
        return c;
    }

    void write_run_json(const std::string& command, const json& resolved,
                        double wall_seconds) const {
        write_json_file(fs::path(out_dir) / "run.json",
                        json{{"command", command},
                             {"tool_version", kToolVersion},
                             {"seed", seed},
                             {"threads", threads},
                             {"out_dir", out_dir},
                             {"config", resolved},
                             {"wall_seconds", wall_seconds}});
    }
};

void add_global_options(CLI::App* cmd, CommandContext& ctx) {
    cmd->add_option("--config", ctx.config_path, "JSON config file");
    cmd->add_option("--out", ctx.out_dir, "output directory");
    cmd->add_option("--seed", ctx.seed, "RNG seed");
    cmd->add_option("--threads", ctx.threads, "worker thread cap");
}

// ---------------------------------------------------------------------------
// Phantom / simulation data model shared by the commands

const std::vector<bonereg::BoneLabel> kAllBones{
    bonereg::BoneLabel::femur, bonereg::BoneLabel::patella, bonereg::BoneLabel::tibia_fibula};

struct PhantomFiles {
    bonereg::Volume volume;
    std::map<std::string, bonereg::BoneMask3D> masks;
    bonereg::KneeLandmarks landmarks;
};

PhantomFiles load_phantom_dir(const std::string& dir, const std::vector<std::string>& bones) {
    PhantomFiles p;
    p.volume = bonereg::load_volume((fs::path(dir) / "volume.vol").string());
    for (const std::string& b : bones)
        p.masks[b] = bonereg::load_mask((fs::path(dir) / (b + ".mask")).string());
    p.landmarks = bonereg::load_landmarks((fs::path(dir) / "landmarks.json").string());
    return p;
}

std::vector<std::string> parse_bone_list(const std::string& csv) {
    std::vector<std::string> bones;
    std::string item;
    std::istringstream in(csv);
    while (std::getline(in, item, ',')) {
        bonereg::bone_label_from_name(item);  // validates the name
        bones.push_back(item);
    }
    if (bones.empty()) throw std::invalid_argument("--bones selects no bone");
    return bones;
}

std::string frame_image_path(const std::string& dir, int frame) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%03d.img", frame);
    return (fs::path(dir) / name).string();
}

std::string frame_mask_path(const std::string& dir, int frame, const std::string& bone) {
    char name[64];
    std::snprintf(name, sizeof(name), "frame_%03d.mask_%s.img", frame, bone.c_str());
    return (fs::path(dir) / name).string();
}

// The scene splits into a static background plus per-bone movable deltas:
// rendering background + sum of posed deltas reproduces a full scene render
// to float accumulation error.
struct MovableScene {
    bonereg::Volume background;
    std::vector<std::string> bone_names;
    std::vector<bonereg::BoneModel> bones;
};

MovableScene build_scene(const PhantomFiles& p, const std::vector<std::string>& bones,
                         double background_attenuation) {
    MovableScene s;
    s.background = p.volume;
    const float bg = static_cast<float>(background_attenuation);
    for (const auto& [name, mask] : p.masks)
        for (std::size_t i = 0; i < s.background.data.size(); ++i)
            if (mask.data[i]) s.background.data[i] = bg;
    for (const std::string& b : bones) {
        s.bone_names.push_back(b);
        s.bones.push_back(
            bonereg::make_bone_model(p.volume, p.masks.at(b), background_attenuation));
    }
    return s;
}

// ---------------------------------------------------------------------------
// Sequence/result (de)serialization shared by track, evaluate, kinematics

json bone_result_to_json(const bonereg::BoneResult& b) {
    json stages = json::array();
    for (const bonereg::StageDiagnostics& s : b.stages)
        stages.push_back(json{{"name", s.name},
                              {"factor", s.pyramid_factor},
                              {"evals", s.evals},
                              {"cost", s.best_cost}});
    return json{{"bone", bonereg::bone_label_name(b.label)},
                {"pose", b.pose},
                {"cost", b.cost},
                {"used_kpm", b.used_kpm},
                {"failed", b.failed},
                {"message", b.message},
                {"evals", b.total_evals()},
                {"stages", stages}};
}

// Timing is deliberately left out of result files (it lives in run.json):
// for a fixed config and seed they are byte-reproducible.
json frame_result_to_json(int frame, const bonereg::RegistrationResult& r) {
    json bones = json::array();
    for (const bonereg::BoneResult& b : r.bones) bones.push_back(bone_result_to_json(b));
    return json{{"frame", frame}, {"flagged", r.flagged}, {"bones", bones}};
}

json sequence_to_json(const bonereg::SequenceResult& seq) {
    json frames = json::array();
    for (std::size_t f = 0; f < seq.frames.size(); ++f)
        frames.push_back(frame_result_to_json(static_cast<int>(f), seq.frames[f]));
    return json{{"frames", frames}};
}

bonereg::SequenceResult sequence_from_json(const json& j) {
    bonereg::SequenceResult seq;
    for (const json& fj : j.at("frames")) {
        bonereg::RegistrationResult r;
        r.flagged = fj.value("flagged", false);
        for (const json& bj : fj.at("bones")) {
            bonereg::BoneResult b;
            b.label = bonereg::bone_label_from_name(bj.at("bone").get<std::string>());
            b.pose = bj.at("pose").get<bonereg::Pose6DoF>();
            b.cost = bj.value("cost", 0.0);
            b.used_kpm = bj.value("used_kpm", false);
            b.failed = bj.value("failed", false);
            b.message = bj.value("message", "");
            r.bones.push_back(std::move(b));
        }
        seq.frames.push_back(std::move(r));
    }
    return seq;
}

// Ground-truth pose lookup: frame index -> bone name -> pose.
std::map<int, std::map<std::string, bonereg::Pose6DoF>> ground_truth_from_json(const json& j) {
    std::map<int, std::map<std::string, bonereg::Pose6DoF>> gt;
    for (const json& fj : j.at("frames")) {
        const int frame = fj.at("frame").get<int>();
        for (const auto& [bone, pj] : fj.at("poses").items())
            gt[frame][bone] = pj.get<bonereg::Pose6DoF>();
    }
    return gt;
}

// ---------------------------------------------------------------------------
// Commands

int cmd_phantom(CommandContext& ctx, const std::vector<int>& dims, double spacing) {
    const auto t0 = std::chrono::steady_clock::now();
    bonereg::PhantomConfig cfg;
    if (ctx.config.contains("phantom")) {
        const json& p = ctx.config.at("phantom");
        if (p.contains("dims")) {
            const auto d = p.at("dims").get<std::vector<int>>();
            if (d.size() != 3) throw std::invalid_argument("phantom dims must hold 3 values");
            cfg.dims = {d[0], d[1], d[2]};
        }
        if (p.contains("spacing_mm")) {
            const double s = p.at("spacing_mm").get<double>();
            cfg.spacing = {s, s, s};
        }
    }
    if (!dims.empty()) {
        if (dims.size() == 1)
            cfg.dims = {dims[0], dims[0], dims[0]};
        else if (dims.size() == 3)
            cfg.dims = {dims[0], dims[1], dims[2]};
        else
            throw std::invalid_argument("--dims takes one or three values");
    }
    if (spacing > 0.0) cfg.spacing = {spacing, spacing, spacing};

    const bonereg::KneePhantom phantom = bonereg::make_knee_phantom(cfg);
    const fs::path out(ctx.out_dir);
    bonereg::save_volume(phantom.volume, (out / "volume.vol").string());
    for (const bonereg::BoneMask3D& m : phantom.masks)
        bonereg::save_mask(
            m, (out / (std::string(bonereg::bone_label_name(m.label)) + ".mask")).string());
    bonereg::save_landmarks(phantom.landmarks, (out / "landmarks.json").string());

    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ctx.write_run_json(
        "phantom", json{{"phantom", {{"dims", cfg.dims}, {"spacing_mm", cfg.spacing.x}}}}, wall);
    std::cout << "phantom written to " << ctx.out_dir << "\n";
    return 0;
}

struct SimulateOptions {
    std::string phantom_dir;
    int frames = 10;
    double flexion_start_deg = 0.0;
    double flexion_end_deg = 60.0;
    double photons = 0.0;  // 0 disables transmission noise
    double perturb_translation_mm = 0.0;
    double perturb_rotation_deg = 0.0;
};

SimulateOptions resolve_simulate(const CommandContext& ctx, const CLI::App& cmd,
                                 SimulateOptions opt) {
    if (ctx.config.contains("simulate")) {
        const json& s = ctx.config.at("simulate");
        if (cmd.count("--frames") == 0) opt.frames = s.value("frames", opt.frames);
        if (cmd.count("--flexion-start") == 0)
            opt.flexion_start_deg = s.value("flexion_start_deg", opt.flexion_start_deg);
        if (cmd.count("--flexion-end") == 0)
            opt.flexion_end_deg = s.value("flexion_end_deg", opt.flexion_end_deg);
        if (cmd.count("--photons") == 0) opt.photons = s.value("photons", opt.photons);
        if (cmd.count("--perturb-trans") == 0)
            opt.perturb_translation_mm =
                s.value("perturb_translation_mm", opt.perturb_translation_mm);
        if (cmd.count("--perturb-rot") == 0)
            opt.perturb_rotation_deg = s.value("perturb_rotation_deg", opt.perturb_rotation_deg);
    }
    if (opt.frames < 1) throw std::invalid_argument("simulate needs at least one frame");
    if (opt.photons < 0.0) throw std::invalid_argument("--photons must be >= 0");
    return opt;
}

int cmd_simulate(CommandContext& ctx, const CLI::App& cmd, SimulateOptions opt) {
    const auto t0 = std::chrono::steady_clock::now();
    opt = resolve_simulate(ctx, cmd, opt);
    const bonereg::ProjectionGeometry g = ctx.geometry();
    const double bg_mu = ctx.registration().background_attenuation;

    std::vector<std::string> bone_names;
    for (bonereg::BoneLabel b : kAllBones) bone_names.push_back(bonereg::bone_label_name(b));
    const PhantomFiles phantom = load_phantom_dir(opt.phantom_dir, bone_names);
    const MovableScene scene = build_scene(phantom, bone_names, bg_mu);

    // Flexion axis: medial-lateral direction through the condyle midpoint.
    const Vec3 axis_dir =
        (phantom.landmarks.medial_condyle_center - phantom.landmarks.lateral_condyle_center)
            .normalized();
    const Vec3 axis_point =
        (phantom.landmarks.medial_condyle_center + phantom.landmarks.lateral_condyle_center) /
        2.0;

    std::mt19937_64 rng(ctx.seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    const bonereg::Image2D background =
        bonereg::render_drr(scene.background, bonereg::Pose6DoF::identity(), g, ctx.threads);

    json gt_frames = json::array();
    for (int f = 0; f < opt.frames; ++f) {
        const double t = opt.frames == 1 ? 0.0 : static_cast<double>(f) / (opt.frames - 1);
        const double angle =
            opt.flexion_start_deg + (opt.flexion_end_deg - opt.flexion_start_deg) * t;

        bonereg::Image2D image = background;
        json poses = json::object();
        for (std::size_t b = 0; b < scene.bones.size(); ++b) {
            const bonereg::BoneModel& bone = scene.bones[b];
            bonereg::Pose6DoF pose =
                scene.bone_names[b] == "femur"
                    ? bonereg::pose_from_axis_rotation(axis_point, axis_dir, angle, bone.pivot)
                    : bonereg::Pose6DoF::identity(bone.pivot);
            // Jitter draws stay in a fixed order (frame-major, bone-major,
            // then the six parameters) so runs reproduce.
            std::array<double, 6> q = pose.params();
            for (int i = 0; i < 6; ++i) {
                const double amp = i < 3 ? opt.perturb_translation_mm : opt.perturb_rotation_deg;
                q[i] += amp * unit(rng);
            }
            pose = bonereg::Pose6DoF::from_params(q, bone.pivot);

            const bonereg::Image2D part = bonereg::render_drr(bone.moving, pose, g, ctx.threads);
            for (std::size_t i = 0; i < image.data.size(); ++i) image.data[i] += part.data[i];
            const bonereg::Image2D maskproj = bonereg::render_mask_projection(
                phantom.masks.at(scene.bone_names[b]), pose, g, ctx.threads);
            bonereg::save_image(maskproj, frame_mask_path(ctx.out_dir, f, scene.bone_names[b]),
                                "mask");
            poses[scene.bone_names[b]] = pose;
        }
        if (opt.photons > 0.0)
            image = bonereg::add_poisson_noise(image, opt.photons,
                                               ctx.seed + 0x9E3779B97F4A7C15ULL * (f + 1));
        bonereg::save_image(image, frame_image_path(ctx.out_dir, f), "drr");
        gt_frames.push_back(json{{"frame", f}, {"poses", poses}});
    }

    write_json_file(fs::path(ctx.out_dir) / "ground_truth.json",
                    json{{"frames", gt_frames},
                         {"geometry", geometry_to_json(g)},
                         {"flexion",
                          {{"axis_point", vec3_to_json(axis_point)},
                           {"axis", vec3_to_json(axis_dir)},
                           {"start_deg", opt.flexion_start_deg},
                           {"end_deg", opt.flexion_end_deg}}}});
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ctx.write_run_json("simulate",
                       json{{"simulate",
                             {{"frames", opt.frames},
                              {"flexion_start_deg", opt.flexion_start_deg},
                              {"flexion_end_deg", opt.flexion_end_deg},
                              {"photons", opt.photons},
                              {"perturb_translation_mm", opt.perturb_translation_mm},
                              {"perturb_rotation_deg", opt.perturb_rotation_deg},
                              {"phantom_dir", opt.phantom_dir}}},
                            {"geometry", geometry_to_json(g)}},
                       wall);
    std::cout << opt.frames << " frames written to " << ctx.out_dir << "\n";
    return 0;
}

struct TrackOptions {
    std::string phantom_dir;
    std::string frames_dir;
    std::string bones_csv = "femur,patella,tibia_fibula";
    bool no_kpm = false;
    int single_frame = -1;  // >= 0: register exactly this frame
};

bonereg::FixedFrame load_fixed_frame(const std::string& dir, int frame,
                                     const std::vector<std::string>& bones) {
    bonereg::FixedFrame f;
    f.image = bonereg::load_image(frame_image_path(dir, frame));
    for (const std::string& b : bones) {
        const std::string path = frame_mask_path(dir, frame, b);
        if (fs::exists(path))
            f.bone_masks.push_back(bonereg::load_image(path).mask);
        else
            f.bone_masks.push_back({});
    }
    return f;
}

int count_frames(const std::string& dir) {
    int n = 0;
    while (fs::exists(frame_image_path(dir, n))) ++n;
    if (n == 0) throw std::runtime_error("no frame_*.img files in " + dir);
    return n;
}

int cmd_track(CommandContext& ctx, const TrackOptions& opt, const char* command) {
    const auto t0 = std::chrono::steady_clock::now();
    bonereg::RegistrationConfig cfg = ctx.registration();
    if (opt.no_kpm) cfg.kpm.enabled = false;
    const bonereg::ProjectionGeometry g = ctx.geometry();
    const std::vector<std::string> bones = parse_bone_list(opt.bones_csv);

    const PhantomFiles phantom = load_phantom_dir(opt.phantom_dir, bones);
    std::vector<bonereg::BoneModel> models;
    for (const std::string& b : bones)
        models.push_back(bonereg::make_bone_model(phantom.volume, phantom.masks.at(b),
                                                  cfg.background_attenuation));

    json result;
    bool any_flagged = false;
    if (opt.single_frame >= 0) {
        const bonereg::FixedFrame frame =
            load_fixed_frame(opt.frames_dir, opt.single_frame, bones);
        const bonereg::RegistrationResult r = bonereg::register_frame(frame, models, g, {}, cfg);
        any_flagged = r.flagged;
        result = frame_result_to_json(opt.single_frame, r);
        write_json_file(fs::path(ctx.out_dir) / "registration.json", result);
    } else {
        const int n = count_frames(opt.frames_dir);
        std::vector<bonereg::FixedFrame> frames;
        frames.reserve(n);
        for (int f = 0; f < n; ++f) frames.push_back(load_fixed_frame(opt.frames_dir, f, bones));
        const bonereg::SequenceResult seq = bonereg::track_sequence(frames, models, g, cfg);
        for (const bonereg::RegistrationResult& r : seq.frames) any_flagged |= r.flagged;
        result = sequence_to_json(seq);
        write_json_file(fs::path(ctx.out_dir) / "track.json", result);
    }

    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ctx.write_run_json(command,
                       json{{"registration", registration_to_json(cfg)},
                            {"geometry", geometry_to_json(g)},
                            {"bones", bones},
                            {"phantom_dir", opt.phantom_dir},
                            {"frames_dir", opt.frames_dir},
                            {"no_kpm", opt.no_kpm}},
                       wall);
    std::cout << (opt.single_frame >= 0 ? "registration" : "track") << " written to "
              << ctx.out_dir << (any_flagged ? " (some bones flagged)" : "") << "\n";
    return 0;
}

struct EvaluateOptions {
    std::string phantom_dir;
    std::string frames_dir;  // holds ground_truth.json
    std::string track_path;
    std::string bone_filter;  // empty: all bones
    double threshold_mm = bonereg::kHumanTreThresholdMm;
};

int cmd_evaluate(CommandContext& ctx, const CLI::App& cmd, EvaluateOptions opt) {
    const auto t0 = std::chrono::steady_clock::now();
    if (ctx.config.contains("evaluate") && cmd.count("--threshold") == 0)
        opt.threshold_mm = ctx.config.at("evaluate").value("threshold_mm", opt.threshold_mm);

    const auto gt =
        ground_truth_from_json(read_json_file(fs::path(opt.frames_dir) / "ground_truth.json"));
    const bonereg::SequenceResult seq = sequence_from_json(read_json_file(opt.track_path));

    // Masks are loaded lazily: only bones that actually appear get read.
    std::map<std::string, bonereg::BoneMask3D> masks;
    std::vector<bonereg::TrialRecord> trials;
    for (std::size_t f = 0; f < seq.frames.size(); ++f) {
        for (const bonereg::BoneResult& b : seq.frames[f].bones) {
            const std::string name = bonereg::bone_label_name(b.label);
            if (!opt.bone_filter.empty() && name != opt.bone_filter) continue;
            const auto frame_it = gt.find(static_cast<int>(f));
            if (frame_it == gt.end() || !frame_it->second.count(name))
                throw std::runtime_error("ground truth missing for frame " + std::to_string(f) +
                                         " bone " + name);
            if (!masks.count(name))
                masks[name] =
                    bonereg::load_mask((fs::path(opt.phantom_dir) / (name + ".mask")).string());
            trials.push_back(bonereg::make_trial(frame_it->second.at(name), b.pose,
                                                 masks.at(name), opt.threshold_mm));
        }
    }
    if (trials.empty()) throw std::runtime_error("no (frame, bone) pairs to evaluate");

    const bonereg::MetricSummary summary = bonereg::summarize(trials, opt.threshold_mm);
    const std::string table = bonereg::summary_table(summary);
    write_json_file(fs::path(ctx.out_dir) / "summary.json", bonereg::summary_to_json(summary));
    {
        std::ofstream out(fs::path(ctx.out_dir) / "summary.txt");
        if (!out) throw std::runtime_error("cannot write summary.txt");
        out << table;
    }
    std::cout << table;

    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ctx.write_run_json("evaluate",
                       json{{"threshold_mm", opt.threshold_mm},
                            {"bone", opt.bone_filter.empty() ? "all" : opt.bone_filter},
                            {"phantom_dir", opt.phantom_dir},
                            {"frames_dir", opt.frames_dir},
                            {"track", opt.track_path}},
                       wall);
    return 0;
}

struct KinematicsOptions {
    std::string phantom_dir;
    std::string track_path;
    bool pre_tka = false;
};

int cmd_kinematics(CommandContext& ctx, const KinematicsOptions& opt) {
    const auto t0 = std::chrono::steady_clock::now();
    const bonereg::SequenceResult seq = sequence_from_json(read_json_file(opt.track_path));
    const PhantomFiles phantom = load_phantom_dir(opt.phantom_dir, {"femur", "tibia_fibula"});

    bonereg::KinematicsConfig cfg;
    cfg.landmarks = phantom.landmarks;
    cfg.mode = opt.pre_tka ? bonereg::PlateauMode::pre_tka : bonereg::PlateauMode::post_tka;
    cfg.femur_shaft_axis =
        bonereg::principal_axis(bonereg::mask_to_pointcloud(phantom.masks.at("femur"), 20000))
            .direction;
    cfg.tibia_shaft_axis =
        bonereg::principal_axis(
            bonereg::mask_to_pointcloud(phantom.masks.at("tibia_fibula"), 20000))
            .direction;

    const bonereg::KinematicReport report = bonereg::build_report(seq, cfg);
    bonereg::save_contact_csv(report, (fs::path(ctx.out_dir) / "contact.csv").string());
    write_json_file(fs::path(ctx.out_dir) / "kinematics.json",
                    bonereg::kinematic_summary_to_json(report));

    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ctx.write_run_json("kinematics",
                       json{{"mode", opt.pre_tka ? "pre_tka" : "post_tka"},
                            {"phantom_dir", opt.phantom_dir},
                            {"track", opt.track_path}},
                       wall);
    std::cout << "kinematics written to " << ctx.out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"2D-3D rigid bone registration toolkit"};
    app.require_subcommand(1);

    CommandContext ctx;

    auto* phantom = app.add_subcommand("phantom", "generate the analytic knee phantom");
    add_global_options(phantom, ctx);
    std::vector<int> dims;
    double spacing = 0.0;
    phantom->add_option("--dims", dims, "grid size (one or three values)");
    phantom->add_option("--spacing", spacing, "isotropic voxel size, mm");

    auto* simulate = app.add_subcommand("simulate", "render a flexion sequence with ground truth");
    add_global_options(simulate, ctx);
    SimulateOptions sim;
    simulate->add_option("--phantom", sim.phantom_dir, "phantom directory")->required();
    simulate->add_option("--frames", sim.frames, "frame count");
    simulate->add_option("--flexion-start", sim.flexion_start_deg, "first-frame flexion, deg");
    simulate->add_option("--flexion-end", sim.flexion_end_deg, "last-frame flexion, deg");
    simulate->add_option("--photons", sim.photons, "Poisson I0 per pixel (0 = noiseless)");
    simulate->add_option("--perturb-trans", sim.perturb_translation_mm,
                         "per-frame uniform translation jitter, mm");
    simulate->add_option("--perturb-rot", sim.perturb_rotation_deg,
                         "per-frame uniform rotation jitter, deg");

    auto* reg = app.add_subcommand("register", "register one frame from scratch");
    add_global_options(reg, ctx);
    TrackOptions reg_opt;
    reg_opt.single_frame = 0;
    reg->add_option("--phantom", reg_opt.phantom_dir, "phantom directory")->required();
    reg->add_option("--frames", reg_opt.frames_dir, "simulated frames directory")->required();
    reg->add_option("--frame", reg_opt.single_frame, "frame index");
    reg->add_option("--bones", reg_opt.bones_csv, "comma-separated bone list");

    auto* track = app.add_subcommand("track", "track the whole sequence");
    add_global_options(track, ctx);
    TrackOptions track_opt;
    track->add_option("--phantom", track_opt.phantom_dir, "phantom directory")->required();
    track->add_option("--frames", track_opt.frames_dir, "simulated frames directory")->required();
    track->add_option("--bones", track_opt.bones_csv, "comma-separated bone list");
    track->add_flag("--no-kpm", track_opt.no_kpm,
                    "ablation: global initialization on every frame");

    auto* evaluate = app.add_subcommand("evaluate", "score a tracking run against ground truth");
    add_global_options(evaluate, ctx);
    EvaluateOptions eval_opt;
    evaluate->add_option("--phantom", eval_opt.phantom_dir, "phantom directory")->required();
    evaluate->add_option("--frames", eval_opt.frames_dir, "directory with ground_truth.json")
        ->required();
    evaluate->add_option("--track", eval_opt.track_path, "track.json or registration.json")
        ->required();
    evaluate->add_option("--threshold", eval_opt.threshold_mm, "TRE success threshold, mm");
    evaluate->add_option("--bone", eval_opt.bone_filter, "restrict to one bone");

    auto* kin = app.add_subcommand("kinematics", "contact distances and MLD/DDV report");
    add_global_options(kin, ctx);
    KinematicsOptions kin_opt;
    kin->add_option("--phantom", kin_opt.phantom_dir, "phantom directory")->required();
    kin->add_option("--track", kin_opt.track_path, "track.json from the track command")
        ->required();
    kin->add_flag("--pre-tka", kin_opt.pre_tka, "use the plane 9 mm below the plateau anchors");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        std::cerr << json{{"error", e.what()}, {"kind", "usage"}}.dump() << "\n";
        return 2;
    }

    try {
        CLI::App* sub = app.get_subcommands().front();
        ctx.load(*sub);
        if (phantom->parsed()) return cmd_phantom(ctx, dims, spacing);
        if (simulate->parsed()) return cmd_simulate(ctx, *simulate, sim);
        if (reg->parsed()) return cmd_track(ctx, reg_opt, "register");
        if (track->parsed()) return cmd_track(ctx, track_opt, "track");
        if (evaluate->parsed()) return cmd_evaluate(ctx, *evaluate, eval_opt);
        if (kin->parsed()) return cmd_kinematics(ctx, kin_opt);
    } catch (const std::invalid_argument& e) {
        std::cerr << json{{"error", e.what()}, {"kind", "config"}}.dump() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", e.what()}, {"kind", "runtime"}}.dump() << "\n";
        return 1;
    }
    return 0;
}
