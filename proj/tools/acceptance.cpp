// Acceptance gate: runs the nine release criteria end to end and prints one
// PASS/FAIL line per criterion with the measured numbers. Exit code 0 means
// every criterion passed.
//
// The benchmark criteria (4-7) write their results as JSON files under
// --out/run_a; criterion 9 repeats them with a different thread cap into
// --out/run_b and byte-compares the files. Timing never goes into those
// files, so for a fixed seed they are reproducible byte for byte.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "CLI11.hpp"
#include "bonereg/evaluation.hpp"
#include "bonereg/kinematics.hpp"
#include "bonereg/optimize.hpp"
#include "bonereg/phantom.hpp"
#include "bonereg/projector.hpp"
#include "bonereg/registration.hpp"
#include "bonereg/volume.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace bonereg;
using nlohmann::json;

namespace {

// Fixed seeds so every run (and both determinism passes) draws identically.
constexpr std::uint64_t kPoseDrawSeed = 20240819;
constexpr std::uint64_t kRegistrationSeedBase = 1000;
constexpr std::uint64_t kNoiseSeedBase = 7000;
constexpr double kNoisePhotons = 1e4;

struct Options {
    fs::path out = "bonereg_acceptance";
    int trials = 50;
    int track_frames = 10;
    int threads_b = 2;  // thread cap of the determinism re-run
};

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_json_file(const fs::path& path, const json& j) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path);
    out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Shared benchmark scene: knee phantom at 128^3 / 1 mm viewed by the default
// 256x256 / 1.2 mm geometry. Benchmark images follow the registration's own
// generative model -- soft-tissue background plus the posed bone's additive
// contribution -- so the objective's global optimum sits at ground truth.

struct Bench {
    KneePhantom phantom;
    ProjectionGeometry geometry;
    BoneModel femur;
    BoneModel tibia;
    Image2D background_drr;  // soft-tissue scene at identity
    Vec3 flexion_point;      // condyle midpoint
    Vec3 flexion_axis;       // medial-lateral unit direction
};

const BoneMask3D& mask_of(const KneePhantom& ph, BoneLabel label) {
    for (const BoneMask3D& m : ph.masks)
        if (m.label == label) return m;
    throw std::runtime_error("phantom mask missing");
}

const Bench& bench() {
    static const Bench b = [] {
        Bench s;
        s.phantom = make_knee_phantom({});
        const double bg_mu = RegistrationConfig{}.background_attenuation;
        s.femur = make_bone_model(s.phantom.volume, mask_of(s.phantom, BoneLabel::femur), bg_mu);
        s.tibia =
            make_bone_model(s.phantom.volume, mask_of(s.phantom, BoneLabel::tibia_fibula), bg_mu);

        Volume background = s.phantom.volume;
        for (const BoneMask3D& m : s.phantom.masks)
            for (std::size_t i = 0; i < background.data.size(); ++i)
                if (m.data[i]) background.data[i] = static_cast<float>(bg_mu);
        s.background_drr = render_drr(background, Pose6DoF::identity(), s.geometry, 1);

        const KneeLandmarks& lm = s.phantom.landmarks;
        s.flexion_point = (lm.medial_condyle_center + lm.lateral_condyle_center) / 2.0;
        s.flexion_axis = (lm.medial_condyle_center - lm.lateral_condyle_center).normalized();
        return s;
    }();
    return b;
}

Image2D compose_scene(const Pose6DoF& femur_pose, int threads) {
    Image2D img = bench().background_drr;
    const Image2D part = render_drr(bench().femur.moving, femur_pose, bench().geometry, threads);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] += part.data[i];
    return img;
}

std::vector<Pose6DoF> draw_trial_poses(int n) {
    std::mt19937_64 rng(kPoseDrawSeed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    std::vector<Pose6DoF> poses;
    poses.reserve(n);
    for (int k = 0; k < n; ++k) {
        std::array<double, 6> q{};
        for (double& v : q) v = 10.0 * unit(rng);
        poses.push_back(Pose6DoF::from_params(q, bench().femur.pivot));
    }
    return poses;
}

json pose_params_json(const Pose6DoF& p) {
    const auto q = p.params();
    return json(std::vector<double>(q.begin(), q.end()));
}

// ---------------------------------------------------------------------------
// Criterion reporting

bool g_all_pass = true;

void report(int id, const std::string& label, bool pass, const std::string& detail,
            double seconds) {
    g_all_pass = g_all_pass && pass;
    std::printf("[%s] criterion %d: %s -- %s (%.1f s)\n", pass ? "PASS" : "FAIL", id,
                label.c_str(), detail.c_str(), seconds);
    std::fflush(stdout);
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof(buf), f, ap);
    va_end(ap);
    return buf;
}

// ---------------------------------------------------------------------------
// Criterion 1: derivative-free optimizers on closed-form test functions.

double rosenbrock2(const std::vector<double>& x) {
    const double a = 1.0 - x[0];
    const double b = x[1] - x[0] * x[0];
    return a * a + 100.0 * b * b;
}

double sphere(const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return s;
}

bool near_unit(const OptResult& r) {
    return r.best_cost < 1e-6 && std::abs(r.best[0] - 1.0) < 1e-3 &&
           std::abs(r.best[1] - 1.0) < 1e-3;
}

void criterion1() {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<double> x0{-1.2, 1.0};

    const OptResult nm = nelder_mead(rosenbrock2, x0);

    PowellOptions popts;  // the banana valley needs accuracy-matched tolerances
    popts.xtol = 1e-6;
    popts.ftol = 1e-10;
    popts.max_iter = 200;
    const OptResult pw = powell(rosenbrock2, x0, popts);

    HybridOptions hopts;
    hopts.powell = popts;
    hopts.nelder_mead.xtol = 1e-6;
    hopts.nelder_mead.ftol = 1e-10;
    hopts.round_ftol = 1e-10;
    const OptResult hy = hybrid_powell_nm(rosenbrock2, x0, hopts);

    const BoxBounds bounds{std::vector<double>(6, -5.0), std::vector<double>(6, 5.0)};
    const OptResult de = differential_evolution(sphere, bounds);
    const OptResult de2 = differential_evolution(sphere, bounds);
    const OptResult nm2 = nelder_mead(rosenbrock2, x0);
    const bool deterministic = de.best == de2.best && de.best_cost == de2.best_cost &&
                               nm.best == nm2.best && nm.best_cost == nm2.best_cost;

    const double secs = seconds_since(t0);
    const bool pass = near_unit(nm) && near_unit(pw) && near_unit(hy) && de.best_cost < 1e-3 &&
                      deterministic && secs < 5.0;
    report(1, "optimizer correctness", pass,
           fmt("Rosenbrock cost NM %.2e / Powell %.2e / hybrid %.2e at (1,1)+-1e-3; "
               "DE 6-D sphere %.2e in <=100 gens; deterministic=%s",
               nm.best_cost, pw.best_cost, hy.best_cost, de.best_cost,
               deterministic ? "yes" : "no"),
           secs);
}

// ---------------------------------------------------------------------------
// Criterion 2: projector fidelity oracles at the full 256x256 detector.

Volume uniform_cube(double mu) {
    Volume v;
    v.dims = {100, 100, 100};
    v.spacing = {1, 1, 1};
    v.origin = {-50, -50, -50};
    v.data.assign(v.voxel_count(), static_cast<float>(mu));
    return v;
}

// Column-shift NCC peak with parabolic subpixel refinement.
double shift_of_peak(const Image2D& a, const Image2D& b, int max_shift) {
    auto ncc_at_shift = [&](int s) {
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        long long n = 0;
        for (int iv = 0; iv < a.nv; ++iv)
            for (int iu = 0; iu + max_shift < a.nu; ++iu) {
                const double x = a.at(iu + s, iv);
                const double y = b.at(iu, iv);
                sa += x;
                sb += y;
                saa += x * x;
                sbb += y * y;
                sab += x * y;
                ++n;
            }
        const double cov = sab - sa * sb / n;
        const double vx = saa - sa * sa / n, vy = sbb - sb * sb / n;
        return cov / std::sqrt(vx * vy);
    };
    int best = 0;
    double best_val = -2;
    std::vector<double> vals(max_shift + 1);
    for (int s = 0; s <= max_shift; ++s) {
        vals[s] = ncc_at_shift(s);
        if (vals[s] > best_val) {
            best_val = vals[s];
            best = s;
        }
    }
    if (best == 0 || best == max_shift) return best;
    const double denom = vals[best - 1] - 2 * vals[best] + vals[best + 1];
    if (denom == 0) return best;
    return best + 0.5 * (vals[best - 1] - vals[best + 1]) / denom;
}

void criterion2() {
    const auto t0 = std::chrono::steady_clock::now();
    const ProjectionGeometry g;  // 256x256 / 1.2 mm

    // Analytic chord: a face-on 100 mm uniform cube integrates to mu * 100
    // on the central rays.
    const Image2D cube = render_drr(uniform_cube(0.01), Pose6DoF::identity(), g, 1);
    double chord_dev = 0.0;
    for (int iv : {g.nv / 2 - 1, g.nv / 2})
        for (int iu : {g.nu / 2 - 1, g.nu / 2})
            chord_dev = std::max(chord_dev, std::abs(cube.at(iu, iv) - 1.0));

    // Translation consistency: 6 mm along u magnifies to 6*(SDD/SAD)/pu px.
    const Image2D fixed = render_drr(bench().phantom.volume, Pose6DoF::identity(), g, 1);
    Pose6DoF moved;
    moved.tx = 6.0;
    const Image2D shifted = render_drr(bench().phantom.volume, moved, g, 1);
    const double expected_px = 6.0 * (g.sdd() / g.sad()) / g.pu;
    const double measured_px = shift_of_peak(shifted, fixed, 16);
    const double shift_err = std::abs(measured_px - expected_px);

    // Linearity: doubling attenuation doubles every pixel.
    const Image2D lin1 = render_drr(uniform_cube(0.007), Pose6DoF::identity(), g, 1);
    const Image2D lin2 = render_drr(uniform_cube(0.014), Pose6DoF::identity(), g, 1);
    double lin_dev = 0.0;
    bool lin_zero_ok = true;
    for (std::size_t i = 0; i < lin1.data.size(); ++i) {
        if (lin1.data[i] == 0.0f)
            lin_zero_ok = lin_zero_ok && lin2.data[i] == 0.0f;
        else
            lin_dev = std::max(lin_dev, std::abs(lin2.data[i] / lin1.data[i] / 2.0 - 1.0));
    }

    const double secs = seconds_since(t0);
    const bool pass =
        chord_dev <= 0.02 && shift_err <= 0.5 && lin_dev <= 1e-6 && lin_zero_ok && secs < 30.0;
    report(2, "projector fidelity", pass,
           fmt("cube chord dev %.4f (<=0.02); shift %.3f px vs %.3f expected (|d|<=0.5); "
               "linearity dev %.2e (<=1e-6)",
               chord_dev, measured_px, expected_px, lin_dev),
           secs);
}

// ---------------------------------------------------------------------------
// Criterion 3: TRE oracles on the phantom femur.

void criterion3() {
    const auto t0 = std::chrono::steady_clock::now();
    const BoneMask3D& femur = mask_of(bench().phantom, BoneLabel::femur);
    const Vec3 pivot = bench().femur.pivot;

    // Pure translation: every sampled point moves by exactly |t| = 13 mm.
    Pose6DoF trans = Pose6DoF::identity(pivot);
    trans.tx = 3.0;
    trans.ty = -4.0;
    trans.tz = 12.0;
    const double tre_trans = compute_tre(Pose6DoF::identity(pivot), trans, femur);
    const double trans_err = std::abs(tre_trans - 13.0);

    // Pure rotation about the axis through the pivot along z: each point at
    // in-plane radius r moves along a chord of length 2 r sin(theta/2).
    const double theta_deg = 7.0;
    Pose6DoF rot = Pose6DoF::identity(pivot);
    rot.r_gamma = theta_deg;
    const double tre_rot = compute_tre(Pose6DoF::identity(pivot), rot, femur);
    const std::vector<Vec3> sample = mask_to_pointcloud(femur, kTreDefaultMaxPoints);
    double chord_sum = 0.0;
    for (const Vec3& p : sample)
        chord_sum += std::hypot(p.x - pivot.x, p.y - pivot.y);
    const double tre_chord =
        2.0 * std::sin(theta_deg * M_PI / 360.0) * chord_sum / sample.size();
    const double rot_err = std::abs(tre_rot - tre_chord);

    // Sampling cap: the 10k-point stride sample tracks the full-mask TRE.
    Pose6DoF generic = Pose6DoF::identity(pivot);
    generic.tx = 2.0;
    generic.ty = -1.0;
    generic.tz = 3.0;
    generic.r_alpha = 4.0;
    generic.r_beta = -2.0;
    generic.r_gamma = 5.0;
    const double tre_capped = compute_tre(Pose6DoF::identity(pivot), generic, femur);
    const double tre_full =
        compute_tre(Pose6DoF::identity(pivot), generic, femur, femur.count_true());
    const double cap_dev = std::abs(tre_capped - tre_full) / tre_full;

    const double secs = seconds_since(t0);
    const bool pass = trans_err <= 1e-12 && rot_err <= 1e-3 && cap_dev < 1e-3;
    report(3, "TRE oracles", pass,
           fmt("translation |err| %.1e (<=1e-12); rotation-chord |err| %.2e mm (<=1e-3); "
               "sampling-cap dev %.4f%% (<0.1%%)",
               trans_err, rot_err, cap_dev * 100.0),
           secs);
}

// ---------------------------------------------------------------------------
// Criteria 4 and 6: single-frame capture benchmark, noiseless and noisy.

struct TrialSet {
    MetricSummary summary;
    double median_tre = 0.0;
    double wall_seconds = 0.0;
    json file;  // deterministic per-trial records
};

TrialSet run_trials(const std::vector<Pose6DoF>& gts, bool noisy, int threads) {
    const auto t0 = std::chrono::steady_clock::now();
    RegistrationConfig cfg;
    cfg.threads = threads;

    std::vector<TrialRecord> records;
    json rows = json::array();
    for (std::size_t k = 0; k < gts.size(); ++k) {
        const Pose6DoF& gt = gts[k];
        Image2D image = compose_scene(gt, threads);
        if (noisy) image = add_poisson_noise(image, kNoisePhotons, kNoiseSeedBase + k);
        const Image2D silhouette =
            render_mask_projection(bench().femur.mask, gt, bench().geometry, threads);

        cfg.seed = kRegistrationSeedBase + k;
        const FixedFrame frame{image, {silhouette.mask}};
        const RegistrationResult r = register_frame(frame, {bench().femur}, bench().geometry, {}, cfg);
        const BoneResult& est = r.bones[0];
        const TrialRecord trial =
            make_trial(gt, est.pose, bench().femur.mask, kHumanTreThresholdMm);
        records.push_back(trial);
        rows.push_back(json{{"trial", k},
                            {"gt", pose_params_json(gt)},
                            {"estimate", pose_params_json(est.pose)},
                            {"cost", est.cost},
                            {"evals", est.total_evals()},
                            {"failed", est.failed},
                            {"tre_mm", trial.tre_mm},
                            {"success", trial.succeeded}});
    }

    TrialSet set;
    set.summary = summarize(records, kHumanTreThresholdMm);
    std::vector<double> tres;
    for (const TrialRecord& t : records) tres.push_back(t.tre_mm);
    std::sort(tres.begin(), tres.end());
    const std::size_t n = tres.size();
    set.median_tre = n % 2 ? tres[n / 2] : 0.5 * (tres[n / 2 - 1] + tres[n / 2]);
    set.wall_seconds = seconds_since(t0);
    set.file = json{{"noise_photons", noisy ? kNoisePhotons : 0.0},
                    {"summary", summary_to_json(set.summary)},
                    {"median_tre_mm", set.median_tre},
                    {"trials", rows}};
    return set;
}

// ---------------------------------------------------------------------------
// Criterion 5: KPM tracking vs global search on every frame.

struct TrackStats {
    double mean_tre = 0.0;
    double evals_per_frame_after_first = 0.0;
    json frames = json::array();
};

TrackStats score_track(const SequenceResult& seq, const std::vector<Pose6DoF>& gts) {
    TrackStats s;
    double tre_sum = 0.0;
    std::size_t evals_after_first = 0;
    for (std::size_t f = 0; f < seq.frames.size(); ++f) {
        const BoneResult& b = seq.frames[f].bones[0];
        const double tre = compute_tre(gts[f], b.pose, bench().femur.mask);
        tre_sum += tre;
        if (f > 0) evals_after_first += b.total_evals();
        s.frames.push_back(json{{"frame", f},
                                {"pose", pose_params_json(b.pose)},
                                {"cost", b.cost},
                                {"evals", b.total_evals()},
                                {"used_kpm", b.used_kpm},
                                {"tre_mm", tre}});
    }
    s.mean_tre = tre_sum / seq.frames.size();
    s.evals_per_frame_after_first =
        static_cast<double>(evals_after_first) / (seq.frames.size() - 1);
    return s;
}

struct TrackResult {
    TrackStats kpm, baseline;
    double wall_seconds = 0.0;
    json file;
};

TrackResult run_tracking(int n_frames, int threads) {
    const auto t0 = std::chrono::steady_clock::now();

    // Matched-model frames (the bone's own projection): this isolates the
    // ablation. The global search fails past ~20 degrees of flexion on its
    // own -- the flexion-induced depth shift opens a magnification
    // ambiguity -- so the prior's contribution is what gets measured.
    std::vector<Pose6DoF> gts;
    std::vector<FixedFrame> frames;
    for (int f = 0; f < n_frames; ++f) {
        const double angle = 60.0 * f / (n_frames - 1);
        const Pose6DoF gt = pose_from_axis_rotation(bench().flexion_point, bench().flexion_axis,
                                                    angle, bench().femur.pivot);
        gts.push_back(gt);
        const Image2D silhouette =
            render_mask_projection(bench().femur.mask, gt, bench().geometry, threads);
        frames.push_back(
            FixedFrame{render_drr(bench().femur.moving, gt, bench().geometry, threads),
                       {silhouette.mask}});
    }

    RegistrationConfig cfg;
    cfg.threads = threads;
    cfg.seed = kRegistrationSeedBase;
    const SequenceResult with_kpm = track_sequence(frames, {bench().femur}, bench().geometry, cfg);
    cfg.kpm.enabled = false;
    const SequenceResult baseline = track_sequence(frames, {bench().femur}, bench().geometry, cfg);

    TrackResult r;
    r.kpm = score_track(with_kpm, gts);
    r.baseline = score_track(baseline, gts);
    r.wall_seconds = seconds_since(t0);
    r.file = json{{"frames", n_frames},
                  {"flexion_end_deg", 60.0},
                  {"kpm",
                   {{"mean_tre_mm", r.kpm.mean_tre},
                    {"evals_per_frame_after_first", r.kpm.evals_per_frame_after_first},
                    {"frames", r.kpm.frames}}},
                  {"baseline",
                   {{"mean_tre_mm", r.baseline.mean_tre},
                    {"evals_per_frame_after_first", r.baseline.evals_per_frame_after_first},
                    {"frames", r.baseline.frames}}}};
    return r;
}

// ---------------------------------------------------------------------------
// Criterion 7: kinematics internal consistency (no registration involved).

SequenceResult synthetic_sequence(int n_frames, const Pose6DoF& femur_pose,
                                  const Pose6DoF& tibia_pose) {
    SequenceResult seq;
    for (int f = 0; f < n_frames; ++f) {
        RegistrationResult r;
        BoneResult femur;
        femur.label = BoneLabel::femur;
        femur.pose = femur_pose;
        BoneResult tibia;
        tibia.label = BoneLabel::tibia_fibula;
        tibia.pose = tibia_pose;
        r.bones = {femur, tibia};
        seq.frames.push_back(r);
    }
    return seq;
}

struct KinematicsOutcome {
    bool pass = false;
    std::string detail;
    double wall_seconds = 0.0;
    json file;
};

KinematicsOutcome run_kinematics_checks() {
    const auto t0 = std::chrono::steady_clock::now();
    KinematicsConfig cfg;
    cfg.landmarks = bench().phantom.landmarks;
    cfg.femur_shaft_axis =
        principal_axis(mask_to_pointcloud(bench().femur.mask, 20000)).direction;
    cfg.tibia_shaft_axis =
        principal_axis(mask_to_pointcloud(bench().tibia.mask, 20000)).direction;

    // (a) Constant pose: zero variance and a frame-to-frame constant MLD.
    const Pose6DoF flexed = pose_from_axis_rotation(bench().flexion_point, bench().flexion_axis,
                                                    15.0, bench().femur.pivot);
    const KinematicReport constant =
        build_report(synthetic_sequence(6, flexed, Pose6DoF::identity(bench().tibia.pivot)), cfg);
    double mld_spread = 0.0;
    for (double m : constant.mld_mm) mld_spread = std::max(mld_spread, std::abs(m - constant.mld_mm[0]));
    const bool constant_ok = constant.ddv_mm2 == 0.0 && mld_spread <= 1e-9;

    // (b) Neutral pose on the symmetric phantom: balanced contact.
    const KinematicReport neutral =
        build_report(synthetic_sequence(1, Pose6DoF::identity(bench().femur.pivot),
                                        Pose6DoF::identity(bench().tibia.pivot)),
                     cfg);
    const bool neutral_ok = std::abs(neutral.mld_mm[0]) < 0.2;

    // (c) A 3 mm medial surface drop must trip the 2 mm malalignment flag.
    KinematicsConfig worn = cfg;
    for (Vec3& p : worn.landmarks.medial_cap) p.z -= 3.0;
    const KinematicReport injected =
        build_report(synthetic_sequence(1, Pose6DoF::identity(bench().femur.pivot),
                                        Pose6DoF::identity(bench().tibia.pivot)),
                     worn);

    KinematicsOutcome out;
    out.pass = constant_ok && neutral_ok && injected.malalignment;
    out.detail = fmt(
        "constant pose DDV %.1e (=0) / MLD spread %.1e (<=1e-9); neutral |MLD| %.4f mm (<0.2); "
        "3 mm medial offset flag=%s (max |MLD| %.2f mm)",
        constant.ddv_mm2, mld_spread, std::abs(neutral.mld_mm[0]),
        injected.malalignment ? "tripped" : "missed", injected.max_abs_mld_mm);
    out.wall_seconds = seconds_since(t0);
    out.file = json{{"constant",
                     {{"ddv_mm2", constant.ddv_mm2},
                      {"mld_spread_mm", mld_spread},
                      {"csv", contact_csv(constant)}}},
                    {"neutral", {{"mld_mm", neutral.mld_mm[0]}}},
                    {"injected",
                     {{"max_abs_mld_mm", injected.max_abs_mld_mm},
                      {"malalignment", injected.malalignment}}}};
    return out;
}

// ---------------------------------------------------------------------------
// Criterion 8: metric-table round trip through the real CLI binary.

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd =
        std::string(BONEREG_CLI_PATH) + " " + args + " >" + log.string() + " 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

void criterion8(const Options& opt) {
    const auto t0 = std::chrono::steady_clock::now();
    const fs::path dir = opt.out / "c8";
    fs::create_directories(dir);
    const fs::path log = dir / "cli.log";

    const fs::path config = dir / "config.json";
    {
        std::ofstream out(config);
        out << R"({"geometry": {"nu": 128, "nv": 128, "pu": 2.4, "pv": 2.4}})";
    }

    bool cli_ok =
        run_cli("phantom --out " + (dir / "phantom").string(), log) == 0 &&
        run_cli("simulate --phantom " + (dir / "phantom").string() + " --out " +
                    (dir / "frames").string() + " --frames 2 --flexion-end 4 --config " +
                    config.string(),
                log) == 0;

    // Estimate file whose poses are exactly the simulated ground truth.
    if (cli_ok) {
        const json gt = json::parse(slurp(dir / "frames" / "ground_truth.json"));
        json frames = json::array();
        for (const json& fj : gt.at("frames")) {
            json bones = json::array();
            for (const auto& [bone, pose] : fj.at("poses").items())
                bones.push_back(json{{"bone", bone}, {"pose", pose}, {"cost", 0.0}});
            frames.push_back(json{{"frame", fj.at("frame")}, {"bones", bones}});
        }
        write_json_file(dir / "exact_track.json", json{{"frames", frames}});
        cli_ok = run_cli("evaluate --phantom " + (dir / "phantom").string() + " --frames " +
                             (dir / "frames").string() + " --track " +
                             (dir / "exact_track.json").string() + " --out " +
                             (dir / "eval").string(),
                         log) == 0;
    }

    bool zeros_ok = false, round_trip_ok = false;
    double max_table_dev = -1.0;
    if (cli_ok) {
        const json s = json::parse(slurp(dir / "eval" / "summary.json"));
        zeros_ok = s.at("t_x_mm") == 0.0 && s.at("t_y_mm") == 0.0 && s.at("t_z_mm") == 0.0 &&
                   s.at("r_alpha_deg") == 0.0 && s.at("r_beta_deg") == 0.0 &&
                   s.at("r_gamma_deg") == 0.0 && s.at("tre_mm") == 0.0 &&
                   s.at("mtrans_mm") == 0.0 && s.at("mrot_deg") == 0.0 &&
                   s.at("rsr_percent") == 100.0;

        // The table's value row must reproduce the JSON numbers to 1e-12.
        std::istringstream table(slurp(dir / "eval" / "summary.txt"));
        std::string header, values;
        std::getline(table, header);
        std::getline(table, values);
        std::istringstream cells(values);
        std::vector<double> row;
        double v;
        while (cells >> v) row.push_back(v);
        const std::vector<double> expect{
            s.at("t_x_mm"),      s.at("t_y_mm"),     s.at("t_z_mm"),  s.at("r_alpha_deg"),
            s.at("r_beta_deg"),  s.at("r_gamma_deg"), s.at("tre_mm"), s.at("rsr_percent"),
            s.at("mtrans_mm"),   s.at("mrot_deg")};
        if (row.size() == expect.size()) {
            max_table_dev = 0.0;
            for (std::size_t i = 0; i < row.size(); ++i)
                max_table_dev = std::max(max_table_dev, std::abs(row[i] - expect[i]));
            round_trip_ok = max_table_dev <= 1e-12;
        }
    }

    const double secs = seconds_since(t0);
    report(8, "metric-table round trip", cli_ok && zeros_ok && round_trip_ok,
           fmt("cmd_evaluate on est=gt: cli=%s, all-zero errors + RSR 100%%=%s, "
               "table-vs-JSON max dev %.1e (<=1e-12)",
               cli_ok ? "ok" : "failed", zeros_ok ? "yes" : "no", max_table_dev),
           secs);
}

// ---------------------------------------------------------------------------
// Benchmark pass shared by criteria 4-7 and repeated for criterion 9.

struct BenchmarkPass {
    TrialSet clean;
    TrialSet noisy;
    TrackResult track;
    KinematicsOutcome kin;
};

BenchmarkPass run_benchmarks(const Options& opt, const std::vector<Pose6DoF>& gts, int threads,
                             const fs::path& dir) {
    BenchmarkPass pass;
    pass.clean = run_trials(gts, false, threads);
    write_json_file(dir / "c4_trials.json", pass.clean.file);
    pass.track = run_tracking(opt.track_frames, threads);
    write_json_file(dir / "c5_tracking.json", pass.track.file);
    pass.noisy = run_trials(gts, true, threads);
    write_json_file(dir / "c6_trials.json", pass.noisy.file);
    pass.kin = run_kinematics_checks();
    write_json_file(dir / "c7_kinematics.json", pass.kin.file);
    return pass;
}

}  // namespace

int main(int argc, char** argv) {
    Options opt;
    CLI::App app{"acceptance gate"};
    app.add_option("--out", opt.out, "directory for benchmark result files");
    app.add_option("--trials", opt.trials, "capture-benchmark trial count");
    app.add_option("--frames", opt.track_frames, "tracking-benchmark frame count");
    app.add_option("--threads-b", opt.threads_b, "thread cap of the determinism re-run");
    CLI11_PARSE(app, argc, argv);
    opt.trials = std::max(1, opt.trials);
    opt.track_frames = std::max(2, opt.track_frames);  // stats need a frame pair

    std::printf("acceptance gate: %d trials, %d tracking frames, results in %s\n", opt.trials,
                opt.track_frames, opt.out.string().c_str());
    std::fflush(stdout);

    criterion1();
    criterion2();
    criterion3();

    const std::vector<Pose6DoF> gts = draw_trial_poses(opt.trials);
    const BenchmarkPass a = run_benchmarks(opt, gts, 1, opt.out / "run_a");

    report(4, "capture benchmark",
           a.clean.summary.rsr_percent >= 90.0 && a.clean.median_tre < 1.0 &&
               a.clean.wall_seconds < 1200.0,
           fmt("%zu noiseless trials +-10 mm/deg: RSR %.1f%% (>=90) at 1.5 mm, median TRE "
               "%.3f mm (<1.0), mean TRE %.3f mm",
               a.clean.summary.trials, a.clean.summary.rsr_percent, a.clean.median_tre,
               a.clean.summary.mean_tre_mm),
           a.clean.wall_seconds);

    report(5, "KPM ablation",
           a.track.kpm.mean_tre <= a.track.baseline.mean_tre &&
               a.track.baseline.evals_per_frame_after_first >=
                   2.0 * a.track.kpm.evals_per_frame_after_first &&
               a.track.wall_seconds < 600.0,
           fmt("mean TRE %.3f mm (KPM) vs %.3f mm (DE every frame); evals/frame after frame 0: "
               "%.0f vs %.0f (>=2x fewer)",
               a.track.kpm.mean_tre, a.track.baseline.mean_tre,
               a.track.kpm.evals_per_frame_after_first,
               a.track.baseline.evals_per_frame_after_first),
           a.track.wall_seconds);

    report(6, "noise robustness",
           a.noisy.summary.rsr_percent >= a.clean.summary.rsr_percent - 15.0,
           fmt("Poisson I0=1e4: RSR %.1f%% vs %.1f%% noiseless (drop %.1f pp, <=15)",
               a.noisy.summary.rsr_percent, a.clean.summary.rsr_percent,
               a.clean.summary.rsr_percent - a.noisy.summary.rsr_percent),
           a.noisy.wall_seconds);

    report(7, "kinematics internal consistency", a.kin.pass, a.kin.detail, a.kin.wall_seconds);

    criterion8(opt);

    // Criterion 9: the whole benchmark block again at a different thread cap.
    const auto t9 = std::chrono::steady_clock::now();
    run_benchmarks(opt, gts, opt.threads_b, opt.out / "run_b");
    bool identical = true;
    std::string mismatch;
    for (const char* name :
         {"c4_trials.json", "c5_tracking.json", "c6_trials.json", "c7_kinematics.json"}) {
        if (slurp(opt.out / "run_a" / name) != slurp(opt.out / "run_b" / name)) {
            identical = false;
            mismatch += std::string(" ") + name;
        }
    }
    report(9, "full-suite determinism", identical,
           identical
               ? fmt("criteria 4-7 result files byte-identical at --threads 1 vs %d", opt.threads_b)
               : "mismatch in" + mismatch,
           seconds_since(t9));

    std::printf("%s\n", g_all_pass ? "all 9 criteria passed" : "ACCEPTANCE FAILED");
    return g_all_pass ? 0 : 1;
}
