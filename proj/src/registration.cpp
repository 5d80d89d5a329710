#include "bonereg/registration.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace bonereg {

namespace {

std::array<double, 6> to_params(const std::vector<double>& x) {
    return {x[0], x[1], x[2], x[3], x[4], x[5]};
}

std::vector<double> to_vector(const std::array<double, 6>& q) {
    return {q[0], q[1], q[2], q[3], q[4], q[5]};
}

/// Detector-plane (u,v) coordinates (mm, relative to det_center) of the
/// pinhole projection of world point P.
std::array<double, 2> project_point(const ProjectionGeometry& g, const Vec3& P) {
    const Vec3 n = g.normal();
    const double plane = (g.det_center - g.source).dot(n);  // signed distance along n
    const double s = (P - g.source).dot(n);
    if (std::abs(s) < 1e-9)
        throw std::runtime_error("initialize_global: point lies in the source plane");
    const Vec3 X = g.source + (P - g.source) * (plane / s);
    return {(X - g.det_center).dot(g.u), (X - g.det_center).dot(g.v)};
}

double clamp_abs(double v, double bound) { return std::min(bound, std::max(-bound, v)); }

}  // namespace

BoneModel make_bone_model(const Volume& scene, const BoneMask3D& mask,
                          double background_attenuation) {
    scene.validate();
    if (!mask.same_grid(scene))
        throw std::invalid_argument("make_bone_model: mask grid does not match the volume");
    if (mask.count_true() == 0) throw std::invalid_argument("make_bone_model: empty mask");
    if (background_attenuation < 0.0)
        throw std::invalid_argument("make_bone_model: negative background attenuation");

    BoneModel b;
    b.label = mask.label;
    b.mask = mask;
    b.moving = scene;
    const float bg = static_cast<float>(background_attenuation);
    for (std::size_t i = 0; i < scene.data.size(); ++i)
        b.moving.data[i] = mask.data[i] ? std::max(0.0f, scene.data[i] - bg) : 0.0f;
    b.mask01 = mask_as_volume(mask);
    b.support = mask_support(mask);
    b.axis = principal_axis(mask_to_pointcloud(mask, 20000));
    b.pivot = mask.centroid();
    return b;
}

RegistrationConfig::RegistrationConfig() {
    // Refinement tolerances tuned for 1-NCC pose costs over mm/deg
    // parameters; precision well below the 1.5 mm success threshold.
    hybrid.powell.max_iter = 12;
    hybrid.powell.xtol = 0.01;
    hybrid.powell.ftol = 1e-7;
    hybrid.nelder_mead.max_iter = 250;
    hybrid.nelder_mead.xtol = 0.01;
    hybrid.nelder_mead.ftol = 1e-7;
    hybrid.round_ftol = 1e-6;
    hybrid.max_rounds = 3;
}

void RegistrationConfig::validate() const {
    if (pyramid.empty() || pyramid.back() != 1)
        throw std::invalid_argument("RegistrationConfig: pyramid must end at factor 1");
    for (std::size_t i = 0; i < pyramid.size(); ++i) {
        if (pyramid[i] < 1)
            throw std::invalid_argument("RegistrationConfig: pyramid factors must be >= 1");
        if (i > 0 && pyramid[i] >= pyramid[i - 1])
            throw std::invalid_argument("RegistrationConfig: pyramid factors must descend");
    }
    if (!(bound_translation_mm > 0.0) || !(bound_rotation_deg > 0.0))
        throw std::invalid_argument("RegistrationConfig: search bounds must be positive");
    for (double s : kpm.step)
        if (!(s > 0.0)) throw std::invalid_argument("RegistrationConfig: KPM steps must be positive");
    if (!(kpm.window_translation_mm > 0.0) || !(kpm.window_rotation_deg > 0.0))
        throw std::invalid_argument("RegistrationConfig: KPM windows must be positive");
    if (kpm.velocity_weight < 0.0)
        throw std::invalid_argument("RegistrationConfig: negative velocity weight");
    if (kpm.flexion_axis.norm() <= 0.0)
        throw std::invalid_argument("RegistrationConfig: zero flexion axis");
    if (background_attenuation < 0.0)
        throw std::invalid_argument("RegistrationConfig: negative background attenuation");
    if (!(failure_cost > 0.0 && failure_cost <= kUndefinedCost))
        throw std::invalid_argument("RegistrationConfig: failure_cost must lie in (0, 2]");
    if (init_search_factor < 1)
        throw std::invalid_argument("RegistrationConfig: init_search_factor must be >= 1");
    if (de.population < 4)
        throw std::invalid_argument("RegistrationConfig: DE population must be >= 4");
    if (threads < 1) throw std::invalid_argument("RegistrationConfig: threads must be >= 1");
}

void KPMState::validate() const {
    if (!previous.finite()) throw std::invalid_argument("KPMState: non-finite previous pose");
    for (double v : velocity)
        if (!std::isfinite(v)) throw std::invalid_argument("KPMState: non-finite velocity");
    if (std::abs(flexion_axis.norm() - 1.0) > 1e-6)
        throw std::invalid_argument("KPMState: flexion axis must be unit length");
}

KpmPrediction kpm_predict(const KPMState& state, const RegistrationConfig& cfg) {
    state.validate();
    std::array<double, 6> v = state.velocity;
    for (double& c : v) c *= cfg.kpm.velocity_weight;

    // The protocol only captures extension/flexion, so the rotational part
    // of the velocity is constrained to the flexion (medial-lateral) axis.
    const Vec3 axis = state.flexion_axis;
    const Vec3 rot{v[3], v[4], v[5]};
    const Vec3 rot_on_axis = axis * rot.dot(axis);
    v[3] = rot_on_axis.x;
    v[4] = rot_on_axis.y;
    v[5] = rot_on_axis.z;

    std::array<double, 6> q = state.previous.params();
    for (int i = 0; i < 6; ++i) q[i] += clamp_abs(v[i], cfg.kpm.step[i]);

    KpmPrediction out;
    out.pose = Pose6DoF::from_params(q, state.previous.pivot);
    const double wt = cfg.kpm.window_translation_mm;
    const double wr = cfg.kpm.window_rotation_deg;
    const std::array<double, 6> w{wt, wt, wt, wr, wr, wr};
    out.bounds.lower.resize(6);
    out.bounds.upper.resize(6);
    for (int i = 0; i < 6; ++i) {
        out.bounds.lower[i] = q[i] - w[i];
        out.bounds.upper[i] = q[i] + w[i];
    }
    return out;
}

std::size_t BoneResult::total_evals() const {
    std::size_t n = 0;
    for (const StageDiagnostics& s : stages) n += s.evals;
    return n;
}

Pose6DoF initialize_global(const Image2D& fixed, const std::vector<std::uint8_t>& fixed_bone_mask,
                           const BoneModel& bone, const ProjectionGeometry& g,
                           const RegistrationConfig& cfg, BoneResult* diag) {
    cfg.validate();
    fixed.validate();
    if (fixed_bone_mask.size() != fixed.data.size())
        throw std::invalid_argument("initialize_global: fixed mask size mismatch");

    // 2-D centroid and principal axis of the fixed bone silhouette, in
    // detector-plane mm relative to det_center.
    double mu = 0.0, mv = 0.0;
    std::size_t count = 0;
    for (int iv = 0; iv < fixed.nv; ++iv)
        for (int iu = 0; iu < fixed.nu; ++iu) {
            if (!fixed_bone_mask[fixed.index(iu, iv)]) continue;
            mu += (iu + 0.5 - fixed.nu / 2.0) * fixed.pu;
            mv += (iv + 0.5 - fixed.nv / 2.0) * fixed.pv;
            ++count;
        }
    if (count == 0) throw std::runtime_error("initialize_global: empty fixed bone mask");
    mu /= static_cast<double>(count);
    mv /= static_cast<double>(count);

    double cuu = 0.0, cuv = 0.0, cvv = 0.0;
    for (int iv = 0; iv < fixed.nv; ++iv)
        for (int iu = 0; iu < fixed.nu; ++iu) {
            if (!fixed_bone_mask[fixed.index(iu, iv)]) continue;
            const double du = (iu + 0.5 - fixed.nu / 2.0) * fixed.pu - mu;
            const double dv = (iv + 0.5 - fixed.nv / 2.0) * fixed.pv - mv;
            cuu += du * du;
            cuv += du * dv;
            cvv += dv * dv;
        }
    const double theta2d = 0.5 * std::atan2(2.0 * cuv, cuu - cvv);

    // Rotation seed: spin the bone about the detector normal (through the
    // pivot) so its projected principal axis lines up with the silhouette's.
    const Vec3 n = g.normal();
    const Vec3 fixed_dir = (g.u * std::cos(theta2d) + g.v * std::sin(theta2d)).normalized();
    Pose6DoF seed = Pose6DoF::identity(bone.pivot);
    const Vec3 a = bone.axis.direction;
    const Vec3 a_inplane = a - n * a.dot(n);
    if (a_inplane.norm() > 1e-6) {
        const Vec3 A = a_inplane.normalized();
        // PCA directions are sign-arbitrary on both sides; take the smaller turn.
        const Vec3 D = (A.dot(fixed_dir) >= 0.0) ? fixed_dir : -fixed_dir;
        const double angle = std::atan2(A.cross(D).dot(n), A.dot(D)) * 180.0 / M_PI;
        seed = pose_from_axis_rotation(bone.pivot, n, angle, bone.pivot);
    }

    // Translation seed: shift in the detector plane, scaled back to the
    // pivot's depth, so the projected pivot lands on the silhouette centroid.
    const std::array<double, 2> pivot2d = project_point(g, bone.pivot);
    const double plane = (g.det_center - g.source).dot(n);
    const double depth = (bone.pivot - g.source).dot(n);
    const double mag = plane / depth;
    const Vec3 shift = (g.u * (mu - pivot2d[0]) + g.v * (mv - pivot2d[1])) / mag;
    seed.tx += shift.x;
    seed.ty += shift.y;
    seed.tz += shift.z;

    // Global search at a reduced level, seeded with the axis guess.
    const int factor = cfg.init_search_factor;
    const Image2D coarse = downsample_image(fixed, factor);
    const ProjectionGeometry gc = downsample_geometry(g, factor);
    const ObjectiveContext ctx =
        make_objective_context(coarse, bone.moving, bone.mask01, bone.support, gc,
                               kObjectiveDilateRadius, cfg.threads);
    const Vec3 pivot = bone.pivot;
    const CostFn cost = [&ctx, pivot](const std::vector<double>& x) {
        return objective_cost(ctx, Pose6DoF::from_params(to_params(x), pivot));
    };

    const std::array<double, 6> q0 = seed.params();
    BoxBounds bounds;
    bounds.lower.resize(6);
    bounds.upper.resize(6);
    for (int i = 0; i < 6; ++i) {
        const double half = i < 3 ? cfg.bound_translation_mm : cfg.bound_rotation_deg;
        bounds.lower[i] = q0[i] - half;
        bounds.upper[i] = q0[i] + half;
    }
    if (diag) diag->stages.push_back({"seed", factor, 1, cost(to_vector(q0))});

    DifferentialEvolutionOptions de = cfg.de;
    de.seed = cfg.seed;
    de.threads = cfg.threads;
    de.x0 = to_vector(q0);
    const OptResult r = differential_evolution(cost, bounds, de);
    if (diag) diag->stages.push_back({"de", factor, r.evals, r.best_cost});
    return Pose6DoF::from_params(to_params(r.best), pivot);
}

BoneResult refine_local(const Image2D& fixed, const BoneModel& bone,
                        const ProjectionGeometry& g, const Pose6DoF& start,
                        const RegistrationConfig& cfg,
                        const std::optional<BoxBounds>& bounds) {
    cfg.validate();
    if (!start.finite()) throw std::invalid_argument("refine_local: non-finite start pose");
    if ((start.pivot - bone.pivot).norm() > 1e-9)
        throw std::invalid_argument("refine_local: start pivot must be the bone pivot");
    if (bounds) bounds->validate();

    BoneResult res;
    res.label = bone.label;
    const Vec3 pivot = bone.pivot;

    // Wraps the per-level objective; out-of-bounds poses cost strictly more
    // than any in-bounds value, steering the search back into the window.
    auto make_cost = [&](const ObjectiveContext& ctx) {
        return CostFn([&ctx, &bounds, pivot](const std::vector<double>& x) {
            if (bounds && !bounds->contains(x)) {
                double excess = 0.0;
                for (std::size_t i = 0; i < x.size(); ++i) {
                    excess += std::max(0.0, bounds->lower[i] - x[i]);
                    excess += std::max(0.0, x[i] - bounds->upper[i]);
                }
                return kUndefinedCost + excess;
            }
            return objective_cost(ctx, Pose6DoF::from_params(to_params(x), pivot));
        });
    };

    // Per-level images/contexts must outlive the optimizer lambdas.
    std::vector<Image2D> level_images;
    std::vector<ProjectionGeometry> level_geoms;
    level_images.reserve(cfg.pyramid.size());
    level_geoms.reserve(cfg.pyramid.size());
    for (int f : cfg.pyramid) {
        level_images.push_back(downsample_image(fixed, f));
        level_geoms.push_back(downsample_geometry(g, f));
    }
    const ObjectiveContext fine_ctx =
        make_objective_context(level_images.back(), bone.moving, bone.mask01, bone.support,
                               level_geoms.back(), kObjectiveDilateRadius, cfg.threads);

    // Full-resolution cost of the start pose anchors the monotonicity
    // guarantee: the final answer never costs more than this.
    const double start_cost = objective_cost(fine_ctx, start);
    res.stages.push_back({"start@1x", 1, 1, start_cost});

    std::vector<double> current = to_vector(start.params());
    double fine_best = start_cost;
    for (std::size_t level = 0; level < cfg.pyramid.size(); ++level) {
        const int f = cfg.pyramid[level];
        const ObjectiveContext ctx =
            level + 1 == cfg.pyramid.size()
                ? fine_ctx
                : make_objective_context(level_images[level], bone.moving, bone.mask01,
                                         bone.support, level_geoms[level],
                                         kObjectiveDilateRadius, cfg.threads);
        HybridOptions opts = cfg.hybrid;
        const double step = 0.5 * f;
        opts.powell.initial_step.assign(6, step);
        opts.nelder_mead.initial_step.assign(6, step);
        opts.powell.xtol = cfg.hybrid.powell.xtol * f;
        opts.nelder_mead.xtol = cfg.hybrid.nelder_mead.xtol * f;

        const CostFn cost = make_cost(ctx);
        const OptResult r = hybrid_powell_nm(cost, current, opts);
        res.stages.push_back({"hybrid@" + std::to_string(f) + "x", f, r.evals, r.best_cost});
        current = r.best;
        if (level + 1 == cfg.pyramid.size()) fine_best = r.best_cost;
    }

    if (fine_best > start_cost) {
        // Coarse levels can wander to a pose the full-resolution objective
        // dislikes; keep the start instead (exact non-worsening).
        res.pose = start;
        res.cost = start_cost;
        res.message = "kept start pose (refinement found nothing better)";
    } else {
        res.pose = Pose6DoF::from_params(to_params(current), pivot);
        res.cost = fine_best;
    }
    res.failed = res.cost >= cfg.failure_cost;
    if (res.failed && res.message.empty()) res.message = "final cost above failure threshold";
    return res;
}

RegistrationResult register_frame(const FixedFrame& frame, const std::vector<BoneModel>& bones,
                                  const ProjectionGeometry& g,
                                  const std::vector<std::optional<KPMState>>& prior,
                                  const RegistrationConfig& cfg) {
    cfg.validate();
    if (bones.empty()) throw std::invalid_argument("register_frame: no bones");
    if (!prior.empty() && prior.size() != bones.size())
        throw std::invalid_argument("register_frame: prior size does not match bone count");
    const auto t0 = std::chrono::steady_clock::now();

    RegistrationResult out;
    out.bones.reserve(bones.size());
    for (std::size_t b = 0; b < bones.size(); ++b) {
        const BoneModel& bone = bones[b];
        const std::optional<KPMState>* state =
            (!prior.empty() && prior[b].has_value()) ? &prior[b] : nullptr;
        BoneResult res;
        try {
            if (state && cfg.kpm.enabled) {
                if (((*state)->previous.pivot - bone.pivot).norm() > 1e-9)
                    throw std::invalid_argument("KPM prior pivot does not match the bone");
                const KpmPrediction pred = kpm_predict(**state, cfg);
                res = refine_local(frame.image, bone, g, pred.pose, cfg, pred.bounds);
                res.used_kpm = true;
            } else {
                if (b >= frame.bone_masks.size() || frame.bone_masks[b].empty())
                    throw std::runtime_error(
                        "global initialization needs a fixed mask for bone " +
                        std::string(bone_label_name(bone.label)));
                BoneResult de_diag;
                const Pose6DoF t0pose = initialize_global(frame.image, frame.bone_masks[b],
                                                          bone, g, cfg, &de_diag);
                res = refine_local(frame.image, bone, g, t0pose, cfg);
                res.stages.insert(res.stages.begin(), de_diag.stages.begin(),
                                  de_diag.stages.end());
            }
        } catch (const std::exception& e) {
            res = BoneResult{};
            res.label = bone.label;
            res.failed = true;
            res.message = e.what();
            res.cost = kUndefinedCost;
            res.pose = state ? (*state)->previous : Pose6DoF::identity(bone.pivot);
        }
        out.bones.push_back(std::move(res));
    }
    out.flagged = std::any_of(out.bones.begin(), out.bones.end(),
                              [](const BoneResult& r) { return r.failed; });
    out.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

SequenceResult track_sequence(const std::vector<FixedFrame>& frames,
                              const std::vector<BoneModel>& bones,
                              const ProjectionGeometry& g, const RegistrationConfig& cfg) {
    cfg.validate();
    if (frames.empty()) throw std::invalid_argument("track_sequence: no frames");
    const Vec3 axis = cfg.kpm.flexion_axis.normalized();

    SequenceResult seq;
    seq.frames.reserve(frames.size());
    seq.states.reserve(frames.size());
    // The prediction needs a velocity, and a velocity needs two successful
    // frames: the prior handed to register_frame stays empty (global-init
    // path) until a bone has a measured T_n - T_{n-1}.
    std::vector<std::optional<KPMState>> prior(bones.size());
    std::vector<std::optional<Pose6DoF>> last(bones.size());

    for (const FixedFrame& frame : frames) {
        seq.frames.push_back(register_frame(frame, bones, g, prior, cfg));
        const RegistrationResult& fr = seq.frames.back();

        std::vector<KPMState> snapshot(bones.size());
        for (std::size_t b = 0; b < bones.size(); ++b) {
            if (!fr.bones[b].failed) {
                KPMState next;
                next.previous = fr.bones[b].pose;
                next.flexion_axis = axis;
                if (last[b]) {
                    const std::array<double, 6> now = fr.bones[b].pose.params();
                    const std::array<double, 6> before = last[b]->params();
                    for (int i = 0; i < 6; ++i) next.velocity[i] = now[i] - before[i];
                    prior[b] = next;
                }
                last[b] = fr.bones[b].pose;
                snapshot[b] = next;
            } else if (prior[b]) {
                // A failed bone keeps its last good state.
                snapshot[b] = *prior[b];
            } else {
                snapshot[b].previous =
                    last[b] ? *last[b] : Pose6DoF::identity(bones[b].pivot);
                snapshot[b].flexion_axis = axis;
            }
        }
        seq.states.push_back(std::move(snapshot));
    }
    return seq;
}

}  // namespace bonereg
