#include "bonereg/kinematics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace bonereg {

std::array<double, 2> PlateauPlane::project(const Vec3& p) const {
    const Vec3 d = p - anchor;
    const Vec3 q = d - normal * d.dot(normal);
    return {q.dot(medial_axis), q.dot(secondary_axis())};
}

void PlateauPlane::validate() const {
    if (std::abs(normal.norm() - 1.0) > 1e-9 || std::abs(medial_axis.norm() - 1.0) > 1e-9 ||
        std::abs(normal.dot(medial_axis)) > 1e-9)
        throw std::invalid_argument("PlateauPlane: normal/medial axis not orthonormal");
}

PlateauPlane fit_plateau_plane(const Pose6DoF& tibia_pose, const KneeLandmarks& landmarks,
                               PlateauMode mode) {
    const RigidMatrix m = pose_to_matrix(tibia_pose);
    std::array<Vec3, 3> a;
    for (int k = 0; k < 3; ++k) a[k] = m.apply(landmarks.plateau_anchors[k]);

    Vec3 n = (a[1] - a[0]).cross(a[2] - a[0]);
    if (n.norm() < 1e-9)
        throw std::invalid_argument("fit_plateau_plane: collinear plateau anchors");
    n = n.normalized();
    // Keep the normal on the tibia's posed superior side so heights above
    // the plateau stay positive under any pose.
    if (n.dot(m.rotation * Vec3{0, 0, 1}) < 0.0) n = -n;

    PlateauPlane plane;
    plane.normal = n;
    plane.anchor = (a[0] + a[1] + a[2]) / 3.0;
    const Vec3 toward_medial = a[0] - plane.anchor;
    const Vec3 in_plane = toward_medial - n * toward_medial.dot(n);
    if (in_plane.norm() < 1e-9)
        throw std::invalid_argument("fit_plateau_plane: medial anchor has no in-plane direction");
    plane.medial_axis = in_plane.normalized();
    if (mode == PlateauMode::pre_tka) plane.anchor = plane.anchor - n * kPreTkaInferiorOffsetMm;
    plane.validate();
    return plane;
}

namespace {

struct LowestPoint {
    double dist = std::numeric_limits<double>::infinity();
    Vec3 point{};
};

LowestPoint lowest_along_normal(const RigidMatrix& m, const PlateauPlane& plane,
                                const std::vector<Vec3>& region, const char* which) {
    if (region.empty())
        throw std::invalid_argument(std::string("condyle_distances: empty ") + which +
                                    " region");
    LowestPoint best;
    for (const Vec3& s : region) {
        const Vec3 p = m.apply(s);
        const double d = plane.signed_distance(p);
        if (d < best.dist) {
            best.dist = d;
            best.point = p;
        }
    }
    return best;
}

}  // namespace

CondyleContact condyle_distances(const Pose6DoF& femur_pose, const PlateauPlane& plateau,
                                 const std::vector<Vec3>& medial_region,
                                 const std::vector<Vec3>& lateral_region) {
    plateau.validate();
    const RigidMatrix m = pose_to_matrix(femur_pose);
    const LowestPoint med = lowest_along_normal(m, plateau, medial_region, "medial");
    const LowestPoint lat = lowest_along_normal(m, plateau, lateral_region, "lateral");
    CondyleContact c;
    c.medial_mm = med.dist;
    c.lateral_mm = lat.dist;
    c.medial_point = plateau.project(med.point);
    c.lateral_point = plateau.project(lat.point);
    return c;
}

double extension_angle(const Vec3& femur_shaft_dir, const Pose6DoF& femur_pose,
                       const Vec3& tibia_shaft_dir, const Pose6DoF& tibia_pose) {
    if (femur_shaft_dir.norm() <= 0.0 || tibia_shaft_dir.norm() <= 0.0)
        throw std::invalid_argument("extension_angle: zero shaft direction");
    const Vec3 a = (pose_to_matrix(femur_pose).rotation * femur_shaft_dir).normalized();
    const Vec3 b = (pose_to_matrix(tibia_pose).rotation * tibia_shaft_dir).normalized();
    const double deg = std::acos(std::clamp(a.dot(b), -1.0, 1.0)) * 180.0 / M_PI;
    return std::min(deg, std::nextafter(180.0, 0.0));  // half-open [0, 180)
}

KinematicReport assemble_report(std::vector<ContactSample> samples,
                                double malalignment_threshold_mm) {
    if (samples.empty()) throw std::invalid_argument("assemble_report: no samples");
    if (!(malalignment_threshold_mm > 0.0))
        throw std::invalid_argument("assemble_report: threshold must be positive");

    KinematicReport r;
    r.samples = std::move(samples);
    r.mld_mm.reserve(r.samples.size());
    r.linkage.reserve(r.samples.size());
    for (const ContactSample& s : r.samples) {
        r.mld_mm.push_back(s.medial_mm - s.lateral_mm);
        r.linkage.push_back({s.medial_point, s.lateral_point});
    }

    double mean = 0.0;
    for (double v : r.mld_mm) mean += v;
    mean /= static_cast<double>(r.mld_mm.size());
    double var = 0.0;
    for (double v : r.mld_mm) var += (v - mean) * (v - mean);
    r.ddv_mm2 = var / static_cast<double>(r.mld_mm.size());  // population variance
    for (double v : r.mld_mm) r.max_abs_mld_mm = std::max(r.max_abs_mld_mm, std::abs(v));
    r.malalignment = r.max_abs_mld_mm > malalignment_threshold_mm;
    return r;
}

KinematicReport build_report(const SequenceResult& seq, const KinematicsConfig& cfg) {
    std::vector<ContactSample> samples;
    for (std::size_t f = 0; f < seq.frames.size(); ++f) {
        const BoneResult* femur = nullptr;
        const BoneResult* tibia = nullptr;
        for (const BoneResult& b : seq.frames[f].bones) {
            if (b.label == BoneLabel::femur) femur = &b;
            if (b.label == BoneLabel::tibia_fibula) tibia = &b;
        }
        if (!femur || !tibia || femur->failed || tibia->failed) continue;

        const PlateauPlane plane = fit_plateau_plane(tibia->pose, cfg.landmarks, cfg.mode);
        const CondyleContact c = condyle_distances(femur->pose, plane, cfg.landmarks.medial_cap,
                                                   cfg.landmarks.lateral_cap);
        ContactSample s;
        s.frame = static_cast<int>(f);
        s.extension_deg =
            extension_angle(cfg.femur_shaft_axis, femur->pose, cfg.tibia_shaft_axis, tibia->pose);
        s.medial_mm = c.medial_mm;
        s.lateral_mm = c.lateral_mm;
        s.medial_point = c.medial_point;
        s.lateral_point = c.lateral_point;
        samples.push_back(s);
    }
    if (samples.empty())
        throw std::runtime_error(
            "build_report: no successfully registered frame has both femur and tibia-fibula");
    return assemble_report(std::move(samples), cfg.malalignment_threshold_mm);
}

std::string contact_csv(const KinematicReport& report) {
    std::string out =
        "frame,extension_deg,medial_mm,lateral_mm,MLD_mm,med_px,med_py,lat_px,lat_py\n";
    char buf[320];
    for (std::size_t i = 0; i < report.samples.size(); ++i) {
        const ContactSample& s = report.samples[i];
        std::snprintf(buf, sizeof(buf),
                      "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", s.frame,
                      s.extension_deg, s.medial_mm, s.lateral_mm, report.mld_mm[i],
                      s.medial_point[0], s.medial_point[1], s.lateral_point[0],
                      s.lateral_point[1]);
        out += buf;
    }
    return out;
}

void save_contact_csv(const KinematicReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write contact CSV: " + path);
    out << contact_csv(report);
}

nlohmann::json kinematic_summary_to_json(const KinematicReport& report) {
    return nlohmann::json{{"frames", report.samples.size()},
                          {"ddv_mm2", report.ddv_mm2},
                          {"max_abs_mld_mm", report.max_abs_mld_mm},
                          {"malalignment", report.malalignment}};
}

}  // namespace bonereg
