#pragma once

#include <array>
#include <string>
#include <vector>

#include "bonereg/phantom.hpp"
#include "bonereg/pose.hpp"
#include "bonereg/registration.hpp"
#include "bonereg/vec.hpp"
#include "json.hpp"

namespace bonereg {

/// Which reference plane the contact distances are measured against.
enum class PlateauMode {
    post_tka,  // plane through the three posed plateau anchors
    pre_tka,   // same plane shifted inferiorly along its normal
};

inline constexpr double kPreTkaInferiorOffsetMm = 9.0;
inline constexpr double kMalalignmentThresholdMm = 2.0;

/// Tibial-plateau reference frame: an in-plane 2D coordinate system (medial
/// axis, secondary axis) plus a signed height along the normal.
struct PlateauPlane {
    Vec3 anchor{};       // origin of the in-plane 2D coordinates
    Vec3 normal{};       // unit, toward the tibia's posed superior side
    Vec3 medial_axis{};  // unit, in-plane, toward the medial anchor

    Vec3 secondary_axis() const { return normal.cross(medial_axis); }
    double signed_distance(const Vec3& p) const { return (p - anchor).dot(normal); }
    /// (medial, secondary) components of the orthogonal projection of p.
    std::array<double, 2> project(const Vec3& p) const;
    void validate() const;  // orthonormal within 1e-9
};

/// Plane through the three posed plateau anchor landmarks (post-TKA mode),
/// or that plane shifted 9 mm inferiorly along its normal (pre-TKA mode).
/// The medial axis is the posed medial-anchor direction projected in-plane.
/// Throws std::invalid_argument on collinear anchors.
PlateauPlane fit_plateau_plane(const Pose6DoF& tibia_pose, const KneeLandmarks& landmarks,
                               PlateauMode mode);

struct CondyleContact {
    double medial_mm = 0.0;  // signed height of the lowest medial-region point
    double lateral_mm = 0.0;
    std::array<double, 2> medial_point{};  // plateau 2D coords of that point
    std::array<double, 2> lateral_point{};
};

/// Lowest posed point of each condyle region along the plateau normal, its
/// signed distance, and its in-plane projection. Throws std::invalid_argument
/// on an empty region.
CondyleContact condyle_distances(const Pose6DoF& femur_pose, const PlateauPlane& plateau,
                                 const std::vector<Vec3>& medial_region,
                                 const std::vector<Vec3>& lateral_region);

/// Angle in [0, 180) degrees between the posed femoral and tibial shaft
/// directions (each bone's reference principal direction rotated by its
/// pose). Zero at the phantom's neutral construction.
double extension_angle(const Vec3& femur_shaft_dir, const Pose6DoF& femur_pose,
                       const Vec3& tibia_shaft_dir, const Pose6DoF& tibia_pose);

struct ContactSample {
    int frame = 0;
    double extension_deg = 0.0;
    double medial_mm = 0.0;
    double lateral_mm = 0.0;
    std::array<double, 2> medial_point{};
    std::array<double, 2> lateral_point{};
};

/// One medial-to-lateral segment of the contact trajectory (Fig. 7-style
/// linkage), in plateau 2D coordinates.
struct LinkageSegment {
    std::array<double, 2> medial{};
    std::array<double, 2> lateral{};
};

struct KinematicReport {
    std::vector<ContactSample> samples;  // successful frames, ascending order
    std::vector<double> mld_mm;          // medial - lateral, one per sample
    std::vector<LinkageSegment> linkage;
    double ddv_mm2 = 0.0;  // population variance of the MLD series
    double max_abs_mld_mm = 0.0;
    bool malalignment = false;  // max |MLD| strictly above the threshold
};

struct KinematicsConfig {
    KneeLandmarks landmarks;
    PlateauMode mode = PlateauMode::post_tka;
    Vec3 femur_shaft_axis{0, 0, 1};  // reference principal directions
    Vec3 tibia_shaft_axis{0, 0, 1};
    double malalignment_threshold_mm = kMalalignmentThresholdMm;
};

/// Derives the MLD series, DDV, max |MLD|, malalignment flag, and linkage
/// from per-frame samples. Throws std::invalid_argument on an empty list.
KinematicReport assemble_report(std::vector<ContactSample> samples,
                                double malalignment_threshold_mm = kMalalignmentThresholdMm);

/// Full kinematic post-processing of a tracked sequence: for every frame
/// whose femur and tibia-fibula registrations both succeeded, fits the
/// plateau plane from the tibial pose, measures condyle contact, and scores
/// the extension angle. Throws std::runtime_error when no frame qualifies.
KinematicReport build_report(const SequenceResult& seq, const KinematicsConfig& cfg);

/// CSV export (one row per sample): frame, extension_deg, medial_mm,
/// lateral_mm, MLD_mm, med_px, med_py, lat_px, lat_py. Values are printed
/// round-trip exact (%.17g).
std::string contact_csv(const KinematicReport& report);
void save_contact_csv(const KinematicReport& report, const std::string& path);

nlohmann::json kinematic_summary_to_json(const KinematicReport& report);

}  // namespace bonereg
