#pragma once

#include <array>
#include <string>

#include "bonereg/vec.hpp"

namespace bonereg {

/// Rigid 6-DoF pose: three translations (mm) and three rotation angles
/// (degrees) applied about an explicit pivot point (mm, world coordinates).
///
/// Rotation convention is intrinsic Z-Y-X: the rotation matrix is
/// Rz(r_gamma) * Ry(r_beta) * Rx(r_alpha), applied about `pivot`, followed by
/// the translation. This order is normative for the whole library and is
/// recorded in serialized poses as "ZYX-intrinsic".
struct Pose6DoF {
    double tx = 0.0;       // mm
    double ty = 0.0;       // mm
    double tz = 0.0;       // mm
    double r_alpha = 0.0;  // deg, about x
    double r_beta = 0.0;   // deg, about y
    double r_gamma = 0.0;  // deg, about z
    Vec3 pivot{};          // mm, world

    static Pose6DoF identity(const Vec3& pivot = {}) {
        Pose6DoF p;
        p.pivot = pivot;
        return p;
    }

    std::array<double, 6> params() const { return {tx, ty, tz, r_alpha, r_beta, r_gamma}; }

    static Pose6DoF from_params(const std::array<double, 6>& q, const Vec3& pivot) {
        return Pose6DoF{q[0], q[1], q[2], q[3], q[4], q[5], pivot};
    }

    bool finite() const;
};

inline constexpr const char* kEulerConvention = "ZYX-intrinsic";

/// Rigid transform as rotation block + translation: x -> R*x + t.
/// The rotation block must be orthonormal with det +1 (checked to 1e-9 by
/// validate()).
struct RigidMatrix {
    Mat3 rotation;
    Vec3 translation;

    Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
    RigidMatrix compose(const RigidMatrix& o) const;  // this ∘ o
    RigidMatrix inverse() const;
    void validate() const;  // throws std::invalid_argument when not rigid
};

/// Convert pose to its rigid matrix. Throws std::invalid_argument on
/// non-finite fields.
RigidMatrix pose_to_matrix(const Pose6DoF& p);

/// Recover the six parameters from a rigid matrix given the pivot. Exact
/// round trip for r_beta in (-90, 90) degrees.
Pose6DoF pose_from_matrix(const RigidMatrix& m, const Vec3& pivot);

/// Apply the pose to a world point.
Vec3 apply_pose(const Pose6DoF& p, const Vec3& point);

/// Pose equal to applying `b` first, then `a`. Both poses must share the
/// same pivot (within 1e-9 mm).
Pose6DoF compose_poses(const Pose6DoF& a, const Pose6DoF& b);

/// Pose undoing `p` (same pivot).
Pose6DoF invert_pose(const Pose6DoF& p);

/// Componentwise absolute errors (mm, mm, mm, deg, deg, deg); angle
/// differences wrapped into [0, 180]. Requires equal pivots.
std::array<double, 6> pose_difference(const Pose6DoF& a, const Pose6DoF& b);

/// Absolute angular difference wrapped into [0, 180] degrees.
double wrap_angle_diff_deg(double a_deg, double b_deg);

/// Pose performing a rotation of `angle_deg` about the axis through
/// `axis_point` with direction `axis_dir`, expressed with pivot `pivot`.
Pose6DoF pose_from_axis_rotation(const Vec3& axis_point, const Vec3& axis_dir,
                                 double angle_deg, const Vec3& pivot);

}  // namespace bonereg
