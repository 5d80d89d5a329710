#include "bonereg/pose.hpp"

#include <cmath>
#include <stdexcept>

namespace bonereg {

namespace {

constexpr double kRigidTol = 1e-9;

Mat3 rot_x(double rad) {
    double c = std::cos(rad), s = std::sin(rad);
    Mat3 r = Mat3::identity();
    r(1, 1) = c; r(1, 2) = -s;
    r(2, 1) = s; r(2, 2) = c;
    return r;
}

Mat3 rot_y(double rad) {
    double c = std::cos(rad), s = std::sin(rad);
    Mat3 r = Mat3::identity();
    r(0, 0) = c;  r(0, 2) = s;
    r(2, 0) = -s; r(2, 2) = c;
    return r;
}

Mat3 rot_z(double rad) {
    double c = std::cos(rad), s = std::sin(rad);
    Mat3 r = Mat3::identity();
    r(0, 0) = c; r(0, 1) = -s;
    r(1, 0) = s; r(1, 1) = c;
    return r;
}

}  // namespace

Mat3 Mat3::axis_angle(const Vec3& unit_axis, double angle_rad) {
    const Vec3 a = unit_axis;
    double c = std::cos(angle_rad), s = std::sin(angle_rad), t = 1.0 - c;
    Mat3 r;
    r(0, 0) = t * a.x * a.x + c;
    r(0, 1) = t * a.x * a.y - s * a.z;
    r(0, 2) = t * a.x * a.z + s * a.y;
    r(1, 0) = t * a.x * a.y + s * a.z;
    r(1, 1) = t * a.y * a.y + c;
    r(1, 2) = t * a.y * a.z - s * a.x;
    r(2, 0) = t * a.x * a.z - s * a.y;
    r(2, 1) = t * a.y * a.z + s * a.x;
    r(2, 2) = t * a.z * a.z + c;
    return r;
}

bool Pose6DoF::finite() const {
    return std::isfinite(tx) && std::isfinite(ty) && std::isfinite(tz) &&
           std::isfinite(r_alpha) && std::isfinite(r_beta) && std::isfinite(r_gamma) &&
           pivot.finite();
}

RigidMatrix RigidMatrix::compose(const RigidMatrix& o) const {
    return {rotation * o.rotation, rotation * o.translation + translation};
}

RigidMatrix RigidMatrix::inverse() const {
    Mat3 rt = rotation.transposed();
    return {rt, -(rt * translation)};
}

void RigidMatrix::validate() const {
    Mat3 rtr = rotation.transposed() * rotation;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double want = i == j ? 1.0 : 0.0;
            if (std::abs(rtr(i, j) - want) > kRigidTol)
                throw std::invalid_argument("rotation block is not orthonormal");
        }
    if (std::abs(rotation.det() - 1.0) > kRigidTol)
        throw std::invalid_argument("rotation block determinant is not +1");
    if (!translation.finite())
        throw std::invalid_argument("translation is not finite");
}

RigidMatrix pose_to_matrix(const Pose6DoF& p) {
    if (!p.finite()) throw std::invalid_argument("pose has non-finite fields");
    Mat3 r = rot_z(deg_to_rad(p.r_gamma)) * rot_y(deg_to_rad(p.r_beta)) *
             rot_x(deg_to_rad(p.r_alpha));
    // x -> R*(x - pivot) + pivot + t
    Vec3 t = p.pivot + Vec3{p.tx, p.ty, p.tz} - r * p.pivot;
    return {r, t};
}

Pose6DoF pose_from_matrix(const RigidMatrix& m, const Vec3& pivot) {
    const Mat3& r = m.rotation;
    // R = Rz(g)*Ry(b)*Rx(a):
    //   r20 = -sin(b); r21 = cos(b) sin(a); r22 = cos(b) cos(a)
    //   r10 = sin(g) cos(b); r00 = cos(g) cos(b)
    double sb = -r(2, 0);
    sb = std::max(-1.0, std::min(1.0, sb));
    double beta = std::asin(sb);
    double alpha, gamma;
    if (std::abs(std::cos(beta)) > 1e-12) {
        alpha = std::atan2(r(2, 1), r(2, 2));
        gamma = std::atan2(r(1, 0), r(0, 0));
    } else {
        // Gimbal lock: split is not unique, pick alpha = 0.
        alpha = 0.0;
        gamma = std::atan2(-r(0, 1), r(1, 1));
    }
    Pose6DoF p;
    p.r_alpha = rad_to_deg(alpha);
    p.r_beta = rad_to_deg(beta);
    p.r_gamma = rad_to_deg(gamma);
    p.pivot = pivot;
    Vec3 t = m.translation - pivot + r * pivot;
    p.tx = t.x;
    p.ty = t.y;
    p.tz = t.z;
    return p;
}

Vec3 apply_pose(const Pose6DoF& p, const Vec3& point) {
    return pose_to_matrix(p).apply(point);
}

namespace {

void require_same_pivot(const Vec3& a, const Vec3& b, const char* what) {
    if ((a - b).norm() > 1e-9)
        throw std::invalid_argument(std::string(what) + ": poses have different pivots");
}

}  // namespace

Pose6DoF compose_poses(const Pose6DoF& a, const Pose6DoF& b) {
    require_same_pivot(a.pivot, b.pivot, "compose_poses");
    return pose_from_matrix(pose_to_matrix(a).compose(pose_to_matrix(b)), a.pivot);
}

Pose6DoF invert_pose(const Pose6DoF& p) {
    return pose_from_matrix(pose_to_matrix(p).inverse(), p.pivot);
}

double wrap_angle_diff_deg(double a_deg, double b_deg) {
    double d = std::fmod(std::abs(a_deg - b_deg), 360.0);
    return d > 180.0 ? 360.0 - d : d;
}

std::array<double, 6> pose_difference(const Pose6DoF& a, const Pose6DoF& b) {
    require_same_pivot(a.pivot, b.pivot, "pose_difference");
    return {std::abs(a.tx - b.tx),
            std::abs(a.ty - b.ty),
            std::abs(a.tz - b.tz),
            wrap_angle_diff_deg(a.r_alpha, b.r_alpha),
            wrap_angle_diff_deg(a.r_beta, b.r_beta),
            wrap_angle_diff_deg(a.r_gamma, b.r_gamma)};
}

Pose6DoF pose_from_axis_rotation(const Vec3& axis_point, const Vec3& axis_dir,
                                 double angle_deg, const Vec3& pivot) {
    Mat3 r = Mat3::axis_angle(axis_dir.normalized(), deg_to_rad(angle_deg));
    // x -> R*(x - a) + a  ==  R*x + (a - R*a)
    Vec3 t = axis_point - r * axis_point;
    return pose_from_matrix({r, t}, pivot);
}

}  // namespace bonereg
