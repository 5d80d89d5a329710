#include "bonereg/kinematics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "bonereg/phantom.hpp"
#include "doctest.h"

using namespace bonereg;

namespace {

const KneePhantom& phantom() {
    static const KneePhantom p = make_knee_phantom();
    return p;
}

Vec3 shaft_axis(int mask_index) {
    return principal_axis(mask_to_pointcloud(phantom().masks[mask_index], 20000)).direction;
}

Pose6DoF posed(const RigidMatrix& extra, const Pose6DoF& base) {
    return pose_from_matrix(extra.compose(pose_to_matrix(base)), base.pivot);
}

// Hand-built sequence: every frame carries a femur and a tibia-fibula result.
SequenceResult constant_sequence(int frames, const Pose6DoF& femur_pose,
                                 const Pose6DoF& tibia_pose) {
    SequenceResult seq;
    for (int f = 0; f < frames; ++f) {
        RegistrationResult r;
        BoneResult fe;
        fe.label = BoneLabel::femur;
        fe.pose = femur_pose;
        BoneResult ti;
        ti.label = BoneLabel::tibia_fibula;
        ti.pose = tibia_pose;
        r.bones = {fe, ti};
        seq.frames.push_back(r);
    }
    return seq;
}

ContactSample sample_with_mld(double medial, double lateral) {
    ContactSample s;
    s.medial_mm = medial;
    s.lateral_mm = lateral;
    return s;
}

}  // namespace

TEST_CASE("plateau plane at identity matches the analytic construction") {
    const PlateauPlane p =
        fit_plateau_plane(Pose6DoF::identity(), phantom().landmarks, PlateauMode::post_tka);
    // Anchors share one height, so the analytic normal is exactly +z.
    CHECK(std::abs(p.normal.x) < 1e-6);
    CHECK(std::abs(p.normal.y) < 1e-6);
    CHECK(p.normal.z == doctest::Approx(1.0).epsilon(1e-9));
    // First anchor is medial (+x), the ring is centered on the z axis.
    CHECK(p.medial_axis.x == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(std::abs(p.anchor.x) < 1e-9);
    CHECK(std::abs(p.anchor.y) < 1e-9);
    CHECK(p.anchor.z == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_NOTHROW(p.validate());
    CHECK(p.secondary_axis().y == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("pre-TKA plane is the post-TKA plane shifted 9 mm inferiorly") {
    const Pose6DoF pose{2.0, -1.0, 3.0, 5.0, -4.0, 7.0, {0, 0, -20}};
    const PlateauPlane post = fit_plateau_plane(pose, phantom().landmarks, PlateauMode::post_tka);
    const PlateauPlane pre = fit_plateau_plane(pose, phantom().landmarks, PlateauMode::pre_tka);
    CHECK((pre.normal - post.normal).norm() == 0.0);
    CHECK((pre.medial_axis - post.medial_axis).norm() == 0.0);
    const Vec3 expected = post.anchor - post.normal * 9.0;
    CHECK((pre.anchor - expected).norm() < 1e-12);
}

TEST_CASE("rotating the tibia pose rotates the plane with it") {
    const Pose6DoF id = Pose6DoF::identity();
    const PlateauPlane base = fit_plateau_plane(id, phantom().landmarks, PlateauMode::post_tka);

    const Pose6DoF q{4.0, -2.0, 1.0, 12.0, 8.0, -15.0, {3, 1, -7}};
    const PlateauPlane moved = fit_plateau_plane(q, phantom().landmarks, PlateauMode::post_tka);
    const RigidMatrix m = pose_to_matrix(q);
    CHECK((moved.normal - m.rotation * base.normal).norm() < 1e-9);
    CHECK((moved.medial_axis - m.rotation * base.medial_axis).norm() < 1e-9);
    CHECK((moved.anchor - m.apply(base.anchor)).norm() < 1e-9);
}

TEST_CASE("collinear plateau anchors are rejected") {
    KneeLandmarks lm = phantom().landmarks;
    lm.plateau_anchors = {Vec3{0, 0, 0}, Vec3{1, 0, 0}, Vec3{2, 0, 0}};
    CHECK_THROWS_AS(fit_plateau_plane(Pose6DoF::identity(), lm, PlateauMode::post_tka),
                    std::invalid_argument);

    PlateauPlane bad;
    bad.normal = {0, 0, 1};
    bad.medial_axis = {0, 0.5, 0.8};  // neither unit nor orthogonal
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("condyle distances reproduce the sphere-above-plane oracle") {
    const KneeLandmarks& lm = phantom().landmarks;
    const PlateauPlane p =
        fit_plateau_plane(Pose6DoF::identity(), lm, PlateauMode::post_tka);
    const CondyleContact c =
        condyle_distances(Pose6DoF::identity(), p, lm.medial_cap, lm.lateral_cap);

    // Sphere centers sit 15 mm above the plane; the lowest cap sample lies
    // within the spiral's sag of the true bottom h - r = 4 mm.
    const double expected = (lm.medial_condyle_center.z - 1.0) - lm.condyle_radius;
    CHECK(c.medial_mm == doctest::Approx(expected).epsilon(0.05));
    CHECK(c.lateral_mm == doctest::Approx(expected).epsilon(0.05));
    // Symmetric phantom at neutral: the two condyles measure alike.
    CHECK(std::abs(c.medial_mm - c.lateral_mm) < 0.2);
    // Lowest points project near the condyle centers, mirrored in x.
    CHECK(c.medial_point[0] == doctest::Approx(lm.medial_condyle_center.x).epsilon(0.15));
    CHECK(c.lateral_point[0] == doctest::Approx(lm.lateral_condyle_center.x).epsilon(0.15));
}

TEST_CASE("translating the femur along the plane normal shifts both distances") {
    const KneeLandmarks& lm = phantom().landmarks;
    const PlateauPlane p = fit_plateau_plane(Pose6DoF::identity(), lm, PlateauMode::post_tka);
    const CondyleContact base =
        condyle_distances(Pose6DoF::identity(), p, lm.medial_cap, lm.lateral_cap);

    Pose6DoF lifted = Pose6DoF::identity();
    lifted.tx = 2.0 * p.normal.x;
    lifted.ty = 2.0 * p.normal.y;
    lifted.tz = 2.0 * p.normal.z;
    const CondyleContact moved = condyle_distances(lifted, p, lm.medial_cap, lm.lateral_cap);
    CHECK(moved.medial_mm == doctest::Approx(base.medial_mm + 2.0).epsilon(1e-9));
    CHECK(moved.lateral_mm == doctest::Approx(base.lateral_mm + 2.0).epsilon(1e-9));
    // Same winning sample, so the in-plane projection is unchanged.
    CHECK(moved.medial_point[0] == doctest::Approx(base.medial_point[0]).epsilon(1e-12));
    CHECK(moved.medial_point[1] == doctest::Approx(base.medial_point[1]).epsilon(1e-12));
}

TEST_CASE("empty condyle regions are rejected") {
    const PlateauPlane p =
        fit_plateau_plane(Pose6DoF::identity(), phantom().landmarks, PlateauMode::post_tka);
    CHECK_THROWS_AS(
        condyle_distances(Pose6DoF::identity(), p, {}, phantom().landmarks.lateral_cap),
        std::invalid_argument);
    CHECK_THROWS_AS(
        condyle_distances(Pose6DoF::identity(), p, phantom().landmarks.medial_cap, {}),
        std::invalid_argument);
}

TEST_CASE("extension angle is near zero at the neutral construction") {
    const Vec3 fa = shaft_axis(0);
    const Vec3 ta = shaft_axis(2);
    const double deg =
        extension_angle(fa, Pose6DoF::identity(), ta, Pose6DoF::identity());
    CHECK(deg >= 0.0);
    CHECK(deg < 0.5);
}

TEST_CASE("a 30 degree flexion reads as 30 degrees") {
    const Vec3 fa = shaft_axis(0);
    const Vec3 ta = shaft_axis(2);
    const Pose6DoF flexed =
        pose_from_axis_rotation({0, 0, 16}, {1, 0, 0}, 30.0, {0, 0, 30});
    const double deg = extension_angle(fa, flexed, ta, Pose6DoF::identity());
    CHECK(deg == doctest::Approx(30.0).epsilon(0.5 / 30.0));
}

TEST_CASE("extension angle is invariant under a common rigid transform") {
    const Vec3 fa = shaft_axis(0);
    const Vec3 ta = shaft_axis(2);
    const Pose6DoF femur_pose{1, 2, 3, 25.0, -10.0, 5.0, {0, 0, 30}};
    const Pose6DoF tibia_pose{-2, 1, 0, 3.0, 6.0, -9.0, {0, 0, -25}};
    const double base = extension_angle(fa, femur_pose, ta, tibia_pose);

    const RigidMatrix q = pose_to_matrix(Pose6DoF{7, -4, 2, 18.0, -22.0, 31.0, {5, 5, 5}});
    const double moved =
        extension_angle(fa, posed(q, femur_pose), ta, posed(q, tibia_pose));
    CHECK(moved == doctest::Approx(base).epsilon(1e-9));

    CHECK_THROWS_AS(extension_angle({0, 0, 0}, femur_pose, ta, tibia_pose),
                    std::invalid_argument);
}

TEST_CASE("assemble_report derives MLD, DDV, and the malalignment flag") {
    SUBCASE("constant series has zero variance and no flag") {
        std::vector<ContactSample> s(4, sample_with_mld(3.0, 2.2));
        const KinematicReport r = assemble_report(s);
        CHECK(r.ddv_mm2 == 0.0);
        for (double v : r.mld_mm) CHECK(v == doctest::Approx(0.8).epsilon(1e-12));
        CHECK(r.max_abs_mld_mm == doctest::Approx(0.8).epsilon(1e-12));
        CHECK_FALSE(r.malalignment);
        CHECK(r.linkage.size() == 4);
    }

    SUBCASE("MLD series {1, 3} trips the 2 mm flag") {
        const KinematicReport r =
            assemble_report({sample_with_mld(1.0, 0.0), sample_with_mld(3.0, 0.0)});
        CHECK(r.mld_mm == std::vector<double>{1.0, 3.0});
        CHECK(r.max_abs_mld_mm == 3.0);
        CHECK(r.malalignment);
        // Population variance of {1, 3}: mean 2, squared deviations 1 each.
        CHECK(r.ddv_mm2 == doctest::Approx(1.0).epsilon(1e-12));
    }

    SUBCASE("the flag threshold is strict") {
        const KinematicReport r =
            assemble_report({sample_with_mld(2.0, 0.0), sample_with_mld(-2.0, 0.0)});
        CHECK(r.max_abs_mld_mm == 2.0);
        CHECK_FALSE(r.malalignment);
    }

    SUBCASE("stored MLD equals medial minus lateral") {
        const KinematicReport r = assemble_report(
            {sample_with_mld(4.1, 2.9), sample_with_mld(3.3, 3.4), sample_with_mld(5.0, 1.0)});
        for (std::size_t i = 0; i < r.samples.size(); ++i)
            CHECK(std::abs(r.mld_mm[i] - (r.samples[i].medial_mm - r.samples[i].lateral_mm)) <=
                  1e-12);
    }

    SUBCASE("empty input is rejected") {
        CHECK_THROWS_AS(assemble_report({}), std::invalid_argument);
    }
}

TEST_CASE("build_report walks the sequence and skips failed frames") {
    KinematicsConfig cfg;
    cfg.landmarks = phantom().landmarks;
    cfg.femur_shaft_axis = shaft_axis(0);
    cfg.tibia_shaft_axis = shaft_axis(2);

    SequenceResult seq = constant_sequence(3, Pose6DoF::identity({0, 0, 30}),
                                           Pose6DoF::identity({0, 0, -25}));
    const KinematicReport all = build_report(seq, cfg);
    CHECK(all.samples.size() == 3);
    CHECK(all.ddv_mm2 == 0.0);
    for (double v : all.mld_mm) CHECK(std::abs(v - all.mld_mm[0]) < 1e-9);
    CHECK(all.linkage.size() == 3);
    CHECK(all.samples[0].extension_deg < 0.5);
    CHECK_FALSE(all.malalignment);

    seq.frames[1].bones[0].failed = true;  // femur lost in the middle frame
    const KinematicReport partial = build_report(seq, cfg);
    CHECK(partial.samples.size() == 2);
    CHECK(partial.samples[0].frame == 0);
    CHECK(partial.samples[1].frame == 2);

    for (RegistrationResult& fr : seq.frames)
        for (BoneResult& b : fr.bones) b.failed = true;
    CHECK_THROWS_AS(build_report(seq, cfg), std::runtime_error);
}

TEST_CASE("an injected medial drop trips the malalignment flag") {
    KinematicsConfig cfg;
    cfg.landmarks = phantom().landmarks;
    cfg.femur_shaft_axis = shaft_axis(0);
    cfg.tibia_shaft_axis = shaft_axis(2);
    // Sink the medial contact surface 3 mm: |MLD| ~ 3 mm > 2 mm.
    for (Vec3& p : cfg.landmarks.medial_cap) p.z -= 3.0;

    const SequenceResult seq = constant_sequence(2, Pose6DoF::identity({0, 0, 30}),
                                                 Pose6DoF::identity({0, 0, -25}));
    const KinematicReport r = build_report(seq, cfg);
    CHECK(r.max_abs_mld_mm == doctest::Approx(3.0).epsilon(0.2 / 3.0));
    CHECK(r.malalignment);
}

TEST_CASE("contact CSV round-trips every column") {
    const KinematicReport r = assemble_report(
        {sample_with_mld(4.125, 2.0), sample_with_mld(3.875, 4.25), sample_with_mld(5.5, 1.5)});
    const std::string csv = contact_csv(r);

    std::istringstream in(csv);
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line == "frame,extension_deg,medial_mm,lateral_mm,MLD_mm,med_px,med_py,lat_px,lat_py");
    std::size_t row = 0;
    while (std::getline(in, line)) {
        std::istringstream cells(line);
        std::string cell;
        std::vector<double> v;
        while (std::getline(cells, cell, ',')) v.push_back(std::stod(cell));
        REQUIRE(v.size() == 9);
        CHECK(v[0] == static_cast<double>(r.samples[row].frame));
        CHECK(v[2] == r.samples[row].medial_mm);   // %.17g round-trips exactly
        CHECK(v[3] == r.samples[row].lateral_mm);
        CHECK(v[4] == r.mld_mm[row]);
        ++row;
    }
    CHECK(row == r.samples.size());

    const nlohmann::json j = kinematic_summary_to_json(r);
    CHECK(j.at("frames").get<std::size_t>() == 3);
    CHECK(j.at("ddv_mm2").get<double>() == r.ddv_mm2);
    CHECK(j.at("max_abs_mld_mm").get<double>() == r.max_abs_mld_mm);
    CHECK(j.at("malalignment").get<bool>() == r.malalignment);
}
