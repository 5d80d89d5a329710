#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "bonereg/phantom.hpp"
#include "bonereg/pose.hpp"
#include "bonereg/volume.hpp"
#include "doctest.h"

using namespace bonereg;

namespace {

const KneePhantom& default_phantom() {
    static const KneePhantom phantom = make_knee_phantom();
    return phantom;
}

const BoneMask3D& phantom_mask(BoneLabel label) {
    for (const auto& m : default_phantom().masks)
        if (m.label == label) return m;
    throw std::runtime_error("mask not found");
}

double dice(const BoneMask3D& a, const BoneMask3D& b) {
    REQUIRE(a.dims == b.dims);
    std::size_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        na += a.data[i] != 0;
        nb += b.data[i] != 0;
        inter += (a.data[i] != 0 && b.data[i] != 0);
    }
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

std::filesystem::path temp_dir() {
    const auto dir = std::filesystem::temp_directory_path() / "bonereg_volume_test";
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("volume save/load round trip reproduces bytes exactly") {
    Volume v;
    v.dims = {2, 2, 2};
    v.spacing = {0.5, 1.0, 1.5};
    v.origin = {-1, 2, -3};
    v.data = {0.0f, 0.125f, 1.5f, 2.25f, 3.0f, 4.75f, 5.5f, 6.125f};
    const auto path = (temp_dir() / "roundtrip.vol").string();
    save_volume(v, path);
    const Volume w = load_volume(path);
    CHECK(w.dims == v.dims);
    CHECK(w.spacing.x == v.spacing.x);
    CHECK(w.origin.z == v.origin.z);
    CHECK(w.data == v.data);
}

TEST_CASE("truncated volume data file is a size-mismatch error") {
    Volume v;
    v.dims = {2, 2, 2};
    v.data.assign(8, 1.0f);
    const auto path = (temp_dir() / "truncated.vol").string();
    save_volume(v, path);
    std::filesystem::resize_file(path, 8 * sizeof(float) - 4);
    CHECK_THROWS_WITH_AS(load_volume(path), doctest::Contains("size mismatch"),
                         std::runtime_error);
}

TEST_CASE("zero spacing fails validation") {
    Volume v;
    v.dims = {2, 2, 2};
    v.spacing = {0.0, 1.0, 1.0};
    v.data.assign(8, 0.0f);
    CHECK_THROWS_AS(v.validate(), std::invalid_argument);
}

TEST_CASE("negative and non-finite voxels fail validation") {
    Volume v;
    v.dims = {1, 1, 2};
    v.data = {1.0f, -0.5f};
    CHECK_THROWS_AS(v.validate(), std::invalid_argument);
    v.data = {1.0f, std::numeric_limits<float>::infinity()};
    CHECK_THROWS_AS(v.validate(), std::invalid_argument);
}

TEST_CASE("mask save/load round trip keeps label and bits") {
    const auto& femur = phantom_mask(BoneLabel::femur);
    const auto path = (temp_dir() / "femur.mask").string();
    save_mask(femur, path);
    const BoneMask3D m = load_mask(path);
    CHECK(m.label == BoneLabel::femur);
    CHECK(m.data == femur.data);
    CHECK(m.origin.x == femur.origin.x);
}

TEST_CASE("default phantom: three disjoint nonempty masks on the volume grid") {
    const auto& ph = default_phantom();
    REQUIRE(ph.masks.size() == 3);
    CHECK_NOTHROW(ph.volume.validate());
    for (const auto& m : ph.masks) {
        CHECK(m.count_true() > 0);
        CHECK(m.same_grid(ph.volume));
    }
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = a + 1; b < 3; ++b) {
            std::size_t overlap = 0;
            for (std::size_t i = 0; i < ph.masks[a].data.size(); ++i)
                overlap += (ph.masks[a].data[i] != 0 && ph.masks[b].data[i] != 0);
            CHECK(overlap == 0);
        }
}

TEST_CASE("phantom bone voxels all carry at least cancellous attenuation") {
    const auto& ph = default_phantom();
    const double cancellous = PhantomTissue{}.cancellous;
    for (const auto& m : ph.masks)
        for (std::size_t i = 0; i < m.data.size(); ++i)
            if (m.data[i]) REQUIRE(ph.volume.data[i] >= cancellous);
}

TEST_CASE("femur centroid is superior to the tibia centroid") {
    CHECK(phantom_mask(BoneLabel::femur).centroid().z >
          phantom_mask(BoneLabel::tibia_fibula).centroid().z);
}

TEST_CASE("condyle landmark voxels carry the cortical attenuation") {
    const auto& ph = default_phantom();
    const auto& v = ph.volume;
    for (const Vec3& c :
         {ph.landmarks.medial_condyle_center, ph.landmarks.lateral_condyle_center}) {
        const int ix = static_cast<int>(std::floor((c.x - v.origin.x) / v.spacing.x));
        const int iy = static_cast<int>(std::floor((c.y - v.origin.y) / v.spacing.y));
        const int iz = static_cast<int>(std::floor((c.z - v.origin.z) / v.spacing.z));
        CHECK(v.at(ix, iy, iz) == doctest::Approx(PhantomTissue{}.cortical));
    }
}

TEST_CASE("condyle cap points lie on the sphere, inside the cap chord") {
    const auto& lm = default_phantom().landmarks;
    REQUIRE(lm.medial_cap.size() > 50);
    const Vec3 south = lm.medial_condyle_center + Vec3{0, 0, -lm.condyle_radius};
    CHECK((lm.medial_cap.front() - south).norm() == doctest::Approx(0.0));
    for (const Vec3& p : lm.medial_cap) {
        CHECK((p - lm.medial_condyle_center).norm() ==
              doctest::Approx(lm.condyle_radius).epsilon(1e-9));
        CHECK((p - south).norm() <= 15.0 + 1e-9);
    }
}

TEST_CASE("plateau anchors are coplanar at equal height with the medial anchor at +x") {
    const auto& lm = default_phantom().landmarks;
    CHECK(lm.plateau_anchors[0].z == doctest::Approx(lm.plateau_anchors[1].z));
    CHECK(lm.plateau_anchors[1].z == doctest::Approx(lm.plateau_anchors[2].z));
    CHECK(lm.plateau_anchors[0].x > 5.0);
    CHECK(std::abs(lm.plateau_anchors[0].y) < 1e-9);
}

TEST_CASE("landmark file round trip") {
    const auto& lm = default_phantom().landmarks;
    const auto path = (temp_dir() / "knee.landmarks.json").string();
    save_landmarks(lm, path);
    const KneeLandmarks back = load_landmarks(path);
    CHECK(back.condyle_radius == lm.condyle_radius);
    CHECK((back.medial_condyle_center - lm.medial_condyle_center).norm() == doctest::Approx(0.0));
    REQUIRE(back.medial_cap.size() == lm.medial_cap.size());
    CHECK((back.medial_cap.back() - lm.medial_cap.back()).norm() == doctest::Approx(0.0));
    CHECK((back.plateau_anchors[2] - lm.plateau_anchors[2]).norm() == doctest::Approx(0.0));
}

TEST_CASE("phantom rejects grids that cannot hold the anatomy") {
    PhantomConfig small;
    small.dims = {48, 128, 128};
    CHECK_THROWS_AS(make_knee_phantom(small), std::invalid_argument);

    PhantomConfig coarse;
    coarse.spacing = {2.5, 2.5, 2.5};
    CHECK_THROWS_AS(make_knee_phantom(coarse), std::invalid_argument);

    // 64^3 at 1 mm satisfies the size minimum but spans only +/-32 mm.
    PhantomConfig tight;
    tight.dims = {64, 64, 64};
    CHECK_THROWS_AS(make_knee_phantom(tight), std::invalid_argument);

    // The minimal legal grid fits.
    PhantomConfig minimal;
    minimal.dims = {64, 64, 64};
    minimal.spacing = {2.0, 2.0, 2.0};
    CHECK_NOTHROW(make_knee_phantom(minimal));
}

TEST_CASE("threshold_segment recovers the three phantom bones with high Dice") {
    const auto& ph = default_phantom();
    const double threshold = PhantomTissue{}.cortical / 2.0;
    const auto segmented = threshold_segment(ph.volume, threshold);
    REQUIRE(segmented.size() == 3);
    for (const auto& seg : segmented) {
        const auto& exact = phantom_mask(seg.label);
        CHECK(dice(seg, exact) >= 0.95);
    }
}

TEST_CASE("threshold above the maximum value is an empty-segmentation error") {
    const auto& ph = default_phantom();
    CHECK_THROWS_WITH_AS(threshold_segment(ph.volume, 10.0), doctest::Contains("no components"),
                         std::runtime_error);
}

TEST_CASE("uniform volume below threshold is an empty-segmentation error") {
    Volume v;
    v.dims = {4, 4, 4};
    v.data.assign(64, 0.01f);
    CHECK_THROWS_AS(threshold_segment(v, 0.05), std::runtime_error);
}

TEST_CASE("raising the threshold never grows a mask") {
    const auto& ph = default_phantom();
    const auto lo = threshold_segment(ph.volume, PhantomTissue{}.cancellous);
    const auto hi = threshold_segment(ph.volume, PhantomTissue{}.cortical);
    std::size_t lo_total = 0, hi_total = 0;
    for (const auto& m : lo) lo_total += m.count_true();
    for (const auto& m : hi) hi_total += m.count_true();
    CHECK(hi_total <= lo_total);
}

TEST_CASE("mask_to_pointcloud uses the voxel-center convention") {
    BoneMask3D m;
    m.dims = {1, 1, 1};
    m.spacing = {1, 1, 1};
    m.origin = {10, 10, 10};
    m.data = {1};
    const auto pts = mask_to_pointcloud(m, 10);
    REQUIRE(pts.size() == 1);
    CHECK(pts[0].x == doctest::Approx(10.5));
    CHECK(pts[0].y == doctest::Approx(10.5));
    CHECK(pts[0].z == doctest::Approx(10.5));
}

TEST_CASE("mask_to_pointcloud keeps every voxel when the budget allows") {
    BoneMask3D m;
    m.dims = {2, 2, 2};
    m.spacing = {1, 1, 1};
    m.data.assign(8, 1);
    CHECK(mask_to_pointcloud(m, 8).size() == 8);
    CHECK(mask_to_pointcloud(m, 3).size() <= 3);
}

TEST_CASE("mask_to_pointcloud subsampling is deterministic") {
    const auto& femur = phantom_mask(BoneLabel::femur);
    const auto a = mask_to_pointcloud(femur, 5000);
    const auto b = mask_to_pointcloud(femur, 5000);
    REQUIRE(a.size() == b.size());
    CHECK(a.size() <= 5000);
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE((a[i] - b[i]).norm() == 0.0);
}

TEST_CASE("principal_axis of collinear z points") {
    std::vector<Vec3> pts;
    for (int z = 0; z <= 10; ++z) pts.push_back({0, 0, static_cast<double>(z)});
    const PrincipalAxis axis = principal_axis(pts);
    CHECK(axis.direction.x == doctest::Approx(0.0));
    CHECK(axis.direction.y == doctest::Approx(0.0));
    CHECK(axis.direction.z == doctest::Approx(1.0));
    CHECK(axis.extents[1] == doctest::Approx(0.0));
    CHECK(axis.extents[2] == doctest::Approx(0.0));
    CHECK(axis.centroid.z == doctest::Approx(5.0));
}

TEST_CASE("principal_axis recovers a 10-degree tilted cylinder axis within 0.5 degrees") {
    const Vec3 axis_dir{std::sin(deg_to_rad(10.0)), 0.0, std::cos(deg_to_rad(10.0))};
    const Vec3 u{std::cos(deg_to_rad(10.0)), 0.0, -std::sin(deg_to_rad(10.0))};
    const Vec3 v{0, 1, 0};
    std::vector<Vec3> pts;
    for (int t = -30; t <= 30; ++t)
        for (int spoke = 0; spoke < 12; ++spoke)
            for (double r : {0.0, 2.5, 5.0}) {
                const double theta = 2.0 * kPi * spoke / 12.0;
                pts.push_back(axis_dir * static_cast<double>(t) +
                              (u * std::cos(theta) + v * std::sin(theta)) * r);
            }
    const PrincipalAxis axis = principal_axis(pts);
    const double angle = rad_to_deg(std::acos(std::min(1.0, std::abs(axis.direction.dot(axis_dir)))));
    CHECK(angle < 0.5);
    CHECK(axis.extents[0] > axis.extents[1]);
}

TEST_CASE("principal_axis is equivariant under rigid rotation") {
    std::mt19937 rng(17);
    std::uniform_real_distribution<double> jitter(-1.0, 1.0);
    std::vector<Vec3> pts;
    for (int t = 0; t < 200; ++t)
        pts.push_back({jitter(rng) * 2, jitter(rng) * 5, static_cast<double>(t) * 0.5});
    const PrincipalAxis base = principal_axis(pts);

    Pose6DoF rot;
    rot.r_alpha = 25.0;
    rot.r_beta = 40.0;
    rot.r_gamma = -30.0;
    const Mat3 r = pose_to_matrix(rot).rotation;
    std::vector<Vec3> rotated;
    for (const Vec3& p : pts) rotated.push_back(r * p);
    const PrincipalAxis turned = principal_axis(rotated);
    const Vec3 expected = r * base.direction;
    const double err = std::min((turned.direction - expected).norm(),
                                (turned.direction + expected).norm());
    CHECK(err < 1e-6);
}

TEST_CASE("principal_axis rejects degenerate input") {
    CHECK_THROWS_AS(principal_axis({{1, 1, 1}, {1, 1, 1}}), std::invalid_argument);
    CHECK_THROWS_AS(principal_axis(std::vector<Vec3>(5, Vec3{2, 0, 1})),
                    std::invalid_argument);
}

TEST_CASE("phantom bone axes are both near vertical so the neutral knee is straight") {
    const auto femur_axis =
        principal_axis(mask_to_pointcloud(phantom_mask(BoneLabel::femur), 10000));
    const auto tibia_axis =
        principal_axis(mask_to_pointcloud(phantom_mask(BoneLabel::tibia_fibula), 10000));
    const double angle = rad_to_deg(
        std::acos(std::min(1.0, std::abs(femur_axis.direction.dot(tibia_axis.direction)))));
    CHECK(angle < 0.5);
}

TEST_CASE("mask_volume zeroes everything outside the mask") {
    const auto& ph = default_phantom();
    const auto& femur = phantom_mask(BoneLabel::femur);
    const Volume fv = mask_volume(ph.volume, femur);
    for (std::size_t i = 0; i < fv.data.size(); ++i) {
        if (femur.data[i])
            REQUIRE(fv.data[i] == ph.volume.data[i]);
        else
            REQUIRE(fv.data[i] == 0.0f);
    }
}
