#pragma once

#include <array>
#include <string>
#include <vector>

#include "bonereg/vec.hpp"
#include "bonereg/volume.hpp"

namespace bonereg {

/// Attenuation coefficients (mm^-1) used by the analytic knee phantom.
/// Chosen so that a simple threshold at cortical/2 separates bone from the
/// soft-tissue background exactly.
struct PhantomTissue {
    double soft = 0.015;
    double cancellous = 0.045;
    double cortical = 0.09;
};

struct PhantomConfig {
    std::array<int, 3> dims{128, 128, 128};
    Vec3 spacing{1.0, 1.0, 1.0};
    PhantomTissue tissue;
};

/// Named anatomical reference data generated together with the phantom.
/// Axes: +x medial, +y anterior, +z superior; the knee joint line sits near
/// the world origin.
struct KneeLandmarks {
    Vec3 medial_condyle_center{};
    Vec3 lateral_condyle_center{};
    double condyle_radius = 0.0;
    /// Three non-collinear points on the tibial plateau surface; index 0 is
    /// the medial anchor (defines the medial in-plane axis).
    std::array<Vec3, 3> plateau_anchors{};
    /// Analytically sampled points on each condylar sphere's inferior cap
    /// (the candidate contact surface for plateau-distance measurements).
    std::vector<Vec3> medial_cap;
    std::vector<Vec3> lateral_cap;
};

struct KneePhantom {
    Volume volume;
    std::vector<BoneMask3D> masks;  // femur, patella, tibia_fibula
    KneeLandmarks landmarks;
};

/// Builds the analytic knee phantom: femur (shaft cylinder + two solid
/// cortical condylar spheres), tibia-fibula complex (shaft cylinder,
/// ellipsoidal plateau, thin fibular cylinder), and patellar ellipsoid,
/// embedded in a soft-tissue cylinder. Shafts have a 2 mm cortical shell
/// around a cancellous core; the remaining bone primitives are solid
/// cortical. Throws std::invalid_argument when the grid is too small
/// (< 64^3 voxels, spacing > 2 mm, or bones out of bounds).
KneePhantom make_knee_phantom(const PhantomConfig& config = {});

/// Deterministic point samples on the inferior cap of a sphere: directions
/// from a Fibonacci spiral, kept when their chord distance to the sphere's
/// lowest point (-z at neutral) is at most `cap_chord_mm`.
std::vector<Vec3> condyle_cap_points(const Vec3& center, double radius,
                                     double cap_chord_mm = 15.0,
                                     int n_sphere_samples = 600);

void save_landmarks(const KneeLandmarks& lm, const std::string& path);
KneeLandmarks load_landmarks(const std::string& path);

}  // namespace bonereg
