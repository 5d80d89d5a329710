#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bonereg/optimize.hpp"
#include "bonereg/pose.hpp"
#include "bonereg/projector.hpp"
#include "bonereg/similarity.hpp"
#include "bonereg/volume.hpp"

namespace bonereg {

/// Everything the pipeline needs about one rigid bone: the moving volume it
/// renders (attenuation above the soft-tissue background inside the bone,
/// zero elsewhere — the bone's additive contribution to a full-scene
/// projection), the matching 0/1 mask volume, the voxel mask itself, the
/// bone's principal axis at the reference pose, and the pivot (mask
/// centroid) all of its poses are expressed about.
struct BoneModel {
    BoneLabel label = BoneLabel::femur;
    Volume moving;
    Volume mask01;
    BoneMask3D mask;
    LocalBox support{};
    PrincipalAxis axis{};
    Vec3 pivot{};
};

/// Builds the per-bone moving model from a scene volume and its bone mask.
BoneModel make_bone_model(const Volume& scene, const BoneMask3D& mask,
                          double background_attenuation);

/// Kinematic prior settings: clamp S on the per-frame pose advance, the
/// flexion-axis constraint on rotational velocity, and the narrowed search
/// window around the predicted pose.
struct KpmConfig {
    bool enabled = true;
    std::array<double, 6> step{5.0, 5.0, 5.0, 8.0, 8.0, 8.0};  // mm / deg
    double velocity_weight = 1.0;
    double window_translation_mm = 2.0;
    double window_rotation_deg = 3.0;
    /// Anatomical medial-lateral direction; rotational velocity is projected
    /// onto it before prediction.
    Vec3 flexion_axis{1, 0, 0};
};

struct RegistrationConfig {
    DifferentialEvolutionOptions de;  // global search over the seed-centered box
    HybridOptions hybrid;             // local refinement, per pyramid level
    std::vector<int> pyramid{4, 1};   // descending detector downsample factors
    /// Detector downsample factor for the global-initialization search. Kept
    /// finer than the refinement pyramid's coarsest level: heavy downsampling
    /// biases the rotation about a near-cylindrical bone's own axis.
    int init_search_factor = 2;
    double bound_translation_mm = 20.0;  // global search half-width around the seed
    double bound_rotation_deg = 15.0;
    KpmConfig kpm;
    double background_attenuation = 0.015;  // mm^-1, soft tissue
    /// A bone whose final cost reaches this is reported as failed.
    double failure_cost = 1.9;
    std::uint64_t seed = 0;
    int threads = 1;

    RegistrationConfig();  // fills refinement tolerances tuned for pose costs
    void validate() const;
};

/// Temporal state for one bone after a successfully registered frame.
struct KPMState {
    Pose6DoF previous;                 // T_{n-1}
    std::array<double, 6> velocity{};  // per-frame parameter deltas (mm / deg)
    Vec3 flexion_axis{1, 0, 0};        // unit

    void validate() const;
};

struct KpmPrediction {
    Pose6DoF pose;
    BoxBounds bounds;  // narrowed 6-DoF window, always containing `pose`
};

/// Constant-velocity prediction: predicted = T_{n-1} + clamp(w * velocity,
/// +-S) per DoF, with the rotational velocity first projected onto the
/// flexion axis; bounds = predicted +- (window_translation, window_rotation).
KpmPrediction kpm_predict(const KPMState& state, const RegistrationConfig& cfg);

struct StageDiagnostics {
    std::string name;        // "de", "hybrid@4x", "start@1x", ...
    int pyramid_factor = 1;
    std::size_t evals = 0;
    double best_cost = 0.0;
};

/// Result of registering one bone on one frame.
struct BoneResult {
    BoneLabel label = BoneLabel::femur;
    Pose6DoF pose;
    double cost = 0.0;  // final full-resolution objective value
    bool used_kpm = false;
    bool failed = false;
    std::string message;
    std::vector<StageDiagnostics> stages;

    std::size_t total_evals() const;
};

/// Result of one frame: per-bone poses plus timing; flagged when any bone
/// failed.
struct RegistrationResult {
    std::vector<BoneResult> bones;
    double wall_seconds = 0.0;
    bool flagged = false;
};

struct SequenceResult {
    std::vector<RegistrationResult> frames;
    /// KPM state snapshot after each frame, aligned with the bone list. A
    /// bone that has never registered successfully carries a default state.
    std::vector<std::vector<KPMState>> states;
};

/// One observed frame: the measured projection plus per-bone 2-D silhouettes
/// (aligned with the registered bone list). Masks are required only for
/// bones that run global initialization on this frame; an empty inner vector
/// means "no mask available".
struct FixedFrame {
    Image2D image;
    std::vector<std::vector<std::uint8_t>> bone_masks;
};

/// Global initialization: seeds a pose by aligning the bone's 3-D principal
/// axis with the 2-D principal axis of the fixed bone mask (in the detector
/// plane, rotating about the detector normal through the pivot) and matching
/// the projected centroid, then runs differential evolution around the seed
/// at the coarsest pyramid level. Throws std::runtime_error on an empty
/// fixed mask. When diag is non-null a "de" stage is appended.
Pose6DoF initialize_global(const Image2D& fixed, const std::vector<std::uint8_t>& fixed_bone_mask,
                           const BoneModel& bone, const ProjectionGeometry& g,
                           const RegistrationConfig& cfg, BoneResult* diag = nullptr);

/// Local refinement: hybrid Powell + Nelder-Mead at each pyramid level,
/// coarse to fine. Never returns a pose whose full-resolution cost exceeds
/// the start's (best-so-far is kept). When `bounds` is given, poses outside
/// it are penalized above any in-bounds cost.
BoneResult refine_local(const Image2D& fixed, const BoneModel& bone,
                        const ProjectionGeometry& g, const Pose6DoF& start,
                        const RegistrationConfig& cfg,
                        const std::optional<BoxBounds>& bounds = std::nullopt);

/// Registers every bone of one frame independently. A bone with a prior
/// state (and KPM enabled) starts from the kinematic prediction and skips
/// the global search; otherwise it runs initialize_global, which needs that
/// bone's fixed mask. `prior` must be empty or hold one optional state per
/// bone. Per-bone failures are recorded, not thrown.
RegistrationResult register_frame(const FixedFrame& frame, const std::vector<BoneModel>& bones,
                                  const ProjectionGeometry& g,
                                  const std::vector<std::optional<KPMState>>& prior,
                                  const RegistrationConfig& cfg);

/// Sequential tracking with KPM state threading: velocity = T_n - T_{n-1}
/// componentwise, so the first two frames run the global-init path and the
/// kinematic prediction engages from frame 2; a failed bone keeps its last
/// good state and later frames are still produced.
SequenceResult track_sequence(const std::vector<FixedFrame>& frames,
                              const std::vector<BoneModel>& bones,
                              const ProjectionGeometry& g, const RegistrationConfig& cfg);

}  // namespace bonereg
