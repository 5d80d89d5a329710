#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "bonereg/projector.hpp"

namespace bonereg {

struct SimilarityScore {
    double value = 0.0;      // in [-1, 1] up to rounding
    std::size_t count = 0;   // region pixel count, >= 2
};

/// Cost assigned when NCC is undefined over the region (too few pixels or a
/// constant image): strictly worse than any 1 - NCC value.
inline constexpr double kUndefinedCost = 2.0;

/// Region dilation radius (Chebyshev, pixels) used by the registration
/// objective around the projected bone mask.
inline constexpr int kObjectiveDilateRadius = 3;

/// Normalized cross-correlation over the region (all pixels when region is
/// null; otherwise region must hold nu*nv flags). Returns nullopt when NCC
/// is undefined: fewer than 2 region pixels, or either image constant over
/// the region. Throws std::invalid_argument on dimension mismatch.
std::optional<SimilarityScore> ncc(const Image2D& a, const Image2D& b,
                                   const std::vector<std::uint8_t>* region = nullptr);

/// Precomputed state for repeated objective evaluations against one fixed
/// image. Holds pointers only; all referents must outlive the context.
struct ObjectiveContext {
    const Image2D* fixed = nullptr;
    const Volume* moving = nullptr;   // volume rendered at the trial pose
    const Volume* mask01 = nullptr;   // 0/1 bone mask on the same grid
    LocalBox support{};               // clip box covering both supports
    const ProjectionGeometry* geometry = nullptr;
    int dilate_px = kObjectiveDilateRadius;
    int threads = 1;
};

/// Validates dimensions and assembles an ObjectiveContext.
ObjectiveContext make_objective_context(const Image2D& fixed, const Volume& moving,
                                        const Volume& mask01, const LocalBox& support,
                                        const ProjectionGeometry& g,
                                        int dilate_px = kObjectiveDilateRadius, int threads = 1);

/// Registration cost at a trial pose: 1 - NCC(fixed, DRR(moving, pose)) over
/// the projected bone mask dilated by `dilate_px`, clamped to >= 0;
/// kUndefinedCost when the region is degenerate (bone off the detector,
/// constant images). Pure; safe to call concurrently on one context.
double objective_cost(const ObjectiveContext& ctx, const Pose6DoF& pose);

/// One-shot convenience form of objective_cost building its context from a
/// volume/mask pair on the same grid.
double objective(const Image2D& fixed, const Volume& v, const BoneMask3D& mask,
                 const ProjectionGeometry& g, const Pose6DoF& pose, int threads = 1);

}  // namespace bonereg
