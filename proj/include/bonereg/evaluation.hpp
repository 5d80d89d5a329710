#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "bonereg/pose.hpp"
#include "bonereg/volume.hpp"
#include "json.hpp"

namespace bonereg {

/// Clinical success thresholds on TRE.
inline constexpr double kHumanTreThresholdMm = 1.5;
inline constexpr double kLambTreThresholdMm = 3.0;

/// Deterministic-stride sampling cap for TRE point sets.
inline constexpr std::size_t kTreDefaultMaxPoints = 10000;

/// Target registration error: mean Euclidean distance between mask points
/// mapped by the estimated vs ground-truth pose, over a deterministic stride
/// sample of at most max_points voxel centers. Both poses must share a pivot
/// (within 1e-9 mm); the mask must be nonempty.
double compute_tre(const Pose6DoF& gt, const Pose6DoF& est, const BoneMask3D& mask,
                   std::size_t max_points = kTreDefaultMaxPoints);

/// Inclusive success rule: tre <= threshold. Throws std::invalid_argument
/// when threshold <= 0.
bool success(double tre_mm, double threshold_mm);

struct TrialRecord {
    Pose6DoF ground_truth;
    Pose6DoF estimate;
    std::string bone;                    // mask the TRE was sampled from
    double tre_mm = 0.0;
    std::array<double, 6> axis_error{};  // |dt| mm, |dr| deg (wrapped)
    bool succeeded = false;
};

/// Scores one trial: TRE over the mask, per-axis absolute errors, success at
/// the given threshold.
TrialRecord make_trial(const Pose6DoF& gt, const Pose6DoF& est, const BoneMask3D& mask,
                       double threshold_mm,
                       std::size_t max_points = kTreDefaultMaxPoints);

struct MetricSummary {
    std::array<double, 6> mean_axis_error{};  // t_x,t_y,t_z mm; r_a,r_b,r_g deg
    double mean_tre_mm = 0.0;
    double rsr_percent = 0.0;
    double mtrans_mm = 0.0;  // mean of the three translation-axis means
    double mrot_deg = 0.0;   // mean of the three rotation-axis means
    double threshold_mm = kHumanTreThresholdMm;
    std::size_t trials = 0;
};

/// Aggregates trials; success flags are recomputed from tre_mm at the given
/// threshold. Throws std::invalid_argument on an empty list.
MetricSummary summarize(const std::vector<TrialRecord>& trials, double threshold_mm);

nlohmann::json summary_to_json(const MetricSummary& s);
MetricSummary summary_from_json(const nlohmann::json& j);

/// Aligned text table (one header + one value row, columns t_x .. r_gamma,
/// TRE, RSR, mTrans, mRot). Values are printed round-trip exact (%.17g) so
/// the table is as authoritative as the JSON.
std::string summary_table(const MetricSummary& s);

}  // namespace bonereg
