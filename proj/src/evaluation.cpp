#include "bonereg/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace bonereg {

double compute_tre(const Pose6DoF& gt, const Pose6DoF& est, const BoneMask3D& mask,
                   std::size_t max_points) {
    if ((gt.pivot - est.pivot).norm() > 1e-9)
        throw std::invalid_argument("compute_tre: poses must share a pivot");
    if (max_points == 0) throw std::invalid_argument("compute_tre: max_points must be positive");
    if (mask.count_true() == 0) throw std::invalid_argument("compute_tre: empty mask");
    const std::vector<Vec3> points = mask_to_pointcloud(mask, max_points);
    double sum = 0.0;
    for (const Vec3& p : points) sum += (apply_pose(est, p) - apply_pose(gt, p)).norm();
    return sum / static_cast<double>(points.size());
}

bool success(double tre_mm, double threshold_mm) {
    if (!(threshold_mm > 0.0)) throw std::invalid_argument("success: threshold must be positive");
    return tre_mm <= threshold_mm;
}

TrialRecord make_trial(const Pose6DoF& gt, const Pose6DoF& est, const BoneMask3D& mask,
                       double threshold_mm, std::size_t max_points) {
    TrialRecord t;
    t.ground_truth = gt;
    t.estimate = est;
    t.bone = bone_label_name(mask.label);
    t.tre_mm = compute_tre(gt, est, mask, max_points);
    t.axis_error = pose_difference(gt, est);
    t.succeeded = success(t.tre_mm, threshold_mm);
    return t;
}

MetricSummary summarize(const std::vector<TrialRecord>& trials, double threshold_mm) {
    if (trials.empty()) throw std::invalid_argument("summarize: no trials");
    if (!(threshold_mm > 0.0)) throw std::invalid_argument("summarize: threshold must be positive");
    MetricSummary s;
    s.threshold_mm = threshold_mm;
    s.trials = trials.size();
    std::size_t successes = 0;
    for (const TrialRecord& t : trials) {
        for (int a = 0; a < 6; ++a) s.mean_axis_error[a] += t.axis_error[a];
        s.mean_tre_mm += t.tre_mm;
        if (success(t.tre_mm, threshold_mm)) ++successes;
    }
    const double n = static_cast<double>(trials.size());
    for (int a = 0; a < 6; ++a) s.mean_axis_error[a] /= n;
    s.mean_tre_mm /= n;
    s.rsr_percent = 100.0 * static_cast<double>(successes) / n;
    s.mtrans_mm = (s.mean_axis_error[0] + s.mean_axis_error[1] + s.mean_axis_error[2]) / 3.0;
    s.mrot_deg = (s.mean_axis_error[3] + s.mean_axis_error[4] + s.mean_axis_error[5]) / 3.0;
    return s;
}

nlohmann::json summary_to_json(const MetricSummary& s) {
    return nlohmann::json{{"t_x_mm", s.mean_axis_error[0]},
                          {"t_y_mm", s.mean_axis_error[1]},
                          {"t_z_mm", s.mean_axis_error[2]},
                          {"r_alpha_deg", s.mean_axis_error[3]},
                          {"r_beta_deg", s.mean_axis_error[4]},
                          {"r_gamma_deg", s.mean_axis_error[5]},
                          {"tre_mm", s.mean_tre_mm},
                          {"rsr_percent", s.rsr_percent},
                          {"mtrans_mm", s.mtrans_mm},
                          {"mrot_deg", s.mrot_deg},
                          {"threshold_mm", s.threshold_mm},
                          {"trials", s.trials}};
}

MetricSummary summary_from_json(const nlohmann::json& j) {
    MetricSummary s;
    s.mean_axis_error = {j.at("t_x_mm").get<double>(),      j.at("t_y_mm").get<double>(),
                         j.at("t_z_mm").get<double>(),      j.at("r_alpha_deg").get<double>(),
                         j.at("r_beta_deg").get<double>(),  j.at("r_gamma_deg").get<double>()};
    s.mean_tre_mm = j.at("tre_mm").get<double>();
    s.rsr_percent = j.at("rsr_percent").get<double>();
    s.mtrans_mm = j.at("mtrans_mm").get<double>();
    s.mrot_deg = j.at("mrot_deg").get<double>();
    s.threshold_mm = j.at("threshold_mm").get<double>();
    s.trials = j.at("trials").get<std::size_t>();
    return s;
}

std::string summary_table(const MetricSummary& s) {
    const char* names[] = {"t_x(mm)",     "t_y(mm)",    "t_z(mm)",  "r_a(deg)",
                           "r_b(deg)",    "r_g(deg)",   "TRE(mm)",  "RSR(%)",
                           "mTrans(mm)",  "mRot(deg)"};
    const double values[] = {s.mean_axis_error[0], s.mean_axis_error[1], s.mean_axis_error[2],
                             s.mean_axis_error[3], s.mean_axis_error[4], s.mean_axis_error[5],
                             s.mean_tre_mm,        s.rsr_percent,        s.mtrans_mm,
                             s.mrot_deg};
    char buf[64];
    std::string header, row;
    for (int i = 0; i < 10; ++i) {
        std::snprintf(buf, sizeof(buf), "%24s", names[i]);
        header += buf;
        std::snprintf(buf, sizeof(buf), "%24.17g", values[i]);
        row += buf;
    }
    return header + "\n" + row + "\n";
}

}  // namespace bonereg
