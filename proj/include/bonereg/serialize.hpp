#pragma once

#include <stdexcept>

#include "bonereg/pose.hpp"
#include "json.hpp"

namespace bonereg {

/// Pose JSON schema used by every pose file the tools read or write:
/// {tx,ty,tz,r_alpha,r_beta,r_gamma,pivot:[x,y,z],
///  convention:"ZYX-intrinsic",units:{trans:"mm",rot:"deg"}}
inline void to_json(nlohmann::json& j, const Pose6DoF& p) {
    j = nlohmann::json{{"tx", p.tx},
                       {"ty", p.ty},
                       {"tz", p.tz},
                       {"r_alpha", p.r_alpha},
                       {"r_beta", p.r_beta},
                       {"r_gamma", p.r_gamma},
                       {"pivot", {p.pivot.x, p.pivot.y, p.pivot.z}},
                       {"convention", kEulerConvention},
                       {"units", {{"trans", "mm"}, {"rot", "deg"}}}};
}

inline void from_json(const nlohmann::json& j, Pose6DoF& p) {
    if (j.contains("convention") && j.at("convention").get<std::string>() != kEulerConvention)
        throw std::invalid_argument("pose file uses unsupported Euler convention: " +
                                    j.at("convention").get<std::string>());
    p.tx = j.at("tx").get<double>();
    p.ty = j.at("ty").get<double>();
    p.tz = j.at("tz").get<double>();
    p.r_alpha = j.at("r_alpha").get<double>();
    p.r_beta = j.at("r_beta").get<double>();
    p.r_gamma = j.at("r_gamma").get<double>();
    const auto& piv = j.at("pivot");
    p.pivot = {piv.at(0).get<double>(), piv.at(1).get<double>(), piv.at(2).get<double>()};
    if (!p.finite()) throw std::invalid_argument("pose file contains non-finite values");
}

}  // namespace bonereg
