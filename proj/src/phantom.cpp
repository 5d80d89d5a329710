#include "bonereg/phantom.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace bonereg {

using nlohmann::json;

namespace {

// Fixed anatomy (mm, world coordinates; +x medial, +y anterior, +z superior,
// joint line near the origin). Sized to fit the minimum 64^3 @ 2 mm grid.
struct Anatomy {
    // Femur: shaft cylinder z in [22,60] capped by two solid condylar spheres.
    double femur_shaft_radius = 12.0;
    double femur_shaft_z0 = 22.0, femur_shaft_z1 = 60.0;
    double condyle_radius = 11.0;
    Vec3 medial_condyle{9.5, 0.0, 16.0};
    Vec3 lateral_condyle{-9.5, 0.0, 16.0};

    // Tibia-fibula: shaft cylinder, ellipsoidal plateau, thin fibular rod.
    double tibia_shaft_radius = 10.0;
    double tibia_shaft_z0 = -60.0, tibia_shaft_z1 = -3.0;
    Vec3 plateau_center{0.0, 0.0, -1.5};
    Vec3 plateau_semi{15.0, 12.0, 4.5};
    double fibula_radius = 2.8;
    Vec3 fibula_center{-11.5, -3.0, 0.0};  // z unused; axial range below
    double fibula_z0 = -40.0, fibula_z1 = -10.0;

    // Patella: solid ellipsoid anterior to the condyles.
    Vec3 patella_center{0.0, 22.0, 14.0};
    Vec3 patella_semi{9.0, 4.5, 11.0};

    double shell = 2.0;              // cortical shell thickness on shafts
    double soft_radius = 55.0;       // soft-tissue leg cylinder
    double plateau_anchor_z = 1.0;   // height of the plateau anchor ring
};

enum class Tissue { none, soft, cancellous, cortical };

bool in_zcylinder(const Vec3& p, double cx, double cy, double radius, double z0, double z1) {
    const double dx = p.x - cx, dy = p.y - cy;
    return p.z >= z0 && p.z <= z1 && dx * dx + dy * dy <= radius * radius;
}

bool in_ellipsoid(const Vec3& p, const Vec3& c, const Vec3& semi) {
    const double dx = (p.x - c.x) / semi.x, dy = (p.y - c.y) / semi.y, dz = (p.z - c.z) / semi.z;
    return dx * dx + dy * dy + dz * dz <= 1.0;
}

bool in_sphere(const Vec3& p, const Vec3& c, double radius) {
    return (p - c).norm2() <= radius * radius;
}

Tissue femur_tissue(const Vec3& p, const Anatomy& a) {
    if (in_sphere(p, a.medial_condyle, a.condyle_radius) ||
        in_sphere(p, a.lateral_condyle, a.condyle_radius))
        return Tissue::cortical;
    if (in_zcylinder(p, 0, 0, a.femur_shaft_radius, a.femur_shaft_z0, a.femur_shaft_z1)) {
        const bool core = in_zcylinder(p, 0, 0, a.femur_shaft_radius - a.shell,
                                       a.femur_shaft_z0 + a.shell, a.femur_shaft_z1 - a.shell);
        return core ? Tissue::cancellous : Tissue::cortical;
    }
    return Tissue::none;
}

Tissue tibia_tissue(const Vec3& p, const Anatomy& a) {
    if (in_ellipsoid(p, a.plateau_center, a.plateau_semi)) return Tissue::cortical;
    if (in_zcylinder(p, a.fibula_center.x, a.fibula_center.y, a.fibula_radius, a.fibula_z0,
                     a.fibula_z1))
        return Tissue::cortical;
    if (in_zcylinder(p, 0, 0, a.tibia_shaft_radius, a.tibia_shaft_z0, a.tibia_shaft_z1)) {
        const bool core = in_zcylinder(p, 0, 0, a.tibia_shaft_radius - a.shell,
                                       a.tibia_shaft_z0 + a.shell, a.tibia_shaft_z1 - a.shell);
        return core ? Tissue::cancellous : Tissue::cortical;
    }
    return Tissue::none;
}

Tissue patella_tissue(const Vec3& p, const Anatomy& a) {
    return in_ellipsoid(p, a.patella_center, a.patella_semi) ? Tissue::cortical : Tissue::none;
}

KneeLandmarks make_landmarks(const Anatomy& a) {
    KneeLandmarks lm;
    lm.medial_condyle_center = a.medial_condyle;
    lm.lateral_condyle_center = a.lateral_condyle;
    lm.condyle_radius = a.condyle_radius;

    // Three anchors on the plateau ellipsoid's z = anchor_z cross-section,
    // 120 degrees apart, the first one medial. Equal heights make the
    // analytic plateau normal exactly +z.
    const double dz = (a.plateau_anchor_z - a.plateau_center.z) / a.plateau_semi.z;
    const double scale = std::sqrt(1.0 - dz * dz);
    const double rx = a.plateau_semi.x * scale, ry = a.plateau_semi.y * scale;
    for (int k = 0; k < 3; ++k) {
        const double theta = 2.0 * kPi * k / 3.0;
        lm.plateau_anchors[k] = {a.plateau_center.x + rx * std::cos(theta),
                                 a.plateau_center.y + ry * std::sin(theta), a.plateau_anchor_z};
    }
    lm.medial_cap = condyle_cap_points(a.medial_condyle, a.condyle_radius);
    lm.lateral_cap = condyle_cap_points(a.lateral_condyle, a.condyle_radius);
    return lm;
}

}  // namespace

std::vector<Vec3> condyle_cap_points(const Vec3& center, double radius, double cap_chord_mm,
                                     int n_sphere_samples) {
    if (!(radius > 0) || !(cap_chord_mm > 0) || n_sphere_samples < 8)
        throw std::invalid_argument("condyle_cap_points: bad parameters");
    std::vector<Vec3> points;
    const Vec3 south = center + Vec3{0, 0, -radius};
    points.push_back(south);  // exact contact point at neutral orientation
    const double golden_angle = kPi * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < n_sphere_samples; ++i) {
        const double z = 1.0 - 2.0 * (i + 0.5) / n_sphere_samples;
        const double r_xy = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double phi = golden_angle * i;
        const Vec3 p = center + Vec3{r_xy * std::cos(phi), r_xy * std::sin(phi), z} * radius;
        if ((p - south).norm() <= cap_chord_mm) points.push_back(p);
    }
    return points;
}

KneePhantom make_knee_phantom(const PhantomConfig& config) {
    if (config.dims[0] < 64 || config.dims[1] < 64 || config.dims[2] < 64)
        throw std::invalid_argument("phantom grid must be at least 64^3 voxels");
    if (!(config.spacing.x > 0 && config.spacing.y > 0 && config.spacing.z > 0) ||
        config.spacing.x > 2.0 || config.spacing.y > 2.0 || config.spacing.z > 2.0)
        throw std::invalid_argument("phantom spacing must be in (0, 2] mm");
    if (!(config.tissue.soft > 0 && config.tissue.cancellous > config.tissue.soft &&
          config.tissue.cortical > config.tissue.cancellous))
        throw std::invalid_argument("phantom attenuations must satisfy soft < cancellous < cortical");

    const Anatomy a;
    Volume vol;
    vol.dims = config.dims;
    vol.spacing = config.spacing;
    // Center the grid on the world origin.
    vol.origin = -vol.extent() / 2.0;
    vol.data.assign(vol.voxel_count(), 0.0f);

    // Every bone primitive (plus a one-voxel margin) must fit in the grid,
    // and the soft-tissue cylinder must fit radially.
    const Vec3 half = vol.extent() / 2.0;
    const double bone_x = a.condyle_radius + std::abs(a.medial_condyle.x);
    const double bone_y = a.patella_center.y + a.patella_semi.y;
    const double bone_z = std::max(a.femur_shaft_z1, -a.tibia_shaft_z0);
    const Vec3 margin = config.spacing;
    if (bone_x + margin.x > half.x || bone_y + margin.y > half.y || bone_z + margin.z > half.z ||
        a.soft_radius + margin.x > half.x || a.soft_radius + margin.y > half.y)
        throw std::invalid_argument("phantom anatomy does not fit in the requested grid");

    KneePhantom phantom;
    phantom.landmarks = make_landmarks(a);
    for (BoneLabel label : {BoneLabel::femur, BoneLabel::patella, BoneLabel::tibia_fibula}) {
        BoneMask3D m;
        m.dims = vol.dims;
        m.spacing = vol.spacing;
        m.origin = vol.origin;
        m.label = label;
        m.data.assign(vol.voxel_count(), 0);
        phantom.masks.push_back(std::move(m));
    }

    const float mu_soft = static_cast<float>(config.tissue.soft);
    const float mu_cancellous = static_cast<float>(config.tissue.cancellous);
    const float mu_cortical = static_cast<float>(config.tissue.cortical);
    for (int iz = 0; iz < vol.dims[2]; ++iz) {
        for (int iy = 0; iy < vol.dims[1]; ++iy) {
            for (int ix = 0; ix < vol.dims[0]; ++ix) {
                const Vec3 p = vol.voxel_center(ix, iy, iz);
                const std::size_t i = vol.index(ix, iy, iz);
                const Tissue t[3] = {femur_tissue(p, a), patella_tissue(p, a),
                                     tibia_tissue(p, a)};
                Tissue tissue = Tissue::none;
                for (int b = 0; b < 3; ++b) {
                    if (t[b] != Tissue::none) {
                        phantom.masks[b].data[i] = 1;
                        tissue = t[b];
                    }
                }
                if (tissue == Tissue::none && p.x * p.x + p.y * p.y <= a.soft_radius * a.soft_radius)
                    tissue = Tissue::soft;
                switch (tissue) {
                    case Tissue::none: break;
                    case Tissue::soft: vol.data[i] = mu_soft; break;
                    case Tissue::cancellous: vol.data[i] = mu_cancellous; break;
                    case Tissue::cortical: vol.data[i] = mu_cortical; break;
                }
            }
        }
    }
    phantom.volume = std::move(vol);
    return phantom;
}

namespace {

json vec_to_json(const Vec3& v) { return json{v.x, v.y, v.z}; }

Vec3 vec_from_json(const json& j) {
    return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

json points_to_json(const std::vector<Vec3>& pts) {
    json arr = json::array();
    for (const Vec3& p : pts) arr.push_back(vec_to_json(p));
    return arr;
}

std::vector<Vec3> points_from_json(const json& j) {
    std::vector<Vec3> pts;
    pts.reserve(j.size());
    for (const auto& item : j) pts.push_back(vec_from_json(item));
    return pts;
}

}  // namespace

void save_landmarks(const KneeLandmarks& lm, const std::string& path) {
    json j{{"medial_condyle_center", vec_to_json(lm.medial_condyle_center)},
           {"lateral_condyle_center", vec_to_json(lm.lateral_condyle_center)},
           {"condyle_radius_mm", lm.condyle_radius},
           {"plateau_anchors",
            json{vec_to_json(lm.plateau_anchors[0]), vec_to_json(lm.plateau_anchors[1]),
                 vec_to_json(lm.plateau_anchors[2])}},
           {"medial_cap", points_to_json(lm.medial_cap)},
           {"lateral_cap", points_to_json(lm.lateral_cap)}};
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write landmarks: " + path);
    out << j.dump(2) << "\n";
}

KneeLandmarks load_landmarks(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("missing landmarks file: " + path);
    json j = json::parse(in);
    KneeLandmarks lm;
    lm.medial_condyle_center = vec_from_json(j.at("medial_condyle_center"));
    lm.lateral_condyle_center = vec_from_json(j.at("lateral_condyle_center"));
    lm.condyle_radius = j.at("condyle_radius_mm").get<double>();
    const auto& anchors = j.at("plateau_anchors");
    for (int k = 0; k < 3; ++k) lm.plateau_anchors[k] = vec_from_json(anchors.at(k));
    lm.medial_cap = points_from_json(j.at("medial_cap"));
    lm.lateral_cap = points_from_json(j.at("lateral_cap"));
    return lm;
}

}  // namespace bonereg
