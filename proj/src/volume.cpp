#include "bonereg/volume.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <queue>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace bonereg {

using nlohmann::json;

void Volume::validate() const {
    if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1)
        throw std::invalid_argument("volume dims must be >= 1 on every axis");
    if (!(spacing.x > 0 && spacing.y > 0 && spacing.z > 0))
        throw std::invalid_argument("volume spacing must be positive");
    if (!origin.finite()) throw std::invalid_argument("volume origin must be finite");
    if (data.size() != voxel_count())
        throw std::invalid_argument("volume data length does not match dims");
    for (float v : data) {
        if (!std::isfinite(v) || v < 0.0f)
            throw std::invalid_argument("volume values must be finite and >= 0");
    }
}

const char* bone_label_name(BoneLabel label) {
    switch (label) {
        case BoneLabel::femur: return "femur";
        case BoneLabel::patella: return "patella";
        case BoneLabel::tibia_fibula: return "tibia_fibula";
    }
    throw std::invalid_argument("unknown bone label");
}

BoneLabel bone_label_from_name(const std::string& name) {
    if (name == "femur") return BoneLabel::femur;
    if (name == "patella") return BoneLabel::patella;
    if (name == "tibia_fibula") return BoneLabel::tibia_fibula;
    throw std::invalid_argument("unknown bone label name: " + name);
}

std::size_t BoneMask3D::count_true() const {
    std::size_t n = 0;
    for (std::uint8_t v : data) n += (v != 0);
    return n;
}

bool BoneMask3D::same_grid(const Volume& v) const {
    auto close = [](double a, double b) { return std::abs(a - b) <= 1e-9; };
    return dims == v.dims && close(spacing.x, v.spacing.x) && close(spacing.y, v.spacing.y) &&
           close(spacing.z, v.spacing.z) && close(origin.x, v.origin.x) &&
           close(origin.y, v.origin.y) && close(origin.z, v.origin.z);
}

Vec3 BoneMask3D::centroid() const {
    Vec3 sum{};
    std::size_t n = 0;
    for (int iz = 0; iz < dims[2]; ++iz)
        for (int iy = 0; iy < dims[1]; ++iy)
            for (int ix = 0; ix < dims[0]; ++ix)
                if (at(ix, iy, iz)) {
                    sum += voxel_center(ix, iy, iz);
                    ++n;
                }
    if (n == 0) throw std::runtime_error("centroid of empty mask");
    return sum / static_cast<double>(n);
}

std::array<std::array<int, 3>, 2> BoneMask3D::index_bounds() const {
    std::array<int, 3> lo{dims[0], dims[1], dims[2]};
    std::array<int, 3> hi{-1, -1, -1};
    for (int iz = 0; iz < dims[2]; ++iz)
        for (int iy = 0; iy < dims[1]; ++iy)
            for (int ix = 0; ix < dims[0]; ++ix)
                if (at(ix, iy, iz)) {
                    lo[0] = std::min(lo[0], ix);
                    lo[1] = std::min(lo[1], iy);
                    lo[2] = std::min(lo[2], iz);
                    hi[0] = std::max(hi[0], ix);
                    hi[1] = std::max(hi[1], iy);
                    hi[2] = std::max(hi[2], iz);
                }
    if (hi[0] < 0) throw std::runtime_error("index_bounds of empty mask");
    return {lo, hi};
}

namespace {

json grid_sidecar(const std::array<int, 3>& dims, const Vec3& spacing, const Vec3& origin,
                  const char* dtype) {
    return json{{"dims", {dims[0], dims[1], dims[2]}},
                {"spacing_mm", {spacing.x, spacing.y, spacing.z}},
                {"origin_mm", {origin.x, origin.y, origin.z}},
                {"dtype", dtype},
                {"order", "x-fastest"}};
}

void write_sidecar(const std::string& path, const json& j) {
    std::ofstream out(path + ".json");
    if (!out) throw std::runtime_error("cannot write sidecar: " + path + ".json");
    out << j.dump(2) << "\n";
}

json read_sidecar(const std::string& path, const char* expected_dtype) {
    std::ifstream in(path + ".json");
    if (!in) throw std::runtime_error("missing sidecar: " + path + ".json");
    json j = json::parse(in);
    if (j.at("dtype").get<std::string>() != expected_dtype)
        throw std::runtime_error("sidecar dtype mismatch for " + path);
    if (j.at("order").get<std::string>() != "x-fastest")
        throw std::runtime_error("unsupported voxel order in " + path);
    return j;
}

template <typename T>
void parse_grid(const json& j, std::array<int, 3>& dims, Vec3& spacing, Vec3& origin, T&) {
    auto d = j.at("dims");
    dims = {d.at(0).get<int>(), d.at(1).get<int>(), d.at(2).get<int>()};
    auto s = j.at("spacing_mm");
    spacing = {s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()};
    auto o = j.at("origin_mm");
    origin = {o.at(0).get<double>(), o.at(1).get<double>(), o.at(2).get<double>()};
}

template <typename T>
std::vector<T> read_raw(const std::string& path, std::size_t expected) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("missing data file: " + path);
    in.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::size_t>(in.tellg());
    if (bytes != expected * sizeof(T)) {
        std::ostringstream msg;
        msg << "data size mismatch for " << path << ": header expects " << expected * sizeof(T)
            << " bytes, file has " << bytes;
        throw std::runtime_error(msg.str());
    }
    in.seekg(0);
    std::vector<T> data(expected);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw std::runtime_error("short read on " + path);
    return data;
}

template <typename T>
void write_raw(const std::string& path, const std::vector<T>& data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write data file: " + path);
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(T)));
    if (!out) throw std::runtime_error("short write on " + path);
}

}  // namespace

void save_volume(const Volume& v, const std::string& path) {
    v.validate();
    write_sidecar(path, grid_sidecar(v.dims, v.spacing, v.origin, "f32le"));
    write_raw(path, v.data);
}

Volume load_volume(const std::string& path) {
    json j = read_sidecar(path, "f32le");
    Volume v;
    parse_grid(j, v.dims, v.spacing, v.origin, v);
    if (v.dims[0] < 1 || v.dims[1] < 1 || v.dims[2] < 1)
        throw std::runtime_error("invalid dims in sidecar for " + path);
    v.data = read_raw<float>(path, v.voxel_count());
    v.validate();
    return v;
}

void save_mask(const BoneMask3D& m, const std::string& path) {
    json j = grid_sidecar(m.dims, m.spacing, m.origin, "u8");
    j["label"] = bone_label_name(m.label);
    write_sidecar(path, j);
    write_raw(path, m.data);
}

BoneMask3D load_mask(const std::string& path) {
    json j = read_sidecar(path, "u8");
    BoneMask3D m;
    parse_grid(j, m.dims, m.spacing, m.origin, m);
    if (j.contains("label")) m.label = bone_label_from_name(j.at("label").get<std::string>());
    m.data = read_raw<std::uint8_t>(path, m.voxel_count());
    return m;
}

std::vector<BoneMask3D> threshold_segment(const Volume& v, double threshold,
                                          std::size_t min_voxels) {
    v.validate();
    const int nx = v.dims[0], ny = v.dims[1], nz = v.dims[2];
    std::vector<std::int32_t> comp(v.voxel_count(), -1);

    struct Component {
        std::int32_t id;
        std::size_t size;
        Vec3 centroid_sum;
    };
    std::vector<Component> comps;

    // Flood fill with 6-connectivity over {value >= threshold}.
    std::vector<std::size_t> stack;
    for (int iz = 0; iz < nz; ++iz) {
        for (int iy = 0; iy < ny; ++iy) {
            for (int ix = 0; ix < nx; ++ix) {
                const std::size_t seed = v.index(ix, iy, iz);
                if (comp[seed] >= 0 || v.data[seed] < threshold) continue;
                const auto id = static_cast<std::int32_t>(comps.size());
                comps.push_back({id, 0, Vec3{}});
                comp[seed] = id;
                stack.assign(1, seed);
                while (!stack.empty()) {
                    const std::size_t cur = stack.back();
                    stack.pop_back();
                    const int cx = static_cast<int>(cur % nx);
                    const int cy = static_cast<int>((cur / nx) % ny);
                    const int cz = static_cast<int>(cur / (static_cast<std::size_t>(nx) * ny));
                    comps[id].size += 1;
                    comps[id].centroid_sum += v.voxel_center(cx, cy, cz);
                    const int neighbor[6][3] = {{cx - 1, cy, cz}, {cx + 1, cy, cz},
                                                {cx, cy - 1, cz}, {cx, cy + 1, cz},
                                                {cx, cy, cz - 1}, {cx, cy, cz + 1}};
                    for (const auto& nb : neighbor) {
                        if (nb[0] < 0 || nb[0] >= nx || nb[1] < 0 || nb[1] >= ny || nb[2] < 0 ||
                            nb[2] >= nz)
                            continue;
                        const std::size_t ni = v.index(nb[0], nb[1], nb[2]);
                        if (comp[ni] >= 0 || v.data[ni] < threshold) continue;
                        comp[ni] = id;
                        stack.push_back(ni);
                    }
                }
            }
        }
    }

    std::vector<Component> kept;
    for (const auto& c : comps)
        if (c.size >= min_voxels) kept.push_back(c);
    if (kept.empty()) throw std::runtime_error("threshold_segment: no components above threshold");

    // Largest three components are the bones of interest; smaller leftovers
    // (none expected on the phantom) are dropped.
    std::sort(kept.begin(), kept.end(), [](const Component& a, const Component& b) {
        if (a.size != b.size) return a.size > b.size;
        return a.id < b.id;
    });
    if (kept.size() > 3) kept.resize(3);

    // Label heuristic: the smallest of the three is the patella; of the
    // remaining bones the higher centroid is the femur.
    std::vector<std::pair<std::int32_t, BoneLabel>> labeled;
    if (kept.size() == 3) {
        const Component& patella = kept[2];
        const Component* a = &kept[0];
        const Component* b = &kept[1];
        const double za = a->centroid_sum.z / static_cast<double>(a->size);
        const double zb = b->centroid_sum.z / static_cast<double>(b->size);
        if (za < zb) std::swap(a, b);
        labeled = {{a->id, BoneLabel::femur},
                   {patella.id, BoneLabel::patella},
                   {b->id, BoneLabel::tibia_fibula}};
    } else if (kept.size() == 2) {
        const double z0 = kept[0].centroid_sum.z / static_cast<double>(kept[0].size);
        const double z1 = kept[1].centroid_sum.z / static_cast<double>(kept[1].size);
        labeled = {{kept[z0 >= z1 ? 0 : 1].id, BoneLabel::femur},
                   {kept[z0 >= z1 ? 1 : 0].id, BoneLabel::tibia_fibula}};
    } else {
        labeled = {{kept[0].id, BoneLabel::femur}};
    }

    std::vector<BoneMask3D> out;
    for (const auto& [id, label] : labeled) {
        BoneMask3D m;
        m.dims = v.dims;
        m.spacing = v.spacing;
        m.origin = v.origin;
        m.label = label;
        m.data.assign(v.voxel_count(), 0);
        for (std::size_t i = 0; i < comp.size(); ++i)
            if (comp[i] == id) m.data[i] = 1;
        out.push_back(std::move(m));
    }
    return out;
}

std::vector<Vec3> mask_to_pointcloud(const BoneMask3D& m, std::size_t max_points) {
    if (max_points == 0) throw std::invalid_argument("max_points must be >= 1");
    const std::size_t total = m.count_true();
    if (total == 0) throw std::runtime_error("mask_to_pointcloud: empty mask");
    // stride chosen so that ceil(total/stride) <= max_points; scanning in
    // x-fastest order keeps the subsample deterministic.
    const std::size_t stride = (total + max_points - 1) / max_points;
    std::vector<Vec3> points;
    points.reserve(std::min(total, max_points));
    std::size_t seen = 0;
    for (int iz = 0; iz < m.dims[2]; ++iz)
        for (int iy = 0; iy < m.dims[1]; ++iy)
            for (int ix = 0; ix < m.dims[0]; ++ix)
                if (m.at(ix, iy, iz)) {
                    if (seen % stride == 0) points.push_back(m.voxel_center(ix, iy, iz));
                    ++seen;
                }
    return points;
}

PrincipalAxis principal_axis(const std::vector<Vec3>& points) {
    if (points.size() < 3) throw std::invalid_argument("principal_axis: need >= 3 points");
    Vec3 mean{};
    for (const Vec3& p : points) mean += p;
    mean = mean / static_cast<double>(points.size());

    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (const Vec3& p : points) {
        const Eigen::Vector3d d(p.x - mean.x, p.y - mean.y, p.z - mean.z);
        cov += d * d.transpose();
    }
    cov /= static_cast<double>(points.size());

    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(cov);
    if (solver.info() != Eigen::Success)
        throw std::runtime_error("principal_axis: eigensolver failed");
    // Eigen sorts eigenvalues ascending; we want descending.
    const Eigen::Vector3d evals = solver.eigenvalues();
    const Eigen::Matrix3d evecs = solver.eigenvectors();
    if (evals(2) <= 1e-12)
        throw std::invalid_argument("principal_axis: degenerate point cloud");

    Vec3 dir{evecs(0, 2), evecs(1, 2), evecs(2, 2)};
    // Eigenvectors are sign-ambiguous; pin the sign for determinism.
    if (dir.z < 0 || (dir.z == 0 && (dir.y < 0 || (dir.y == 0 && dir.x < 0)))) dir = -dir;

    PrincipalAxis axis;
    axis.centroid = mean;
    axis.direction = dir.normalized();
    axis.extents = {std::max(0.0, evals(2)), std::max(0.0, evals(1)), std::max(0.0, evals(0))};
    return axis;
}

Volume mask_volume(const Volume& v, const BoneMask3D& m) {
    if (!m.same_grid(v)) throw std::invalid_argument("mask_volume: grid mismatch");
    Volume out = v;
    for (std::size_t i = 0; i < out.data.size(); ++i)
        if (!m.data[i]) out.data[i] = 0.0f;
    return out;
}

}  // namespace bonereg
