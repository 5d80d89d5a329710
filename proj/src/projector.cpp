#include "bonereg/projector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>
#include <thread>

#include "json.hpp"

namespace bonereg {

using nlohmann::json;

void ProjectionGeometry::validate() const {
    if (nu < 1 || nv < 1) throw std::invalid_argument("geometry: detector dims must be >= 1");
    if (!(pu > 0) || !(pv > 0))
        throw std::invalid_argument("geometry: pixel spacing must be positive");
    if (std::abs(u.norm() - 1.0) > 1e-9 || std::abs(v.norm() - 1.0) > 1e-9)
        throw std::invalid_argument("geometry: detector axes must be unit vectors");
    if (std::abs(u.dot(v)) > 1e-9)
        throw std::invalid_argument("geometry: detector axes must be orthogonal");
    if (!source.finite() || !det_center.finite())
        throw std::invalid_argument("geometry: non-finite positions");
    if (sdd() < 1e-6) throw std::invalid_argument("geometry: source lies on the detector plane");
}

void Image2D::validate() const {
    if (nu < 1 || nv < 1) throw std::invalid_argument("image dims must be >= 1");
    if (!(pu > 0) || !(pv > 0)) throw std::invalid_argument("image pixel spacing must be positive");
    if (data.size() != static_cast<std::size_t>(nu) * nv)
        throw std::invalid_argument("image data length does not match dims");
    if (!mask.empty() && mask.size() != data.size())
        throw std::invalid_argument("image mask length does not match dims");
    for (float v : data)
        if (!std::isfinite(v)) throw std::invalid_argument("image values must be finite");
}

namespace {

// Trilinear sample of up to two fields sharing one grid. Coordinates are
// continuous voxel-center indices; everything outside the grid reads 0.
struct GridSampler {
    int nx, ny, nz;
    const float* a;
    const float* b;  // may be null

    inline void sample(double gx, double gy, double gz, double& va, double& vb) const {
        const double fx0 = std::floor(gx), fy0 = std::floor(gy), fz0 = std::floor(gz);
        const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0),
                  z0 = static_cast<int>(fz0);
        const double fx = gx - fx0, fy = gy - fy0, fz = gz - fz0;
        va = 0.0;
        vb = 0.0;
        if (x0 >= 0 && x0 + 1 < nx && y0 >= 0 && y0 + 1 < ny && z0 >= 0 && z0 + 1 < nz) {
            const std::size_t sx = 1, sy = static_cast<std::size_t>(nx),
                              sz = static_cast<std::size_t>(nx) * ny;
            const std::size_t i = x0 + sy * y0 + sz * z0;
            const double w000 = (1 - fx) * (1 - fy) * (1 - fz), w100 = fx * (1 - fy) * (1 - fz);
            const double w010 = (1 - fx) * fy * (1 - fz), w110 = fx * fy * (1 - fz);
            const double w001 = (1 - fx) * (1 - fy) * fz, w101 = fx * (1 - fy) * fz;
            const double w011 = (1 - fx) * fy * fz, w111 = fx * fy * fz;
            va = w000 * a[i] + w100 * a[i + sx] + w010 * a[i + sy] + w110 * a[i + sx + sy] +
                 w001 * a[i + sz] + w101 * a[i + sx + sz] + w011 * a[i + sy + sz] +
                 w111 * a[i + sx + sy + sz];
            if (b)
                vb = w000 * b[i] + w100 * b[i + sx] + w010 * b[i + sy] + w110 * b[i + sx + sy] +
                     w001 * b[i + sz] + w101 * b[i + sx + sz] + w011 * b[i + sy + sz] +
                     w111 * b[i + sx + sy + sz];
        } else if (x0 >= -1 && x0 < nx && y0 >= -1 && y0 < ny && z0 >= -1 && z0 < nz) {
            for (int dz = 0; dz < 2; ++dz) {
                const int z = z0 + dz;
                if (z < 0 || z >= nz) continue;
                for (int dy = 0; dy < 2; ++dy) {
                    const int y = y0 + dy;
                    if (y < 0 || y >= ny) continue;
                    for (int dx = 0; dx < 2; ++dx) {
                        const int x = x0 + dx;
                        if (x < 0 || x >= nx) continue;
                        const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) *
                                         (dz ? fz : 1 - fz);
                        const std::size_t i =
                            x + static_cast<std::size_t>(nx) * (y + static_cast<std::size_t>(ny) * z);
                        va += w * a[i];
                        if (b) vb += w * b[i];
                    }
                }
            }
        }
    }
};

// March all rays of `window`, accumulating line integrals of one or two
// fields. Samples lie at t = (k + 0.5) * h from the source along each ray,
// independent of the clip box, so any clip containing the integrand's
// support yields identical sums.
void march(const Volume& vol, const float* second_field, const RigidMatrix& world_to_local,
           const ProjectionGeometry& g, const PixelWindow& window, const LocalBox& clip,
           Image2D* out_a, Image2D* out_b, int threads) {
    const double h = std::min({vol.spacing.x, vol.spacing.y, vol.spacing.z}) / 2.0;
    const GridSampler sampler{vol.dims[0], vol.dims[1], vol.dims[2], vol.data.data(),
                              second_field};
    const Vec3 local_origin = world_to_local.apply(g.source);
    // Continuous-index affine for a sample at arc length t along local
    // direction dl: index = base + t * (dl / spacing).
    const Vec3 base{(local_origin.x - vol.origin.x) / vol.spacing.x - 0.5,
                    (local_origin.y - vol.origin.y) / vol.spacing.y - 0.5,
                    (local_origin.z - vol.origin.z) / vol.spacing.z - 0.5};

    auto run_rows = [&](int v_begin, int v_end) {
        for (int iv = v_begin; iv < v_end; ++iv) {
            for (int iu = window.u0; iu < window.u0 + window.nu; ++iu) {
                const Vec3 pixel = g.pixel_center(iu, iv);
                const Vec3 delta = pixel - g.source;
                const double length = delta.norm();
                const Vec3 dl = world_to_local.rotation * (delta / length);

                // Slab intersection with the local clip box.
                double t0 = 0.0, t1 = length;
                bool hit = true;
                const double o[3] = {local_origin.x, local_origin.y, local_origin.z};
                const double d[3] = {dl.x, dl.y, dl.z};
                const double lo[3] = {clip.lo.x, clip.lo.y, clip.lo.z};
                const double hi[3] = {clip.hi.x, clip.hi.y, clip.hi.z};
                for (int ax = 0; ax < 3 && hit; ++ax) {
                    if (std::abs(d[ax]) < 1e-12) {
                        if (o[ax] < lo[ax] || o[ax] > hi[ax]) hit = false;
                        continue;
                    }
                    double ta = (lo[ax] - o[ax]) / d[ax];
                    double tb = (hi[ax] - o[ax]) / d[ax];
                    if (ta > tb) std::swap(ta, tb);
                    t0 = std::max(t0, ta);
                    t1 = std::min(t1, tb);
                    if (t0 > t1) hit = false;
                }

                double sum_a = 0.0, sum_b = 0.0;
                if (hit) {
                    const auto k0 = std::max<long long>(
                        0, static_cast<long long>(std::ceil(t0 / h - 0.5)));
                    const auto k1 = static_cast<long long>(std::floor(t1 / h - 0.5));
                    const Vec3 step{dl.x / vol.spacing.x, dl.y / vol.spacing.y,
                                    dl.z / vol.spacing.z};
                    for (long long k = k0; k <= k1; ++k) {
                        const double t = (k + 0.5) * h;
                        double va, vb;
                        sampler.sample(base.x + t * step.x, base.y + t * step.y,
                                       base.z + t * step.z, va, vb);
                        sum_a += va;
                        sum_b += vb;
                    }
                }
                if (out_a) out_a->at(iu, iv) = static_cast<float>(sum_a * h);
                if (out_b) out_b->at(iu, iv) = static_cast<float>(sum_b * h);
            }
        }
    };

    const int v_begin = window.v0, v_end = window.v0 + window.nv;
    const int rows = v_end - v_begin;
    const int nthreads = std::clamp(threads, 1, std::max(1, rows));
    if (nthreads == 1) {
        run_rows(v_begin, v_end);
    } else {
        std::vector<std::thread> pool;
        for (int tid = 0; tid < nthreads; ++tid) {
            const int b = v_begin + static_cast<int>(static_cast<long long>(rows) * tid / nthreads);
            const int e =
                v_begin + static_cast<int>(static_cast<long long>(rows) * (tid + 1) / nthreads);
            if (b < e) pool.emplace_back(run_rows, b, e);
        }
        for (auto& th : pool) th.join();
    }
}

Image2D blank_image(const ProjectionGeometry& g) {
    Image2D img;
    img.nu = g.nu;
    img.nv = g.nv;
    img.pu = g.pu;
    img.pv = g.pv;
    img.data.assign(static_cast<std::size_t>(g.nu) * g.nv, 0.0f);
    return img;
}

}  // namespace

LocalBox volume_support(const Volume& vol) {
    // Trilinear support is a half voxel beyond the outer voxel centers; one
    // extra voxel of margin keeps boundary rounding harmless.
    return {vol.origin - vol.spacing * 1.5, vol.origin + vol.extent() + vol.spacing * 1.5};
}

LocalBox mask_support(const BoneMask3D& m) {
    const auto bounds = m.index_bounds();
    const Vec3 lo{m.origin.x + (bounds[0][0] - 1.5) * m.spacing.x,
                  m.origin.y + (bounds[0][1] - 1.5) * m.spacing.y,
                  m.origin.z + (bounds[0][2] - 1.5) * m.spacing.z};
    const Vec3 hi{m.origin.x + (bounds[1][0] + 2.5) * m.spacing.x,
                  m.origin.y + (bounds[1][1] + 2.5) * m.spacing.y,
                  m.origin.z + (bounds[1][2] + 2.5) * m.spacing.z};
    return {lo, hi};
}

Volume mask_as_volume(const BoneMask3D& m) {
    Volume v;
    v.dims = m.dims;
    v.spacing = m.spacing;
    v.origin = m.origin;
    v.data.resize(m.data.size());
    for (std::size_t i = 0; i < m.data.size(); ++i) v.data[i] = m.data[i] ? 1.0f : 0.0f;
    return v;
}

Image2D render_drr(const Volume& vol, const Pose6DoF& pose, const ProjectionGeometry& g,
                   int threads) {
    g.validate();
    vol.validate();
    Image2D img = blank_image(g);
    const RigidMatrix world_to_local = pose_to_matrix(pose).inverse();
    march(vol, nullptr, world_to_local, g, PixelWindow{0, 0, g.nu, g.nv}, volume_support(vol),
          &img, nullptr, threads);
    return img;
}

Image2D render_mask_projection(const BoneMask3D& m, const Pose6DoF& pose,
                               const ProjectionGeometry& g, int threads) {
    g.validate();
    Image2D img = blank_image(g);
    img.mask.assign(img.data.size(), 0);
    if (m.count_true() == 0) return img;

    const Volume mask01 = mask_as_volume(m);
    Image2D integral = blank_image(g);
    const RigidMatrix world_to_local = pose_to_matrix(pose).inverse();
    march(mask01, nullptr, world_to_local, g, PixelWindow{0, 0, g.nu, g.nv}, mask_support(m),
          &integral, nullptr, threads);

    const double thr = 0.5 * std::min({m.spacing.x, m.spacing.y, m.spacing.z});
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        const bool on = integral.data[i] > thr;
        img.data[i] = on ? 1.0f : 0.0f;
        img.mask[i] = on ? 1 : 0;
    }
    return img;
}

void render_fused_window(const Volume& vol, const Volume& mask01, const Pose6DoF& pose,
                         const ProjectionGeometry& g, const PixelWindow& window,
                         const std::optional<LocalBox>& clip, Image2D& drr_out,
                         Image2D& maskproj_out, int threads) {
    if (vol.dims != mask01.dims)
        throw std::invalid_argument("render_fused_window: grids must match");
    if (window.empty()) return;
    const LocalBox box = clip ? *clip : volume_support(vol);
    const RigidMatrix world_to_local = pose_to_matrix(pose).inverse();
    march(vol, mask01.data.data(), world_to_local, g, window, box, &drr_out, &maskproj_out,
          threads);
}

PixelWindow project_box_window(const LocalBox& box, const Pose6DoF& pose,
                               const ProjectionGeometry& g, int pad_px) {
    const RigidMatrix m = pose_to_matrix(pose);
    const Vec3 n = g.normal();
    const double plane_offset = (g.det_center - g.source).dot(n);

    double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
    for (int corner = 0; corner < 8; ++corner) {
        const Vec3 local{(corner & 1) ? box.hi.x : box.lo.x, (corner & 2) ? box.hi.y : box.lo.y,
                         (corner & 4) ? box.hi.z : box.lo.z};
        const Vec3 world = m.apply(local);
        const double denom = (world - g.source).dot(n);
        if (plane_offset > 0 ? denom < 1e-9 : denom > -1e-9)
            return {0, 0, g.nu, g.nv};  // degenerate view; play safe
        const Vec3 hitp = g.source + (world - g.source) * (plane_offset / denom);
        const double uc = (hitp - g.det_center).dot(g.u) / g.pu + g.nu / 2.0 - 0.5;
        const double vc = (hitp - g.det_center).dot(g.v) / g.pv + g.nv / 2.0 - 0.5;
        umin = std::min(umin, uc);
        umax = std::max(umax, uc);
        vmin = std::min(vmin, vc);
        vmax = std::max(vmax, vc);
    }
    const int u0 = std::max(0, static_cast<int>(std::floor(umin)) - pad_px);
    const int v0 = std::max(0, static_cast<int>(std::floor(vmin)) - pad_px);
    const int u1 = std::min(g.nu - 1, static_cast<int>(std::ceil(umax)) + pad_px);
    const int v1 = std::min(g.nv - 1, static_cast<int>(std::ceil(vmax)) + pad_px);
    if (u1 < u0 || v1 < v0) return {0, 0, 0, 0};
    return {u0, v0, u1 - u0 + 1, v1 - v0 + 1};
}

Image2D add_poisson_noise(const Image2D& img, double photons_per_pixel, std::uint64_t seed) {
    if (!(photons_per_pixel > 0))
        throw std::invalid_argument("add_poisson_noise: photon count must be positive");
    img.validate();
    Image2D out = img;
    std::mt19937_64 rng(seed);
    const double log_i0 = std::log(photons_per_pixel);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        const double lambda = photons_per_pixel * std::exp(-static_cast<double>(img.data[i]));
        std::poisson_distribution<long long> poisson(lambda);
        const long long counts = std::max<long long>(1, poisson(rng));
        out.data[i] = static_cast<float>(log_i0 - std::log(static_cast<double>(counts)));
    }
    return out;
}

Image2D downsample_image(const Image2D& img, int factor) {
    img.validate();
    if (factor < 1) throw std::invalid_argument("downsample factor must be >= 1");
    if (factor == 1) return img;
    if (img.nu % factor != 0 || img.nv % factor != 0)
        throw std::invalid_argument("downsample factor must divide both image dimensions");
    Image2D out;
    out.nu = img.nu / factor;
    out.nv = img.nv / factor;
    out.pu = img.pu * factor;
    out.pv = img.pv * factor;
    out.data.assign(static_cast<std::size_t>(out.nu) * out.nv, 0.0f);
    const double inv = 1.0 / (static_cast<double>(factor) * factor);
    for (int iv = 0; iv < out.nv; ++iv)
        for (int iu = 0; iu < out.nu; ++iu) {
            double sum = 0.0;
            for (int dv = 0; dv < factor; ++dv)
                for (int du = 0; du < factor; ++du)
                    sum += img.at(iu * factor + du, iv * factor + dv);
            out.at(iu, iv) = static_cast<float>(sum * inv);
        }
    return out;
}

ProjectionGeometry downsample_geometry(const ProjectionGeometry& g, int factor) {
    g.validate();
    if (factor < 1) throw std::invalid_argument("downsample factor must be >= 1");
    if (g.nu % factor != 0 || g.nv % factor != 0)
        throw std::invalid_argument("downsample factor must divide the detector dimensions");
    ProjectionGeometry out = g;
    out.nu = g.nu / factor;
    out.nv = g.nv / factor;
    out.pu = g.pu * factor;
    out.pv = g.pv * factor;
    return out;
}

void save_image(const Image2D& img, const std::string& path, const std::string& kind) {
    img.validate();
    if (kind != "drr" && kind != "mask")
        throw std::invalid_argument("image kind must be 'drr' or 'mask'");
    const json j{{"dims", {img.nu, img.nv}},
                 {"pixel_spacing_mm", {img.pu, img.pv}},
                 {"kind", kind},
                 {"dtype", "f32le"},
                 {"order", "u-fastest"}};
    std::ofstream side(path + ".json");
    if (!side) throw std::runtime_error("cannot write sidecar: " + path + ".json");
    side << j.dump(2) << "\n";
    std::ofstream raw(path, std::ios::binary);
    if (!raw) throw std::runtime_error("cannot write image: " + path);
    raw.write(reinterpret_cast<const char*>(img.data.data()),
              static_cast<std::streamsize>(img.data.size() * sizeof(float)));
    if (!raw) throw std::runtime_error("short write on " + path);
}

Image2D load_image(const std::string& path) {
    std::ifstream side(path + ".json");
    if (!side) throw std::runtime_error("missing sidecar: " + path + ".json");
    const json j = json::parse(side);
    Image2D img;
    img.nu = j.at("dims").at(0).get<int>();
    img.nv = j.at("dims").at(1).get<int>();
    img.pu = j.at("pixel_spacing_mm").at(0).get<double>();
    img.pv = j.at("pixel_spacing_mm").at(1).get<double>();
    if (img.nu < 1 || img.nv < 1) throw std::runtime_error("invalid image dims in " + path);

    std::ifstream raw(path, std::ios::binary);
    if (!raw) throw std::runtime_error("missing image data: " + path);
    raw.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::size_t>(raw.tellg());
    const std::size_t expected = static_cast<std::size_t>(img.nu) * img.nv * sizeof(float);
    if (bytes != expected)
        throw std::runtime_error("image data size mismatch for " + path);
    raw.seekg(0);
    img.data.resize(static_cast<std::size_t>(img.nu) * img.nv);
    raw.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(bytes));
    if (!raw) throw std::runtime_error("short read on " + path);

    if (j.value("kind", "drr") == "mask") {
        img.mask.resize(img.data.size());
        for (std::size_t i = 0; i < img.data.size(); ++i) img.mask[i] = img.data[i] > 0.5f;
    }
    img.validate();
    return img;
}

void save_geometry(const ProjectionGeometry& g, const std::string& path) {
    g.validate();
    const json j{{"source_mm", {g.source.x, g.source.y, g.source.z}},
                 {"det_center_mm", {g.det_center.x, g.det_center.y, g.det_center.z}},
                 {"u", {g.u.x, g.u.y, g.u.z}},
                 {"v", {g.v.x, g.v.y, g.v.z}},
                 {"nu", g.nu},
                 {"nv", g.nv},
                 {"pu", g.pu},
                 {"pv", g.pv}};
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write geometry: " + path);
    out << j.dump(2) << "\n";
}

ProjectionGeometry load_geometry(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("missing geometry file: " + path);
    const json j = json::parse(in);
    auto vec = [&](const char* key) {
        const auto& a = j.at(key);
        return Vec3{a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>()};
    };
    ProjectionGeometry g;
    g.source = vec("source_mm");
    g.det_center = vec("det_center_mm");
    g.u = vec("u");
    g.v = vec("v");
    g.nu = j.at("nu").get<int>();
    g.nv = j.at("nv").get<int>();
    g.pu = j.at("pu").get<double>();
    g.pv = j.at("pv").get<double>();
    g.validate();
    return g;
}

}  // namespace bonereg
