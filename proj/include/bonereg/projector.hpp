#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bonereg/pose.hpp"
#include "bonereg/vec.hpp"
#include "bonereg/volume.hpp"

namespace bonereg {

/// Cone-beam projection geometry: point source, flat detector spanned by the
/// orthonormal axes u,v. Pixel (iu,iv) is centered at
///   det_center + ((iu+0.5) - nu/2)*pu*u + ((iv+0.5) - nv/2)*pv*v.
///
/// Defaults are the desk-scale setup used throughout: SAD 600 mm, SDD
/// 1000 mm, 256x256 detector at 1.2 mm pixels, viewing along +y with the
/// detector u axis along world x (the flexion axis) and v along world z.
struct ProjectionGeometry {
    Vec3 source{0, -600, 0};
    Vec3 det_center{0, 400, 0};
    Vec3 u{1, 0, 0};
    Vec3 v{0, 0, 1};
    int nu = 256, nv = 256;
    double pu = 1.2, pv = 1.2;

    Vec3 pixel_center(int iu, int iv) const {
        return det_center + u * ((iu + 0.5 - nu / 2.0) * pu) + v * ((iv + 0.5 - nv / 2.0) * pv);
    }
    /// Unit detector normal (u x v).
    Vec3 normal() const { return u.cross(v).normalized(); }
    /// Source-to-detector-plane distance.
    double sdd() const { return std::abs((det_center - source).dot(normal())); }
    /// Source-to-world-origin distance (the phantom is centered on the origin).
    double sad() const { return source.norm(); }

    /// Throws std::invalid_argument on non-orthonormal axes, non-positive
    /// pixel counts/spacings, or a source on the detector plane.
    void validate() const;
};

/// 2D scalar image (line integrals, mm^-1 * mm) with an optional boolean
/// mask channel. Data is u-fastest.
struct Image2D {
    int nu = 0, nv = 0;
    double pu = 1.0, pv = 1.0;
    std::vector<float> data;
    std::vector<std::uint8_t> mask;  // empty, or nu*nv region-of-interest flags

    std::size_t index(int iu, int iv) const {
        return static_cast<std::size_t>(iu) + static_cast<std::size_t>(nu) * iv;
    }
    float at(int iu, int iv) const { return data[index(iu, iv)]; }
    float& at(int iu, int iv) { return data[index(iu, iv)]; }
    bool mask_at(int iu, int iv) const { return !mask.empty() && mask[index(iu, iv)] != 0; }

    void validate() const;
};

/// Half-open pixel rectangle [u0,u0+nu) x [v0,v0+nv). An empty window
/// (nu or nv <= 0) selects no pixels.
struct PixelWindow {
    int u0 = 0, v0 = 0, nu = 0, nv = 0;
    bool empty() const { return nu <= 0 || nv <= 0; }
};

/// Axis-aligned box in a volume's own (untransformed) frame, used to clip
/// ray marching to a subregion of interest.
struct LocalBox {
    Vec3 lo, hi;
};

/// DRR of `vol` posed by `pose` (the volume moves; geometry stays fixed):
/// each pixel is the line integral of attenuation along the source-to-pixel
/// ray, sampled uniformly at step min(spacing)/2 with trilinear
/// interpolation. Sample positions lie on a fixed per-ray lattice anchored
/// at the source, so restricting the march to any box containing the
/// volume's support reproduces the full render exactly.
Image2D render_drr(const Volume& vol, const Pose6DoF& pose, const ProjectionGeometry& g,
                   int threads = 1);

/// Binary projection of a voxel mask: pixel true iff the ray's line
/// integral through the mask (as a 0/1 field) exceeds half a voxel length.
Image2D render_mask_projection(const BoneMask3D& m, const Pose6DoF& pose,
                               const ProjectionGeometry& g, int threads = 1);

/// Windowed fused render used by the registration objective: line integrals
/// of `vol` and of `mask01` (a 0/1-valued volume on the same grid) in a
/// single march, restricted to `window` pixels and rays clipped to `clip`.
/// Pixels outside the window are left untouched. Results for in-window
/// pixels are bit-identical to the full renders whenever `clip` contains
/// both supports.
void render_fused_window(const Volume& vol, const Volume& mask01, const Pose6DoF& pose,
                         const ProjectionGeometry& g, const PixelWindow& window,
                         const std::optional<LocalBox>& clip, Image2D& drr_out,
                         Image2D& maskproj_out, int threads = 1);

/// Pixel bounding box of the projection of the posed local-frame box,
/// padded by `pad_px` and clamped to the detector. Falls back to the full
/// detector when a corner projects behind the source.
PixelWindow project_box_window(const LocalBox& box, const Pose6DoF& pose,
                               const ProjectionGeometry& g, int pad_px);

/// Padded support box of a whole volume / of a mask's true voxels
/// (half-voxel interpolation skirt plus one voxel of margin).
LocalBox volume_support(const Volume& vol);
LocalBox mask_support(const BoneMask3D& m);

/// Transmission noise: counts ~ Poisson(I0 * exp(-p)) per pixel (clamped to
/// >= 1), returned as -ln(counts/I0). Deterministic for a fixed seed; pixels
/// are drawn sequentially in storage order.
Image2D add_poisson_noise(const Image2D& img, double photons_per_pixel, std::uint64_t seed);

/// Box-average downsample by an integer factor dividing both dimensions;
/// pixel spacing scales by the same factor so the detector stays aligned.
Image2D downsample_image(const Image2D& img, int factor);
ProjectionGeometry downsample_geometry(const ProjectionGeometry& g, int factor);

/// Raw f32le + JSON sidecar image I/O (sidecar at path + ".json");
/// kind is "drr" or "mask".
void save_image(const Image2D& img, const std::string& path, const std::string& kind = "drr");
Image2D load_image(const std::string& path);

void save_geometry(const ProjectionGeometry& g, const std::string& path);
ProjectionGeometry load_geometry(const std::string& path);

/// Float 0/1 copy of a mask on its own grid, for interpolated sampling.
Volume mask_as_volume(const BoneMask3D& m);

}  // namespace bonereg
