#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "bonereg/vec.hpp"

namespace bonereg {

/// Regular voxel grid of linear attenuation values (mm^-1).
///
/// World-coordinate convention (normative for the whole library):
///   world = origin + (index + 0.5) * spacing
/// i.e. `origin` is the corner of the grid and voxel centers sit half a
/// voxel inside. Data is stored x-fastest.
struct Volume {
    std::array<int, 3> dims{0, 0, 0};
    Vec3 spacing{1, 1, 1};
    Vec3 origin{};
    std::vector<float> data;

    std::size_t voxel_count() const {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }
    std::size_t index(int ix, int iy, int iz) const {
        return static_cast<std::size_t>(ix) +
               static_cast<std::size_t>(dims[0]) *
                   (static_cast<std::size_t>(iy) + static_cast<std::size_t>(dims[1]) * iz);
    }
    float at(int ix, int iy, int iz) const { return data[index(ix, iy, iz)]; }
    float& at(int ix, int iy, int iz) { return data[index(ix, iy, iz)]; }

    Vec3 voxel_center(int ix, int iy, int iz) const {
        return {origin.x + (ix + 0.5) * spacing.x,
                origin.y + (iy + 0.5) * spacing.y,
                origin.z + (iz + 0.5) * spacing.z};
    }

    /// Grid extent in world coordinates: [origin, origin + dims*spacing).
    Vec3 extent() const {
        return {dims[0] * spacing.x, dims[1] * spacing.y, dims[2] * spacing.z};
    }

    /// Throws std::invalid_argument on empty dims, non-positive spacing,
    /// size mismatch, or non-finite/negative values.
    void validate() const;
};

enum class BoneLabel { femur, patella, tibia_fibula };

const char* bone_label_name(BoneLabel label);
BoneLabel bone_label_from_name(const std::string& name);

/// Boolean voxel mask on the same grid as its parent volume.
struct BoneMask3D {
    std::array<int, 3> dims{0, 0, 0};
    Vec3 spacing{1, 1, 1};
    Vec3 origin{};
    std::vector<std::uint8_t> data;
    BoneLabel label = BoneLabel::femur;

    std::size_t voxel_count() const {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }
    std::size_t index(int ix, int iy, int iz) const {
        return static_cast<std::size_t>(ix) +
               static_cast<std::size_t>(dims[0]) *
                   (static_cast<std::size_t>(iy) + static_cast<std::size_t>(dims[1]) * iz);
    }
    bool at(int ix, int iy, int iz) const { return data[index(ix, iy, iz)] != 0; }

    Vec3 voxel_center(int ix, int iy, int iz) const {
        return {origin.x + (ix + 0.5) * spacing.x,
                origin.y + (iy + 0.5) * spacing.y,
                origin.z + (iz + 0.5) * spacing.z};
    }

    std::size_t count_true() const;
    bool same_grid(const Volume& v) const;
    /// World centroid of true voxels. Throws on empty mask.
    Vec3 centroid() const;
    /// Inclusive index bounds of true voxels {min, max}. Throws on empty mask.
    std::array<std::array<int, 3>, 2> index_bounds() const;
};

/// Dominant direction of a point cloud from PCA of its covariance.
struct PrincipalAxis {
    Vec3 centroid{};
    Vec3 direction{};                  // unit vector
    std::array<double, 3> extents{};   // eigenvalues, mm^2, descending
};

/// Raw f32le/u8 + JSON sidecar volume I/O. The sidecar lives at
/// `path + ".json"`.
void save_volume(const Volume& v, const std::string& path);
Volume load_volume(const std::string& path);
void save_mask(const BoneMask3D& m, const std::string& path);
BoneMask3D load_mask(const std::string& path);

/// Connected components of {voxel >= threshold} (6-connectivity), small
/// components removed, labeled by a centroid-height heuristic: of the three
/// largest components the smallest is the patella, of the remaining two the
/// higher centroid is the femur and the lower the tibia-fibula complex.
/// Throws std::runtime_error when nothing survives the threshold.
std::vector<BoneMask3D> threshold_segment(const Volume& v, double threshold,
                                          std::size_t min_voxels = 30);

/// World coordinates of mask-voxel centers, deterministically subsampled by
/// stride (x-fastest scan order) to at most `max_points`.
std::vector<Vec3> mask_to_pointcloud(const BoneMask3D& m, std::size_t max_points);

/// PCA axis of a point cloud. Direction sign is fixed so that
/// direction.z >= 0 (ties: direction.y >= 0, then direction.x > 0).
/// Throws std::invalid_argument on degenerate input (all points coincident).
PrincipalAxis principal_axis(const std::vector<Vec3>& points);

/// Volume restricted to a mask: values kept inside, zero outside.
Volume mask_volume(const Volume& v, const BoneMask3D& m);

}  // namespace bonereg
