#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "bcnn/rng.hpp"
#include "bcnn/tensor.hpp"

namespace bcnn {

// Pinhole camera in grid coordinates (meters). Camera frame: +x right,
// +y down (image v), +z forward; the rotation matrix maps camera to world.
struct Camera {
  std::array<double, 3> position{0, 0, 0};
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major, columns r/d/f
  double hfov = 1.5708;  // radians
  double vfov = 1.1781;
  int width = 160;
  int height = 120;
  double max_range = 8.0;

  std::array<double, 3> to_camera(const std::array<double, 3>& world) const;
  std::array<double, 3> to_world_dir(const std::array<double, 3>& cam_dir) const;
  double fx() const;
  double fy() const;
  // Projects a world point; returns false behind the camera or outside the
  // image. u/v are pixel indices, z the depth along the optical axis.
  bool project(const std::array<double, 3>& world, int& u, int& v, double& z) const;

  // Looks from `position` toward `target`, world +y up.
  static Camera look_at(const std::array<double, 3>& position,
                        const std::array<double, 3>& target, double hfov, int width, int height,
                        double max_range);
};

// Semantic classes 0..3 are fixed (empty, floor, wall, ceiling); the
// remaining entries are furniture classes with distinct size profiles.
struct SceneConfig {
  std::array<Index, 3> grid_dims{60, 40, 60};
  double voxel_size = 0.08;
  std::vector<std::string> class_names{"empty", "floor",    "wall",  "ceiling",
                                       "table", "bed",      "chair", "wardrobe"};
  int min_furniture = 3;
  int max_furniture = 6;
  double door_probability = 0.7;
  int image_width = 160;
  int image_height = 120;
  double hfov_deg = 90.0;
  double max_range = 8.0;
  double truncation_voxels = 3.0;  // flipped-TSDF band

  Index num_classes() const { return static_cast<Index>(class_names.size()); }
  void validate() const;
};

struct VoxelScene {
  std::array<Index, 3> dims{0, 0, 0};
  double voxel_size = 0.08;
  std::vector<std::int32_t> semantic;      // class ids, 0 = empty
  std::vector<double> tsdf;                // flipped projective TSDF in [-1, 1]
  std::vector<std::uint8_t> observed_surface;
  std::vector<std::uint8_t> fov;
  std::vector<double> dist_to_surface;     // meters
  Camera camera;
  std::vector<std::string> class_names;
  std::uint64_t seed = 0;
  int regenerations = 0;  // whole-scene retries recorded in metadata

  Index voxel_count() const { return dims[0] * dims[1] * dims[2]; }
  Index index(Index x, Index y, Index z) const { return (x * dims[1] + y) * dims[2] + z; }
  std::array<double, 3> center(Index x, Index y, Index z) const {
    return {(double(x) + 0.5) * voxel_size, (double(y) + 0.5) * voxel_size,
            (double(z) + 0.5) * voxel_size};
  }
};

// Semantic grid + camera only; fully deterministic in (seed, cfg).
VoxelScene generate_scene(std::uint64_t seed, const SceneConfig& cfg);

// Per-pixel DDA to the first non-empty voxel; depth is the distance along
// the optical axis (z-depth); misses return max_range.
std::vector<double> render_depth(const VoxelScene& scene, const Camera& camera);

// Projective flipped TSDF: d = pixel depth - voxel z-depth,
// f = sign(d) * max(0, 1 - |d|/truncation) with sign(0) = +1. Voxels behind
// the camera, outside the image, or past max range get 0. observed_surface
// marks |d| <= voxel/2 along hit rays. Fills scene.tsdf and
// scene.observed_surface.
void compute_flipped_tsdf(VoxelScene& scene, const std::vector<double>& depth,
                          const Camera& camera, double truncation_m);

// Exact Euclidean distance (voxel centers), separable squared-distance
// passes, scaled to meters.
std::vector<double> distance_to_surface(const std::vector<std::uint8_t>& surface,
                                        const std::array<Index, 3>& dims, double voxel_size);

// True iff the voxel center is in front of the camera, inside both FOV
// angles, and within max range.
std::vector<std::uint8_t> compute_fov_mask(const Camera& camera,
                                           const std::array<Index, 3>& dims, double voxel_size);

// generate + render + TSDF + distance field + FOV mask.
VoxelScene make_scene(std::uint64_t seed, const SceneConfig& cfg);

void save_scene(const std::string& path, const VoxelScene& scene);
VoxelScene load_scene(const std::string& path);

}  // namespace bcnn
