#include "bcnn/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>

#include "json.hpp"

namespace bcnn {

using nlohmann::json;

// --- camera ---------------------------------------------------------------------

std::array<double, 3> Camera::to_camera(const std::array<double, 3>& world) const {
  const double px = world[0] - position[0];
  const double py = world[1] - position[1];
  const double pz = world[2] - position[2];
  // columns of `rotation` are the camera axes in world coordinates
  return {rotation[0] * px + rotation[3] * py + rotation[6] * pz,
          rotation[1] * px + rotation[4] * py + rotation[7] * pz,
          rotation[2] * px + rotation[5] * py + rotation[8] * pz};
}

std::array<double, 3> Camera::to_world_dir(const std::array<double, 3>& d) const {
  return {rotation[0] * d[0] + rotation[1] * d[1] + rotation[2] * d[2],
          rotation[3] * d[0] + rotation[4] * d[1] + rotation[5] * d[2],
          rotation[6] * d[0] + rotation[7] * d[1] + rotation[8] * d[2]};
}

double Camera::fx() const { return (width / 2.0) / std::tan(hfov / 2.0); }
double Camera::fy() const { return (height / 2.0) / std::tan(vfov / 2.0); }

bool Camera::project(const std::array<double, 3>& world, int& u, int& v, double& z) const {
  std::array<double, 3> c = to_camera(world);
  z = c[2];
  if (z <= 0) return false;
  double uf = width / 2.0 + fx() * c[0] / z;
  double vf = height / 2.0 + fy() * c[1] / z;
  u = static_cast<int>(std::floor(uf));
  v = static_cast<int>(std::floor(vf));
  return u >= 0 && u < width && v >= 0 && v < height;
}

Camera Camera::look_at(const std::array<double, 3>& position, const std::array<double, 3>& target,
                       double hfov, int width, int height, double max_range) {
  Camera cam;
  cam.position = position;
  cam.hfov = hfov;
  cam.width = width;
  cam.height = height;
  cam.vfov = 2.0 * std::atan(std::tan(hfov / 2.0) * double(height) / double(width));
  cam.max_range = max_range;

  std::array<double, 3> f{target[0] - position[0], target[1] - position[1],
                          target[2] - position[2]};
  double n = std::sqrt(f[0] * f[0] + f[1] * f[1] + f[2] * f[2]);
  if (n < 1e-9) throw ContractError("camera look_at: target coincides with position");
  for (double& x : f) x /= n;
  // right = up x f, down = r x f (world +y up, camera +y down)
  std::array<double, 3> up{0, 1, 0};
  std::array<double, 3> r{up[1] * f[2] - up[2] * f[1], up[2] * f[0] - up[0] * f[2],
                          up[0] * f[1] - up[1] * f[0]};
  double rn = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
  if (rn < 1e-9) throw ContractError("camera look_at: forward parallel to the vertical");
  for (double& x : r) x /= rn;
  std::array<double, 3> d{r[1] * f[2] - r[2] * f[1], r[2] * f[0] - r[0] * f[2],
                          r[0] * f[1] - r[1] * f[0]};
  cam.rotation = {r[0], d[0], f[0], r[1], d[1], f[1], r[2], d[2], f[2]};
  return cam;
}

// --- scene generation -------------------------------------------------------------

void SceneConfig::validate() const {
  if (grid_dims[0] < 8 || grid_dims[1] < 8 || grid_dims[2] < 8)
    throw ConfigError("scene config: grid too small");
  if (!(voxel_size > 0)) throw ConfigError("scene config: voxel_size must be > 0");
  if (class_names.size() < 5) throw ConfigError("scene config: need empty/floor/wall/ceiling + furniture");
  if (min_furniture < 0 || max_furniture < min_furniture)
    throw ConfigError("scene config: bad furniture range");
  if (!(hfov_deg > 10 && hfov_deg < 170)) throw ConfigError("scene config: hfov out of range");
  if (image_width < 8 || image_height < 8) throw ConfigError("scene config: image too small");
}

namespace {

constexpr std::int32_t kEmpty = 0, kFloor = 1, kWall = 2, kCeiling = 3;

struct Box {
  Index x0, y0, z0, x1, y1, z1;  // half-open voxel ranges
};

void paint(VoxelScene& s, const Box& b, std::int32_t cls) {
  for (Index x = b.x0; x < b.x1; ++x)
    for (Index y = b.y0; y < b.y1; ++y)
      for (Index z = b.z0; z < b.z1; ++z) s.semantic[static_cast<size_t>(s.index(x, y, z))] = cls;
}

bool region_empty(const VoxelScene& s, const Box& b) {
  for (Index x = b.x0; x < b.x1; ++x)
    for (Index y = b.y0; y < b.y1; ++y)
      for (Index z = b.z0; z < b.z1; ++z)
        if (s.semantic[static_cast<size_t>(s.index(x, y, z))] != kEmpty) return false;
  return true;
}

// Footprint ranges per furniture class slot (voxels @ 0.08 m). Slots cycle
// when the config names more furniture classes than profiles.
struct FurnitureProfile {
  Index fx_lo, fx_hi, fy_lo, fy_hi, fz_lo, fz_hi;
};
constexpr FurnitureProfile kProfiles[4] = {
    {8, 15, 7, 10, 8, 15},    // table: mid footprint, desk height
    {12, 18, 5, 8, 20, 26},   // bed: wide, low
    {4, 7, 5, 12, 4, 7},      // chair: small footprint
    {6, 14, 20, 27, 4, 8},    // wardrobe: tall, shallow
};

Index pick(RngStream& rng, Index lo, Index hi) {
  return lo + static_cast<Index>(rng.next_index(static_cast<std::uint64_t>(hi - lo + 1)));
}

bool try_generate(std::uint64_t seed, int attempt, const SceneConfig& cfg, VoxelScene& scene) {
  RngStream rng = RngStream::derive(seed, {rng_tag::kScene, static_cast<std::uint64_t>(attempt)});
  scene.dims = cfg.grid_dims;
  scene.voxel_size = cfg.voxel_size;
  scene.class_names = cfg.class_names;
  scene.seed = seed;
  scene.semantic.assign(static_cast<size_t>(scene.voxel_count()), kEmpty);

  const Index gx = scene.dims[0], gy = scene.dims[1], gz = scene.dims[2];
  const Index wt = pick(rng, 1, 2);  // wall/floor thickness

  // Interior extents, leaving at least one empty voxel outside the shell.
  const Index nx = pick(rng, std::min<Index>(42, gx - 2 * wt - 4), gx - 2 * wt - 2);
  const Index nz = pick(rng, std::min<Index>(42, gz - 2 * wt - 4), gz - 2 * wt - 2);
  const Index ny = pick(rng, std::min<Index>(28, gy - 2 * wt - 4), gy - 2 * wt - 2);
  const Index x0 = pick(rng, 1, gx - nx - 2 * wt - 1);
  const Index z0 = pick(rng, 1, gz - nz - 2 * wt - 1);
  const Index y0 = pick(rng, 0, std::min<Index>(2, gy - ny - 2 * wt - 1));

  const Index ix0 = x0 + wt, ix1 = x0 + wt + nx;
  const Index iz0 = z0 + wt, iz1 = z0 + wt + nz;
  const Index iy0 = y0 + wt, iy1 = y0 + wt + ny;

  paint(scene, {x0, y0, z0, x0 + nx + 2 * wt, y0 + wt, z0 + nz + 2 * wt}, kFloor);
  paint(scene, {x0, iy1, z0, x0 + nx + 2 * wt, iy1 + wt, z0 + nz + 2 * wt}, kCeiling);
  paint(scene, {x0, iy0, z0, ix0, iy1, z0 + nz + 2 * wt}, kWall);
  paint(scene, {ix1, iy0, z0, ix1 + wt, iy1, z0 + nz + 2 * wt}, kWall);
  paint(scene, {ix0, iy0, z0, ix1, iy1, iz0}, kWall);
  paint(scene, {ix0, iy0, iz1, ix1, iy1, iz1 + wt}, kWall);

  if (rng.uniform(0, 1) < cfg.door_probability) {
    const Index dw = pick(rng, 9, 13);
    const Index dh = std::min<Index>(pick(rng, 24, 27), ny);
    const int side = static_cast<int>(rng.next_index(4));
    if (side < 2) {
      Index dz = pick(rng, iz0 + 2, iz1 - dw - 2);
      Index wx = side == 0 ? x0 : ix1;
      paint(scene, {wx, iy0, dz, wx + wt, iy0 + dh, dz + dw}, kEmpty);
    } else {
      Index dx = pick(rng, ix0 + 2, ix1 - dw - 2);
      Index wz = side == 2 ? z0 : iz1;
      paint(scene, {dx, iy0, wz, dx + dw, iy0 + dh, wz + wt}, kEmpty);
    }
  }

  const Index n_furniture_classes = cfg.num_classes() - 4;
  const int n_items = static_cast<int>(pick(rng, cfg.min_furniture, cfg.max_furniture));
  for (int item = 0; item < n_items; ++item) {
    const Index cls_slot = static_cast<Index>(rng.next_index(
        static_cast<std::uint64_t>(n_furniture_classes)));
    const FurnitureProfile& prof = kProfiles[cls_slot % 4];
    bool placed = false;
    for (int retry = 0; retry < 20 && !placed; ++retry) {
      Index fx = pick(rng, prof.fx_lo, prof.fx_hi);
      Index fy = std::min(pick(rng, prof.fy_lo, prof.fy_hi), ny - 2);
      Index fz = pick(rng, prof.fz_lo, prof.fz_hi);
      if (ix1 - ix0 <= fx + 2 || iz1 - iz0 <= fz + 2) continue;
      Index px = pick(rng, ix0 + 1, ix1 - fx - 1);
      Index pz = pick(rng, iz0 + 1, iz1 - fz - 1);
      Box b{px, iy0, pz, px + fx, iy0 + fy, pz + fz};
      if (!region_empty(scene, b)) continue;
      paint(scene, b, static_cast<std::int32_t>(4 + cls_slot));
      placed = true;
    }
    if (!placed) return false;  // scene regenerated with the next sub-seed
  }

  // Camera inside the room in free space with a one-voxel clearance.
  const double vs = cfg.voxel_size;
  const double room_h = double(iy1 - iy0) * vs;
  const double room_w = double(ix1 - ix0) * vs;
  const double room_d = double(iz1 - iz0) * vs;
  const double min_look = std::min(0.8, 0.25 * std::sqrt(room_w * room_w + room_d * room_d));
  for (int retry = 0; retry < 60; ++retry) {
    double cx = rng.uniform(double(ix0 + 2) * vs, double(ix1 - 2) * vs);
    double cy = rng.uniform(double(iy0) * vs + 0.4 * room_h, double(iy0) * vs + 0.65 * room_h);
    double cz = rng.uniform(double(iz0 + 2) * vs, double(iz1 - 2) * vs);
    Index vx = static_cast<Index>(cx / vs), vy = static_cast<Index>(cy / vs),
          vz = static_cast<Index>(cz / vs);
    Box clearance{vx - 1, vy - 1, vz - 1, vx + 2, vy + 2, vz + 2};
    if (clearance.x0 < 0 || clearance.y0 < 0 || clearance.z0 < 0 || clearance.x1 > gx ||
        clearance.y1 > gy || clearance.z1 > gz)
      continue;
    if (!region_empty(scene, clearance)) continue;

    double tx = (double(ix0 + ix1) / 2.0) * vs + rng.uniform(-0.5, 0.5);
    double ty = (double(iy0) * vs + double(iy1) * vs) / 2.0 + rng.uniform(-0.4, 0.2);
    double tz = (double(iz0 + iz1) / 2.0) * vs + rng.uniform(-0.5, 0.5);
    double dx = tx - cx, dz = tz - cz;
    if (dx * dx + dz * dz < min_look * min_look) continue;  // looking somewhere, not at its feet

    scene.camera = Camera::look_at({cx, cy, cz}, {tx, ty, tz},
                                   cfg.hfov_deg * std::numbers::pi / 180.0, cfg.image_width,
                                   cfg.image_height, cfg.max_range);
    return true;
  }
  return false;
}

}  // namespace

VoxelScene generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
  cfg.validate();
  VoxelScene scene;
  for (int attempt = 0; attempt < 32; ++attempt) {
    if (try_generate(seed, attempt, cfg, scene)) {
      scene.regenerations = attempt;
      return scene;
    }
  }
  throw NumericError(strfmt("generate_scene: no valid layout after 32 attempts (seed %llu)",
                            static_cast<unsigned long long>(seed)));
}

// --- depth rendering ----------------------------------------------------------------

std::vector<double> render_depth(const VoxelScene& scene, const Camera& cam) {
  const Index gx = scene.dims[0], gy = scene.dims[1], gz = scene.dims[2];
  const double vs = scene.voxel_size;
  std::vector<double> depth(static_cast<size_t>(cam.width) * cam.height, cam.max_range);

  const std::array<double, 3> fwd{cam.rotation[2], cam.rotation[5], cam.rotation[8]};

#pragma omp parallel for schedule(static)
  for (int v = 0; v < cam.height; ++v) {
    for (int u = 0; u < cam.width; ++u) {
      std::array<double, 3> dc{(u + 0.5 - cam.width / 2.0) / cam.fx(),
                               (v + 0.5 - cam.height / 2.0) / cam.fy(), 1.0};
      double n = std::sqrt(dc[0] * dc[0] + dc[1] * dc[1] + dc[2] * dc[2]);
      for (double& x : dc) x /= n;
      std::array<double, 3> d = cam.to_world_dir(dc);
      const double cos_axis = d[0] * fwd[0] + d[1] * fwd[1] + d[2] * fwd[2];

      // Amanatides & Woo traversal from the camera voxel.
      Index ix = static_cast<Index>(std::floor(cam.position[0] / vs));
      Index iy = static_cast<Index>(std::floor(cam.position[1] / vs));
      Index iz = static_cast<Index>(std::floor(cam.position[2] / vs));
      if (ix < 0 || ix >= gx || iy < 0 || iy >= gy || iz < 0 || iz >= gz) continue;

      std::array<Index, 3> cell{ix, iy, iz};
      std::array<Index, 3> step;
      std::array<double, 3> t_max, t_delta;
      const std::array<double, 3> pos = cam.position;
      const std::array<Index, 3> dims{gx, gy, gz};
      bool degenerate = false;
      for (int a = 0; a < 3; ++a) {
        if (d[a] > 1e-12) {
          step[a] = 1;
          t_max[a] = ((double(cell[a]) + 1.0) * vs - pos[a]) / d[a];
          t_delta[a] = vs / d[a];
        } else if (d[a] < -1e-12) {
          step[a] = -1;
          t_max[a] = (double(cell[a]) * vs - pos[a]) / d[a];
          t_delta[a] = -vs / d[a];
        } else {
          step[a] = 0;
          t_max[a] = std::numeric_limits<double>::infinity();
          t_delta[a] = std::numeric_limits<double>::infinity();
        }
        (void)degenerate;
      }

      double t = 0;
      double hit = cam.max_range;
      while (true) {
        std::int32_t cls = scene.semantic[static_cast<size_t>(
            (cell[0] * dims[1] + cell[1]) * dims[2] + cell[2])];
        if (cls != kEmpty && t > 0) {
          double z = t * cos_axis;  // distance along the optical axis
          if (z < cam.max_range) hit = z;
          break;
        }
        int axis = t_max[0] <= t_max[1] ? (t_max[0] <= t_max[2] ? 0 : 2)
                                        : (t_max[1] <= t_max[2] ? 1 : 2);
        t = t_max[axis];
        if (t * cos_axis >= cam.max_range) break;
        cell[axis] += step[axis];
        if (cell[axis] < 0 || cell[axis] >= dims[axis]) break;
        t_max[axis] += t_delta[axis];
      }
      depth[static_cast<size_t>(v) * cam.width + u] = hit;
    }
  }
  return depth;
}

// --- flipped TSDF --------------------------------------------------------------------

void compute_flipped_tsdf(VoxelScene& scene, const std::vector<double>& depth, const Camera& cam,
                          double truncation_m) {
  if (static_cast<int>(depth.size()) != cam.width * cam.height)
    throw ShapeError(strfmt("flipped_tsdf: depth image has %zu pixels, camera expects %d",
                            depth.size(), cam.width * cam.height));
  if (!(truncation_m > 0)) throw ConfigError("flipped_tsdf: truncation must be > 0");

  scene.tsdf.assign(static_cast<size_t>(scene.voxel_count()), 0.0);
  scene.observed_surface.assign(static_cast<size_t>(scene.voxel_count()), 0);
  const double half_voxel = scene.voxel_size / 2.0;

#pragma omp parallel for schedule(static) collapse(2)
  for (Index x = 0; x < scene.dims[0]; ++x)
    for (Index y = 0; y < scene.dims[1]; ++y)
      for (Index z = 0; z < scene.dims[2]; ++z) {
        int u, v;
        double vz;
        if (!cam.project(scene.center(x, y, z), u, v, vz)) continue;
        if (vz > cam.max_range) continue;
        const double pixel_depth = depth[static_cast<size_t>(v) * cam.width + u];
        const double d = pixel_depth - vz;
        const double mag = std::max(0.0, 1.0 - std::abs(d) / truncation_m);
        const size_t idx = static_cast<size_t>(scene.index(x, y, z));
        scene.tsdf[idx] = d >= 0 ? mag : -mag;  // sign(0) = +1
        if (pixel_depth < cam.max_range && std::abs(d) <= half_voxel)
          scene.observed_surface[idx] = 1;
      }
}

// --- exact distance transform -----------------------------------------------------------

namespace {

// 1D squared EDT over the lower envelope of parabolas (Felzenszwalb &
// Huttenlocher); samples at infinity contribute no parabola.
void edt_1d(const std::vector<double>& f, std::vector<double>& out, std::vector<int>& v,
            std::vector<double>& zbuf) {
  const double inf = std::numeric_limits<double>::infinity();
  const int n = static_cast<int>(f.size());
  v.assign(static_cast<size_t>(n), 0);
  zbuf.assign(static_cast<size_t>(n) + 1, 0.0);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[static_cast<size_t>(q)] == inf) continue;
    double s = 0;
    while (k >= 0) {
      int p = v[static_cast<size_t>(k)];
      s = ((f[static_cast<size_t>(q)] + double(q) * q) -
           (f[static_cast<size_t>(p)] + double(p) * p)) /
          (2.0 * q - 2.0 * p);
      if (s <= zbuf[static_cast<size_t>(k)])
        --k;
      else
        break;
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      zbuf[0] = -inf;
    } else {
      ++k;
      v[static_cast<size_t>(k)] = q;
      zbuf[static_cast<size_t>(k)] = s;
    }
    zbuf[static_cast<size_t>(k) + 1] = inf;
  }
  if (k < 0) {
    std::fill(out.begin(), out.end(), inf);
    return;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (zbuf[static_cast<size_t>(k) + 1] < double(q)) ++k;
    int p = v[static_cast<size_t>(k)];
    out[static_cast<size_t>(q)] = double(q - p) * double(q - p) + f[static_cast<size_t>(p)];
  }
}

}  // namespace

std::vector<double> distance_to_surface(const std::vector<std::uint8_t>& surface,
                                        const std::array<Index, 3>& dims, double voxel_size) {
  const Index gx = dims[0], gy = dims[1], gz = dims[2];
  if (static_cast<Index>(surface.size()) != gx * gy * gz)
    throw ShapeError("distance_to_surface: surface grid size mismatch");
  if (std::find(surface.begin(), surface.end(), std::uint8_t(1)) == surface.end())
    throw ContractError("distance_to_surface: empty surface set");

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> sq(surface.size());
  for (size_t i = 0; i < surface.size(); ++i) sq[i] = surface[i] ? 0.0 : inf;

  auto idx = [&](Index x, Index y, Index z) { return (x * gy + y) * gz + z; };

  // pass along z, then y, then x
#pragma omp parallel
  {
    std::vector<double> f, out;
    std::vector<int> v;
    std::vector<double> zbuf;
#pragma omp for schedule(static) collapse(2)
    for (Index x = 0; x < gx; ++x)
      for (Index y = 0; y < gy; ++y) {
        f.assign(static_cast<size_t>(gz), 0.0);
        out.assign(static_cast<size_t>(gz), 0.0);
        for (Index z = 0; z < gz; ++z) f[static_cast<size_t>(z)] = sq[static_cast<size_t>(idx(x, y, z))];
        edt_1d(f, out, v, zbuf);
        for (Index z = 0; z < gz; ++z) sq[static_cast<size_t>(idx(x, y, z))] = out[static_cast<size_t>(z)];
      }
#pragma omp for schedule(static) collapse(2)
    for (Index x = 0; x < gx; ++x)
      for (Index z = 0; z < gz; ++z) {
        f.assign(static_cast<size_t>(gy), 0.0);
        out.assign(static_cast<size_t>(gy), 0.0);
        for (Index y = 0; y < gy; ++y) f[static_cast<size_t>(y)] = sq[static_cast<size_t>(idx(x, y, z))];
        edt_1d(f, out, v, zbuf);
        for (Index y = 0; y < gy; ++y) sq[static_cast<size_t>(idx(x, y, z))] = out[static_cast<size_t>(y)];
      }
#pragma omp for schedule(static) collapse(2)
    for (Index y = 0; y < gy; ++y)
      for (Index z = 0; z < gz; ++z) {
        f.assign(static_cast<size_t>(gx), 0.0);
        out.assign(static_cast<size_t>(gx), 0.0);
        for (Index x = 0; x < gx; ++x) f[static_cast<size_t>(x)] = sq[static_cast<size_t>(idx(x, y, z))];
        edt_1d(f, out, v, zbuf);
        for (Index x = 0; x < gx; ++x) sq[static_cast<size_t>(idx(x, y, z))] = out[static_cast<size_t>(x)];
      }
  }

  std::vector<double> dist(surface.size());
  for (size_t i = 0; i < sq.size(); ++i) dist[i] = std::sqrt(sq[i]) * voxel_size;
  return dist;
}

// --- FOV mask -----------------------------------------------------------------------

std::vector<std::uint8_t> compute_fov_mask(const Camera& cam, const std::array<Index, 3>& dims,
                                           double voxel_size) {
  std::vector<std::uint8_t> mask(static_cast<size_t>(dims[0] * dims[1] * dims[2]), 0);
  const double tan_h = std::tan(cam.hfov / 2.0);
  const double tan_v = std::tan(cam.vfov / 2.0);
#pragma omp parallel for schedule(static) collapse(2)
  for (Index x = 0; x < dims[0]; ++x)
    for (Index y = 0; y < dims[1]; ++y)
      for (Index z = 0; z < dims[2]; ++z) {
        std::array<double, 3> c = cam.to_camera({(double(x) + 0.5) * voxel_size,
                                                 (double(y) + 0.5) * voxel_size,
                                                 (double(z) + 0.5) * voxel_size});
        if (c[2] <= 0 || c[2] > cam.max_range) continue;
        if (std::abs(c[0]) > c[2] * tan_h || std::abs(c[1]) > c[2] * tan_v) continue;
        mask[static_cast<size_t>((x * dims[1] + y) * dims[2] + z)] = 1;
      }
  return mask;
}

VoxelScene make_scene(std::uint64_t seed, const SceneConfig& cfg) {
  VoxelScene scene = generate_scene(seed, cfg);
  std::vector<double> depth = render_depth(scene, scene.camera);
  compute_flipped_tsdf(scene, depth, scene.camera, cfg.truncation_voxels * cfg.voxel_size);
  scene.dist_to_surface = distance_to_surface(scene.observed_surface, scene.dims, scene.voxel_size);
  scene.fov = compute_fov_mask(scene.camera, scene.dims, scene.voxel_size);
  return scene;
}

// --- scene files ----------------------------------------------------------------------

namespace {

template <class T>
void write_vec(std::ofstream& out, const std::vector<T>& v) {
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <class T>
void read_vec(std::ifstream& in, std::vector<T>& v, const std::string& path, const char* what) {
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
  if (static_cast<size_t>(in.gcount()) != v.size() * sizeof(T))
    throw IoError(strfmt("%s: truncated %s block", path.c_str(), what));
}

}  // namespace

void save_scene(const std::string& path, const VoxelScene& scene) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(strfmt("cannot write scene file '%s'", path.c_str()));
  json header;
  header["dims"] = scene.dims;
  header["voxel_size"] = scene.voxel_size;
  header["class_names"] = scene.class_names;
  header["seed"] = scene.seed;
  header["regenerations"] = scene.regenerations;
  header["camera"] = {{"position", scene.camera.position}, {"rotation", scene.camera.rotation},
                      {"hfov", scene.camera.hfov},         {"vfov", scene.camera.vfov},
                      {"width", scene.camera.width},       {"height", scene.camera.height},
                      {"max_range", scene.camera.max_range}};
  header["blocks"] = {"semantic:int32", "tsdf:float32", "observed_surface:uint8", "fov:uint8",
                      "dist_to_surface:float32"};
  out << "BCNNSCENE 1\n" << header.dump() << "\n";

  const size_t n = static_cast<size_t>(scene.voxel_count());
  write_vec(out, scene.semantic);
  std::vector<float> f32(n);
  for (size_t i = 0; i < n; ++i) f32[i] = static_cast<float>(scene.tsdf[i]);
  write_vec(out, f32);
  write_vec(out, scene.observed_surface);
  write_vec(out, scene.fov);
  for (size_t i = 0; i < n; ++i) f32[i] = static_cast<float>(scene.dist_to_surface[i]);
  write_vec(out, f32);
  if (!out) throw IoError(strfmt("short write to scene file '%s'", path.c_str()));
}

VoxelScene load_scene(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(strfmt("cannot open scene file '%s'", path.c_str()));
  std::string magic, header_line;
  if (!std::getline(in, magic) || magic != "BCNNSCENE 1")
    throw IoError(strfmt("%s: not a scene file (bad magic)", path.c_str()));
  if (!std::getline(in, header_line)) throw IoError(strfmt("%s: missing header", path.c_str()));

  VoxelScene scene;
  try {
    json header = json::parse(header_line);
    auto dims = header.at("dims").get<std::vector<Index>>();
    std::copy_n(dims.begin(), 3, scene.dims.begin());
    scene.voxel_size = header.at("voxel_size").get<double>();
    scene.class_names = header.at("class_names").get<std::vector<std::string>>();
    scene.seed = header.at("seed").get<std::uint64_t>();
    scene.regenerations = header.at("regenerations").get<int>();
    const json& cj = header.at("camera");
    auto pos = cj.at("position").get<std::vector<double>>();
    std::copy_n(pos.begin(), 3, scene.camera.position.begin());
    auto rot = cj.at("rotation").get<std::vector<double>>();
    std::copy_n(rot.begin(), 9, scene.camera.rotation.begin());
    scene.camera.hfov = cj.at("hfov").get<double>();
    scene.camera.vfov = cj.at("vfov").get<double>();
    scene.camera.width = cj.at("width").get<int>();
    scene.camera.height = cj.at("height").get<int>();
    scene.camera.max_range = cj.at("max_range").get<double>();
  } catch (const json::exception& e) {
    throw IoError(strfmt("%s: bad scene header: %s", path.c_str(), e.what()));
  }

  const size_t n = static_cast<size_t>(scene.voxel_count());
  scene.semantic.resize(n);
  read_vec(in, scene.semantic, path, "semantic");
  std::vector<float> f32(n);
  read_vec(in, f32, path, "tsdf");
  scene.tsdf.assign(f32.begin(), f32.end());
  scene.observed_surface.resize(n);
  read_vec(in, scene.observed_surface, path, "observed_surface");
  scene.fov.resize(n);
  read_vec(in, scene.fov, path, "fov");
  read_vec(in, f32, path, "dist_to_surface");
  scene.dist_to_surface.assign(f32.begin(), f32.end());
  return scene;
}

}  // namespace bcnn
