#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "bcnn/digits.hpp"
#include "bcnn/mnist_idx.hpp"
#include "bcnn/scene.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace bcnn;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("bcnn_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const char* name) const { return (path / name).string(); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

}  // namespace

TEST_CASE("idx round-trip: scaling and counts") {
  TempDir dir;
  std::vector<std::uint8_t> pixels(3 * 2 * 2, 0);
  pixels[0] = 255;
  pixels[5] = 128;
  write_idx_images(dir.file("imgs"), pixels, 3, 2, 2);
  write_idx_labels(dir.file("labels"), {7, 0, 9});

  Dataset ds = load_mnist_idx(dir.file("imgs"), dir.file("labels"));
  CHECK(ds.sample_count() == 3);
  CHECK(ds.inputs.shape() == Shape{3, 1, 2, 2});
  CHECK(ds.inputs.values()[0] == doctest::Approx(1.0));
  CHECK(ds.inputs.values()[1] == doctest::Approx(0.0));
  CHECK(ds.inputs.values()[5] == doctest::Approx(128.0 / 255.0));
  CHECK(ds.labels == std::vector<std::int32_t>{7, 0, 9});
}

TEST_CASE("idx loader: distinct errors for magic, truncation, count mismatch") {
  TempDir dir;
  std::vector<std::uint8_t> pixels(2 * 2 * 2, 10);
  write_idx_images(dir.file("imgs"), pixels, 2, 2, 2);
  write_idx_labels(dir.file("labels"), {1, 2});

  // wrong magic: a label file in the image slot
  CHECK_THROWS_WITH_AS(load_mnist_idx(dir.file("labels"), dir.file("labels")),
                       doctest::Contains("magic"), IoError);

  // truncated image payload
  {
    std::ofstream f(dir.file("trunc"), std::ios::binary);
    std::ifstream src(dir.file("imgs"), std::ios::binary);
    std::vector<char> head(16 + 5);
    src.read(head.data(), static_cast<std::streamsize>(head.size()));
    f.write(head.data(), static_cast<std::streamsize>(head.size()));
  }
  CHECK_THROWS_WITH_AS(load_mnist_idx(dir.file("trunc"), dir.file("labels")),
                       doctest::Contains("truncated"), IoError);

  // count mismatch names both counts
  write_idx_labels(dir.file("labels3"), {1, 2, 3});
  CHECK_THROWS_WITH_AS(load_mnist_idx(dir.file("imgs"), dir.file("labels3")),
                       doctest::Contains("2 images"), IoError);
}

TEST_CASE("digit generator: deterministic, balanced, loadable") {
  TempDir dir;
  write_digit_idx(dir.file("i1"), dir.file("l1"), 40, 99);
  write_digit_idx(dir.file("i2"), dir.file("l2"), 40, 99);
  Dataset a = load_mnist_idx(dir.file("i1"), dir.file("l1"));
  Dataset b = load_mnist_idx(dir.file("i2"), dir.file("l2"));
  for (Index i = 0; i < a.inputs.size(); ++i)
    CHECK(a.inputs.values()[i] == b.inputs.values()[i]);

  std::array<int, 10> counts{};
  for (std::int32_t l : a.labels) counts[static_cast<size_t>(l)]++;
  for (int c : counts) CHECK(c == 4);

  // images carry ink and differ across samples of the same class
  RngStream r1 = RngStream::derive(5, {rng_tag::kDataGen, 1});
  RngStream r2 = RngStream::derive(5, {rng_tag::kDataGen, 2});
  auto d1 = render_digit(3, r1);
  auto d2 = render_digit(3, r2);
  CHECK(d1 != d2);
  int bright = 0;
  for (std::uint8_t p : d1) bright += p > 128;
  CHECK(bright > 20);
  CHECK(bright < 300);
}

TEST_CASE("generate_scene: deterministic and class-set closed") {
  SceneConfig cfg;
  cfg.grid_dims = {48, 32, 48};
  VoxelScene a = generate_scene(42, cfg);
  VoxelScene b = generate_scene(42, cfg);
  CHECK(a.semantic == b.semantic);
  CHECK(a.camera.position == b.camera.position);
  CHECK(a.camera.rotation == b.camera.rotation);

  std::set<std::int32_t> seen(a.semantic.begin(), a.semantic.end());
  for (std::int32_t c : seen) {
    CHECK(c >= 0);
    CHECK(c < cfg.num_classes());
  }
  VoxelScene c = generate_scene(43, cfg);
  CHECK(a.semantic != c.semantic);
}

TEST_CASE("generate_scene: zero furniture leaves only structural classes") {
  SceneConfig cfg;
  cfg.grid_dims = {48, 32, 48};
  cfg.min_furniture = 0;
  cfg.max_furniture = 0;
  VoxelScene s = generate_scene(7, cfg);
  std::set<std::int32_t> seen(s.semantic.begin(), s.semantic.end());
  for (std::int32_t c : seen) CHECK(c <= 3);
  CHECK(seen.count(1));
  CHECK(seen.count(2));
  CHECK(seen.count(3));
}

TEST_CASE("render_depth: flat wall at 2m reads 2m in z-depth") {
  // hand-built scene: wall plane z = 2.4m + camera at z offset so the wall
  // face sits exactly 2.0m ahead along the optical axis
  VoxelScene s;
  s.dims = {32, 32, 40};
  s.voxel_size = 0.08;
  s.semantic.assign(static_cast<size_t>(s.voxel_count()), 0);
  const Index wall_z = 30;  // face at 2.4m
  for (Index x = 0; x < 32; ++x)
    for (Index y = 0; y < 32; ++y)
      s.semantic[static_cast<size_t>(s.index(x, y, wall_z))] = 2;

  Camera cam = Camera::look_at({1.28, 1.28, 0.4}, {1.28, 1.28, 2.0}, 1.2, 64, 48, 8.0);
  std::vector<double> depth = render_depth(s, cam);
  int hits = 0;
  for (double d : depth) {
    if (d < 8.0) {
      ++hits;
      CHECK(d == doctest::Approx(2.0).epsilon(0.04 / 2.0));
    }
  }
  CHECK(hits > int(depth.size()) / 2);
}

TEST_CASE("render_depth: empty scene misses everywhere; depths stay in range") {
  VoxelScene s;
  s.dims = {16, 16, 16};
  s.voxel_size = 0.08;
  s.semantic.assign(static_cast<size_t>(s.voxel_count()), 0);
  Camera cam = Camera::look_at({0.64, 0.64, 0.2}, {0.64, 0.64, 1.2}, 1.2, 32, 24, 5.0);
  for (double d : render_depth(s, cam)) CHECK(d == 5.0);

  SceneConfig cfg;
  cfg.grid_dims = {48, 32, 48};
  VoxelScene scene = generate_scene(3, cfg);
  for (double d : render_depth(scene, scene.camera)) {
    CHECK(d > 0);
    CHECK(d <= cfg.max_range);
  }
}

TEST_CASE("flipped tsdf: surface 1, half-truncation 0.5, beyond-band 0") {
  // axis-aligned camera so voxel centers land on exact z-depths
  VoxelScene s;
  s.dims = {16, 16, 60};
  s.voxel_size = 0.08;
  s.semantic.assign(static_cast<size_t>(s.voxel_count()), 0);
  Camera cam;  // identity rotation: +z forward
  cam.position = {0.64, 0.64, 0.04};  // half-voxel z so centers align
  cam.width = 64;
  cam.height = 64;
  cam.hfov = 2.2;
  cam.vfov = 2.2;
  cam.max_range = 8.0;

  // synthetic depth image: everything at exactly 2.0m
  std::vector<double> depth(static_cast<size_t>(cam.width) * cam.height, 2.0);
  const double trunc = 0.32;  // 4 voxels
  compute_flipped_tsdf(s, depth, cam, trunc);

  // voxel centers: z-depth = (z + 0.5)*0.08 - 0.04 = z*0.08
  auto tsdf_at = [&](Index z) { return s.tsdf[static_cast<size_t>(s.index(8, 8, z))]; };
  CHECK(tsdf_at(25) == doctest::Approx(1.0).epsilon(1e-9));        // d = 0, sign(0) = +1
  CHECK(tsdf_at(23) == doctest::Approx(0.5).epsilon(1e-9));        // d = +0.16 = t/2
  CHECK(tsdf_at(27) == doctest::Approx(-0.5).epsilon(1e-9));       // d = -0.16 behind
  CHECK(tsdf_at(20) == doctest::Approx(0.0).epsilon(1e-12));       // |d| >= t
  CHECK(tsdf_at(31) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(s.observed_surface[static_cast<size_t>(s.index(8, 8, 25))] == 1);
  CHECK(s.observed_surface[static_cast<size_t>(s.index(8, 8, 23))] == 0);
}

TEST_CASE("distance field: exact neighbors and brute force on random grids") {
  std::array<Index, 3> dims{8, 8, 8};
  std::vector<std::uint8_t> surf(512, 0);
  surf[static_cast<size_t>((3 * 8 + 4) * 8 + 5)] = 1;  // single voxel at (3,4,5)
  std::vector<double> d = distance_to_surface(surf, dims, 0.08);
  auto at = [&](Index x, Index y, Index z) { return d[static_cast<size_t>((x * 8 + y) * 8 + z)]; };
  CHECK(at(3, 4, 5) == doctest::Approx(0.0));
  CHECK(at(4, 4, 5) == doctest::Approx(0.08).epsilon(1e-12));
  CHECK(at(4, 5, 6) == doctest::Approx(0.08 * std::sqrt(3.0)).epsilon(1e-12));

  RngStream rng(11);
  for (int trial = 0; trial < 12; ++trial) {
    std::vector<std::uint8_t> s(512, 0);
    int count = 1 + static_cast<int>(rng.next_index(20));
    for (int i = 0; i < count; ++i) s[rng.next_index(512)] = 1;
    std::vector<double> fast = distance_to_surface(s, dims, 1.0);
    for (Index x = 0; x < 8; ++x)
      for (Index y = 0; y < 8; ++y)
        for (Index z = 0; z < 8; ++z) {
          double best = 1e18;
          for (Index sx = 0; sx < 8; ++sx)
            for (Index sy = 0; sy < 8; ++sy)
              for (Index sz = 0; sz < 8; ++sz)
                if (s[static_cast<size_t>((sx * 8 + sy) * 8 + sz)]) {
                  double dd = double((x - sx) * (x - sx) + (y - sy) * (y - sy) +
                                     (z - sz) * (z - sz));
                  best = std::min(best, dd);
                }
          CHECK(fast[static_cast<size_t>((x * 8 + y) * 8 + z)] ==
                doctest::Approx(std::sqrt(best)).epsilon(1e-9));
        }
  }
  CHECK_THROWS_AS(distance_to_surface(std::vector<std::uint8_t>(512, 0), dims, 1.0),
                  ContractError);
}

TEST_CASE("fov mask: behind, on-axis, just past the half-angle") {
  Camera cam;  // identity: +z forward
  cam.position = {1.0, 1.0, 1.0};
  cam.hfov = 1.0;
  cam.vfov = 0.8;
  cam.max_range = 4.0;
  std::array<Index, 3> dims{25, 25, 100};
  std::vector<std::uint8_t> mask = compute_fov_mask(cam, dims, 0.08);
  auto at = [&](Index x, Index y, Index z) {
    return mask[static_cast<size_t>((x * dims[1] + y) * dims[2] + z)];
  };
  CHECK(at(12, 12, 5) == 0);    // behind (z center 0.44 < 1.0)
  CHECK(at(12, 12, 37) == 1);   // on axis at ~2m < max range
  CHECK(at(12, 12, 90) == 0);   // past max range (z-depth 6.24)

  // the horizontal boundary sits exactly at |x - 1.0| = z-depth * tan(hfov/2)
  const double zc = (37 + 0.5) * 0.08 - 1.0;  // 2.0 m
  const double lim = zc * std::tan(cam.hfov / 2);
  for (Index x = 12; x < dims[0]; ++x) {
    double offset = (double(x) + 0.5) * 0.08 - 1.0;
    CHECK(at(x, 12, 37) == (offset <= lim ? 1 : 0));
  }
}

TEST_CASE("scene pipeline invariants on seeded scenes" * doctest::timeout(600)) {
  SceneConfig cfg;
  cfg.grid_dims = {48, 32, 48};
  for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
    VoxelScene s = make_scene(seed, cfg);

    // observed surface within the field of view
    for (size_t i = 0; i < s.observed_surface.size(); ++i)
      if (s.observed_surface[i]) CHECK(s.fov[i] == 1);

    // surface voxels at distance zero; 1-Lipschitz across face neighbors
    for (Index x = 0; x < s.dims[0]; ++x)
      for (Index y = 0; y < s.dims[1]; ++y)
        for (Index z = 0; z < s.dims[2]; ++z) {
          size_t i = static_cast<size_t>(s.index(x, y, z));
          if (s.observed_surface[i]) CHECK(s.dist_to_surface[i] == 0.0);
          if (x + 1 < s.dims[0]) {
            size_t j = static_cast<size_t>(s.index(x + 1, y, z));
            CHECK(std::abs(s.dist_to_surface[i] - s.dist_to_surface[j]) <=
                  s.voxel_size + 1e-9);
          }
        }

    // |tsdf| bounded by 1
    for (double f : s.tsdf) {
      CHECK(f <= 1.0);
      CHECK(f >= -1.0);
    }
  }
}

TEST_CASE("tsdf sign convention and formula against independent projection") {
  SceneConfig cfg;
  cfg.grid_dims = {48, 32, 48};
  VoxelScene s = generate_scene(17, cfg);
  std::vector<double> depth = render_depth(s, s.camera);
  const double trunc = cfg.truncation_voxels * cfg.voxel_size;
  compute_flipped_tsdf(s, depth, s.camera, trunc);

  // independent projection: rotation columns applied by hand
  const Camera& cam = s.camera;
  const auto& R = cam.rotation;
  const double fx = (cam.width / 2.0) / std::tan(cam.hfov / 2.0);
  const double fy = (cam.height / 2.0) / std::tan(cam.vfov / 2.0);
  int checked_front = 0, checked_behind = 0;
  for (Index x = 0; x < s.dims[0]; ++x)
    for (Index y = 0; y < s.dims[1]; ++y)
      for (Index z = 0; z < s.dims[2]; ++z) {
        auto c = s.center(x, y, z);
        double px = c[0] - cam.position[0], py = c[1] - cam.position[1],
               pz = c[2] - cam.position[2];
        double cx = R[0] * px + R[3] * py + R[6] * pz;
        double cy = R[1] * px + R[4] * py + R[7] * pz;
        double cz = R[2] * px + R[5] * py + R[8] * pz;
        double f = s.tsdf[static_cast<size_t>(s.index(x, y, z))];
        if (cz <= 0 || cz > cam.max_range) {
          CHECK(f == 0.0);
          continue;
        }
        int u = static_cast<int>(std::floor(cam.width / 2.0 + fx * cx / cz));
        int v = static_cast<int>(std::floor(cam.height / 2.0 + fy * cy / cz));
        if (u < 0 || u >= cam.width || v < 0 || v >= cam.height) {
          CHECK(f == 0.0);
          continue;
        }
        double D = depth[static_cast<size_t>(v) * cam.width + u];
        double d = D - cz;
        double expect = (d >= 0 ? 1.0 : -1.0) * std::max(0.0, 1.0 - std::abs(d) / trunc);
        CHECK(f == doctest::Approx(expect).epsilon(1e-9));
        if (D < cam.max_range && d > s.voxel_size / 2) {
          CHECK(f >= 0.0);  // strictly between camera and the observed surface
          ++checked_front;
        }
        if (D < cam.max_range && d < -s.voxel_size / 2 && d > -1.5 * s.voxel_size) {
          CHECK(f <= 0.0);  // layer immediately behind the surface
          ++checked_behind;
        }
      }
  CHECK(checked_front > 1000);
  CHECK(checked_behind > 100);
}

TEST_CASE("scene file round-trip: semantic bit-exact, fields preserved") {
  TempDir dir;
  SceneConfig cfg;
  cfg.grid_dims = {48, 32, 48};
  VoxelScene s = make_scene(23, cfg);
  save_scene(dir.file("scene.bin"), s);
  VoxelScene r = load_scene(dir.file("scene.bin"));

  CHECK(r.semantic == s.semantic);  // bit-exact
  CHECK(r.observed_surface == s.observed_surface);
  CHECK(r.fov == s.fov);
  CHECK(r.dims == s.dims);
  CHECK(r.voxel_size == s.voxel_size);
  CHECK(r.class_names == s.class_names);
  CHECK(r.camera.position == s.camera.position);
  CHECK(r.camera.rotation == s.camera.rotation);
  for (size_t i = 0; i < s.tsdf.size(); ++i)
    CHECK(r.tsdf[i] == doctest::Approx(s.tsdf[i]).epsilon(1e-6));

  // saving the reloaded scene reproduces the file byte for byte
  save_scene(dir.file("scene2.bin"), r);
  std::ifstream f1(dir.file("scene.bin"), std::ios::binary);
  std::ifstream f2(dir.file("scene2.bin"), std::ios::binary);
  std::string c1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string c2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(c1 == c2);

  CHECK_THROWS_AS(load_scene(dir.file("nope.bin")), IoError);
}
