#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "cape/datagen.hpp"

using namespace cape;

namespace {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

int lit_pixel_count(const Tensor& img) {
  const int hw = static_cast<int>(img.dim(1) * img.dim(2));
  int count = 0;
  for (int px = 0; px < hw; ++px) {
    if (img.at(px) > 0 || img.at(hw + px) > 0 || img.at(2 * hw + px) > 0) ++count;
  }
  return count;
}

}  // namespace

TEST_CASE("empty scene renders black") {
  Scene empty;
  empty.light_dir = Eigen::Vector3d(0, 0, 1);
  const auto view = render_view(empty, Pose4(0.3, 1.2, 0.0, 2.0), 32);
  for (std::int64_t i = 0; i < view.image.numel(); ++i) CHECK(view.image.at(i) == 0.0f);
}

TEST_CASE("unit sphere silhouette matches the pinhole projection") {
  Scene s;
  s.spheres.push_back({Eigen::Vector3d::Zero(), 1.0, Eigen::Vector3d(1, 1, 1)});
  s.light_dir = Eigen::Vector3d(0, 0, 1);
  const int side = 64;
  const auto view = render_view(s, Pose4(0.0, kPi / 2, 0.0, 3.0), side);

  // Center pixel is lit.
  const int hw = side * side;
  const int center = (side / 2) * side + side / 2;
  CHECK(view.image.at(center) > 0.0f);

  // Projected silhouette radius: angular radius asin(R/d) through the
  // vertical-FOV pinhole.
  const double theta = std::asin(1.0 / 3.0);
  const double expect_radius = std::tan(theta) / std::tan(25.0 * kPi / 180.0) * (side / 2.0);
  const double measured_radius = std::sqrt(lit_pixel_count(view.image) / kPi);
  CHECK(std::abs(measured_radius - expect_radius) < 1.0);

  // Silhouette is centered: bounding box symmetric around the middle.
  int min_x = side, max_x = -1, min_y = side, max_y = -1;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      if (view.image.at(y * side + x) > 0) {
        min_x = std::min(min_x, x);
        max_x = std::max(max_x, x);
        min_y = std::min(min_y, y);
        max_y = std::max(max_y, y);
      }
    }
  CHECK(std::abs((min_x + max_x) / 2.0 - (side - 1) / 2.0) <= 1.0);
  CHECK(std::abs((min_y + max_y) / 2.0 - (side - 1) / 2.0) <= 1.0);
}

TEST_CASE("dataset generation is deterministic and round-trips") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path();
  DatasetConfig cfg;
  cfg.scene_count = 4;
  cfg.views_per_scene = 5;
  cfg.image_side = 16;
  cfg.seed = 123;

  const auto p1 = dir / "cape_ds_a.bin";
  const auto p2 = dir / "cape_ds_b.bin";
  generate_dataset(p1.string(), cfg);
  generate_dataset(p2.string(), cfg);
  CHECK(read_file(p1) == read_file(p2));

  const Dataset d = load_dataset(p1.string());
  CHECK(d.scene_count == 4);
  CHECK(d.views_per_scene == 5);
  CHECK(d.image_side == 16);
  CHECK(d.pose_mode == PoseMode::FourDoF);
  CHECK(d.bounds.r_min == cfg.ranges.radius.r_min);
  CHECK(d.bounds.r_max == cfg.ranges.radius.r_max);
  CHECK(d.images.size() == 20);
  CHECK(d.poses.size() == 20);

  // Write-read-write reproduces the payload bit for bit.
  for (const auto& img : d.images) {
    for (std::int64_t i = 0; i < img.numel(); ++i) {
      CHECK(std::isfinite(img.at(i)));
      CHECK(img.at(i) >= 0.0f);
      CHECK(img.at(i) <= 1.0f);
    }
  }
  for (const auto& p : d.poses) {
    CHECK(p.p4.radius() >= cfg.ranges.radius.r_min);
    CHECK(p.p4.radius() <= cfg.ranges.radius.r_max);
    CHECK(p.p4.elevation() >= cfg.ranges.elevation_min);
    CHECK(p.p4.elevation() <= cfg.ranges.elevation_max);
    CHECK(p.p4.roll() == 0.0);
  }
  fs::remove(p1);
  fs::remove(p2);

  // 6 DoF mode stores matrices whose centers match the spherical positions.
  cfg.pose_mode = PoseMode::SixDoF;
  const auto p6 = dir / "cape_ds_c.bin";
  generate_dataset(p6.string(), cfg);
  const Dataset d6 = load_dataset(p6.string());
  CHECK(d6.pose_mode == PoseMode::SixDoF);
  for (const auto& p : d6.poses) {
    const double r = p.p6.camera_center().norm();
    CHECK(r >= cfg.ranges.radius.r_min - 1e-9);
    CHECK(r <= cfg.ranges.radius.r_max + 1e-9);
  }
  fs::remove(p6);
}

TEST_CASE("scene count and primitive bounds") {
  Rng rng(77);
  for (int it = 0; it < 100; ++it) {
    const Scene s = Scene::random(rng);
    const std::size_t prims = s.spheres.size() + s.boxes.size();
    CHECK(prims >= 2);
    CHECK(prims <= 5);
    for (const auto& sp : s.spheres) {
      CHECK(sp.center.norm() + sp.radius < 1.2);  // inside the camera orbit
      for (int c = 0; c < 3; ++c) {
        CHECK(sp.color(c) >= 0.0);
        CHECK(sp.color(c) <= 1.0);
      }
    }
    for (const auto& b : s.boxes) {
      CHECK(b.lo.cwiseAbs().maxCoeff() < 1.2);
      CHECK(b.hi.cwiseAbs().maxCoeff() < 1.2);
    }
    CHECK(std::abs(s.light_dir.norm() - 1.0) < 1e-12);
  }
}

TEST_CASE("batch sampling draws uniformly with replacement") {
  namespace fs = std::filesystem;
  DatasetConfig cfg;
  cfg.scene_count = 1;
  cfg.views_per_scene = 12;
  cfg.image_side = 16;
  cfg.seed = 5;
  const auto path = fs::temp_directory_path() / "cape_ds_u.bin";
  generate_dataset(path.string(), cfg);
  const Dataset data = load_dataset(path.string());
  fs::remove(path);

  Rng rng(9);
  const TrainBatch minimal = sample_batch(data, 1, 1, rng);
  CHECK(minimal.references.size() == 1);
  CHECK(minimal.targets.size() == 1);

  const TrainBatch b33 = sample_batch(data, 3, 3, rng);
  CHECK(b33.references.size() == 3);
  CHECK(b33.targets.size() == 3);

  // Frequency of each of the 12 views over many draws: 1/12 within 1%.
  std::vector<int> counts(12, 0);
  const int draws = 100000;
  auto pose_index = [&](const Pose& p) {
    for (int v = 0; v < 12; ++v) {
      if (data.poses[static_cast<std::size_t>(v)].p4.azimuth() == p.p4.azimuth() &&
          data.poses[static_cast<std::size_t>(v)].p4.radius() == p.p4.radius()) {
        return v;
      }
    }
    return -1;
  };
  int total = 0;
  for (int it = 0; it < draws / 6; ++it) {
    const TrainBatch b = sample_batch(data, 3, 3, rng);
    for (const auto& p : b.references.poses) {
      ++counts[static_cast<std::size_t>(pose_index(p))];
      ++total;
    }
    for (const auto& p : b.targets.poses) {
      ++counts[static_cast<std::size_t>(pose_index(p))];
      ++total;
    }
  }
  for (int v = 0; v < 12; ++v) {
    const double freq = static_cast<double>(counts[static_cast<std::size_t>(v)]) / total;
    CHECK(std::abs(freq - 1.0 / 12.0) < 0.01);
  }

  CHECK_THROWS_AS(sample_batch(data, 0, 1, rng), std::invalid_argument);
  Dataset empty;
  CHECK_THROWS_AS(sample_batch(empty, 3, 3, rng), std::invalid_argument);
}

TEST_CASE("ppm export") {
  namespace fs = std::filesystem;
  Tensor img({3, 4, 4});
  img.fill(0.5f);
  const auto path = fs::temp_directory_path() / "cape_test.ppm";
  write_ppm(path.string(), img);
  const std::string content = read_file(path);
  CHECK(content.substr(0, 2) == "P6");
  CHECK(content.size() > 48);  // header + 4*4*3 bytes
  fs::remove(path);
  CHECK_THROWS_AS(write_ppm("/nonexistent_dir_xyz/out.ppm", img), std::runtime_error);
}
