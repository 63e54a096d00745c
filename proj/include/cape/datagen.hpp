#pragma once

#include <string>
#include <vector>

#include "cape/cape.hpp"
#include "cape/tensor.hpp"

namespace cape {

/// Posed image set. Images are [3, H, W] float tensors in [0, 1].
struct ViewSet {
  std::vector<Tensor> images;
  std::vector<Pose> poses;

  std::size_t size() const { return images.size(); }
};

struct SpherePrim {
  Eigen::Vector3d center;
  double radius;
  Eigen::Vector3d color;
};

struct BoxPrim {
  Eigen::Vector3d lo, hi;
  Eigen::Vector3d color;
};

/// A procedural scene: a few diffuse primitives near the origin plus one
/// directional light. Everything fits well inside the camera orbit.
struct Scene {
  std::vector<SpherePrim> spheres;
  std::vector<BoxPrim> boxes;
  Eigen::Vector3d light_dir;  // unit vector toward the light

  static Scene random(Rng& rng);
  bool empty() const { return spheres.empty() && boxes.empty(); }
};

struct RenderedView {
  Tensor image;  // [3, side, side]
  Pose4 pose;
};

/// Pinhole render: vertical FOV 50 degrees, camera looks at the origin,
/// nearest-hit Lambertian shading with 0.2 ambient, black background.
RenderedView render_view(const Scene& scene, const Pose4& pose, int side);

/// Pose sampling ranges used by the generator (azimuth full circle,
/// colatitude band away from the poles, log-uniform radius).
struct PoseRanges {
  double elevation_min = kPi / 6.0;
  double elevation_max = 5.0 * kPi / 6.0;
  RadiusBounds radius{1.5, 4.0};
};

Pose4 sample_pose4(const PoseRanges& ranges, Rng& rng);

struct DatasetConfig {
  int scene_count = 10;
  int views_per_scene = 12;
  int image_side = 32;
  PoseMode pose_mode = PoseMode::FourDoF;
  PoseRanges ranges;
  std::uint64_t seed = 0;
};

/// In-memory dataset; images in [3, side, side] layout, poses tagged with the
/// file's pose mode (6 DoF files store the spherical poses converted to
/// world-to-camera matrices, look-at at the origin).
struct Dataset {
  int image_side = 0;
  int views_per_scene = 0;
  int scene_count = 0;
  PoseMode pose_mode = PoseMode::FourDoF;
  RadiusBounds bounds{1.5, 4.0};
  std::vector<Tensor> images;  // scene-major
  std::vector<Pose> poses;

  int view_index(int scene, int view) const { return scene * views_per_scene + view; }
  ViewSet scene_views(int scene) const;
};

/// Renders and writes a dataset file ("CAPEDAT1", see README). Deterministic
/// for a fixed config; rendering parallelizes across views.
void generate_dataset(const std::string& path, const DatasetConfig& cfg);

Dataset load_dataset(const std::string& path);

/// Draws N reference and M target views with replacement from one scene.
struct TrainBatch {
  ViewSet references;
  ViewSet targets;
  int scene = 0;
};
TrainBatch sample_batch(const Dataset& data, int n_refs, int m_targets, Rng& rng);

/// Binary P6 export for human inspection.
void write_ppm(const std::string& path, const Tensor& image);

}  // namespace cape
