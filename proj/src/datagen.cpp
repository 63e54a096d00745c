#include "cape/datagen.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "cape/threading.hpp"

namespace cape {

namespace {

constexpr double kVerticalFov = 50.0 * kPi / 180.0;
constexpr char kMagic[8] = {'C', 'A', 'P', 'E', 'D', 'A', 'T', '1'};

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  Eigen::Vector3d normal;
  Eigen::Vector3d color;
  bool valid() const { return std::isfinite(t); }
};

void intersect_sphere(const SpherePrim& s, const Eigen::Vector3d& origin,
                      const Eigen::Vector3d& dir, Hit& best) {
  const Eigen::Vector3d oc = origin - s.center;
  const double b = oc.dot(dir);
  const double c = oc.squaredNorm() - s.radius * s.radius;
  const double disc = b * b - c;
  if (disc < 0) return;
  const double sq = std::sqrt(disc);
  double t = -b - sq;
  if (t < 1e-9) t = -b + sq;
  if (t < 1e-9 || t >= best.t) return;
  best.t = t;
  best.normal = (origin + t * dir - s.center).normalized();
  best.color = s.color;
}

void intersect_box(const BoxPrim& box, const Eigen::Vector3d& origin, const Eigen::Vector3d& dir,
                   Hit& best) {
  double tmin = -std::numeric_limits<double>::infinity();
  double tmax = std::numeric_limits<double>::infinity();
  int axis = -1;
  for (int a = 0; a < 3; ++a) {
    const double inv = 1.0 / dir(a);
    double t0 = (box.lo(a) - origin(a)) * inv;
    double t1 = (box.hi(a) - origin(a)) * inv;
    if (inv < 0) std::swap(t0, t1);
    if (t0 > tmin) {
      tmin = t0;
      axis = a;
    }
    tmax = std::min(tmax, t1);
    if (tmax < tmin) return;
  }
  const double t = tmin > 1e-9 ? tmin : tmax;
  if (t < 1e-9 || t >= best.t || axis < 0) return;
  best.t = t;
  Eigen::Vector3d n = Eigen::Vector3d::Zero();
  n(axis) = dir(axis) > 0 ? -1.0 : 1.0;
  best.normal = n;
  best.color = box.color;
}

}  // namespace

Scene Scene::random(Rng& rng) {
  Scene s;
  const int count = 2 + static_cast<int>(rng.uniform_index(4));  // 2..5 primitives
  for (int i = 0; i < count; ++i) {
    const Eigen::Vector3d color(rng.uniform(0.25, 1.0), rng.uniform(0.25, 1.0),
                                rng.uniform(0.25, 1.0));
    const Eigen::Vector3d center(rng.uniform(-0.33, 0.33), rng.uniform(-0.33, 0.33),
                                 rng.uniform(-0.33, 0.33));
    if (rng.uniform() < 0.5) {
      s.spheres.push_back({center, rng.uniform(0.16, 0.34), color});
    } else {
      const Eigen::Vector3d half(rng.uniform(0.14, 0.3), rng.uniform(0.14, 0.3),
                                 rng.uniform(0.14, 0.3));
      s.boxes.push_back({center - half, center + half, color});
    }
  }
  // Light from the upper hemisphere.
  const double az = rng.uniform(0, kTwoPi);
  const double el = rng.uniform(0.2, kPi / 2);
  s.light_dir = Eigen::Vector3d(std::sin(el) * std::cos(az), std::sin(el) * std::sin(az),
                                std::cos(el));
  return s;
}

RenderedView render_view(const Scene& scene, const Pose4& pose, int side) {
  if (side <= 0) throw std::invalid_argument("render_view: side must be positive");
  const Pose6 cam = spherical_to_se3(pose, Eigen::Vector3d::Zero());
  const Eigen::Matrix3d world_from_cam = cam.rotation().transpose();
  const Eigen::Vector3d origin = cam.camera_center();
  const double tan_half = std::tan(kVerticalFov / 2.0);

  Tensor img({3, side, side});
  const int hw = side * side;
  for (int i = 0; i < side; ++i) {
    for (int j = 0; j < side; ++j) {
      // Camera frame: x right, y down, z forward; rows advance downward.
      const double u = ((j + 0.5) - side / 2.0) / (side / 2.0) * tan_half;
      const double v = ((i + 0.5) - side / 2.0) / (side / 2.0) * tan_half;
      const Eigen::Vector3d dir = (world_from_cam * Eigen::Vector3d(u, v, 1.0)).normalized();

      Hit hit;
      for (const auto& s : scene.spheres) intersect_sphere(s, origin, dir, hit);
      for (const auto& b : scene.boxes) intersect_box(b, origin, dir, hit);

      Eigen::Vector3d c = Eigen::Vector3d::Zero();
      if (hit.valid()) {
        const double lambert = std::max(0.0, hit.normal.dot(scene.light_dir));
        c = hit.color * (0.2 + 0.8 * lambert);
      }
      const int px = i * side + j;
      img.at(0 * hw + px) = static_cast<float>(std::clamp(c.x(), 0.0, 1.0));
      img.at(1 * hw + px) = static_cast<float>(std::clamp(c.y(), 0.0, 1.0));
      img.at(2 * hw + px) = static_cast<float>(std::clamp(c.z(), 0.0, 1.0));
    }
  }
  return {std::move(img), pose};
}

Pose4 sample_pose4(const PoseRanges& ranges, Rng& rng) {
  const double az = rng.uniform(0, kTwoPi);
  const double el = rng.uniform(ranges.elevation_min, ranges.elevation_max);
  const double r = std::exp(rng.uniform(std::log(ranges.radius.r_min), std::log(ranges.radius.r_max)));
  return Pose4(az, el, 0.0, r);
}

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f64(std::ostream& os, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

double read_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

void write_f32(std::ostream& os, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  write_u32(os, u);
}

float read_f32(std::istream& is) {
  const std::uint32_t u = read_u32(is);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

// HWC pixel order on disk; CHW in memory.
void write_pixels(std::ostream& os, const Tensor& img) {
  const int side = static_cast<int>(img.dim(1));
  const int hw = side * side;
  for (int px = 0; px < hw; ++px)
    for (int c = 0; c < 3; ++c) write_f32(os, img.at(c * hw + px));
}

Tensor read_pixels(std::istream& is, int side) {
  Tensor img({3, side, side});
  const int hw = side * side;
  for (int px = 0; px < hw; ++px)
    for (int c = 0; c < 3; ++c) img.at(c * hw + px) = read_f32(is);
  return img;
}

}  // namespace

void generate_dataset(const std::string& path, const DatasetConfig& cfg) {
  if (cfg.scene_count <= 0 || cfg.views_per_scene <= 0) {
    throw std::invalid_argument("generate_dataset: counts must be positive");
  }
  const int total = cfg.scene_count * cfg.views_per_scene;
  std::vector<Scene> scenes;
  scenes.reserve(static_cast<std::size_t>(cfg.scene_count));
  for (int s = 0; s < cfg.scene_count; ++s) {
    Rng rng(Rng::mix(cfg.seed, 0x7363656eULL + static_cast<std::uint64_t>(s)));
    scenes.push_back(Scene::random(rng));
  }
  std::vector<Pose4> poses;
  poses.reserve(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) {
    Rng rng(Rng::mix(cfg.seed, 0x706f7365ULL + static_cast<std::uint64_t>(i)));
    poses.push_back(sample_pose4(cfg.ranges, rng));
  }

  std::vector<Tensor> images(static_cast<std::size_t>(total));
  parallel_for(total, [&](int i) {
    const int scene = i / cfg.views_per_scene;
    images[static_cast<std::size_t>(i)] =
        render_view(scenes[static_cast<std::size_t>(scene)], poses[static_cast<std::size_t>(i)],
                    cfg.image_side)
            .image;
  });

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open dataset for writing: " + path);
  os.write(kMagic, 8);
  write_u32(os, static_cast<std::uint32_t>(cfg.image_side));
  write_u32(os, static_cast<std::uint32_t>(cfg.views_per_scene));
  write_u32(os, static_cast<std::uint32_t>(cfg.scene_count));
  write_u32(os, cfg.pose_mode == PoseMode::FourDoF ? 0u : 1u);
  write_f64(os, cfg.ranges.radius.r_min);
  write_f64(os, cfg.ranges.radius.r_max);
  for (int i = 0; i < total; ++i) {
    const Pose4& p = poses[static_cast<std::size_t>(i)];
    if (cfg.pose_mode == PoseMode::FourDoF) {
      write_f64(os, p.azimuth());
      write_f64(os, p.elevation());
      write_f64(os, p.roll());
      write_f64(os, p.radius());
    } else {
      const Pose6 se3 = spherical_to_se3(p, Eigen::Vector3d::Zero());
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) write_f64(os, se3.rotation()(r, c));
        write_f64(os, se3.translation()(r));
      }
    }
    write_pixels(os, images[static_cast<std::size_t>(i)]);
  }
  if (!os) throw std::runtime_error("dataset write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open dataset: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error("not a dataset file (bad magic): " + path);
  }
  Dataset d;
  d.image_side = static_cast<int>(read_u32(is));
  d.views_per_scene = static_cast<int>(read_u32(is));
  d.scene_count = static_cast<int>(read_u32(is));
  const std::uint32_t mode = read_u32(is);
  d.pose_mode = mode == 0 ? PoseMode::FourDoF : PoseMode::SixDoF;
  const double r_min = read_f64(is);
  const double r_max = read_f64(is);
  d.bounds = RadiusBounds(r_min, r_max);
  const int total = d.scene_count * d.views_per_scene;
  d.images.reserve(static_cast<std::size_t>(total));
  d.poses.reserve(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) {
    if (d.pose_mode == PoseMode::FourDoF) {
      const double az = read_f64(is);
      const double el = read_f64(is);
      const double roll = read_f64(is);
      const double r = read_f64(is);
      d.poses.push_back(Pose::four_dof(Pose4(az, el, roll, r)));
    } else {
      Eigen::Matrix3d rot;
      Eigen::Vector3d t;
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) rot(r, c) = read_f64(is);
        t(r) = read_f64(is);
      }
      d.poses.push_back(Pose::six_dof(Pose6(rot, t)));
    }
    d.images.push_back(read_pixels(is, d.image_side));
    if (!is) throw std::runtime_error("truncated dataset: " + path);
  }
  return d;
}

ViewSet Dataset::scene_views(int scene) const {
  ViewSet out;
  for (int v = 0; v < views_per_scene; ++v) {
    out.images.push_back(images[static_cast<std::size_t>(view_index(scene, v))]);
    out.poses.push_back(poses[static_cast<std::size_t>(view_index(scene, v))]);
  }
  return out;
}

TrainBatch sample_batch(const Dataset& data, int n_refs, int m_targets, Rng& rng) {
  if (data.scene_count <= 0 || data.views_per_scene <= 0) {
    throw std::invalid_argument("sample_batch: empty dataset");
  }
  if (n_refs <= 0 || m_targets <= 0) {
    throw std::invalid_argument("sample_batch: need at least one reference and one target");
  }
  TrainBatch batch;
  batch.scene = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(data.scene_count)));
  auto draw = [&](ViewSet& dst, int count) {
    for (int i = 0; i < count; ++i) {
      const int v = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(data.views_per_scene)));
      const int idx = data.view_index(batch.scene, v);
      dst.images.push_back(data.images[static_cast<std::size_t>(idx)]);
      dst.poses.push_back(data.poses[static_cast<std::size_t>(idx)]);
    }
  };
  draw(batch.references, n_refs);
  draw(batch.targets, m_targets);
  return batch;
}

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw std::invalid_argument("write_ppm: expected [3,H,W] image");
  }
  const int h = static_cast<int>(image.dim(1));
  const int w = static_cast<int>(image.dim(2));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << "P6\n" << w << " " << h << "\n255\n";
  const int hw = h * w;
  for (int px = 0; px < hw; ++px) {
    for (int c = 0; c < 3; ++c) {
      const float v = std::clamp(image.at(c * hw + px), 0.0f, 1.0f);
      os.put(static_cast<char>(std::lround(v * 255.0f)));
    }
  }
}

}  // namespace cape
