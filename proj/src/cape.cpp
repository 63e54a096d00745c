#include "cape/cape.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace cape {

int cape_block_size(PoseMode mode) { return mode == PoseMode::FourDoF ? 8 : 4; }

void check_cape_dimension(std::int64_t d, PoseMode mode) {
  const int block = cape_block_size(mode);
  if (d <= 0 || d % block != 0) {
    throw std::invalid_argument("CaPE: feature dimension " + std::to_string(d) +
                                " is not divisible by " + std::to_string(block));
  }
}

namespace {

double radius_angle(double r, const CapeConfig& cfg) {
  if (cfg.radius_encoding == RadiusEncoding::ScaledLog) {
    return cfg.translation_scale * std::log(r);
  }
  return normalize_radius(r, cfg.bounds);
}

// One row of 8 gets the four 2x2 blocks applied pairwise. Row convention:
// (x, y) * [[c, -s], [s, c]] = (x c + y s, x (-s) + y c). Operand order is
// kept identical to a plain row-times-matrix product so the result agrees
// bit for bit with a materialized-matrix evaluation.
template <typename S>
inline void rotate_pair(S& x, S& y, double angle) {
  const S c = static_cast<S>(std::cos(angle));
  const S s = static_cast<S>(std::sin(angle));
  const S x0 = x, y0 = y;
  x = x0 * c + y0 * s;
  y = x0 * (-s) + y0 * c;
}

// Row of 4 times a 4x4 matrix, accumulating in index order.
template <typename S>
inline void row_times_mat4(S* row, const S m[4][4]) {
  S out[4];
  for (int j = 0; j < 4; ++j) {
    S acc = row[0] * m[0][j];
    acc = acc + row[1] * m[1][j];
    acc = acc + row[2] * m[2][j];
    acc = acc + row[3] * m[3][j];
    out[j] = acc;
  }
  row[0] = out[0];
  row[1] = out[1];
  row[2] = out[2];
  row[3] = out[3];
}

enum class Psi6 { Plain, InverseTranspose, Transpose, InverseLeft };

// The four variants used by forward and gradient paths. "tilde" means the
// translation has been rescaled by cfg.translation_scale.
template <typename S>
void build_psi6(S m[4][4], const Pose6& p, const CapeConfig& cfg, Psi6 which) {
  const Eigen::Matrix3d& r = p.rotation();
  double t[3], it[3];
  for (int i = 0; i < 3; ++i) t[i] = p.translation()(i) * cfg.translation_scale;
  // Translation of the tilde inverse, -R^T t, accumulated in index order so a
  // plain-loop reference evaluation produces identical bits.
  for (int i = 0; i < 3; ++i) {
    double acc = r(0, i) * t[0];
    acc = acc + r(1, i) * t[1];
    acc = acc + r(2, i) * t[2];
    it[i] = -acc;
  }
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) m[i][j] = S(0);
  m[3][3] = S(1);
  switch (which) {
    case Psi6::Plain:  // P~
      for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) m[i][j] = static_cast<S>(r(i, j));
        m[i][3] = static_cast<S>(t[i]);
      }
      break;
    case Psi6::InverseTranspose:  // P~^{-T}: rotation block R, bottom row (-R^T t)^T
      for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) m[i][j] = static_cast<S>(r(i, j));
        m[3][i] = static_cast<S>(it[i]);
      }
      break;
    case Psi6::Transpose:  // P~^T
      for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) m[i][j] = static_cast<S>(r(j, i));
        m[3][i] = static_cast<S>(t[i]);
      }
      break;
    case Psi6::InverseLeft:  // P~^{-1}
      for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) m[i][j] = static_cast<S>(r(j, i));
        m[i][3] = static_cast<S>(it[i]);
      }
      break;
  }
}

}  // namespace

template <typename S>
void apply_cape_4dof_raw(std::span<S> v, double azimuth, double elevation, double roll,
                         double radius, const CapeConfig& cfg) {
  check_cape_dimension(static_cast<std::int64_t>(v.size()), PoseMode::FourDoF);
  const double angles[4] = {azimuth, elevation, roll, radius_angle(radius, cfg)};
  for (std::size_t off = 0; off < v.size(); off += 8) {
    for (int b = 0; b < 4; ++b) {
      rotate_pair(v[off + 2 * b], v[off + 2 * b + 1], angles[b]);
    }
  }
}

template <typename S>
void apply_cape_4dof(std::span<S> v, const Pose4& p, const CapeConfig& cfg) {
  apply_cape_4dof_raw(v, p.azimuth(), p.elevation(), p.roll(), p.radius(), cfg);
}

template <typename S>
void apply_cape_6dof(std::span<S> v, const Pose6& p, AttentionRole role, const CapeConfig& cfg) {
  check_cape_dimension(static_cast<std::int64_t>(v.size()), PoseMode::SixDoF);
  S m[4][4];
  build_psi6(m, p, cfg, role == AttentionRole::Key ? Psi6::Plain : Psi6::InverseTranspose);
  for (std::size_t off = 0; off < v.size(); off += 4) {
    row_times_mat4(v.data() + off, m);
  }
}

template <typename S>
void apply_cape(std::span<S> v, const Pose& p, AttentionRole role, const CapeConfig& cfg) {
  if (p.mode != cfg.mode) throw std::invalid_argument("CaPE: pose mode does not match config");
  if (cfg.mode == PoseMode::FourDoF) {
    apply_cape_4dof(v, p.p4, cfg);
  } else {
    apply_cape_6dof(v, p.p6, role, cfg);
  }
}

template <typename S>
void apply_cape_transpose(std::span<S> g, const Pose& p, AttentionRole role,
                          const CapeConfig& cfg) {
  if (p.mode != cfg.mode) throw std::invalid_argument("CaPE: pose mode does not match config");
  if (cfg.mode == PoseMode::FourDoF) {
    // Psi^T for a rotation block is the rotation by the negated angle.
    check_cape_dimension(static_cast<std::int64_t>(g.size()), PoseMode::FourDoF);
    const Pose4& q = p.p4;
    const double angles[4] = {-q.azimuth(), -q.elevation(), -q.roll(),
                              -radius_angle(q.radius(), cfg)};
    for (std::size_t off = 0; off < g.size(); off += 8) {
      for (int b = 0; b < 4; ++b) {
        rotate_pair(g[off + 2 * b], g[off + 2 * b + 1], angles[b]);
      }
    }
  } else {
    check_cape_dimension(static_cast<std::int64_t>(g.size()), PoseMode::SixDoF);
    S m[4][4];
    build_psi6(m, p.p6, cfg, role == AttentionRole::Key ? Psi6::Transpose : Psi6::InverseLeft);
    for (std::size_t off = 0; off < g.size(); off += 4) {
      row_times_mat4(g.data() + off, m);
    }
  }
}

double cape_pair_logit(std::span<const double> q, std::span<const double> k, const Pose& pose_q,
                       const Pose& pose_k, const CapeConfig& cfg) {
  if (q.size() != k.size()) throw std::invalid_argument("cape_pair_logit: dimension mismatch");
  std::vector<double> qt(q.begin(), q.end());
  std::vector<double> kt(k.begin(), k.end());
  apply_cape<double>(qt, pose_q, AttentionRole::Query, cfg);
  apply_cape<double>(kt, pose_k, AttentionRole::Key, cfg);
  double acc = 0.0;
  for (std::size_t i = 0; i < qt.size(); ++i) acc += kt[i] * qt[i];
  return acc;
}

template void apply_cape_4dof_raw<float>(std::span<float>, double, double, double, double,
                                         const CapeConfig&);
template void apply_cape_4dof_raw<double>(std::span<double>, double, double, double, double,
                                          const CapeConfig&);
template void apply_cape_4dof<float>(std::span<float>, const Pose4&, const CapeConfig&);
template void apply_cape_4dof<double>(std::span<double>, const Pose4&, const CapeConfig&);
template void apply_cape_6dof<float>(std::span<float>, const Pose6&, AttentionRole,
                                     const CapeConfig&);
template void apply_cape_6dof<double>(std::span<double>, const Pose6&, AttentionRole,
                                      const CapeConfig&);
template void apply_cape<float>(std::span<float>, const Pose&, AttentionRole, const CapeConfig&);
template void apply_cape<double>(std::span<double>, const Pose&, AttentionRole, const CapeConfig&);
template void apply_cape_transpose<float>(std::span<float>, const Pose&, AttentionRole,
                                          const CapeConfig&);
template void apply_cape_transpose<double>(std::span<double>, const Pose&, AttentionRole,
                                           const CapeConfig&);

}  // namespace cape
