#pragma once

#include <span>

#include "cape/pose.hpp"

namespace cape {

enum class PoseMode { FourDoF, SixDoF };
enum class AttentionRole { Key, Query };

/// Radius block variant for the 4 DoF encoding. LogNormalized is the default
/// (angle = normalize_radius(r)); ScaledLog (angle = s * log r) exists so the
/// reference listing can be cross-checked against the main implementation.
enum class RadiusEncoding { LogNormalized, ScaledLog };

struct CapeConfig {
  PoseMode mode = PoseMode::FourDoF;
  RadiusBounds bounds{1.5, 4.0};          // 4 DoF only
  double translation_scale = 0.001;       // 6 DoF: rescales t before building the block
  RadiusEncoding radius_encoding = RadiusEncoding::LogNormalized;

  CapeConfig() = default;
  CapeConfig(PoseMode m, RadiusBounds b, double s = 0.001,
             RadiusEncoding enc = RadiusEncoding::LogNormalized)
      : mode(m), bounds(b), translation_scale(s), radius_encoding(enc) {}

  static CapeConfig four_dof(RadiusBounds b) { return CapeConfig(PoseMode::FourDoF, b); }
  static CapeConfig six_dof(double s = 0.001) {
    return CapeConfig(PoseMode::SixDoF, RadiusBounds{1.5, 4.0}, s);
  }
};

/// Tagged pose used where either parameterization can appear.
struct Pose {
  PoseMode mode;
  Pose4 p4;
  Pose6 p6;

  static Pose four_dof(const Pose4& p) { return Pose{PoseMode::FourDoF, p, Pose6()}; }
  static Pose six_dof(const Pose6& p) { return Pose{PoseMode::SixDoF, Pose4(0, 0, 0, 1), p}; }
};

// In-place transforms in the row-vector convention: v is reshaped to rows of
// 8 (4 DoF) or 4 (6 DoF) and each row is multiplied as row * Psi. The 4 DoF
// Psi is the block-diagonal of four 2x2 rotations with angles (azimuth,
// elevation, roll, radius angle); the 6 DoF Psi is the translation-rescaled
// pose matrix for keys and its inverse transpose for queries.

/// Raw-angle 4 DoF kernel: no canonicalization, total on finite inputs with
/// r > 0. This is the function the relative-transform identities are stated
/// on; apply_cape_4dof forwards the canonical angles of a Pose4 to it.
template <typename S>
void apply_cape_4dof_raw(std::span<S> v, double azimuth, double elevation, double roll,
                         double radius, const CapeConfig& cfg);

template <typename S>
void apply_cape_4dof(std::span<S> v, const Pose4& p, const CapeConfig& cfg);

template <typename S>
void apply_cape_6dof(std::span<S> v, const Pose6& p, AttentionRole role, const CapeConfig& cfg);

/// Dispatch on pose mode. In 4 DoF the role is ignored (keys and queries get
/// the same orthogonal transform); in 6 DoF it selects Psi vs Psi^{-T}.
template <typename S>
void apply_cape(std::span<S> v, const Pose& p, AttentionRole role, const CapeConfig& cfg);

/// Transpose of the same linear map, for gradient propagation:
/// writes g * Psi^T over g.
template <typename S>
void apply_cape_transpose(std::span<S> g, const Pose& p, AttentionRole role,
                          const CapeConfig& cfg);

/// Un-scaled attention logit between one query token and one key token:
/// <apply_cape(k, pose_k, Key), apply_cape(q, pose_q, Query)>.
double cape_pair_logit(std::span<const double> q, std::span<const double> k, const Pose& pose_q,
                       const Pose& pose_k, const CapeConfig& cfg);

/// Dimension rule: 4 DoF needs d % 8 == 0, 6 DoF needs d % 4 == 0.
int cape_block_size(PoseMode mode);
void check_cape_dimension(std::int64_t d, PoseMode mode);

}  // namespace cape
