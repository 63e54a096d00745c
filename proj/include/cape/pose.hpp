#pragma once

#include <Eigen/Dense>

namespace cape {

inline constexpr double kPi = 3.141592653589793238462643383279502884;
inline constexpr double kTwoPi = 2.0 * kPi;

/// Reduce to [0, 2pi). Ties at the upper boundary resolve downward to 0.
double canonical_angle_2pi(double theta);
/// Reduce to [0, pi).
double canonical_angle_pi(double theta);
/// Reduce a difference to [-pi, pi).
double wrap_signed_pi(double theta);
/// Reduce a difference to [-pi/2, pi/2).
double wrap_signed_half_pi(double theta);

/// Object-centric spherical camera pose: azimuth, elevation (colatitude,
/// measured from the +z pole), roll about the look-at axis, and orbit radius.
/// Angles are canonicalized on construction; the radius must be positive.
class Pose4 {
 public:
  Pose4(double azimuth, double elevation, double roll, double radius);

  double azimuth() const { return azimuth_; }
  double elevation() const { return elevation_; }
  double roll() const { return roll_; }
  double radius() const { return radius_; }

 private:
  double azimuth_, elevation_, roll_, radius_;
};

/// Rigid camera pose, world-to-camera: x_cam = R * x_world + t.
class Pose6 {
 public:
  Pose6();  // identity
  Pose6(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation);

  const Eigen::Matrix3d& rotation() const { return rotation_; }
  const Eigen::Vector3d& translation() const { return translation_; }

  Eigen::Matrix4d homogeneous() const;
  Eigen::Vector3d camera_center() const { return -rotation_.transpose() * translation_; }

  static Pose6 from_homogeneous(const Eigen::Matrix4d& m);

 private:
  Eigen::Matrix3d rotation_;
  Eigen::Vector3d translation_;
};

struct RadiusBounds {
  double r_min;
  double r_max;
  RadiusBounds(double r_min, double r_max);
};

/// Relative 4 DoF transform: signed canonical angle differences and the
/// radius ratio r1/r2. Azimuth and roll wrap mod 2pi, elevation mod pi, so
/// the result is unchanged by any common shift applied to both poses.
struct Relative4 {
  double d_azimuth;
  double d_elevation;
  double d_roll;
  double radius_ratio;
};

Relative4 relative_4dof(const Pose4& p1, const Pose4& p2);

/// Homogeneous-matrix product hom(p1) * hom(p2).
Pose6 compose_6dof(const Pose6& p1, const Pose6& p2);

/// Closed-form SE(3) inverse: (R, t) -> (R^T, -R^T t).
Pose6 inverse_6dof(const Pose6& p);

/// Log-radius normalization f(r) = pi * (log r - log r_min) / (log r_max - log r_min).
/// Maps [r_min, r_max] onto [0, pi]; values outside the bounds extrapolate
/// linearly in log space so that f(a) - f(b) depends only on a/b.
double normalize_radius(double r, const RadiusBounds& b);

/// Place a camera on the sphere of radius p.radius() around look_at, at the
/// pose's azimuth/elevation, rolled by p.roll() about the optical axis.
/// Camera frame: x right, y down, z toward look_at.
Pose6 spherical_to_se3(const Pose4& p, const Eigen::Vector3d& look_at);

/// Inverse of spherical_to_se3 for cameras aimed at look_at.
Pose4 se3_to_spherical(const Pose6& p, const Eigen::Vector3d& look_at);

}  // namespace cape
