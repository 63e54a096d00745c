#include "cape/pose.hpp"

#include <cmath>
#include <stdexcept>

namespace cape {

namespace {

double reduce(double theta, double period) {
  double r = theta - period * std::floor(theta / period);
  if (r >= period) r -= period;  // floor rounding can land exactly on the period
  if (r < 0.0) r = 0.0;
  return r;
}

}  // namespace

double canonical_angle_2pi(double theta) { return reduce(theta, kTwoPi); }

double canonical_angle_pi(double theta) { return reduce(theta, kPi); }

double wrap_signed_pi(double theta) { return reduce(theta + kPi, kTwoPi) - kPi; }

double wrap_signed_half_pi(double theta) { return reduce(theta + kPi / 2.0, kPi) - kPi / 2.0; }

Pose4::Pose4(double azimuth, double elevation, double roll, double radius)
    : azimuth_(canonical_angle_2pi(azimuth)),
      elevation_(canonical_angle_pi(elevation)),
      roll_(canonical_angle_2pi(roll)),
      radius_(radius) {
  if (!(radius > 0.0) || !std::isfinite(radius)) {
    throw std::invalid_argument("Pose4: radius must be positive and finite");
  }
  if (!std::isfinite(azimuth) || !std::isfinite(elevation) || !std::isfinite(roll)) {
    throw std::invalid_argument("Pose4: angles must be finite");
  }
}

Pose6::Pose6() : rotation_(Eigen::Matrix3d::Identity()), translation_(Eigen::Vector3d::Zero()) {}

Pose6::Pose6(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation)
    : rotation_(rotation), translation_(translation) {
  const double ortho = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).norm();
  if (ortho > 1e-6) throw std::invalid_argument("Pose6: rotation is not orthonormal");
  if (std::abs(rotation.determinant() - 1.0) > 1e-6) {
    throw std::invalid_argument("Pose6: rotation determinant is not +1");
  }
  if (!translation.allFinite()) throw std::invalid_argument("Pose6: translation must be finite");
}

Eigen::Matrix4d Pose6::homogeneous() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rotation_;
  m.topRightCorner<3, 1>() = translation_;
  return m;
}

Pose6 Pose6::from_homogeneous(const Eigen::Matrix4d& m) {
  return Pose6(m.topLeftCorner<3, 3>(), m.topRightCorner<3, 1>());
}

RadiusBounds::RadiusBounds(double r_min_in, double r_max_in) : r_min(r_min_in), r_max(r_max_in) {
  if (!(r_min > 0.0) || !std::isfinite(r_min) || !std::isfinite(r_max) || !(r_max > r_min)) {
    throw std::invalid_argument("RadiusBounds: need 0 < r_min < r_max, both finite");
  }
}

Relative4 relative_4dof(const Pose4& p1, const Pose4& p2) {
  return Relative4{
      wrap_signed_pi(p1.azimuth() - p2.azimuth()),
      wrap_signed_half_pi(p1.elevation() - p2.elevation()),
      wrap_signed_pi(p1.roll() - p2.roll()),
      p1.radius() / p2.radius(),
  };
}

Pose6 compose_6dof(const Pose6& p1, const Pose6& p2) {
  return Pose6(p1.rotation() * p2.rotation(), p1.rotation() * p2.translation() + p1.translation());
}

Pose6 inverse_6dof(const Pose6& p) {
  const Eigen::Matrix3d rt = p.rotation().transpose();
  return Pose6(rt, -(rt * p.translation()));
}

double normalize_radius(double r, const RadiusBounds& b) {
  if (!(r > 0.0) || !std::isfinite(r)) {
    throw std::invalid_argument("normalize_radius: r must be positive and finite");
  }
  return kPi * (std::log(r) - std::log(b.r_min)) / (std::log(b.r_max) - std::log(b.r_min));
}

Pose6 spherical_to_se3(const Pose4& p, const Eigen::Vector3d& look_at) {
  const double r = p.radius();
  if (r < 1e-12) throw std::invalid_argument("spherical_to_se3: camera coincides with look-at target");
  const double az = p.azimuth(), el = p.elevation();
  const double sa = std::sin(az), ca = std::cos(az);
  const double se = std::sin(el), ce = std::cos(el);

  const Eigen::Vector3d outward(se * ca, se * sa, ce);
  const Eigen::Vector3d center = look_at + r * outward;
  const Eigen::Vector3d forward = -outward;  // unit, toward look_at

  // Frame from the spherical basis vectors, well defined at the poles too.
  const Eigen::Vector3d e_beta(ce * ca, ce * sa, -se);  // increasing colatitude
  const Eigen::Vector3d down0 = e_beta;                 // camera y before roll
  const Eigen::Vector3d right0 = down0.cross(forward);  // camera x before roll

  const double cg = std::cos(p.roll()), sg = std::sin(p.roll());
  const Eigen::Vector3d right = cg * right0 + sg * down0;
  const Eigen::Vector3d down = -sg * right0 + cg * down0;

  Eigen::Matrix3d rot;
  rot.row(0) = right;
  rot.row(1) = down;
  rot.row(2) = forward;
  return Pose6(rot, -(rot * center));
}

Pose4 se3_to_spherical(const Pose6& p, const Eigen::Vector3d& look_at) {
  const Eigen::Vector3d v = p.camera_center() - look_at;
  const double r = v.norm();
  if (r < 1e-12) throw std::invalid_argument("se3_to_spherical: camera coincides with look-at target");
  const double el = std::acos(std::clamp(v.z() / r, -1.0, 1.0));
  const double az = std::atan2(v.y(), v.x());

  // Roll: angle of the camera's x axis against the zero-roll frame.
  const double sa = std::sin(az), ca = std::cos(az);
  const double se = std::sin(el), ce = std::cos(el);
  const Eigen::Vector3d forward(-se * ca, -se * sa, -ce);
  const Eigen::Vector3d down0(ce * ca, ce * sa, -se);
  const Eigen::Vector3d right0 = down0.cross(forward);
  const Eigen::Vector3d right = p.rotation().row(0);
  const double roll = std::atan2(right.dot(down0), right.dot(right0));

  return Pose4(az, el, roll, r);
}

}  // namespace cape
