#include <doctest.h>

#include <cmath>

#include "cape/pose.hpp"
#include "cape/rng.hpp"

using namespace cape;

namespace {

// Brute-force wrap oracle: the representative of theta mod `period` inside
// [lo, lo + period), found by scanning integer multiples.
double wrap_oracle(double theta, double period, double lo) {
  double best = theta;
  for (int k = -8; k <= 8; ++k) {
    const double cand = theta + k * period;
    if (cand >= lo && cand < lo + period) {
      best = cand;
      break;
    }
  }
  return best;
}

Pose6 random_pose6(Rng& rng, double t_mag = 3.0) {
  // Rotation from a random axis-angle.
  Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
  axis.normalize();
  const double angle = rng.uniform(-kPi, kPi);
  const Eigen::Matrix3d r = Eigen::AngleAxisd(angle, axis).toRotationMatrix();
  const Eigen::Vector3d t(rng.uniform(-t_mag, t_mag), rng.uniform(-t_mag, t_mag),
                          rng.uniform(-t_mag, t_mag));
  return Pose6(r, t);
}

}  // namespace

TEST_CASE("angle canonicalization is periodic and half-open") {
  for (double theta : {0.0, 0.1, 3.0, -0.1, -3.0, 6.2, 100.0, -100.0}) {
    for (int k = -3; k <= 3; ++k) {
      CHECK(canonical_angle_2pi(theta + kTwoPi * k) ==
            doctest::Approx(canonical_angle_2pi(theta)).epsilon(0).scale(1).epsilon(1e-12));
      CHECK(canonical_angle_pi(theta + kPi * k) ==
            doctest::Approx(canonical_angle_pi(theta)).scale(1).epsilon(1e-12));
    }
  }
  // Ties at the period resolve downward to zero.
  CHECK(canonical_angle_2pi(kTwoPi) == 0.0);
  CHECK(canonical_angle_pi(kPi) == 0.0);
  CHECK(canonical_angle_2pi(0.0) == 0.0);
  CHECK(canonical_angle_2pi(-1e-18) < kTwoPi);
  CHECK(canonical_angle_2pi(-1e-18) >= 0.0);
}

TEST_CASE("Pose4 construction canonicalizes and validates") {
  const Pose4 p(kTwoPi + 0.5, kPi + 0.25, -0.5, 2.0);
  CHECK(p.azimuth() == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(p.elevation() == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(p.roll() == doctest::Approx(kTwoPi - 0.5).epsilon(1e-12));
  CHECK(p.radius() == 2.0);
  CHECK_THROWS_AS(Pose4(0, 0, 0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(Pose4(0, 0, 0, -1.0), std::invalid_argument);
}

TEST_CASE("relative_4dof componentwise arithmetic") {
  const Pose4 p1(kPi / 2, kPi / 4, 0, 2.0);
  const Pose4 p2(kPi / 4, kPi / 4, 0, 1.0);
  const Relative4 rel = relative_4dof(p1, p2);
  CHECK(rel.d_azimuth == doctest::Approx(kPi / 4).epsilon(1e-15));
  CHECK(rel.d_elevation == doctest::Approx(0.0));
  CHECK(rel.d_roll == doctest::Approx(0.0));
  CHECK(rel.radius_ratio == doctest::Approx(2.0));
}

TEST_CASE("relative_4dof identity case") {
  const Pose4 p(1.0, 0.7, 2.0, 3.3);
  const Relative4 rel = relative_4dof(p, p);
  CHECK(rel.d_azimuth == 0.0);
  CHECK(rel.d_elevation == 0.0);
  CHECK(rel.d_roll == 0.0);
  CHECK(rel.radius_ratio == 1.0);
}

TEST_CASE("relative_4dof wraps azimuth across the seam") {
  const Pose4 p1(0.1, 1.0, 0.0, 3.0);
  const Pose4 p2(6.2, 1.0, 0.0, 1.5);
  const Relative4 rel = relative_4dof(p1, p2);
  CHECK(rel.d_azimuth == doctest::Approx(0.1 - 6.2 + kTwoPi).epsilon(1e-12));
  CHECK(rel.radius_ratio == doctest::Approx(2.0));
}

TEST_CASE("relative_4dof agrees with the wrap oracle over an angle grid") {
  for (double a1 = 0.0; a1 < kTwoPi; a1 += 0.37) {
    for (double a2 = 0.0; a2 < kTwoPi; a2 += 0.41) {
      const Pose4 p1(a1, canonical_angle_pi(a1 * 0.43), a2 * 0.7, 1.0);
      const Pose4 p2(a2, canonical_angle_pi(a2 * 0.39), a1 * 0.9, 1.0);
      const Relative4 rel = relative_4dof(p1, p2);
      CHECK(rel.d_azimuth ==
            doctest::Approx(wrap_oracle(p1.azimuth() - p2.azimuth(), kTwoPi, -kPi)).epsilon(1e-12));
      CHECK(rel.d_elevation ==
            doctest::Approx(wrap_oracle(p1.elevation() - p2.elevation(), kPi, -kPi / 2))
                .epsilon(1e-12));
      CHECK(rel.d_roll ==
            doctest::Approx(wrap_oracle(p1.roll() - p2.roll(), kTwoPi, -kPi)).epsilon(1e-12));
    }
  }
}

TEST_CASE("relative_4dof is invariant under common shifts") {
  Rng rng(2024);
  for (int it = 0; it < 500; ++it) {
    const Pose4 p1(rng.uniform(0, kTwoPi), rng.uniform(0, kPi), rng.uniform(0, kTwoPi),
                   rng.uniform(0.5, 5.0));
    const Pose4 p2(rng.uniform(0, kTwoPi), rng.uniform(0, kPi), rng.uniform(0, kTwoPi),
                   rng.uniform(0.5, 5.0));
    const double da = rng.uniform(-10, 10);
    const double db = rng.uniform(-10, 10);
    const double dg = rng.uniform(-10, 10);
    const double sr = std::exp(rng.uniform(-1, 1));
    const Pose4 q1(p1.azimuth() + da, p1.elevation() + db, p1.roll() + dg, p1.radius() * sr);
    const Pose4 q2(p2.azimuth() + da, p2.elevation() + db, p2.roll() + dg, p2.radius() * sr);
    const Relative4 r0 = relative_4dof(p1, p2);
    const Relative4 r1 = relative_4dof(q1, q2);
    CHECK(r1.d_azimuth == doctest::Approx(r0.d_azimuth).epsilon(1e-11));
    CHECK(r1.d_elevation == doctest::Approx(r0.d_elevation).epsilon(1e-11));
    CHECK(r1.d_roll == doctest::Approx(r0.d_roll).epsilon(1e-11));
    CHECK(r1.radius_ratio == doctest::Approx(r0.radius_ratio).epsilon(1e-11));
  }
}

TEST_CASE("compose with identity and inverse") {
  Rng rng(7);
  const Pose6 id;
  for (int it = 0; it < 50; ++it) {
    const Pose6 p = random_pose6(rng);
    const Pose6 pi = compose_6dof(p, id);
    CHECK((pi.rotation() - p.rotation()).norm() == doctest::Approx(0.0).epsilon(1e-15));
    CHECK((pi.translation() - p.translation()).norm() == doctest::Approx(0.0).epsilon(1e-15));

    const Pose6 both = compose_6dof(p, inverse_6dof(p));
    CHECK((both.rotation() - Eigen::Matrix3d::Identity()).norm() < 1e-9);
    CHECK(both.translation().norm() < 1e-9);
    const Pose6 other = compose_6dof(inverse_6dof(p), p);
    CHECK((other.rotation() - Eigen::Matrix3d::Identity()).norm() < 1e-9);
    CHECK(other.translation().norm() < 1e-9);
  }
}

TEST_CASE("composition of rotations about z adds angles") {
  Rng rng(8);
  for (int it = 0; it < 50; ++it) {
    const double phi1 = rng.uniform(-kPi, kPi);
    const double phi2 = rng.uniform(-kPi, kPi);
    const Pose6 p1(Eigen::AngleAxisd(phi1, Eigen::Vector3d::UnitZ()).toRotationMatrix(),
                   Eigen::Vector3d::Zero());
    const Pose6 p2(Eigen::AngleAxisd(phi2, Eigen::Vector3d::UnitZ()).toRotationMatrix(),
                   Eigen::Vector3d::Zero());
    const Pose6 c = compose_6dof(p1, p2);
    const Eigen::Matrix3d expect =
        Eigen::AngleAxisd(phi1 + phi2, Eigen::Vector3d::UnitZ()).toRotationMatrix();
    CHECK((c.rotation() - expect).norm() < 1e-12);
  }
}

TEST_CASE("compose is associative") {
  Rng rng(9);
  for (int it = 0; it < 50; ++it) {
    const Pose6 a = random_pose6(rng), b = random_pose6(rng), c = random_pose6(rng);
    const Pose6 left = compose_6dof(compose_6dof(a, b), c);
    const Pose6 right = compose_6dof(a, compose_6dof(b, c));
    CHECK((left.rotation() - right.rotation()).norm() < 1e-9);
    CHECK((left.translation() - right.translation()).norm() < 1e-9);
  }
}

TEST_CASE("inverse special cases and matrix oracle") {
  const Pose6 id;
  const Pose6 iid = inverse_6dof(id);
  CHECK((iid.rotation() - Eigen::Matrix3d::Identity()).norm() == 0.0);
  CHECK(iid.translation().norm() == 0.0);

  const Pose6 pure_t(Eigen::Matrix3d::Identity(), Eigen::Vector3d(1, -2, 3));
  const Pose6 it = inverse_6dof(pure_t);
  CHECK((it.translation() + Eigen::Vector3d(1, -2, 3)).norm() == 0.0);

  Rng rng(10);
  for (int itn = 0; itn < 100; ++itn) {
    const Pose6 p = random_pose6(rng);
    // Oracle: numeric inverse of the homogeneous matrix.
    const Eigen::Matrix4d m = p.homogeneous();
    const Eigen::Matrix4d minv = m.inverse();
    const Eigen::Matrix4d closed = inverse_6dof(p).homogeneous();
    CHECK((closed - minv).norm() < 1e-9);
    CHECK((compose_6dof(p, inverse_6dof(p)).homogeneous() - Eigen::Matrix4d::Identity()).norm() <
          1e-9);
    CHECK((compose_6dof(inverse_6dof(p), p).homogeneous() - Eigen::Matrix4d::Identity()).norm() <
          1e-9);
  }
}

TEST_CASE("normalize_radius endpoints, midpoint, closed form") {
  const RadiusBounds b(1.5, 4.0);
  CHECK(normalize_radius(1.5, b) == doctest::Approx(0.0));
  CHECK(normalize_radius(4.0, b) == doctest::Approx(kPi).epsilon(1e-15));
  CHECK(normalize_radius(std::sqrt(1.5 * 4.0), b) == doctest::Approx(kPi / 2).epsilon(1e-12));

  const RadiusBounds be(1.0, std::exp(2.0));
  CHECK(normalize_radius(std::exp(1.0), be) == doctest::Approx(kPi / 2).epsilon(1e-12));

  CHECK_THROWS_AS(normalize_radius(0.0, b), std::invalid_argument);
  CHECK_THROWS_AS(normalize_radius(-1.0, b), std::invalid_argument);
  CHECK_THROWS_AS(RadiusBounds(2.0, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(RadiusBounds(0.0, 1.0), std::invalid_argument);
}

TEST_CASE("normalize_radius is increasing and differences are scale invariant") {
  const RadiusBounds b(1.5, 4.0);
  Rng rng(11);
  double prev = -1e300;
  for (double r = 0.25; r < 12.0; r *= 1.17) {
    const double f = normalize_radius(r, b);
    CHECK(f > prev);
    prev = f;
  }
  for (int it = 0; it < 200; ++it) {
    const double r1 = std::exp(rng.uniform(-2, 2));
    const double r2 = std::exp(rng.uniform(-2, 2));
    const double s = std::exp(rng.uniform(-2, 2));
    const double lhs = normalize_radius(s * r1, b) - normalize_radius(s * r2, b);
    const double rhs = normalize_radius(r1, b) - normalize_radius(r2, b);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-11));
  }
}

TEST_CASE("spherical_to_se3 places the camera on the sphere") {
  const Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  const Pose6 p = spherical_to_se3(Pose4(0.0, kPi / 2, 0.0, 1.0), origin);
  const Eigen::Vector3d c = p.camera_center();
  CHECK(c.x() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(c.y() == doctest::Approx(0.0));
  CHECK(std::abs(c.z()) < 1e-12);
  CHECK(c.norm() == doctest::Approx(1.0).epsilon(1e-12));

  Rng rng(12);
  for (int it = 0; it < 200; ++it) {
    const Pose4 sp(rng.uniform(0, kTwoPi), rng.uniform(0, kPi), rng.uniform(0, kTwoPi),
                   rng.uniform(0.5, 6.0));
    const Eigen::Vector3d look(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    const Pose6 se3 = spherical_to_se3(sp, look);
    CHECK((se3.camera_center() - look).norm() == doctest::Approx(sp.radius()).epsilon(1e-9));
    // The optical axis points at the look-at target.
    const Eigen::Vector3d fwd = se3.rotation().row(2);
    const Eigen::Vector3d to_target = (look - se3.camera_center()).normalized();
    CHECK((fwd - to_target).norm() < 1e-9);
  }
}

TEST_CASE("spherical round-trip recovers all four parameters") {
  Rng rng(13);
  for (int it = 0; it < 500; ++it) {
    const Pose4 sp(rng.uniform(0.01, kTwoPi - 0.01), rng.uniform(0.05, kPi - 0.05),
                   rng.uniform(0.01, kTwoPi - 0.01), rng.uniform(0.5, 6.0));
    const Eigen::Vector3d look(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    const Pose4 back = se3_to_spherical(spherical_to_se3(sp, look), look);
    CHECK(back.azimuth() == doctest::Approx(sp.azimuth()).epsilon(1e-9));
    CHECK(back.elevation() == doctest::Approx(sp.elevation()).epsilon(1e-9));
    CHECK(back.roll() == doctest::Approx(sp.roll()).epsilon(1e-9));
    CHECK(back.radius() == doctest::Approx(sp.radius()).epsilon(1e-9));
  }
}

TEST_CASE("Pose6 validation rejects bad rotations") {
  Eigen::Matrix3d bad = Eigen::Matrix3d::Identity();
  bad(0, 0) = 1.5;
  CHECK_THROWS_AS(Pose6(bad, Eigen::Vector3d::Zero()), std::invalid_argument);
  Eigen::Matrix3d reflect = Eigen::Matrix3d::Identity();
  reflect(2, 2) = -1.0;  // orthogonal but det -1
  CHECK_THROWS_AS(Pose6(reflect, Eigen::Vector3d::Zero()), std::invalid_argument);
}
