#pragma once

#include "uscalib/geometry.hpp"
#include "uscalib/rng.hpp"

#include <cmath>
#include <numbers>

namespace uscalib::test {

inline constexpr double kPi = std::numbers::pi;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

/// Random rigid transform with pitch kept away from the gimbal lock.
inline RigidTransform random_rigid(Rng& rng, double trans_range = 100.0) {
    EulerPose p;
    p.yaw = rng.uniform(-kPi, kPi);
    p.pitch = rng.uniform(-1.3, 1.3);
    p.roll = rng.uniform(-kPi, kPi);
    p.t = Vec3(rng.uniform(-trans_range, trans_range), rng.uniform(-trans_range, trans_range),
               rng.uniform(-trans_range, trans_range));
    return p.to_transform();
}

/// Geodesic angle between two rotations, degrees.
inline double rotation_delta_deg(const Mat3& a, const Mat3& b) {
    const Mat3 d = a.transpose() * b;
    const double c = std::clamp((d.trace() - 1.0) / 2.0, -1.0, 1.0);
    return rad2deg(std::acos(c));
}

inline double rotation_delta_deg(const RigidTransform& a, const RigidTransform& b) {
    return rotation_delta_deg(a.rotation(), b.rotation());
}

inline double transform_delta_mm(const RigidTransform& a, const RigidTransform& b) {
    return (a.translation() - b.translation()).norm();
}

inline double matrix_max_diff(const Mat4& a, const Mat4& b) {
    return (a - b).cwiseAbs().maxCoeff();
}

/// Acute angle between two directions, degrees.
inline double acute_angle_deg(const Vec3& a, const Vec3& b) {
    const double c = std::clamp(std::abs(a.normalized().dot(b.normalized())), 0.0, 1.0);
    return rad2deg(std::acos(c));
}

}  // namespace uscalib::test
