#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <vector>

namespace uscalib {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Thrown when an input is geometrically degenerate (collinear points, too few
/// points, parallel directions, ...).
struct DegenerateInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Per-axis voxel scale factors s = (s_x, s_y, s_z), millimetres per voxel.
struct ScaleVector {
    double sx = 1.0, sy = 1.0, sz = 1.0;

    ScaleVector() = default;
    ScaleVector(double x, double y, double z);

    Vec3 apply(const Vec3& voxel) const { return {sx * voxel.x(), sy * voxel.y(), sz * voxel.z()}; }
    Vec3 unapply(const Vec3& mm) const { return {mm.x() / sx, mm.y() / sy, mm.z() / sz}; }
    double mean() const { return (sx + sy + sz) / 3.0; }
};

/// Homogeneous rigid motion: p -> R p + t.  Rotation is orthonormal with
/// det +1 (checked to 1e-9 when constructed from a raw matrix).
class RigidTransform {
  public:
    RigidTransform() : R_(Mat3::Identity()), t_(Vec3::Zero()) {}
    RigidTransform(const Mat3& R, const Vec3& t);

    static RigidTransform identity() { return {}; }
    /// Build from a homogeneous 4x4 matrix; validates rigidity.
    static RigidTransform from_matrix(const Mat4& m);

    const Mat3& rotation() const { return R_; }
    const Vec3& translation() const { return t_; }

    Vec3 apply(const Vec3& p) const { return R_ * p + t_; }
    Vec3 operator()(const Vec3& p) const { return apply(p); }

    RigidTransform inverse() const;
    Mat4 matrix() const;

  private:
    Mat3 R_;
    Vec3 t_;
};

/// compose(A, B): first B, then A — (A∘B)(p) = A(B(p)).
RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
inline RigidTransform operator*(const RigidTransform& a, const RigidTransform& b) {
    return compose(a, b);
}

/// Six-parameter pose: intrinsic Z-Y-X Euler angles (yaw, pitch, roll) plus a
/// translation.  R = Rz(yaw) * Ry(pitch) * Rx(roll).
struct EulerPose {
    double yaw = 0.0;    ///< rotation about z, radians
    double pitch = 0.0;  ///< rotation about y, radians
    double roll = 0.0;   ///< rotation about x, radians
    Vec3 t = Vec3::Zero();

    RigidTransform to_transform() const;
    static EulerPose from_transform(const RigidTransform& T);
};

Mat3 rot_x(double a);
Mat3 rot_y(double a);
Mat3 rot_z(double a);

/// Oriented plane n·p = offset with unit normal.  Canonical form: offset >= 0;
/// when |offset| < 1e-12 the normal is the lexicographically larger of {n, -n}.
struct Plane {
    Vec3 normal = Vec3::UnitZ();
    double offset = 0.0;

    Plane() = default;
    Plane(const Vec3& n, double d);

    double signed_distance(const Vec3& p) const { return normal.dot(p) - offset; }
    Plane canonical() const;
    /// The plane carried along by a rigid motion of space.
    Plane transformed(const RigidTransform& T) const;
};

struct PlaneFitReport {
    Plane plane;
    double rms_inliers = 0.0;           ///< RMS distance of inlier points, mm
    std::vector<bool> inlier_mask;      ///< final Tukey weight > 0 per point
};

/// Least-squares plane through a point cloud, robustified with a Tukey
/// biweight M-estimator (scale = 3 x MAD, 10 iterations).
PlaneFitReport fit_plane_robust(const std::vector<Vec3>& points);

struct PrecalibrationResult {
    RigidTransform T_Ph2M;  ///< maps phantom space so the membrane becomes z=0
    double rms = 0.0;       ///< robust fit residual, mm
    std::vector<bool> inlier_mask;
};

/// Membrane pre-calibration: fit the supporting-structure point cloud and
/// build the phantom->membrane transform.  The in-plane x-axis is the
/// projection of phantom e_x (e_y if e_x is normal to the plane) and the
/// membrane origin is the projection of the phantom origin onto the plane.
PrecalibrationResult precalibrate_membrane(const std::vector<Vec3>& surface_points);

/// Full Eq.-style transform chain: maps a voxel-space point through scaling
/// and T_Ph2M * T_Pr2Ph * T_U2Pr into membrane space.  For a true membrane
/// point the z component is zero.
Vec3 apply_chain(const RigidTransform& T_Ph2M, const RigidTransform& T_Pr2Ph,
                 const RigidTransform& T_U2Pr, const ScaleVector& s, const Vec3& voxel);

}  // namespace uscalib
