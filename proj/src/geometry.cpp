#include "uscalib/geometry.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>

namespace uscalib {

namespace {
constexpr double kRigidTol = 1e-9;

void check_rigid(const Mat3& R) {
    const Mat3 err = R.transpose() * R - Mat3::Identity();
    if (err.cwiseAbs().maxCoeff() > kRigidTol)
        throw std::invalid_argument("rotation matrix is not orthonormal");
    if (std::abs(R.determinant() - 1.0) > kRigidTol)
        throw std::invalid_argument("rotation matrix determinant is not +1");
}
}  // namespace

ScaleVector::ScaleVector(double x, double y, double z) : sx(x), sy(y), sz(z) {
    if (sx <= 0.0 || sy <= 0.0 || sz <= 0.0)
        throw std::invalid_argument("scale factors must be strictly positive");
}

RigidTransform::RigidTransform(const Mat3& R, const Vec3& t) : R_(R), t_(t) {
    check_rigid(R_);
}

RigidTransform RigidTransform::from_matrix(const Mat4& m) {
    if (std::abs(m(3, 0)) > kRigidTol || std::abs(m(3, 1)) > kRigidTol ||
        std::abs(m(3, 2)) > kRigidTol || std::abs(m(3, 3) - 1.0) > kRigidTol)
        throw std::invalid_argument("matrix bottom row is not (0,0,0,1)");
    return {m.topLeftCorner<3, 3>(), m.topRightCorner<3, 1>()};
}

RigidTransform RigidTransform::inverse() const {
    return {R_.transpose(), -(R_.transpose() * t_)};
}

Mat4 RigidTransform::matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = R_;
    m.topRightCorner<3, 1>() = t_;
    return m;
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
    return {a.rotation() * b.rotation(), a.rotation() * b.translation() + a.translation()};
}

Mat3 rot_x(double a) {
    Mat3 m;
    m << 1, 0, 0, 0, std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a);
    return m;
}

Mat3 rot_y(double a) {
    Mat3 m;
    m << std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a);
    return m;
}

Mat3 rot_z(double a) {
    Mat3 m;
    m << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
    return m;
}

RigidTransform EulerPose::to_transform() const {
    return {rot_z(yaw) * rot_y(pitch) * rot_x(roll), t};
}

EulerPose EulerPose::from_transform(const RigidTransform& T) {
    const Mat3& R = T.rotation();
    EulerPose p;
    p.pitch = std::asin(std::clamp(-R(2, 0), -1.0, 1.0));
    p.yaw = std::atan2(R(1, 0), R(0, 0));
    p.roll = std::atan2(R(2, 1), R(2, 2));
    p.t = T.translation();
    return p;
}

Plane::Plane(const Vec3& n, double d) {
    const double len = n.norm();
    if (len < 1e-12) throw std::invalid_argument("plane normal must be nonzero");
    normal = n / len;
    offset = d / len;
}

Plane Plane::canonical() const {
    Plane p = *this;
    if (p.offset < 0.0 || (std::abs(p.offset) < 1e-12 &&
                           std::lexicographical_compare(p.normal.data(), p.normal.data() + 3,
                                                        (-p.normal).eval().data(),
                                                        (-p.normal).eval().data() + 3))) {
        p.normal = -p.normal;
        p.offset = -p.offset;
    }
    return p;
}

Plane Plane::transformed(const RigidTransform& T) const {
    const Vec3 n = T.rotation() * normal;
    // A point on the plane maps to T(offset * normal); new offset = n . that point.
    const double d = n.dot(T.apply(offset * normal));
    Plane p;
    p.normal = n;
    p.offset = d;
    return p.canonical();
}

namespace {

Plane least_squares_plane(const std::vector<Vec3>& pts, const std::vector<double>& w) {
    double wsum = 0.0;
    Vec3 c = Vec3::Zero();
    for (size_t i = 0; i < pts.size(); ++i) {
        wsum += w[i];
        c += w[i] * pts[i];
    }
    if (wsum <= 0.0) throw DegenerateInputError("plane fit: all weights vanished");
    c /= wsum;
    Mat3 cov = Mat3::Zero();
    for (size_t i = 0; i < pts.size(); ++i) {
        const Vec3 d = pts[i] - c;
        cov += w[i] * d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    // Collinearity check: the two smallest eigenvalues both ~0 relative to the span.
    const double span = eig.eigenvalues()(2);
    if (span < 1e-18 || eig.eigenvalues()(1) < 1e-12 * span)
        throw DegenerateInputError("plane fit: points are collinear");
    const Vec3 n = eig.eigenvectors().col(0);
    Plane p;
    p.normal = n.normalized();
    p.offset = p.normal.dot(c);
    return p;
}

double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + mid, v.end());
    double hi = v[mid];
    if (v.size() % 2 == 0) {
        const double lo = *std::max_element(v.begin(), v.begin() + mid);
        return 0.5 * (lo + hi);
    }
    return hi;
}

}  // namespace

PlaneFitReport fit_plane_robust(const std::vector<Vec3>& points) {
    if (points.size() < 3) throw DegenerateInputError("plane fit: need at least 3 points");

    std::vector<double> w(points.size(), 1.0);
    Plane plane = least_squares_plane(points, w);

    // Tukey biweight, scale = 3 x MAD of absolute residuals, 10 iterations.
    for (int iter = 0; iter < 10; ++iter) {
        std::vector<double> absr(points.size());
        for (size_t i = 0; i < points.size(); ++i)
            absr[i] = std::abs(plane.signed_distance(points[i]));
        double mad = median_of(absr);
        const double c = std::max(3.0 * mad, 1e-9);
        for (size_t i = 0; i < points.size(); ++i) {
            const double u = absr[i] / c;
            w[i] = (u < 1.0) ? (1.0 - u * u) * (1.0 - u * u) : 0.0;
        }
        plane = least_squares_plane(points, w);
    }

    PlaneFitReport rep;
    rep.plane = plane.canonical();
    rep.inlier_mask.resize(points.size());
    double ss = 0.0;
    size_t n_in = 0;
    for (size_t i = 0; i < points.size(); ++i) {
        rep.inlier_mask[i] = w[i] > 0.0;
        if (rep.inlier_mask[i]) {
            const double d = rep.plane.signed_distance(points[i]);
            ss += d * d;
            ++n_in;
        }
    }
    rep.rms_inliers = n_in ? std::sqrt(ss / static_cast<double>(n_in)) : 0.0;
    return rep;
}

PrecalibrationResult precalibrate_membrane(const std::vector<Vec3>& surface_points) {
    const PlaneFitReport fit = fit_plane_robust(surface_points);
    const Vec3 n = fit.plane.normal;

    // In-plane x-axis: projection of phantom e_x onto the plane (e_y fallback
    // when e_x is within ~0.001 rad of the normal).
    Vec3 seed = Vec3::UnitX();
    if ((seed - n * n.dot(seed)).norm() < 1e-6) seed = Vec3::UnitY();
    const Vec3 ex = (seed - n * n.dot(seed)).normalized();
    const Vec3 ey = n.cross(ex);

    // Membrane origin: projection of the phantom origin onto the plane.
    const Vec3 origin = fit.plane.offset * n;

    Mat3 R;
    R.row(0) = ex.transpose();
    R.row(1) = ey.transpose();
    R.row(2) = n.transpose();

    PrecalibrationResult res;
    res.T_Ph2M = RigidTransform(R, -(R * origin));
    res.rms = fit.rms_inliers;
    res.inlier_mask = fit.inlier_mask;
    return res;
}

Vec3 apply_chain(const RigidTransform& T_Ph2M, const RigidTransform& T_Pr2Ph,
                 const RigidTransform& T_U2Pr, const ScaleVector& s, const Vec3& voxel) {
    return T_Ph2M.apply(T_Pr2Ph.apply(T_U2Pr.apply(s.apply(voxel))));
}

}  // namespace uscalib
