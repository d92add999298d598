#include "uscalib/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace uscalib {

namespace {

constexpr double kRad2Deg = 180.0 / std::numbers::pi;

double rms(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s / static_cast<double>(v.size()));
}

double vmax(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, x);
    return m;
}

/// Acute angle between two directions, degrees.
double acute_angle_deg(const Vec3& a, const Vec3& b) {
    const double c = std::clamp(std::abs(a.normalized().dot(b.normalized())), 0.0, 1.0);
    return std::acos(c) * kRad2Deg;
}

PrecisionReport assemble(const std::vector<double>& dist_mm, const std::vector<double>& ang_deg,
                         double mean_pitch) {
    PrecisionReport r;
    r.rms_distance_mm = rms(dist_mm);
    r.max_distance_mm = vmax(dist_mm);
    r.rms_distance_vox = r.rms_distance_mm / mean_pitch;
    r.max_distance_vox = r.max_distance_mm / mean_pitch;
    r.rms_angle_deg = rms(ang_deg);
    r.max_angle_deg = vmax(ang_deg);
    return r;
}

/// Barycenter of a bead set and unit normal of its first three beads, both
/// after mapping voxel coordinates through the scaled calibration.
struct Triangle {
    Vec3 barycenter;
    Vec3 normal;
};

Triangle map_triangle(const std::vector<Vec3>& beads_vox, const RigidTransform& calib,
                      const ScaleVector& s) {
    if (beads_vox.size() < 3)
        throw std::invalid_argument("reconstruction_accuracy: a bead set needs >= 3 beads");
    std::vector<Vec3> p;
    p.reserve(beads_vox.size());
    for (const Vec3& v : beads_vox) p.push_back(calib.apply(s.apply(v)));
    Triangle t;
    t.barycenter = Vec3::Zero();
    for (const Vec3& q : p) t.barycenter += q;
    t.barycenter /= static_cast<double>(p.size());
    const Vec3 n = (p[1] - p[0]).cross(p[2] - p[0]);
    if (n.norm() < 1e-9) throw DegenerateInputError("reconstruction_accuracy: collinear beads");
    t.normal = n.normalized();
    return t;
}

}  // namespace

PrecisionReport feature_precision(const std::vector<PlaneObservation>& observations,
                                  const CalibrationResult& result,
                                  const CalibrationProblem& problem) {
    std::vector<double> dist_mm;
    std::vector<double> ang_deg;
    ang_deg.reserve(observations.size());

    for (const PlaneObservation& obs : observations) {
        const RigidTransform chain = problem.T_Ph2M * obs.pose * result.T_U2Pr;
        for (const Vec3& p : obs.sample_points)
            dist_mm.push_back(std::abs(chain.apply(problem.s.apply(p)).z()));
        // Pre-calibration plane (z = 0 in the membrane frame) pulled back to
        // metric image space: its normal is the third row of the chain
        // rotation.  Compare against the normal the two extracted lines span.
        const Vec3 predicted = chain.rotation().row(2).transpose();
        const Vec3 measured = plane_normal_from_lines(obs, problem.s);
        ang_deg.push_back(acute_angle_deg(predicted, measured));
    }
    return assemble(dist_mm, ang_deg, problem.s.mean());
}

PrecisionReport calibration_precision(const std::vector<CalibrationResult>& results,
                                      const ScaleVector& s,
                                      const std::array<int, 3>& volume_dims) {
    if (results.size() < 2)
        throw InsufficientDataError("calibration_precision: need at least 2 calibrations");

    const Vec3 center_mm(0.5 * volume_dims[0] * s.sx, 0.5 * volume_dims[1] * s.sy,
                         0.5 * volume_dims[2] * s.sz);

    std::vector<Vec3> centers;
    std::vector<Vec3> dirs;
    centers.reserve(results.size());
    dirs.reserve(results.size());
    for (const CalibrationResult& r : results) {
        centers.push_back(r.T_U2Pr.apply(center_mm));
        dirs.push_back(r.T_U2Pr.rotation() * Vec3::UnitZ());
    }

    Vec3 mean_center = Vec3::Zero();
    for (const Vec3& c : centers) mean_center += c;
    mean_center /= static_cast<double>(centers.size());

    Vec3 mean_dir = Vec3::Zero();
    for (const Vec3& d : dirs) mean_dir += d;
    if (mean_dir.norm() < 1e-12)
        throw DegenerateInputError("calibration_precision: mapped directions have no mean direction");
    mean_dir.normalize();

    std::vector<double> dist_mm;
    std::vector<double> ang_deg;
    dist_mm.reserve(centers.size());
    ang_deg.reserve(dirs.size());
    for (const Vec3& c : centers) dist_mm.push_back((c - mean_center).norm());
    for (const Vec3& d : dirs) {
        const double c = std::clamp(d.dot(mean_dir), -1.0, 1.0);
        ang_deg.push_back(std::acos(c) * kRad2Deg);
    }
    // rms() over deviations from the mean is exactly the population standard
    // deviation (radial for the 3-D centers).
    return assemble(dist_mm, ang_deg, s.mean());
}

AccuracyReport reconstruction_accuracy(const std::vector<std::vector<Vec3>>& left_sets,
                                       const std::vector<std::vector<Vec3>>& right_sets,
                                       const std::vector<CalibrationResult>& calibrations,
                                       double d_B, const ScaleVector& s, PairingMode mode) {
    if (d_B <= 0.0) throw std::invalid_argument("reconstruction_accuracy: d_B must be positive");
    if (left_sets.empty() || right_sets.empty() || calibrations.empty())
        throw InsufficientDataError("reconstruction_accuracy: empty input collection");
    if (mode == PairingMode::index_matched && left_sets.size() != right_sets.size())
        throw std::invalid_argument(
            "reconstruction_accuracy: index-matched pairing needs equally many left and right sets");

    std::vector<double> dist_mm;
    std::vector<double> ang_deg;

    auto add_pair = [&](const std::vector<Vec3>& lv, const std::vector<Vec3>& rv,
                        const RigidTransform& calib) {
        const Triangle tl = map_triangle(lv, calib, s);
        const Triangle tr = map_triangle(rv, calib, s);
        dist_mm.push_back(std::abs((tl.barycenter - tr.barycenter).norm() - d_B));
        ang_deg.push_back(acute_angle_deg(tl.normal, tr.normal));
    };

    for (const CalibrationResult& r : calibrations) {
        if (mode == PairingMode::index_matched) {
            for (std::size_t i = 0; i < left_sets.size(); ++i)
                add_pair(left_sets[i], right_sets[i], r.T_U2Pr);
        } else {
            for (const auto& lv : left_sets)
                for (const auto& rv : right_sets) add_pair(lv, rv, r.T_U2Pr);
        }
    }

    const PrecisionReport base = assemble(dist_mm, ang_deg, s.mean());
    AccuracyReport out;
    out.rms_distance_mm = base.rms_distance_mm;
    out.rms_distance_vox = base.rms_distance_vox;
    out.max_distance_mm = base.max_distance_mm;
    out.max_distance_vox = base.max_distance_vox;
    out.rms_angle_deg = base.rms_angle_deg;
    out.max_angle_deg = base.max_angle_deg;
    out.pair_count = dist_mm.size();
    return out;
}

}  // namespace uscalib
