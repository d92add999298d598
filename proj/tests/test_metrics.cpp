#include "doctest.h"
#include "helpers.hpp"

#include "uscalib/metrics.hpp"
#include "uscalib/rng.hpp"
#include "uscalib/sim.hpp"
#include "uscalib/solver.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

using namespace uscalib;
using namespace uscalib::test;

namespace {

/// Analytic slice trace of the metric plane n.q = d (pixel Hough line).
Line2D trace_line(const Vec3& n, double d, bool xy, const ScaleVector& s, const Vec3& origin) {
    double a, b, c;
    if (xy) {
        const double z0 = std::round(origin.z()) * s.sz;
        a = n.x() * s.sx;
        b = n.y() * s.sy;
        c = d - n.z() * z0;
    } else {
        const double x0 = std::round(origin.x()) * s.sx;
        a = n.z() * s.sz;
        b = n.y() * s.sy;
        c = d - n.x() * x0;
    }
    const double nn = std::hypot(a, b);
    Line2D line;
    line.theta = std::atan2(b / nn, a / nn);
    line.rho = c / nn;
    if (line.theta < 0.0) {
        line.theta += kPi;
        line.rho = -line.rho;
    }
    return line;
}

/// Exact observation for a known calibration: points on the membrane plane
/// plus the consistent slice lines.
PlaneObservation exact_observation(const RigidTransform& T_Ph2M, const RigidTransform& pose,
                                   const RigidTransform& b_true, const ScaleVector& s,
                                   const Vec3& origin, Rng& rng, double z_offset_mm = 0.0) {
    const RigidTransform chain = T_Ph2M * pose * b_true;
    const RigidTransform inv = chain.inverse();
    PlaneObservation obs;
    obs.pose = pose;
    for (int i = 0; i < 20; ++i) {
        const Vec3 q_m(rng.uniform(-40.0, 40.0), rng.uniform(-40.0, 40.0), z_offset_mm);
        obs.sample_points.push_back(s.unapply(inv.apply(q_m)));
    }
    // Membrane plane in metric volume space: row2(chain) . q + tz = z_offset.
    const Vec3 n = chain.rotation().row(2).transpose();
    const double d = z_offset_mm - chain.translation().z();
    obs.line_xy = trace_line(n, d, true, s, origin);
    obs.line_zy = trace_line(n, d, false, s, origin);
    return obs;
}

CalibrationResult result_for(const RigidTransform& T) {
    CalibrationResult r;
    r.T_U2Pr = T;
    r.converged = true;
    return r;
}

}  // namespace

TEST_CASE("metrics: feature_precision is zero for exact observations under truth") {
    const PhantomScene scene = PhantomScene::default_scene();
    const std::vector<RigidTransform> poses = protocol_poses(scene, 9);
    Rng rng(9);

    CalibrationProblem prob;
    prob.T_Ph2M = scene.T_Ph2M;
    prob.s = scene.s;
    for (const RigidTransform& pose : poses)
        prob.observations.push_back(exact_observation(scene.T_Ph2M, pose, scene.true_T_U2Pr,
                                                      scene.s, scene.g.origin_voxel, rng));

    const PrecisionReport rep =
        feature_precision(prob.observations, result_for(scene.true_T_U2Pr), prob);
    CHECK(rep.rms_distance_mm < 1e-6);
    CHECK(rep.max_distance_mm < 1e-6);
    CHECK(rep.rms_distance_vox < 1e-6);
    // acos near a unit dot product resolves to ~1e-7 deg at double precision.
    CHECK(rep.rms_angle_deg < 1e-5);
    CHECK(rep.max_angle_deg < 1e-5);
}

TEST_CASE("metrics: feature_precision mm to voxel conversion") {
    // Every sample point exactly 0.37 mm off the plane: rms_mm = 0.37 and the
    // voxel column is 0.37 / 0.477 = 0.77 voxels at the default pitch.
    const PhantomScene scene = PhantomScene::default_scene();
    const RigidTransform pose = protocol_poses(scene, 3)[0];
    Rng rng(12);
    CalibrationProblem prob;
    prob.T_Ph2M = scene.T_Ph2M;
    prob.s = scene.s;
    prob.observations.push_back(exact_observation(scene.T_Ph2M, pose, scene.true_T_U2Pr, scene.s,
                                                  scene.g.origin_voxel, rng, 0.37));

    const PrecisionReport rep =
        feature_precision(prob.observations, result_for(scene.true_T_U2Pr), prob);
    CHECK(rep.rms_distance_mm == doctest::Approx(0.37).epsilon(1e-9));
    CHECK(rep.max_distance_mm == doctest::Approx(0.37).epsilon(1e-9));
    CHECK(rep.rms_distance_vox == doctest::Approx(0.37 / 0.477).epsilon(1e-9));
    CHECK(std::abs(rep.rms_distance_vox - 0.77) < 0.01);
}

TEST_CASE("metrics: feature_precision is invariant to a global rigid motion") {
    const PhantomScene scene = PhantomScene::default_scene();
    const std::vector<RigidTransform> poses = protocol_poses(scene, 14);
    Rng rng(14);

    CalibrationProblem prob;
    prob.T_Ph2M = scene.T_Ph2M;
    prob.s = scene.s;
    for (const RigidTransform& pose : poses)
        prob.observations.push_back(exact_observation(scene.T_Ph2M, pose, scene.true_T_U2Pr,
                                                      scene.s, scene.g.origin_voxel, rng, 0.8));

    Rng grng(15);
    const RigidTransform G = random_rigid(grng);
    CalibrationProblem moved = prob;
    moved.T_Ph2M = prob.T_Ph2M * G.inverse();
    for (PlaneObservation& obs : moved.observations) obs.pose = G * obs.pose;

    const CalibrationResult res = result_for(scene.true_T_U2Pr);
    const PrecisionReport a = feature_precision(prob.observations, res, prob);
    const PrecisionReport b = feature_precision(moved.observations, res, moved);
    CHECK(a.rms_distance_mm == doctest::Approx(b.rms_distance_mm).epsilon(1e-12));
    CHECK(a.max_distance_mm == doctest::Approx(b.max_distance_mm).epsilon(1e-12));
    CHECK(std::abs(a.rms_angle_deg - b.rms_angle_deg) < 1e-6);
}

TEST_CASE("metrics: feature_precision rms tracks the injected jitter band") {
    // Rendered campaigns at line jitter 0.5 voxels: the solved-fit residual
    // RMS lands in the (0.1, 1.0) mm band.
    PhantomScene scene = PhantomScene::default_scene();
    scene.volume_dims = {99, 99, 99};
    scene.g = ProbeGeometry(Vec3(49.0, 49.0, 10.0), 2.0);
    scene.ctx = SosContext(1540.0, 1540.0, 23.0);

    NoiseModel noise;
    noise.pose_noise_rms = 0.0;
    noise.line_jitter = 0.5;

    std::vector<double> rms_values;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const std::vector<RigidTransform> poses = protocol_poses(scene, seed);
        CalibrationProblem prob;
        prob.T_Ph2M = scene.T_Ph2M;
        prob.s = scene.s;
        for (std::size_t i = 0; i < poses.size(); ++i) {
            const Volume vol = render_volume(scene, poses[i], noise, derive_seed(seed, i));
            PlaneObservation obs = extract_plane(vol, scene.g, scene.ctx);
            obs.pose = poses[i];
            prob.observations.push_back(std::move(obs));
        }
        const CalibrationResult res = solve(prob);
        rms_values.push_back(feature_precision(prob.observations, res, prob).rms_distance_mm);
    }
    std::sort(rms_values.begin(), rms_values.end());
    const double median = 0.5 * (rms_values[9] + rms_values[10]);
    CHECK(median > 0.1);
    CHECK(median < 1.0);
}

TEST_CASE("metrics: calibration_precision basics") {
    const ScaleVector s(0.477, 0.477, 0.477);
    const std::array<int, 3> dims = {199, 199, 199};

    // Identical calibrations: zero spread.
    Rng rng(66);
    const RigidTransform T = random_rigid(rng);
    const std::vector<CalibrationResult> same(5, result_for(T));
    const PrecisionReport zero = calibration_precision(same, s, dims);
    CHECK(zero.rms_distance_mm < 1e-12);
    CHECK(zero.max_distance_mm < 1e-12);
    CHECK(zero.rms_angle_deg < 1e-5);

    // Fewer than two calibrations cannot define a spread.
    CHECK_THROWS_AS((void)calibration_precision({}, s, dims), InsufficientDataError);
    CHECK_THROWS_AS((void)calibration_precision({result_for(T)}, s, dims),
                    InsufficientDataError);
}

TEST_CASE("metrics: calibration_precision spread example with voxel conversion") {
    const ScaleVector s(0.477, 0.477, 0.477);
    const std::array<int, 3> dims = {199, 199, 199};

    // Two translation-only calibrations offset by +-1.15 mm along x: the
    // radial population std is exactly 1.15 mm = 2.41 voxels.
    std::vector<CalibrationResult> results;
    results.push_back(result_for(RigidTransform(Mat3::Identity(), Vec3(1.15, 0, 0))));
    results.push_back(result_for(RigidTransform(Mat3::Identity(), Vec3(-1.15, 0, 0))));
    const PrecisionReport rep = calibration_precision(results, s, dims);
    CHECK(rep.rms_distance_mm == doctest::Approx(1.15).epsilon(1e-12));
    CHECK(rep.max_distance_mm == doctest::Approx(1.15).epsilon(1e-12));
    CHECK(rep.rms_distance_vox == doctest::Approx(1.15 / 0.477).epsilon(1e-12));
    CHECK(std::abs(rep.rms_distance_vox - 2.41) < 0.01);
    CHECK(rep.rms_angle_deg < 1e-12);
}

TEST_CASE("metrics: calibration_precision is population-based (duplication invariant)") {
    const ScaleVector s(0.477, 0.477, 0.477);
    const std::array<int, 3> dims = {199, 199, 199};
    Rng rng(30);
    std::vector<CalibrationResult> base;
    for (int i = 0; i < 6; ++i) base.push_back(result_for(random_rigid(rng, 5.0)));

    std::vector<CalibrationResult> tripled;
    for (int k = 0; k < 3; ++k)
        for (const CalibrationResult& r : base) tripled.push_back(r);

    const PrecisionReport a = calibration_precision(base, s, dims);
    const PrecisionReport b = calibration_precision(tripled, s, dims);
    CHECK(a.rms_distance_mm == doctest::Approx(b.rms_distance_mm).epsilon(1e-12));
    CHECK(a.max_distance_mm == doctest::Approx(b.max_distance_mm).epsilon(1e-12));
    CHECK(a.rms_angle_deg == doctest::Approx(b.rms_angle_deg).epsilon(1e-12));
    CHECK(a.max_angle_deg == doctest::Approx(b.max_angle_deg).epsilon(1e-12));
}

TEST_CASE("metrics: calibration_precision of mildly perturbed calibrations stays in gate") {
    const PhantomScene scene = PhantomScene::default_scene();
    Rng rng(81);
    std::vector<CalibrationResult> results;
    for (int i = 0; i < 10; ++i) {
        EulerPose p = EulerPose::from_transform(scene.true_T_U2Pr);
        p.yaw += rng.normal(0.0, deg2rad(0.3));
        p.pitch += rng.normal(0.0, deg2rad(0.3));
        p.roll += rng.normal(0.0, deg2rad(0.3));
        p.t += Vec3(rng.normal(0.0, 0.3), rng.normal(0.0, 0.3), rng.normal(0.0, 0.3));
        results.push_back(result_for(p.to_transform()));
    }
    const PrecisionReport rep =
        calibration_precision(results, scene.s, scene.volume_dims);
    CHECK(rep.rms_distance_mm > 0.0);
    CHECK(rep.rms_distance_mm <= 2.0);
    CHECK(rep.rms_angle_deg > 0.0);
    CHECK(rep.rms_angle_deg <= 1.5);
    CHECK(rep.rms_distance_mm <= rep.max_distance_mm + 1e-15);
    CHECK(rep.rms_angle_deg <= rep.max_angle_deg + 1e-15);
}

namespace {

/// Exact bead voxel sets for a calibration: map the phantom-space centers
/// back into voxel coordinates through the fixed pose and true calibration.
void exact_bead_sets(const PhantomScene& scene, const BeadPhantom& bead, std::size_t copies,
                     std::vector<std::vector<Vec3>>& left, std::vector<std::vector<Vec3>>& right) {
    const RigidTransform pose = bead_experiment_pose(scene);
    const RigidTransform inv = (pose * scene.true_T_U2Pr).inverse();
    std::vector<Vec3> lv, rv;
    for (int i = 0; i < 3; ++i) lv.push_back(scene.s.unapply(inv.apply(bead.centers[i])));
    for (int i = 3; i < 6; ++i) rv.push_back(scene.s.unapply(inv.apply(bead.centers[i])));
    left.assign(copies, lv);
    right.assign(copies, rv);
}

}  // namespace

TEST_CASE("metrics: reconstruction_accuracy is zero for exact beads under truth") {
    const PhantomScene scene = PhantomScene::default_scene();
    const BeadPhantom bead = BeadPhantom::default_phantom(scene);
    std::vector<std::vector<Vec3>> left, right;
    exact_bead_sets(scene, bead, 10, left, right);

    const std::vector<CalibrationResult> calibs(1, result_for(scene.true_T_U2Pr));
    const AccuracyReport rep =
        reconstruction_accuracy(left, right, calibs, bead.d_B, scene.s);
    CHECK(rep.pair_count == 10);
    CHECK(rep.rms_distance_mm < 1e-9);
    CHECK(rep.max_distance_mm < 1e-9);
    CHECK(rep.rms_angle_deg < 1e-5);
    CHECK(rep.max_angle_deg < 1e-5);
}

TEST_CASE("metrics: reconstruction_accuracy pair counts") {
    const PhantomScene scene = PhantomScene::default_scene();
    const BeadPhantom bead = BeadPhantom::default_phantom(scene);
    std::vector<std::vector<Vec3>> left, right;
    exact_bead_sets(scene, bead, 10, left, right);
    const std::vector<CalibrationResult> calibs(10, result_for(scene.true_T_U2Pr));

    CHECK(reconstruction_accuracy(left, right, calibs, bead.d_B, scene.s,
                                  PairingMode::index_matched)
              .pair_count == 100);
    CHECK(reconstruction_accuracy(left, right, calibs, bead.d_B, scene.s,
                                  PairingMode::cross_product)
              .pair_count == 1000);

    // Index-matched pairing needs equally many left and right sets.
    std::vector<std::vector<Vec3>> fewer(left.begin(), left.begin() + 5);
    CHECK_THROWS_AS((void)reconstruction_accuracy(fewer, right, calibs, bead.d_B, scene.s,
                                                  PairingMode::index_matched),
                    std::invalid_argument);
    CHECK_THROWS_AS((void)reconstruction_accuracy({}, right, calibs, bead.d_B, scene.s),
                    InsufficientDataError);
}

TEST_CASE("metrics: reconstruction_accuracy distance error example") {
    // Shift every right bead 0.90 mm along the barycenter axis: the distance
    // error is exactly 0.90 mm = 1.89 voxels at the default pitch.
    const PhantomScene scene = PhantomScene::default_scene();
    const BeadPhantom bead = BeadPhantom::default_phantom(scene);
    std::vector<std::vector<Vec3>> left, right;
    exact_bead_sets(scene, bead, 1, left, right);

    // Work in calibrated metric space: the axis between the barycenters.
    const RigidTransform truth = scene.true_T_U2Pr;
    auto metric = [&](const Vec3& v) { return truth.apply(scene.s.apply(v)); };
    Vec3 bl = Vec3::Zero(), br = Vec3::Zero();
    for (const Vec3& v : left[0]) bl += metric(v) / 3.0;
    for (const Vec3& v : right[0]) br += metric(v) / 3.0;
    const Vec3 axis = (br - bl).normalized();
    // Push the right triangle 0.90 mm farther out along the axis (in voxels).
    for (Vec3& v : right[0]) {
        const Vec3 moved_mm = truth.inverse().apply(metric(v) + 0.90 * axis);
        v = scene.s.unapply(moved_mm);
    }

    const std::vector<CalibrationResult> calibs(1, result_for(truth));
    const AccuracyReport rep =
        reconstruction_accuracy(left, right, calibs, bead.d_B, scene.s);
    CHECK(rep.pair_count == 1);
    CHECK(rep.rms_distance_mm == doctest::Approx(0.90).epsilon(1e-9));
    CHECK(rep.rms_distance_vox == doctest::Approx(0.90 / 0.477).epsilon(1e-9));
    CHECK(std::abs(rep.rms_distance_vox - 1.90) < 0.02);
    // A rigid shift of the whole triangle leaves its normal unchanged.
    CHECK(rep.rms_angle_deg < 1e-5);
}

TEST_CASE("metrics: reconstruction_accuracy swap invariance") {
    const PhantomScene scene = PhantomScene::default_scene();
    const BeadPhantom bead = BeadPhantom::default_phantom(scene);
    std::vector<std::vector<Vec3>> left, right;
    exact_bead_sets(scene, bead, 4, left, right);
    // Perturb to make the statistics nontrivial.
    Rng rng(90);
    for (auto& set : left)
        for (Vec3& v : set) v += Vec3(rng.normal(0, 0.5), rng.normal(0, 0.5), rng.normal(0, 0.5));
    for (auto& set : right)
        for (Vec3& v : set) v += Vec3(rng.normal(0, 0.5), rng.normal(0, 0.5), rng.normal(0, 0.5));

    const std::vector<CalibrationResult> calibs(3, result_for(scene.true_T_U2Pr));
    const AccuracyReport ab = reconstruction_accuracy(left, right, calibs, bead.d_B, scene.s);
    const AccuracyReport ba = reconstruction_accuracy(right, left, calibs, bead.d_B, scene.s);
    CHECK(ab.rms_distance_mm == doctest::Approx(ba.rms_distance_mm).epsilon(1e-12));
    CHECK(ab.max_distance_mm == doctest::Approx(ba.max_distance_mm).epsilon(1e-12));
    CHECK(ab.rms_angle_deg == doctest::Approx(ba.rms_angle_deg).epsilon(1e-12));
    CHECK(ab.pair_count == ba.pair_count);
    CHECK(ab.rms_distance_mm <= ab.max_distance_mm + 1e-15);
    CHECK(ab.rms_angle_deg <= ab.max_angle_deg + 1e-15);
}

TEST_CASE("metrics: reconstruction_accuracy with noisy beads stays in the gate") {
    const PhantomScene scene = PhantomScene::default_scene();
    const BeadPhantom bead = BeadPhantom::default_phantom(scene);
    std::vector<std::vector<Vec3>> left, right;
    exact_bead_sets(scene, bead, 10, left, right);

    // 0.5 voxel 3-D RMS centroid noise (per-axis sigma 0.5/sqrt(3)), matching
    // the bead-noise convention of the simulator.
    const double sig = 0.5 / std::sqrt(3.0);
    Rng rng(19);
    for (auto& set : left)
        for (Vec3& v : set) v += Vec3(rng.normal(0, sig), rng.normal(0, sig), rng.normal(0, sig));
    for (auto& set : right)
        for (Vec3& v : set) v += Vec3(rng.normal(0, sig), rng.normal(0, sig), rng.normal(0, sig));

    std::vector<CalibrationResult> calibs;
    for (int i = 0; i < 10; ++i) {
        EulerPose p = EulerPose::from_transform(scene.true_T_U2Pr);
        p.yaw += rng.normal(0.0, deg2rad(0.2));
        p.pitch += rng.normal(0.0, deg2rad(0.2));
        p.roll += rng.normal(0.0, deg2rad(0.2));
        p.t += Vec3(rng.normal(0.0, 0.2), rng.normal(0.0, 0.2), rng.normal(0.0, 0.2));
        calibs.push_back(result_for(p.to_transform()));
    }

    const AccuracyReport rep =
        reconstruction_accuracy(left, right, calibs, bead.d_B, scene.s);
    CHECK(rep.pair_count == 100);
    CHECK(rep.rms_distance_mm > 0.0);
    CHECK(rep.rms_distance_mm <= 2.0);
    CHECK(rep.rms_angle_deg > 0.0);
    CHECK(rep.rms_angle_deg <= 3.0);
}

TEST_CASE("metrics: degenerate bead sets are rejected") {
    const ScaleVector s(0.477, 0.477, 0.477);
    const std::vector<CalibrationResult> calibs(2, result_for(RigidTransform::identity()));
    const std::vector<std::vector<Vec3>> collinear(
        2, std::vector<Vec3>{Vec3(0, 0, 0), Vec3(10, 0, 0), Vec3(20, 0, 0)});
    const std::vector<std::vector<Vec3>> ok(
        2, std::vector<Vec3>{Vec3(0, 0, 0), Vec3(10, 0, 0), Vec3(0, 10, 0)});
    CHECK_THROWS_AS((void)reconstruction_accuracy(collinear, ok, calibs, 60.0, s),
                    DegenerateInputError);
    const std::vector<std::vector<Vec3>> two_beads(
        2, std::vector<Vec3>{Vec3(0, 0, 0), Vec3(10, 0, 0)});
    CHECK_THROWS_AS((void)reconstruction_accuracy(two_beads, ok, calibs, 60.0, s),
                    std::invalid_argument);
    CHECK_THROWS_AS((void)reconstruction_accuracy(ok, ok, calibs, 0.0, s),
                    std::invalid_argument);
}
