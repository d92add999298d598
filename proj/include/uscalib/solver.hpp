#pragma once

#include "uscalib/detect.hpp"
#include "uscalib/geometry.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace uscalib {

/// The calibration estimation problem: membrane observations, the phantom
/// pre-calibration, and the voxel scale.  Each observation carries its own
/// tracker pose.
struct CalibrationProblem {
    std::vector<PlaneObservation> observations;
    RigidTransform T_Ph2M;
    ScaleVector s;
};

/// Singular-value diagnostic of the residual Jacobian.
struct ObservabilityReport {
    std::array<double, 6> singular_values{};  ///< sorted descending
    bool condition_flag = false;              ///< true when smallest/largest < 1e-6
};

struct CalibrationResult {
    RigidTransform T_U2Pr;
    double rms_residual = 0.0;  ///< mm, over all sample points
    double max_residual = 0.0;  ///< mm
    std::vector<double> per_observation_rms;
    ObservabilityReport diagnostics;
    double objective = 0.0;  ///< final sum of squared residuals, mm^2
    bool converged = false;
    int best_restart = -1;  ///< winning random restart; -1 when a closed-form seed won
};

/// Levenberg-Marquardt configuration (paper-silent constants, recorded here
/// and echoed into calibration files).
struct SolverConfig {
    int restarts = 20;
    std::uint64_t seed = 1;
    double lambda0 = 1e-3;
    double lambda_factor = 10.0;
    double rel_tol = 1e-12;
    int max_iterations = 200;
    double translation_range = 200.0;  ///< restarts draw translations in +-range, mm
};

/// Thrown when no restart converges; carries the best-effort result.
struct SolverFailure : std::runtime_error {
    CalibrationResult best_effort;
    explicit SolverFailure(CalibrationResult best)
        : std::runtime_error("solver: no Levenberg-Marquardt restart converged"),
          best_effort(std::move(best)) {}
};

/// Plane-distance residual: the z component (mm) of the scaled voxel point
/// carried through b and A = T_Ph2M * T_Pr2Ph.
double residual(const EulerPose& b, const RigidTransform& A, const ScaleVector& s, const Vec3& p);

/// Analytic gradient of residual() with respect to (yaw, pitch, roll, tx, ty, tz).
std::array<double, 6> residual_gradient(const EulerPose& b, const RigidTransform& A,
                                        const ScaleVector& s, const Vec3& p);

/// Estimate T_U2Pr by LM descents from two closed-form seeds (Wahba on the
/// per-observation plane normals, one per membrane-side sign choice — the
/// plane data alone cannot distinguish the mirrored-probe twin) followed by
/// deterministic random restarts.  Returns the lowest-objective converged
/// descent (ties: earliest).  Throws SolverFailure when nothing converges.
CalibrationResult solve(const CalibrationProblem& problem, const SolverConfig& cfg = {});

/// Singular values of the stacked residual Jacobian at `at`, by central
/// finite differences with step 1e-5.
ObservabilityReport observability(const CalibrationProblem& problem, const EulerPose& at);

}  // namespace uscalib
