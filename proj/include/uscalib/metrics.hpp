#pragma once

#include "uscalib/detect.hpp"
#include "uscalib/geometry.hpp"
#include "uscalib/solver.hpp"

#include <array>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace uscalib {

/// Thrown when an evaluation needs more inputs than were supplied (e.g.
/// calibration precision over fewer than two calibrations).
class InsufficientDataError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Precision-style report: distance errors in both mm and voxels (voxel
/// column = mm column / mean voxel pitch), angular errors in degrees.
struct PrecisionReport {
    double rms_distance_mm = 0.0;
    double rms_distance_vox = 0.0;
    double max_distance_mm = 0.0;
    double max_distance_vox = 0.0;
    double rms_angle_deg = 0.0;
    double max_angle_deg = 0.0;
};

/// Accuracy report for the bead-phantom procedure; same layout plus the
/// number of (left, right, calibration) pairs aggregated.
struct AccuracyReport {
    double rms_distance_mm = 0.0;
    double rms_distance_vox = 0.0;
    double max_distance_mm = 0.0;
    double max_distance_vox = 0.0;
    double rms_angle_deg = 0.0;
    double max_angle_deg = 0.0;
    std::size_t pair_count = 0;
};

/// How reconstruction_accuracy pairs left and right bead volumes.
enum class PairingMode {
    /// Left volume i pairs with right volume i, for every calibration
    /// (10 + 10 volumes and 10 calibrations -> 100 pairs).
    index_matched,
    /// Every (left, right, calibration) combination.
    cross_product,
};

/// Feature-extraction precision: distance of every sampled membrane point to
/// the pre-calibration plane under the solved calibration, and per-plane
/// angle between the predicted plane normal and the normal implied by the
/// two extracted lines.
PrecisionReport feature_precision(const std::vector<PlaneObservation>& observations,
                                  const CalibrationResult& result,
                                  const CalibrationProblem& problem);

/// Calibration repeatability: spread of the scaled volume center and of the
/// (0,0,1) direction mapped through each calibration.  Population standard
/// deviation; radial (root of summed per-axis variances) for the center.
PrecisionReport calibration_precision(const std::vector<CalibrationResult>& results,
                                      const ScaleVector& s, const std::array<int, 3>& volume_dims);

/// Bead-phantom reconstruction accuracy: barycenter-distance error against
/// d_B and angle between triangle normals, over the selected pairing.
AccuracyReport reconstruction_accuracy(const std::vector<std::vector<Vec3>>& left_sets,
                                       const std::vector<std::vector<Vec3>>& right_sets,
                                       const std::vector<CalibrationResult>& calibrations,
                                       double d_B, const ScaleVector& s,
                                       PairingMode mode = PairingMode::index_matched);

}  // namespace uscalib
