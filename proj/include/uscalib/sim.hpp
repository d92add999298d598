#pragma once

#include "uscalib/geometry.hpp"
#include "uscalib/sos.hpp"
#include "uscalib/volume.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace uscalib {

struct EmptySceneError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct PlacementError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Simulator ground truth: the true calibration, the phantom pre-calibration,
/// the voxel lattice, and the probe/SoS context shared by all acquisitions.
/// The membrane is the z = 0 plane of membrane space M.
struct PhantomScene {
    RigidTransform true_T_U2Pr;
    RigidTransform T_Ph2M;
    ScaleVector s;
    std::array<int, 3> volume_dims{199, 199, 199};
    ProbeGeometry g;
    SosContext ctx;

    /// The frozen default scene used by tests and the CLI defaults.
    static PhantomScene default_scene();
};

/// Acquisition noise parameters.
struct NoiseModel {
    double pose_noise_rms = 0.25;  ///< tracker translation noise, mm RMS (3-D)
    double line_jitter = 0.0;      ///< membrane plane shift per volume, voxels
                                   ///< (bead volumes: 3-D RMS of the centroid noise)
    double speckle_sigma = 0.0;    ///< multiplicative intensity noise
    int background_level = 25;     ///< 8-bit background intensity
    double beam_width = 2.0;       ///< Gaussian line profile sigma, voxels
};

/// Two coplanar bead triangles (indices 0-2 left, 3-5 right), phantom space.
struct BeadPhantom {
    std::array<Vec3, 6> centers;
    double d_B = 60.0;  ///< barycenter distance, mm

    Vec3 barycenter_left() const { return (centers[0] + centers[1] + centers[2]) / 3.0; }
    Vec3 barycenter_right() const { return (centers[3] + centers[4] + centers[5]) / 3.0; }

    /// Default two-triangle phantom placed inside the default scene's frustum
    /// for the fixed bead-experiment pose.
    static BeadPhantom default_phantom(const PhantomScene& scene);
};

/// The fixed probe pose used for the bead experiment (probe immobilized).
RigidTransform bead_experiment_pose(const PhantomScene& scene);

/// Twelve-step-style protocol: tracker poses T_Pr2Ph covering translations
/// along and rotations about each probe axis at varied membrane incidence.
/// Deterministic in (scene, seed).
std::vector<RigidTransform> protocol_poses(const PhantomScene& scene, std::uint64_t seed);

/// Render one membrane acquisition.  The volume image includes the Gaussian
/// membrane profile, the scan-head dead zone, inverse SoS distortion (exact
/// inverse of correct_point) and multiplicative speckle.  Deterministic in
/// seed; derive per-volume seeds via Rng::derive(campaign_seed, index).
Volume render_volume(const PhantomScene& scene, const RigidTransform& pose,
                     const NoiseModel& noise, std::uint64_t seed);

/// Tracker measurement of a pose: translation-only noise of the configured
/// RMS (per-axis sigma = rms / sqrt(3)).  Uses the same per-volume stream as
/// render_volume; call with the identical seed to stay aligned.
RigidTransform logged_pose(const RigidTransform& true_pose, const NoiseModel& noise,
                           std::uint64_t seed);

struct BeadRender {
    std::vector<Volume> volumes;                 ///< 20: first half left, second half right
    std::vector<std::vector<Vec3>> bead_voxels;  ///< per volume: rendered bead centers (3 each)
    std::vector<bool> is_left;
};

/// Render the 20-volume bead campaign (10 left-triangle + 10 right-triangle
/// images).  Bead volumes carry no SoS distortion; noise.line_jitter acts as
/// bead-centroid noise of that 3-D RMS in voxels (per-axis sigma =
/// jitter / sqrt(3), the same convention as pose_noise_rms).  Returns the
/// rendered (jittered) bead centers per volume as the stand-in for manual
/// extraction.
BeadRender render_bead_volumes(const PhantomScene& scene, const BeadPhantom& bead,
                               const std::vector<RigidTransform>& poses, const NoiseModel& noise,
                               std::uint64_t seed);

/// Blob localization: global intensity argmax refined by an intensity-weighted
/// centroid over the surrounding 5x5x5 window.
Vec3 locate_blob(const Volume& vol);

/// Membrane plane of a given acquisition expressed in metric volume space
/// (useful for oracles): returns the world-to-membrane transform
/// W = T_Ph2M * pose * true_T_U2Pr.
RigidTransform membrane_chain(const PhantomScene& scene, const RigidTransform& pose);

}  // namespace uscalib
