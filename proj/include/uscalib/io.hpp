#pragma once

#include "uscalib/detect.hpp"
#include "uscalib/geometry.hpp"
#include "uscalib/metrics.hpp"
#include "uscalib/solver.hpp"
#include "uscalib/volume.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace uscalib {

/// Version string stamped into calibration files and CLI banners.
inline constexpr const char* kToolVersion = "1.0.0";

/// Thrown on malformed files, failed invariants inside files, or unwritable
/// destinations.
class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Fixed-point formatting used for every numeric field we emit: 6 decimals.
std::string fmt6(double v);

// ---------------------------------------------------------------------------
// Volume files ("USVOL 1"): text header + raw 8-bit payload, x-fastest.
// ---------------------------------------------------------------------------
void write_volume(const std::filesystem::path& path, const Volume& vol);
Volume read_volume(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Pose logs ("USPOSES 1"): one record per acquisition,
//   id tx ty tz qw qx qy qz timestamp
// ---------------------------------------------------------------------------
struct PoseRecord {
    std::string id;        ///< unique acquisition id; pairs with a volume file stem
    RigidTransform pose;   ///< T_Pr2Ph for this acquisition
    double timestamp = 0;  ///< seconds since session start
};

void write_pose_log(const std::filesystem::path& path, const std::vector<PoseRecord>& records);
std::vector<PoseRecord> read_pose_log(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Calibration files ("USCALIB 1"): T_U2Pr as a 4x4 row-major matrix, scale,
// residual statistics, solver-config echo, tool version, config echo.
// ---------------------------------------------------------------------------
struct CalibrationFile {
    RigidTransform T_U2Pr;
    ScaleVector s{1.0, 1.0, 1.0};
    double rms_residual_mm = 0.0;
    double max_residual_mm = 0.0;
    bool converged = true;
    SolverConfig solver;
    std::string tool_version = kToolVersion;
    std::vector<std::pair<std::string, std::string>> config_echo;
};

void write_calibration(const std::filesystem::path& path, const CalibrationFile& cal);
CalibrationFile read_calibration(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Pre-calibration files ("USPRECAL 1"): T_Ph2M + fit RMS + inlier mask.
// ---------------------------------------------------------------------------
struct PrecalFile {
    RigidTransform T_Ph2M;
    double rms_mm = 0.0;
    std::vector<int> inlier_mask;  ///< 1 = inlier, aligned with the input points
    std::vector<std::pair<std::string, std::string>> config_echo;
};

void write_precal(const std::filesystem::path& path, const PrecalFile& pre);
PrecalFile read_precal(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Bead coordinate files ("USBEADS 1"): per-volume bead centers, voxel units.
// ---------------------------------------------------------------------------
struct BeadEntry {
    std::string volume_id;
    bool left = true;
    Vec3 voxel = Vec3::Zero();
};

struct BeadFile {
    double d_B = 0.0;  ///< configured barycenter distance, mm
    std::vector<BeadEntry> entries;
};

void write_beads(const std::filesystem::path& path, const BeadFile& beads);
BeadFile read_beads(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Point clouds for pre-calibration: one "x y z" mm triple per line,
// '#' comments allowed.
// ---------------------------------------------------------------------------
std::vector<Vec3> read_points(const std::filesystem::path& path);
void write_points(const std::filesystem::path& path, const std::vector<Vec3>& points);

// ---------------------------------------------------------------------------
// Flat key-value config: "key value..." per line, '#' comments, later keys
// override earlier ones.  Keys keep first-seen order for the echo.
// ---------------------------------------------------------------------------
class Config {
  public:
    Config() = default;

    static Config from_file(const std::filesystem::path& path);
    static Config from_string(const std::string& text);

    bool has(const std::string& key) const;
    std::string get(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    long get_long(const std::string& key, long fallback) const;
    void set(const std::string& key, const std::string& value);

    /// All entries in first-seen key order (for provenance echoes).
    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

    /// Manual line overrides: keys "manual_line.<volume id>.<xy|zy>" with
    /// value "rho theta_deg".  Returns empty when none is configured.
    std::map<std::string, Line2D> manual_lines() const;

  private:
    std::vector<std::pair<std::string, std::string>> entries_;
    std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Binary PGM (P5) overlay images.
// ---------------------------------------------------------------------------
void write_pgm(const std::filesystem::path& path, int width, int height,
               const std::vector<std::uint8_t>& pixels);

// ---------------------------------------------------------------------------
// Report rendering: the three evaluation tables, mm / vox / deg columns.
// ---------------------------------------------------------------------------
std::string format_precision_report(const std::string& title, const PrecisionReport& report);
std::string format_accuracy_report(const std::string& title, const AccuracyReport& report);
std::string format_config_echo(const std::vector<std::pair<std::string, std::string>>& entries);

}  // namespace uscalib
