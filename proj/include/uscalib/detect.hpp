#pragma once

#include "uscalib/geometry.hpp"
#include "uscalib/sos.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace uscalib {

struct NoLineFoundError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// One of the two orthogonal extraction slices through the scan-head origin.
/// Pixels are stored row-major; a pixel at (row, col) has Hough coordinates
/// x = col, y = row, so a horizontal line through row r is (rho = r, theta = 90 deg).
struct Slice2D {
    int width = 0;                  ///< columns (Hough x extent)
    int height = 0;                 ///< rows (Hough y extent)
    std::vector<std::uint8_t> px;   ///< row-major, size width*height
    std::string axis_labels;        ///< volume axes spanned, e.g. "xy" (x=cols) or "zy" (z=cols)
    double scale_x = 1.0;           ///< mm per pixel along columns
    double scale_y = 1.0;           ///< mm per pixel along rows

    std::uint8_t at(int row, int col) const { return px[static_cast<size_t>(row) * width + col]; }
    std::uint8_t& at(int row, int col) { return px[static_cast<size_t>(row) * width + col]; }
};

/// Line in Hough normal form: x cos(theta) + y sin(theta) = rho, with
/// theta in [0, pi) and rho in pixels (signed).
struct Line2D {
    double rho = 0.0;
    double theta = 0.0;
};

/// One acquisition's extracted membrane evidence.
struct PlaneObservation {
    Line2D line_xy;
    Line2D line_zy;
    std::vector<Vec3> sample_points;  ///< voxel-space, SoS-corrected; 10 per line
    RigidTransform pose;              ///< T_Pr2Ph measured at acquisition
    std::string volume_id;            ///< provenance, optional
};

/// Eq.-(4) threshold: s_H = mode(I) + (max(I) - min(I)) / 3.  The mode is the
/// most frequent intensity (smallest such value on ties).
double hough_threshold(const Slice2D& img);

/// Intensity-accumulating Hough transform over pixels strictly above s_H
/// (1-pixel rho bins, 0.5-degree theta bins), refined by a 3x3 accumulator
/// centroid, an intensity-weighted total-least-squares polish and a
/// per-scanline centroid ridge fit.
/// Throws NoLineFoundError when no pixel exceeds the threshold.
Line2D hough_lines(const Slice2D& img, double s_H);

/// Clip the line against the rectangle [0,w-1]x[0,h-1] and return n
/// equidistant points (x, y) between the extreme in-image points.
/// Throws NoLineFoundError when the line misses the rectangle.
std::vector<std::pair<double, double>> sample_line_segment(const Line2D& line, int width,
                                                           int height, int n);

// forward declaration; defined in volume.hpp
struct Volume;

/// Extract the membrane plane observation from a volume: Hough lines in the
/// xy and zy slices through O_US, 10 equidistant sample points per line,
/// SoS-corrected.  The tracker pose is attached by the caller.
/// Optional manual overrides replace the detection for a slice.
PlaneObservation extract_plane(const Volume& vol, const ProbeGeometry& g, const SosContext& ctx,
                               const Line2D* manual_xy = nullptr,
                               const Line2D* manual_zy = nullptr);

/// Take the xy ("xy") or zy ("zy") extraction slice through O_US.
Slice2D extraction_slice(const Volume& vol, const ProbeGeometry& g, const std::string& which);

/// Plane normal reconstructed as the unit cross product of the two slice-line
/// direction vectors lifted into metric volume space.
Vec3 plane_normal_from_lines(const PlaneObservation& obs, const ScaleVector& s);

}  // namespace uscalib
