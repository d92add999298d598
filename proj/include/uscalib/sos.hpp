#pragma once

#include "uscalib/geometry.hpp"

#include <stdexcept>

namespace uscalib {

struct SosRangeError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

struct SosGeometryError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Sectorial probe geometry: scan-head origin (voxel coordinates, converted to
/// mm by the volume's ScaleVector) and the scan-head surface radius in mm.
struct ProbeGeometry {
    Vec3 origin_voxel = Vec3::Zero();  ///< O_US in voxel coordinates
    double surface_radius = 0.0;       ///< r, millimetres

    ProbeGeometry() = default;
    ProbeGeometry(const Vec3& origin, double radius) : origin_voxel(origin), surface_radius(radius) {
        if (radius < 0.0) throw std::invalid_argument("surface radius must be >= 0");
    }
};

/// Speed-of-sound context: the scanner-assumed tissue speed, the
/// temperature-derived water speed, and the water temperature.
struct SosContext {
    double v_tissue = 1540.0;  ///< m/s, scanner assumption
    double v_water = 1540.0;   ///< m/s
    double temperature = 0.0;  ///< degrees C

    SosContext() = default;
    SosContext(double vt, double vw, double temp) : v_tissue(vt), v_water(vw), temperature(temp) {
        if (vt <= 1300.0 || vt >= 1700.0 || vw <= 1300.0 || vw >= 1700.0)
            throw std::invalid_argument("speed of sound outside the plausible 1300..1700 m/s band");
    }
    /// Context with v_water derived from water_sos(temperature).
    static SosContext at_temperature(double temp, double v_tissue = 1540.0);

    double ratio() const { return v_tissue / v_water; }
};

/// Speed of sound in pure water at atmospheric pressure, Bilaniuk & Wong
/// 112-point degree-5 polynomial.  Valid for 0 <= t <= 74 C.
double water_sos(double temperature_celsius);

/// Sectorial speed-of-sound correction: moves the point along the ray from
/// O_US so that its distance beyond the scan-head surface d_W becomes
/// d_T = (v_tissue / v_water) * d_W.  Input and output in voxel coordinates.
Vec3 correct_point(const Vec3& p_voxel, const ScaleVector& s, const ProbeGeometry& g,
                   const SosContext& ctx);

}  // namespace uscalib
