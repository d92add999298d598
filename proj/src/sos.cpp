#include "uscalib/sos.hpp"

#include <cmath>

namespace uscalib {

SosContext SosContext::at_temperature(double temp, double v_tissue) {
    return {v_tissue, water_sos(temp), temp};
}

double water_sos(double t) {
    if (t < 0.0 || t > 74.0)
        throw SosRangeError("water_sos: temperature outside the 0..74 C validity range");
    // Bilaniuk & Wong, "Speed of sound in pure water as a function of
    // temperature" (112-point equation, including the erratum), coefficients
    // recorded verbatim:
    //   c(t) = 1402.385 + 5.038813 t - 5.799136e-2 t^2 + 3.287156e-4 t^3
    //          - 1.398845e-6 t^4 + 2.787860e-9 t^5     [m/s, t in deg C]
    const double c0 = 1402.385;
    const double c1 = 5.038813;
    const double c2 = -5.799136e-2;
    const double c3 = 3.287156e-4;
    const double c4 = -1.398845e-6;
    const double c5 = 2.787860e-9;
    return c0 + t * (c1 + t * (c2 + t * (c3 + t * (c4 + t * c5))));
}

Vec3 correct_point(const Vec3& p_voxel, const ScaleVector& s, const ProbeGeometry& g,
                   const SosContext& ctx) {
    const Vec3 p_mm = s.apply(p_voxel);
    const Vec3 o_mm = s.apply(g.origin_voxel);
    const Vec3 d = p_mm - o_mm;
    const double dist = d.norm();
    if (dist < 1e-12) throw SosGeometryError("correct_point: point coincides with the probe origin");
    if (dist < g.surface_radius - 1e-9)
        throw SosGeometryError("correct_point: point lies inside the scan-head surface");
    const double d_w = std::max(dist - g.surface_radius, 0.0);
    const double d_t = ctx.ratio() * d_w;
    const Vec3 corrected_mm = o_mm + (g.surface_radius + d_t) * (d / dist);
    return s.unapply(corrected_mm);
}

}  // namespace uscalib
