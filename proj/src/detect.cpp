#include "uscalib/detect.hpp"
#include "uscalib/volume.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

namespace uscalib {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr int kThetaBins = 360;  // 0.5-degree bins over [0, pi)
constexpr double kThetaStep = kPi / kThetaBins;

struct BrightPixels {
    std::vector<double> x, y, intensity;
};

BrightPixels collect_above(const Slice2D& img, double s_H) {
    BrightPixels out;
    for (int row = 0; row < img.height; ++row)
        for (int col = 0; col < img.width; ++col) {
            const double v = img.at(row, col);
            if (v > s_H) {
                out.x.push_back(col);
                out.y.push_back(row);
                out.intensity.push_back(v);
            }
        }
    return out;
}

double quantile(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
}

/// Interval of the along-line coordinate l for which the full perpendicular
/// band [-band, band] around the line stays inside [0,w-1]x[0,h-1].
/// Points on the line: p(l, d) = rho*(c,s) + l*(-s,c) + d*(c,s).
std::pair<double, double> strip_interior_interval(double rho, double theta, double band, int width,
                                                  int height) {
    const double c = std::cos(theta), s = std::sin(theta);
    double lo = -1e18, hi = 1e18;
    const std::array<std::array<double, 3>, 4> borders = {{
        {1.0, 0.0, 0.0},                                  // x >= 0
        {-1.0, 0.0, -static_cast<double>(width - 1)},     // x <= w-1
        {0.0, 1.0, 0.0},                                  // y >= 0
        {0.0, -1.0, -static_cast<double>(height - 1)},    // y <= h-1
    }};
    for (const auto& b : borders) {
        const double mt = -b[0] * s + b[1] * c;
        const double mn = b[0] * c + b[1] * s;
        const double cst = rho * mn - b[2] - band * std::abs(mn);
        if (std::abs(mt) < 1e-9) {
            if (cst < 0.0) return {1.0, 0.0};  // empty
        } else if (mt > 0.0) {
            lo = std::max(lo, -cst / mt);
        } else {
            hi = std::min(hi, -cst / mt);
        }
    }
    return {lo, hi};
}

/// Intensity-weighted total-least-squares refinement of an initial line.  The
/// fit uses above-threshold pixels inside an adaptive perpendicular band, and
/// only along the part of the line where the whole band is interior to the
/// image (removes the oblique border-cut wedges that bias the first moment).
Line2D tls_polish(const BrightPixels& pix, double s_H, Line2D init, int width, int height) {
    double rho = init.rho, theta = init.theta;
    const std::size_t n = pix.x.size();
    for (int iter = 0; iter < 6; ++iter) {
        const double c = std::cos(theta), s = std::sin(theta);
        std::vector<double> absd;
        absd.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double d = pix.x[i] * c + pix.y[i] * s - rho;
            if (std::abs(d) < 14.0) absd.push_back(std::abs(d));
        }
        if (absd.empty()) break;
        const double band = std::max(3.0, quantile(std::move(absd), 0.995) + 1.0);
        const auto [lo, hi] = strip_interior_interval(rho, theta, band, width, height);

        double m = 0.0, cx = 0.0, cy = 0.0;
        std::vector<std::size_t> keep;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = pix.x[i] * c + pix.y[i] * s - rho;
            if (std::abs(d) >= band) continue;
            const double l = -pix.x[i] * s + pix.y[i] * c;
            if (l <= lo + 2.0 || l >= hi - 2.0) continue;
            keep.push_back(i);
            const double w = pix.intensity[i] - s_H;
            m += w;
            cx += w * pix.x[i];
            cy += w * pix.y[i];
        }
        if (keep.empty() || m <= 0.0) break;
        cx /= m;
        cy /= m;
        double sxx = 0.0, sxy = 0.0, syy = 0.0;
        for (const std::size_t i : keep) {
            const double w = pix.intensity[i] - s_H;
            const double dx = pix.x[i] - cx, dy = pix.y[i] - cy;
            sxx += w * dx * dx;
            sxy += w * dx * dy;
            syy += w * dy * dy;
        }
        // Normal = eigenvector of the smallest eigenvalue of [[sxx,sxy],[sxy,syy]].
        const double tr2 = 0.5 * (sxx + syy);
        const double det = std::sqrt(std::max(0.25 * (sxx - syy) * (sxx - syy) + sxy * sxy, 0.0));
        const double lam = tr2 - det;
        double nx, ny;
        if (std::abs(sxx - lam) >= std::abs(syy - lam)) {
            nx = -sxy;
            ny = sxx - lam;
        } else {
            nx = syy - lam;
            ny = -sxy;
        }
        const double len = std::hypot(nx, ny);
        if (len < 1e-15) break;
        nx /= len;
        ny /= len;
        double th_new = std::atan2(ny, nx);
        if (th_new < 0.0) th_new += kPi;
        if (th_new >= kPi) th_new -= kPi;
        rho = cx * std::cos(th_new) + cy * std::sin(th_new);
        theta = th_new;
    }
    return {rho, theta};
}

/// Final sub-quantization refinement: transverse intensity centroids of the
/// contiguous above-threshold run crossing the line, one per scanline, then a
/// mass-weighted least-squares line through the centers.  Each run is used
/// whole (border-truncated runs are skipped), so the 8-bit truncation error of
/// a center is phase-random along the line and the slope bias averages out —
/// unlike the 2-D moment fit, whose perpendicular band cuts pixels in a
/// pattern phase-locked to the slope.  Falls back to `init` on sparse input.
Line2D scanline_refine(const Slice2D& img, double s_H, Line2D init) {
    double rho = init.rho, theta = init.theta;
    for (int iter = 0; iter < 4; ++iter) {
        const double c = std::cos(theta), s = std::sin(theta);
        const bool scan_cols = std::abs(s) >= std::abs(c);  // ridge runs mostly along x
        const int outer = scan_cols ? img.width : img.height;
        const int inner = scan_cols ? img.height : img.width;
        double sw = 0.0, sl = 0.0, sd = 0.0, sll = 0.0, sld = 0.0;
        std::size_t used = 0;
        for (int o = 0; o < outer; ++o) {
            const double expect = scan_cols ? (rho - o * c) / s : (rho - o * s) / c;
            const int e = static_cast<int>(std::lround(expect));
            if (e < 0 || e >= inner) continue;
            const auto val = [&](int i) {
                return static_cast<double>(scan_cols ? img.at(i, o) : img.at(o, i));
            };
            if (val(e) <= s_H) continue;
            int a = e, b = e;
            while (a > 0 && val(a - 1) > s_H) --a;
            while (b < inner - 1 && val(b + 1) > s_H) ++b;
            if (a == 0 || b == inner - 1) continue;  // run truncated by the border
            double m = 0.0, ci = 0.0;
            for (int i = a; i <= b; ++i) {
                const double w = val(i) - s_H;
                m += w;
                ci += w * i;
            }
            if (m <= 0.0) continue;
            ci /= m;
            const double px = scan_cols ? static_cast<double>(o) : ci;
            const double py = scan_cols ? ci : static_cast<double>(o);
            const double l = -px * s + py * c;
            const double d = px * c + py * s - rho;
            sw += m;
            sl += m * l;
            sd += m * d;
            sll += m * l * l;
            sld += m * l * d;
            ++used;
        }
        if (used < 8 || sw <= 0.0) break;
        sl /= sw;
        sd /= sw;
        const double var_l = sll / sw - sl * sl;
        const double cov_ld = sld / sw - sl * sd;
        if (var_l < 1e-9) break;
        // Weighted centroid of the crossings, in pixel coordinates.
        const double cx = (rho + sd) * c - sl * s;
        const double cy = (rho + sd) * s + sl * c;
        theta -= std::atan(cov_ld / var_l);
        if (theta < 0.0)
            theta += kPi;
        else if (theta >= kPi)
            theta -= kPi;
        rho = cx * std::cos(theta) + cy * std::sin(theta);
    }
    return {rho, theta};
}

}  // namespace

double hough_threshold(const Slice2D& img) {
    if (img.px.empty()) throw std::invalid_argument("hough_threshold: empty image");
    std::array<std::size_t, 256> hist{};
    int lo = 255, hi = 0;
    for (const std::uint8_t v : img.px) {
        ++hist[v];
        lo = std::min<int>(lo, v);
        hi = std::max<int>(hi, v);
    }
    int mode = 0;
    std::size_t best = 0;
    for (int v = 0; v < 256; ++v)
        if (hist[v] > best) {
            best = hist[v];
            mode = v;
        }
    return mode + (hi - lo) / 3.0;
}

Line2D hough_lines(const Slice2D& img, double s_H) {
    const BrightPixels pix = collect_above(img, s_H);
    if (pix.x.empty()) throw NoLineFoundError("hough_lines: no pixel above threshold");

    const int diag =
        static_cast<int>(std::ceil(std::hypot(static_cast<double>(img.width), img.height)));
    const int rho_bins = 2 * diag + 1;
    std::vector<double> acc(static_cast<std::size_t>(rho_bins) * kThetaBins, 0.0);

    std::array<double, kThetaBins> ct{}, st{};
    for (int t = 0; t < kThetaBins; ++t) {
        ct[t] = std::cos(t * kThetaStep);
        st[t] = std::sin(t * kThetaStep);
    }
    for (std::size_t i = 0; i < pix.x.size(); ++i)
        for (int t = 0; t < kThetaBins; ++t) {
            const int r = static_cast<int>(std::lround(pix.x[i] * ct[t] + pix.y[i] * st[t])) + diag;
            acc[static_cast<std::size_t>(t) * rho_bins + r] += pix.intensity[i];
        }

    // Peak cell; ties resolve to the smaller theta bin, then the smaller rho bin.
    int best_t = 0, best_r = 0;
    double best_v = -1.0;
    for (int t = 0; t < kThetaBins; ++t)
        for (int r = 0; r < rho_bins; ++r) {
            const double v = acc[static_cast<std::size_t>(t) * rho_bins + r];
            if (v > best_v) {
                best_v = v;
                best_t = t;
                best_r = r;
            }
        }

    // 3x3 accumulator centroid.  theta wraps at 0/pi with the rho axis mirrored.
    double msum = 0.0, rsum = 0.0, tsum = 0.0;
    for (int dt = -1; dt <= 1; ++dt)
        for (int dr = -1; dr <= 1; ++dr) {
            int tt = best_t + dt;
            int rr = best_r + dr;
            if (tt < 0) {
                tt += kThetaBins;
                rr = 2 * diag - rr;
            } else if (tt >= kThetaBins) {
                tt -= kThetaBins;
                rr = 2 * diag - rr;
            }
            if (rr < 0 || rr >= rho_bins) continue;
            const double a = acc[static_cast<std::size_t>(tt) * rho_bins + rr];
            msum += a;
            rsum += a * (best_r + dr - diag);
            tsum += a * (best_t + dt) * kThetaStep;
        }
    Line2D line;
    line.rho = rsum / msum;
    line.theta = tsum / msum;
    if (line.theta < 0.0) {
        line.theta += kPi;
        line.rho = -line.rho;
    } else if (line.theta >= kPi) {
        line.theta -= kPi;
        line.rho = -line.rho;
    }

    return scanline_refine(img, s_H, tls_polish(pix, s_H, line, img.width, img.height));
}

std::vector<std::pair<double, double>> sample_line_segment(const Line2D& line, int width,
                                                           int height, int n) {
    const auto [lo, hi] = strip_interior_interval(line.rho, line.theta, 0.0, width, height);
    if (!(lo <= hi)) throw NoLineFoundError("line does not intersect the image rectangle");
    const double c = std::cos(line.theta), s = std::sin(line.theta);
    std::vector<std::pair<double, double>> pts;
    pts.reserve(n);
    for (int k = 0; k < n; ++k) {
        const double l = lo + (hi - lo) * (n > 1 ? static_cast<double>(k) / (n - 1) : 0.5);
        pts.emplace_back(line.rho * c - l * s, line.rho * s + l * c);
    }
    return pts;
}

Slice2D extraction_slice(const Volume& vol, const ProbeGeometry& g, const std::string& which) {
    Slice2D sl;
    sl.axis_labels = which;
    const auto oz = static_cast<int>(std::lround(g.origin_voxel.z()));
    const auto ox = static_cast<int>(std::lround(g.origin_voxel.x()));
    if (which == "xy") {
        if (oz < 0 || oz >= vol.dims[2])
            throw std::invalid_argument("probe origin z outside the volume");
        sl.width = vol.dims[0];
        sl.height = vol.dims[1];
        sl.scale_x = vol.scale.sx;
        sl.scale_y = vol.scale.sy;
        sl.px.resize(static_cast<std::size_t>(sl.width) * sl.height);
        for (int y = 0; y < sl.height; ++y)
            for (int x = 0; x < sl.width; ++x) sl.at(y, x) = vol.at(x, y, oz);
    } else if (which == "zy") {
        if (ox < 0 || ox >= vol.dims[0])
            throw std::invalid_argument("probe origin x outside the volume");
        sl.width = vol.dims[2];
        sl.height = vol.dims[1];
        sl.scale_x = vol.scale.sz;
        sl.scale_y = vol.scale.sy;
        sl.px.resize(static_cast<std::size_t>(sl.width) * sl.height);
        for (int y = 0; y < sl.height; ++y)
            for (int z = 0; z < sl.width; ++z) sl.at(y, z) = vol.at(ox, y, z);
    } else {
        throw std::invalid_argument("extraction slice must be \"xy\" or \"zy\"");
    }
    return sl;
}

namespace {

Vec3 lift_to_voxel(const std::string& which, double hx, double hy, const ProbeGeometry& g) {
    if (which == "xy")
        return {hx, hy, std::round(g.origin_voxel.z())};
    return {std::round(g.origin_voxel.x()), hy, hx};
}

bool corrected_in_bounds(const Vec3& p_vox, const Volume& vol, const ProbeGeometry& g,
                         const SosContext& ctx) {
    Vec3 q;
    try {
        q = correct_point(p_vox, vol.scale, g, ctx);
    } catch (const SosGeometryError&) {
        return false;
    }
    // Tolerate round-off: chord endpoints computed by the interval clipper can
    // land a few ulp outside the exact volume bounds.
    for (int a = 0; a < 3; ++a)
        if (q[a] < -1e-9 || q[a] > vol.dims[a] - 1.0 + 1e-9) return false;
    return true;
}

/// Ten equidistant SoS-corrected sample points on a detected slice line.
///
/// The stretch of the line that dips inside the scan-head surface (possible
/// when the membrane trace passes close to the probe apex) is removed
/// analytically: the millimetre point is affine in the along-line coordinate,
/// so that stretch is the root interval of a quadratic.  Of the remaining
/// pieces the longer one is used, and its span is further shrunk (by
/// bisection against the piece's point nearest the probe origin) so every
/// corrected point stays inside the volume.
std::vector<Vec3> sample_corrected(const Line2D& line, const std::string& which, const Volume& vol,
                                   const ProbeGeometry& g, const SosContext& ctx) {
    const int w = (which == "xy") ? vol.dims[0] : vol.dims[2];
    const int h = vol.dims[1];
    const auto [lo, hi] = strip_interior_interval(line.rho, line.theta, 0.0, w, h);
    if (!(lo <= hi)) throw NoLineFoundError("detected line misses the slice rectangle");

    const double c = std::cos(line.theta), s = std::sin(line.theta);
    const auto point_at = [&](double l) {
        return lift_to_voxel(which, line.rho * c - l * s, line.rho * s + l * c, g);
    };
    const auto ok = [&](double l) { return corrected_in_bounds(point_at(l), vol, g, ctx); };

    // Pieces of [lo, hi] outside the scan-head surface.  |m(l) - o_mm|^2 is
    // quadratic in l because point_at is affine in l and the scale is linear.
    const Vec3 d0 = vol.scale.apply(point_at(0.0)) - vol.scale.apply(g.origin_voxel);
    const Vec3 d1 = vol.scale.apply(point_at(1.0)) - vol.scale.apply(point_at(0.0));
    const double qa = d1.squaredNorm();
    const double qb = 2.0 * d0.dot(d1);
    const double qc = d0.squaredNorm() - g.surface_radius * g.surface_radius;
    const double disc = qb * qb - 4.0 * qa * qc;
    std::vector<std::pair<double, double>> pieces;
    if (disc > 0.0 && qa > 0.0) {
        const double t1 = (-qb - std::sqrt(disc)) / (2.0 * qa);
        const double t2 = (-qb + std::sqrt(disc)) / (2.0 * qa);
        if (lo < t1) pieces.emplace_back(lo, std::min(hi, t1));
        if (t2 < hi) pieces.emplace_back(std::max(lo, t2), hi);
        // Prefer the longer piece: more of the membrane, better conditioning.
        std::sort(pieces.begin(), pieces.end(), [](const auto& a, const auto& b) {
            return a.second - a.first > b.second - b.first;
        });
    } else {
        pieces.emplace_back(lo, hi);
    }

    // Along-line coordinate of the in-slice projection of the probe origin.
    const double oux = (which == "xy") ? g.origin_voxel.x() : g.origin_voxel.z();
    const double ouy = g.origin_voxel.y();
    const double proj = -oux * s + ouy * c;

    for (auto [plo, phi] : pieces) {
        const double anchor = std::clamp(proj, plo, phi);
        if (!ok(anchor)) continue;
        if (!ok(plo)) {
            double bad = plo, good = anchor;
            for (int i = 0; i < 60; ++i) {
                const double mid = 0.5 * (bad + good);
                (ok(mid) ? good : bad) = mid;
            }
            plo = good;
        }
        if (!ok(phi)) {
            double bad = phi, good = anchor;
            for (int i = 0; i < 60; ++i) {
                const double mid = 0.5 * (bad + good);
                (ok(mid) ? good : bad) = mid;
            }
            phi = good;
        }

        std::vector<Vec3> out;
        out.reserve(10);
        for (int k = 0; k < 10; ++k) {
            const double l = plo + (phi - plo) * static_cast<double>(k) / 9.0;
            out.push_back(correct_point(point_at(l), vol.scale, g, ctx));
        }
        return out;
    }
    throw NoLineFoundError("corrected line segment leaves the volume");
}

}  // namespace

PlaneObservation extract_plane(const Volume& vol, const ProbeGeometry& g, const SosContext& ctx,
                               const Line2D* manual_xy, const Line2D* manual_zy) {
    PlaneObservation obs;
    for (const std::string& which : {std::string("xy"), std::string("zy")}) {
        const Line2D* manual = (which == "xy") ? manual_xy : manual_zy;
        Line2D line;
        if (manual) {
            line = *manual;
        } else {
            const Slice2D sl = extraction_slice(vol, g, which);
            line = hough_lines(sl, hough_threshold(sl));
        }
        const std::vector<Vec3> pts = sample_corrected(line, which, vol, g, ctx);
        if (which == "xy")
            obs.line_xy = line;
        else
            obs.line_zy = line;
        obs.sample_points.insert(obs.sample_points.end(), pts.begin(), pts.end());
    }
    return obs;
}

Vec3 plane_normal_from_lines(const PlaneObservation& obs, const ScaleVector& s) {
    const Vec3 dir_xy{-std::sin(obs.line_xy.theta) * s.sx, std::cos(obs.line_xy.theta) * s.sy, 0.0};
    const Vec3 dir_zy{0.0, std::cos(obs.line_zy.theta) * s.sy, -std::sin(obs.line_zy.theta) * s.sz};
    const Vec3 n = dir_xy.cross(dir_zy);
    if (n.norm() < 1e-9)
        throw DegenerateInputError("plane_normal_from_lines: line directions are parallel");
    return n.normalized();
}

}  // namespace uscalib
