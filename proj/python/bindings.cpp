#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "uscalib/detect.hpp"
#include "uscalib/geometry.hpp"
#include "uscalib/sos.hpp"

namespace py = pybind11;
using namespace uscalib;

namespace {

Vec3 to_vec3(const std::array<double, 3>& a) { return Vec3(a[0], a[1], a[2]); }
std::array<double, 3> from_vec3(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

Slice2D slice_from_array(const py::array_t<std::uint8_t>& img) {
    const auto buf = img.request();
    if (buf.ndim != 2) throw std::invalid_argument("image must be a 2-D uint8 array");
    Slice2D s;
    s.height = static_cast<int>(buf.shape[0]);
    s.width = static_cast<int>(buf.shape[1]);
    s.px.resize(static_cast<std::size_t>(s.width) * s.height);
    const auto view = img.unchecked<2>();
    for (int r = 0; r < s.height; ++r)
        for (int c = 0; c < s.width; ++c) s.at(r, c) = view(r, c);
    return s;
}

}  // namespace

PYBIND11_MODULE(_uscalib, m) {
    m.doc() = "3-D ultrasound probe calibration core";

    m.def("water_sos", &water_sos, py::arg("temperature_celsius"),
          "Speed of sound in pure water (m/s), valid for 0..74 C");

    m.def(
        "correct_point",
        [](const std::array<double, 3>& p, const std::array<double, 3>& scale,
           const std::array<double, 3>& origin, double radius, double temperature,
           double v_tissue) {
            const ScaleVector s(scale[0], scale[1], scale[2]);
            const ProbeGeometry g(to_vec3(origin), radius);
            const SosContext ctx = SosContext::at_temperature(temperature, v_tissue);
            return from_vec3(correct_point(to_vec3(p), s, g, ctx));
        },
        py::arg("p_voxel"), py::arg("scale"), py::arg("origin_voxel"), py::arg("radius_mm"),
        py::arg("temperature_c"), py::arg("v_tissue") = 1540.0,
        "Sectorial speed-of-sound correction of a voxel-space point");

    m.def(
        "euler_to_matrix",
        [](double yaw, double pitch, double roll, const std::array<double, 3>& t) {
            EulerPose p;
            p.yaw = yaw;
            p.pitch = pitch;
            p.roll = roll;
            p.t = to_vec3(t);
            const Mat4 m4 = p.to_transform().matrix();
            py::array_t<double> out({4, 4});
            auto view = out.mutable_unchecked<2>();
            for (int r = 0; r < 4; ++r)
                for (int c = 0; c < 4; ++c) view(r, c) = m4(r, c);
            return out;
        },
        py::arg("yaw"), py::arg("pitch"), py::arg("roll"), py::arg("t"),
        "Intrinsic Z-Y-X Euler pose to a 4x4 row-major rigid matrix");

    m.def(
        "matrix_to_euler",
        [](const py::array_t<double>& m) {
            const auto buf = m.request();
            if (buf.ndim != 2 || buf.shape[0] != 4 || buf.shape[1] != 4)
                throw std::invalid_argument("matrix must be 4x4");
            Mat4 m4;
            const auto view = m.unchecked<2>();
            for (int r = 0; r < 4; ++r)
                for (int c = 0; c < 4; ++c) m4(r, c) = view(r, c);
            const EulerPose p = EulerPose::from_transform(RigidTransform::from_matrix(m4));
            return py::make_tuple(p.yaw, p.pitch, p.roll, from_vec3(p.t));
        },
        py::arg("matrix"), "4x4 rigid matrix to (yaw, pitch, roll, t)");

    m.def(
        "fit_plane_robust",
        [](const std::vector<std::array<double, 3>>& pts) {
            std::vector<Vec3> v;
            v.reserve(pts.size());
            for (const auto& p : pts) v.push_back(to_vec3(p));
            const PlaneFitReport rep = fit_plane_robust(v);
            std::vector<bool> mask(rep.inlier_mask.begin(), rep.inlier_mask.end());
            return py::make_tuple(from_vec3(rep.plane.normal), rep.plane.offset, rep.rms_inliers,
                                  mask);
        },
        py::arg("points"), "Robust plane fit: (normal, offset, rms_inliers, inlier_mask)");

    m.def(
        "hough_threshold",
        [](const py::array_t<std::uint8_t>& img) { return hough_threshold(slice_from_array(img)); },
        py::arg("image"), "Histogram-mode intensity threshold s_H");

    m.def(
        "hough_lines",
        [](const py::array_t<std::uint8_t>& img, double s_H) {
            const Line2D ln = hough_lines(slice_from_array(img), s_H);
            return py::make_tuple(ln.rho, ln.theta);
        },
        py::arg("image"), py::arg("s_h"), "Dominant line as (rho, theta)");

    m.def(
        "compose",
        [](const py::array_t<double>& a, const py::array_t<double>& b) {
            auto to_rt = [](const py::array_t<double>& m) {
                Mat4 m4;
                const auto view = m.unchecked<2>();
                for (int r = 0; r < 4; ++r)
                    for (int c = 0; c < 4; ++c) m4(r, c) = view(r, c);
                return RigidTransform::from_matrix(m4);
            };
            const Mat4 m4 = (to_rt(a) * to_rt(b)).matrix();
            py::array_t<double> out({4, 4});
            auto view = out.mutable_unchecked<2>();
            for (int r = 0; r < 4; ++r)
                for (int c = 0; c < 4; ++c) view(r, c) = m4(r, c);
            return out;
        },
        py::arg("a"), py::arg("b"), "Compose two rigid 4x4 matrices (a then applied after b)");

    m.def(
        "apply",
        [](const py::array_t<double>& m, const std::array<double, 3>& p) {
            Mat4 m4;
            const auto view = m.unchecked<2>();
            for (int r = 0; r < 4; ++r)
                for (int c = 0; c < 4; ++c) m4(r, c) = view(r, c);
            return from_vec3(RigidTransform::from_matrix(m4).apply(to_vec3(p)));
        },
        py::arg("matrix"), py::arg("p"), "Apply a rigid 4x4 matrix to a 3-vector");
}
