#include "uscalib/io.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace uscalib {

namespace {

[[noreturn]] void fail(const std::filesystem::path& path, const std::string& what) {
    throw IoError(path.string() + ": " + what);
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::ofstream open_out(const std::filesystem::path& path, bool binary) {
    std::ofstream f(path, binary ? std::ios::binary : std::ios::out);
    if (!f) fail(path, "cannot open for writing");
    return f;
}

std::ifstream open_in(const std::filesystem::path& path, bool binary) {
    std::ifstream f(path, binary ? std::ios::binary : std::ios::in);
    if (!f) fail(path, "cannot open for reading");
    return f;
}

double parse_double(const std::filesystem::path& path, const std::string& tok) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(tok, &pos);
        if (pos != tok.size()) fail(path, "malformed number '" + tok + "'");
        return v;
    } catch (const IoError&) {
        throw;
    } catch (const std::exception&) {
        fail(path, "malformed number '" + tok + "'");
    }
}

std::vector<double> parse_doubles(const std::filesystem::path& path, const std::string& line,
                                  std::size_t expected) {
    std::istringstream ss(line);
    std::vector<double> out;
    std::string tok;
    while (ss >> tok) out.push_back(parse_double(path, tok));
    if (out.size() != expected)
        fail(path, "expected " + std::to_string(expected) + " numbers, got " +
                       std::to_string(out.size()));
    return out;
}

/// Header-style line "key value value ..."; returns false at end_header.
bool next_header_line(const std::filesystem::path& path, std::istream& in, std::string& key,
                      std::string& value) {
    std::string line;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        if (line == "end_header") return false;
        const auto sp = line.find_first_of(" \t");
        if (sp == std::string::npos) {
            key = line;
            value = "";
        } else {
            key = line.substr(0, sp);
            value = trim(line.substr(sp + 1));
        }
        return true;
    }
    fail(path, "unexpected end of file inside header");
}

void expect_magic(const std::filesystem::path& path, std::istream& in, const std::string& magic) {
    std::string line;
    if (!std::getline(in, line)) fail(path, "empty file");
    if (trim(line) != magic) fail(path, "bad magic, expected '" + magic + "'");
}

void write_matrix_lines(std::ostream& out, const std::string& key, const Mat4& m) {
    for (int r = 0; r < 4; ++r) {
        out << key;
        for (int c = 0; c < 4; ++c) out << ' ' << fmt6(m(r, c));
        out << '\n';
    }
}

/// Reads four "key a b c d" rows into a rigid transform; validates the
/// rotation block to 1e-5 (the six-decimal file format quantizes each entry
/// by up to 5e-7, which perturbs R^T R by as much as ~2e-6) and
/// re-orthonormalizes so downstream exact rigid checks hold despite the
/// fixed-point file format.
RigidTransform finish_matrix(const std::filesystem::path& path,
                             const std::vector<std::vector<double>>& rows) {
    if (rows.size() != 4) fail(path, "matrix needs exactly 4 rows");
    Mat4 m;
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) m(r, c) = rows[r][c];
    if (std::abs(m(3, 0)) > 1e-9 || std::abs(m(3, 1)) > 1e-9 || std::abs(m(3, 2)) > 1e-9 ||
        std::abs(m(3, 3) - 1.0) > 1e-9)
        fail(path, "matrix bottom row must be 0 0 0 1");
    const Mat3 r = m.topLeftCorner<3, 3>();
    const Mat3 dev = r.transpose() * r - Mat3::Identity();
    if (dev.cwiseAbs().maxCoeff() > 1e-5 || r.determinant() < 0.0)
        fail(path, "embedded rotation is not orthonormal within 1e-5");
    Eigen::JacobiSVD<Mat3> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 rot = svd.matrixU() * svd.matrixV().transpose();
    if (rot.determinant() < 0.0) {
        Mat3 flip = Mat3::Identity();
        flip(2, 2) = -1.0;
        rot = svd.matrixU() * flip * svd.matrixV().transpose();
    }
    return {rot, m.topRightCorner<3, 1>()};
}

void write_echo(std::ostream& out,
                const std::vector<std::pair<std::string, std::string>>& echo) {
    out << "config_echo_begin\n";
    for (const auto& [k, v] : echo) out << k << ' ' << v << '\n';
    out << "config_echo_end\n";
}

}  // namespace

std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

// --------------------------------------------------------------------------
// Volumes
// --------------------------------------------------------------------------

void write_volume(const std::filesystem::path& path, const Volume& vol) {
    if (vol.vox.size() != vol.voxel_count()) fail(path, "voxel payload size mismatch");
    std::ofstream f = open_out(path, true);
    f << "USVOL 1\n";
    f << "dims " << vol.dims[0] << ' ' << vol.dims[1] << ' ' << vol.dims[2] << '\n';
    f << "scale " << fmt6(vol.scale.sx) << ' ' << fmt6(vol.scale.sy) << ' ' << fmt6(vol.scale.sz)
      << '\n';
    f << "probe_origin " << fmt6(vol.probe_origin_voxel.x()) << ' '
      << fmt6(vol.probe_origin_voxel.y()) << ' ' << fmt6(vol.probe_origin_voxel.z()) << '\n';
    f << "probe_radius " << fmt6(vol.probe_radius_mm) << '\n';
    f << "temperature " << fmt6(vol.temperature_c) << '\n';
    f << "end_header\n";
    f.write(reinterpret_cast<const char*>(vol.vox.data()),
            static_cast<std::streamsize>(vol.vox.size()));
    if (!f) fail(path, "write failed");
}

Volume read_volume(const std::filesystem::path& path) {
    std::ifstream f = open_in(path, true);
    expect_magic(path, f, "USVOL 1");
    Volume vol;
    bool have_dims = false, have_scale = false, have_origin = false, have_radius = false,
         have_temp = false;
    std::string key, value;
    while (next_header_line(path, f, key, value)) {
        if (key == "dims") {
            const auto v = parse_doubles(path, value, 3);
            for (int a = 0; a < 3; ++a) {
                vol.dims[a] = static_cast<int>(v[a]);
                if (vol.dims[a] <= 0 || vol.dims[a] != v[a]) fail(path, "dims must be positive integers");
            }
            have_dims = true;
        } else if (key == "scale") {
            const auto v = parse_doubles(path, value, 3);
            if (v[0] <= 0 || v[1] <= 0 || v[2] <= 0) fail(path, "scale must be positive");
            vol.scale = ScaleVector(v[0], v[1], v[2]);
            have_scale = true;
        } else if (key == "probe_origin") {
            const auto v = parse_doubles(path, value, 3);
            vol.probe_origin_voxel = Vec3(v[0], v[1], v[2]);
            have_origin = true;
        } else if (key == "probe_radius") {
            vol.probe_radius_mm = parse_double(path, value);
            if (vol.probe_radius_mm < 0) fail(path, "probe_radius must be non-negative");
            have_radius = true;
        } else if (key == "temperature") {
            vol.temperature_c = parse_double(path, value);
            have_temp = true;
        } else {
            fail(path, "unknown header field '" + key + "'");
        }
    }
    if (!(have_dims && have_scale && have_origin && have_radius && have_temp))
        fail(path, "incomplete header");
    vol.vox.resize(vol.voxel_count());
    f.read(reinterpret_cast<char*>(vol.vox.data()), static_cast<std::streamsize>(vol.vox.size()));
    if (static_cast<std::size_t>(f.gcount()) != vol.vox.size())
        fail(path, "payload shorter than dims imply");
    char extra;
    if (f.read(&extra, 1)) fail(path, "payload longer than dims imply");
    return vol;
}

// --------------------------------------------------------------------------
// Pose logs
// --------------------------------------------------------------------------

void write_pose_log(const std::filesystem::path& path, const std::vector<PoseRecord>& records) {
    std::set<std::string> ids;
    std::ofstream f = open_out(path, false);
    f << "USPOSES 1\n";
    f << "# id tx ty tz qw qx qy qz timestamp\n";
    for (const PoseRecord& r : records) {
        if (!ids.insert(r.id).second) fail(path, "duplicate acquisition id '" + r.id + "'");
        if (r.id.find_first_of(" \t") != std::string::npos)
            fail(path, "acquisition id must not contain whitespace");
        const Eigen::Quaterniond q(r.pose.rotation());
        f << r.id << ' ' << fmt6(r.pose.translation().x()) << ' '
          << fmt6(r.pose.translation().y()) << ' ' << fmt6(r.pose.translation().z()) << ' '
          << fmt6(q.w()) << ' ' << fmt6(q.x()) << ' ' << fmt6(q.y()) << ' ' << fmt6(q.z()) << ' '
          << fmt6(r.timestamp) << '\n';
    }
    if (!f) fail(path, "write failed");
}

std::vector<PoseRecord> read_pose_log(const std::filesystem::path& path) {
    std::ifstream f = open_in(path, false);
    expect_magic(path, f, "USPOSES 1");
    std::vector<PoseRecord> out;
    std::set<std::string> ids;
    std::string line;
    while (std::getline(f, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        PoseRecord rec;
        ss >> rec.id;
        std::string rest;
        std::getline(ss, rest);
        const auto v = parse_doubles(path, rest, 8);
        if (!ids.insert(rec.id).second) fail(path, "duplicate acquisition id '" + rec.id + "'");
        Eigen::Quaterniond q(v[3], v[4], v[5], v[6]);
        if (std::abs(q.norm() - 1.0) > 1e-6)
            fail(path, "quaternion for '" + rec.id + "' is not unit within 1e-6");
        q.normalize();
        rec.pose = RigidTransform(q.toRotationMatrix(), Vec3(v[0], v[1], v[2]));
        rec.timestamp = v[7];
        out.push_back(std::move(rec));
    }
    return out;
}

// --------------------------------------------------------------------------
// Calibration files
// --------------------------------------------------------------------------

void write_calibration(const std::filesystem::path& path, const CalibrationFile& cal) {
    std::ofstream f = open_out(path, false);
    f << "USCALIB 1\n";
    f << "tool_version " << cal.tool_version << '\n';
    write_matrix_lines(f, "matrix", cal.T_U2Pr.matrix());
    f << "scale " << fmt6(cal.s.sx) << ' ' << fmt6(cal.s.sy) << ' ' << fmt6(cal.s.sz) << '\n';
    f << "rms_residual_mm " << fmt6(cal.rms_residual_mm) << '\n';
    f << "max_residual_mm " << fmt6(cal.max_residual_mm) << '\n';
    f << "converged " << (cal.converged ? 1 : 0) << '\n';
    f << "solver_restarts " << cal.solver.restarts << '\n';
    f << "solver_seed " << cal.solver.seed << '\n';
    f << "solver_max_iterations " << cal.solver.max_iterations << '\n';
    f << "solver_lambda0 " << fmt6(cal.solver.lambda0) << '\n';
    f << "solver_translation_range " << fmt6(cal.solver.translation_range) << '\n';
    write_echo(f, cal.config_echo);
    if (!f) fail(path, "write failed");
}

CalibrationFile read_calibration(const std::filesystem::path& path) {
    std::ifstream f = open_in(path, false);
    expect_magic(path, f, "USCALIB 1");
    CalibrationFile cal;
    std::vector<std::vector<double>> matrix_rows;
    std::string line;
    bool in_echo = false;
    bool have_scale = false;
    while (std::getline(f, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        if (line == "config_echo_begin") {
            in_echo = true;
            continue;
        }
        if (line == "config_echo_end") {
            in_echo = false;
            continue;
        }
        const auto sp = line.find_first_of(" \t");
        const std::string key = sp == std::string::npos ? line : line.substr(0, sp);
        const std::string value = sp == std::string::npos ? "" : trim(line.substr(sp + 1));
        if (in_echo) {
            cal.config_echo.emplace_back(key, value);
            continue;
        }
        if (key == "tool_version") cal.tool_version = value;
        else if (key == "matrix") matrix_rows.push_back(parse_doubles(path, value, 4));
        else if (key == "scale") {
            const auto v = parse_doubles(path, value, 3);
            if (v[0] <= 0 || v[1] <= 0 || v[2] <= 0) fail(path, "scale must be positive");
            cal.s = ScaleVector(v[0], v[1], v[2]);
            have_scale = true;
        } else if (key == "rms_residual_mm") cal.rms_residual_mm = parse_double(path, value);
        else if (key == "max_residual_mm") cal.max_residual_mm = parse_double(path, value);
        else if (key == "converged") cal.converged = parse_double(path, value) != 0.0;
        else if (key == "solver_restarts") cal.solver.restarts = static_cast<int>(parse_double(path, value));
        else if (key == "solver_seed") cal.solver.seed = static_cast<std::uint64_t>(parse_double(path, value));
        else if (key == "solver_max_iterations") cal.solver.max_iterations = static_cast<int>(parse_double(path, value));
        else if (key == "solver_lambda0") cal.solver.lambda0 = parse_double(path, value);
        else if (key == "solver_translation_range") cal.solver.translation_range = parse_double(path, value);
        else fail(path, "unknown field '" + key + "'");
    }
    if (!have_scale) fail(path, "missing scale");
    cal.T_U2Pr = finish_matrix(path, matrix_rows);
    return cal;
}

// --------------------------------------------------------------------------
// Pre-calibration files
// --------------------------------------------------------------------------

void write_precal(const std::filesystem::path& path, const PrecalFile& pre) {
    std::ofstream f = open_out(path, false);
    f << "USPRECAL 1\n";
    f << "tool_version " << kToolVersion << '\n';
    write_matrix_lines(f, "matrix", pre.T_Ph2M.matrix());
    f << "rms_mm " << fmt6(pre.rms_mm) << '\n';
    f << "inlier_mask";
    for (int m : pre.inlier_mask) f << ' ' << (m ? 1 : 0);
    f << '\n';
    write_echo(f, pre.config_echo);
    if (!f) fail(path, "write failed");
}

PrecalFile read_precal(const std::filesystem::path& path) {
    std::ifstream f = open_in(path, false);
    expect_magic(path, f, "USPRECAL 1");
    PrecalFile pre;
    std::vector<std::vector<double>> matrix_rows;
    std::string line;
    bool in_echo = false;
    while (std::getline(f, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        if (line == "config_echo_begin") {
            in_echo = true;
            continue;
        }
        if (line == "config_echo_end") {
            in_echo = false;
            continue;
        }
        const auto sp = line.find_first_of(" \t");
        const std::string key = sp == std::string::npos ? line : line.substr(0, sp);
        const std::string value = sp == std::string::npos ? "" : trim(line.substr(sp + 1));
        if (in_echo) {
            pre.config_echo.emplace_back(key, value);
            continue;
        }
        if (key == "tool_version") continue;
        else if (key == "matrix") matrix_rows.push_back(parse_doubles(path, value, 4));
        else if (key == "rms_mm") pre.rms_mm = parse_double(path, value);
        else if (key == "inlier_mask") {
            std::istringstream ss(value);
            std::string tok;
            while (ss >> tok) pre.inlier_mask.push_back(parse_double(path, tok) != 0.0 ? 1 : 0);
        } else fail(path, "unknown field '" + key + "'");
    }
    pre.T_Ph2M = finish_matrix(path, matrix_rows);
    return pre;
}

// --------------------------------------------------------------------------
// Bead files
// --------------------------------------------------------------------------

void write_beads(const std::filesystem::path& path, const BeadFile& beads) {
    std::ofstream f = open_out(path, false);
    f << "USBEADS 1\n";
    f << "d_b " << fmt6(beads.d_B) << '\n';
    f << "# volume_id side x y z (voxels)\n";
    for (const BeadEntry& e : beads.entries)
        f << e.volume_id << ' ' << (e.left ? "left" : "right") << ' ' << fmt6(e.voxel.x()) << ' '
          << fmt6(e.voxel.y()) << ' ' << fmt6(e.voxel.z()) << '\n';
    if (!f) fail(path, "write failed");
}

BeadFile read_beads(const std::filesystem::path& path) {
    std::ifstream f = open_in(path, false);
    expect_magic(path, f, "USBEADS 1");
    BeadFile out;
    bool have_db = false;
    std::string line;
    while (std::getline(f, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        std::string first;
        ss >> first;
        if (first == "d_b") {
            std::string rest;
            std::getline(ss, rest);
            out.d_B = parse_double(path, trim(rest));
            if (out.d_B <= 0) fail(path, "d_b must be positive");
            have_db = true;
            continue;
        }
        BeadEntry e;
        e.volume_id = first;
        std::string side, rest;
        ss >> side;
        if (side == "left") e.left = true;
        else if (side == "right") e.left = false;
        else fail(path, "bead side must be 'left' or 'right'");
        std::getline(ss, rest);
        const auto v = parse_doubles(path, rest, 3);
        e.voxel = Vec3(v[0], v[1], v[2]);
        out.entries.push_back(std::move(e));
    }
    if (!have_db) fail(path, "missing d_b");
    return out;
}

// --------------------------------------------------------------------------
// Point clouds
// --------------------------------------------------------------------------

std::vector<Vec3> read_points(const std::filesystem::path& path) {
    std::ifstream f = open_in(path, false);
    std::vector<Vec3> out;
    std::string line;
    while (std::getline(f, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto v = parse_doubles(path, line, 3);
        out.emplace_back(v[0], v[1], v[2]);
    }
    return out;
}

void write_points(const std::filesystem::path& path, const std::vector<Vec3>& points) {
    std::ofstream f = open_out(path, false);
    f << "# x y z (mm)\n";
    for (const Vec3& p : points)
        f << fmt6(p.x()) << ' ' << fmt6(p.y()) << ' ' << fmt6(p.z()) << '\n';
    if (!f) fail(path, "write failed");
}

// --------------------------------------------------------------------------
// Config
// --------------------------------------------------------------------------

Config Config::from_file(const std::filesystem::path& path) {
    std::ifstream f = open_in(path, false);
    std::stringstream ss;
    ss << f.rdbuf();
    return from_string(ss.str());
}

Config Config::from_string(const std::string& text) {
    Config cfg;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto sp = line.find_first_of(" \t=");
        std::string key = sp == std::string::npos ? line : line.substr(0, sp);
        std::string value = sp == std::string::npos ? "" : trim(line.substr(sp + 1));
        if (!value.empty() && value[0] == '=') value = trim(value.substr(1));
        cfg.set(key, value);
    }
    return cfg;
}

bool Config::has(const std::string& key) const { return index_.count(key) > 0; }

std::string Config::get(const std::string& key, const std::string& fallback) const {
    const auto it = index_.find(key);
    return it == index_.end() ? fallback : entries_[it->second].second;
}

double Config::get_double(const std::string& key, double fallback) const {
    const auto it = index_.find(key);
    if (it == index_.end()) return fallback;
    const std::string& v = entries_[it->second].second;
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw IoError("config key '" + key + "': malformed number '" + v + "'");
        return d;
    } catch (const IoError&) {
        throw;
    } catch (const std::exception&) {
        throw IoError("config key '" + key + "': malformed number '" + v + "'");
    }
}

long Config::get_long(const std::string& key, long fallback) const {
    const auto it = index_.find(key);
    if (it == index_.end()) return fallback;
    const double d = get_double(key, 0.0);
    const long l = static_cast<long>(d);
    if (static_cast<double>(l) != d)
        throw IoError("config key '" + key + "': expected an integer");
    return l;
}

void Config::set(const std::string& key, const std::string& value) {
    const auto it = index_.find(key);
    if (it == index_.end()) {
        index_[key] = entries_.size();
        entries_.emplace_back(key, value);
    } else {
        entries_[it->second].second = value;
    }
}

std::map<std::string, Line2D> Config::manual_lines() const {
    constexpr const char* kPrefix = "manual_line.";
    std::map<std::string, Line2D> out;
    for (const auto& [key, value] : entries_) {
        if (key.rfind(kPrefix, 0) != 0) continue;
        const std::string tail = key.substr(std::string(kPrefix).size());
        const auto dot = tail.rfind('.');
        if (dot == std::string::npos)
            throw IoError("config key '" + key + "': expected manual_line.<volume>.<xy|zy>");
        const std::string slice = tail.substr(dot + 1);
        if (slice != "xy" && slice != "zy")
            throw IoError("config key '" + key + "': slice must be xy or zy");
        std::istringstream ss(value);
        double rho, theta_deg;
        if (!(ss >> rho >> theta_deg))
            throw IoError("config key '" + key + "': expected 'rho theta_deg'");
        Line2D ln;
        ln.rho = rho;
        ln.theta = theta_deg * std::numbers::pi / 180.0;
        out[tail] = ln;
    }
    return out;
}

// --------------------------------------------------------------------------
// PGM
// --------------------------------------------------------------------------

void write_pgm(const std::filesystem::path& path, int width, int height,
               const std::vector<std::uint8_t>& pixels) {
    if (width <= 0 || height <= 0 ||
        pixels.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height))
        fail(path, "pixel buffer does not match dimensions");
    std::ofstream f = open_out(path, true);
    f << "P5\n" << width << ' ' << height << "\n255\n";
    f.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
    if (!f) fail(path, "write failed");
}

// --------------------------------------------------------------------------
// Reports
// --------------------------------------------------------------------------

std::string format_precision_report(const std::string& title, const PrecisionReport& report) {
    std::ostringstream out;
    out << "table " << title << '\n';
    out << "# statistic distance_mm distance_vox angle_deg\n";
    out << "rms " << fmt6(report.rms_distance_mm) << ' ' << fmt6(report.rms_distance_vox) << ' '
        << fmt6(report.rms_angle_deg) << '\n';
    out << "max " << fmt6(report.max_distance_mm) << ' ' << fmt6(report.max_distance_vox) << ' '
        << fmt6(report.max_angle_deg) << '\n';
    return out.str();
}

std::string format_accuracy_report(const std::string& title, const AccuracyReport& report) {
    std::ostringstream out;
    out << "table " << title << '\n';
    out << "# statistic distance_mm distance_vox angle_deg\n";
    out << "rms " << fmt6(report.rms_distance_mm) << ' ' << fmt6(report.rms_distance_vox) << ' '
        << fmt6(report.rms_angle_deg) << '\n';
    out << "max " << fmt6(report.max_distance_mm) << ' ' << fmt6(report.max_distance_vox) << ' '
        << fmt6(report.max_angle_deg) << '\n';
    out << "pair_count " << report.pair_count << '\n';
    return out.str();
}

std::string format_config_echo(
    const std::vector<std::pair<std::string, std::string>>& entries) {
    std::ostringstream out;
    out << "config_echo_begin\n";
    for (const auto& [k, v] : entries) out << k << ' ' << v << '\n';
    out << "config_echo_end\n";
    return out.str();
}

}  // namespace uscalib
