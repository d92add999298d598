#include "CLI11.hpp"

#include "uscalib/detect.hpp"
#include "uscalib/geometry.hpp"
#include "uscalib/io.hpp"
#include "uscalib/metrics.hpp"
#include "uscalib/rng.hpp"
#include "uscalib/sim.hpp"
#include "uscalib/solver.hpp"
#include "uscalib/sos.hpp"
#include "uscalib/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace uscalib;

namespace {

constexpr double kPi = std::numbers::pi;

std::vector<double> split_doubles(const std::string& key, const std::string& value,
                                  std::size_t expected) {
    std::istringstream ss(value);
    std::vector<double> out;
    double v;
    while (ss >> v) out.push_back(v);
    if (out.size() != expected)
        throw std::invalid_argument("config key '" + key + "': expected " +
                                    std::to_string(expected) + " numbers");
    return out;
}

std::vector<std::pair<std::string, std::string>> make_echo(const std::string& command,
                                                           std::uint64_t seed,
                                                           const Config& cfg) {
    std::vector<std::pair<std::string, std::string>> echo;
    echo.emplace_back("command", command);
    echo.emplace_back("seed", std::to_string(seed));
    for (const auto& e : cfg.entries()) echo.push_back(e);
    return echo;
}

PhantomScene scene_from_config(const Config& cfg) {
    PhantomScene sc = PhantomScene::default_scene();
    if (cfg.has("scene.dims")) {
        const auto v = split_doubles("scene.dims", cfg.get("scene.dims", ""), 3);
        for (int a = 0; a < 3; ++a) {
            sc.volume_dims[a] = static_cast<int>(v[a]);
            if (sc.volume_dims[a] <= 0 || sc.volume_dims[a] != v[a])
                throw std::invalid_argument("config key 'scene.dims': positive integers required");
        }
    }
    if (cfg.has("scene.scale")) {
        const auto v = split_doubles("scene.scale", cfg.get("scene.scale", ""), 3);
        if (v[0] <= 0 || v[1] <= 0 || v[2] <= 0)
            throw std::invalid_argument("config key 'scene.scale': positive values required");
        sc.s = ScaleVector(v[0], v[1], v[2]);
    }
    if (cfg.has("scene.probe_origin")) {
        const auto v = split_doubles("scene.probe_origin", cfg.get("scene.probe_origin", ""), 3);
        sc.g.origin_voxel = Vec3(v[0], v[1], v[2]);
    }
    if (cfg.has("scene.probe_radius"))
        sc.g = ProbeGeometry(sc.g.origin_voxel, cfg.get_double("scene.probe_radius", 0.0));
    const double temp = cfg.get_double("scene.temperature", sc.ctx.temperature);
    const double v_tissue = cfg.get_double("sos.v_tissue", sc.ctx.v_tissue);
    sc.ctx = SosContext::at_temperature(temp, v_tissue);
    return sc;
}

NoiseModel noise_from_config(const Config& cfg) {
    NoiseModel n;
    n.pose_noise_rms = cfg.get_double("noise.pose_noise_rms", n.pose_noise_rms);
    n.line_jitter = cfg.get_double("noise.line_jitter", n.line_jitter);
    n.speckle_sigma = cfg.get_double("noise.speckle_sigma", n.speckle_sigma);
    n.background_level = cfg.get_double("noise.background_level", n.background_level);
    n.beam_width = cfg.get_double("noise.beam_width", n.beam_width);
    if (n.pose_noise_rms < 0 || n.line_jitter < 0 || n.speckle_sigma < 0 ||
        n.background_level < 0 || n.beam_width < 0)
        throw std::invalid_argument("noise.* config values must be non-negative");
    return n;
}

SolverConfig solver_from_config(const Config& cfg, std::uint64_t seed) {
    SolverConfig sc;
    sc.seed = seed;
    sc.restarts = static_cast<int>(cfg.get_long("solver.restarts", sc.restarts));
    sc.max_iterations = static_cast<int>(cfg.get_long("solver.max_iterations", sc.max_iterations));
    sc.lambda0 = cfg.get_double("solver.lambda0", sc.lambda0);
    sc.translation_range = cfg.get_double("solver.translation_range", sc.translation_range);
    if (sc.restarts < 1 || sc.max_iterations < 1 || sc.lambda0 <= 0 || sc.translation_range <= 0)
        throw std::invalid_argument("solver.* config values out of range");
    return sc;
}

std::string volume_id(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "vol_%03zu", i);
    return buf;
}

std::string bead_id(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "bead_%03zu", i);
    return buf;
}

std::vector<fs::path> list_files(const fs::path& dir, const std::string& ext) {
    if (!fs::is_directory(dir)) throw IoError(dir.string() + ": not a directory");
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

int cmd_simulate(const Config& cfg, std::uint64_t seed, const fs::path& out, bool with_beads) {
    fs::create_directories(out);
    const PhantomScene scene = scene_from_config(cfg);
    const NoiseModel noise = noise_from_config(cfg);
    const auto echo = make_echo("simulate", seed, cfg);

    const std::vector<RigidTransform> poses = protocol_poses(scene, seed);
    std::vector<PoseRecord> records;
    for (std::size_t i = 0; i < poses.size(); ++i) {
        const std::string id = volume_id(i);
        const Volume vol = render_volume(scene, poses[i], noise, derive_seed(seed, i));
        write_volume(out / (id + ".usvol"), vol);
        PoseRecord rec;
        rec.id = id;
        rec.pose = logged_pose(poses[i], noise, derive_seed(seed, i));
        rec.timestamp = 2.5 * static_cast<double>(i);
        records.push_back(std::move(rec));
    }
    write_pose_log(out / "poses.usposes", records);

    CalibrationFile truth;
    truth.T_U2Pr = scene.true_T_U2Pr;
    truth.s = scene.s;
    truth.config_echo = echo;
    write_calibration(out / "ground_truth.uscalib", truth);

    PrecalFile pre;
    pre.T_Ph2M = scene.T_Ph2M;
    pre.rms_mm = 0.0;
    pre.config_echo = echo;
    write_precal(out / "ground_truth_precal.usprecal", pre);

    std::size_t bead_count = 0;
    if (with_beads) {
        const fs::path bead_dir = out / "beads";
        fs::create_directories(bead_dir);
        const BeadPhantom bead = BeadPhantom::default_phantom(scene);
        const std::vector<RigidTransform> bead_poses(20, bead_experiment_pose(scene));
        const BeadRender br = render_bead_volumes(scene, bead, bead_poses, noise, seed);
        BeadFile bf;
        bf.d_B = bead.d_B;
        for (std::size_t j = 0; j < br.volumes.size(); ++j) {
            const std::string id = bead_id(j);
            write_volume(bead_dir / (id + ".usvol"), br.volumes[j]);
            for (const Vec3& c : br.bead_voxels[j]) {
                BeadEntry e;
                e.volume_id = id;
                e.left = br.is_left[j];
                e.voxel = c;
                bf.entries.push_back(std::move(e));
            }
        }
        write_beads(bead_dir / "beads.usbeads", bf);
        bead_count = br.volumes.size();
    }

    std::cout << "simulate: wrote " << poses.size() << " membrane volumes";
    if (with_beads) std::cout << " and " << bead_count << " bead volumes";
    std::cout << " to " << out.string() << " (seed " << seed << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------
// precalibrate
// ---------------------------------------------------------------------------

int cmd_precalibrate(const fs::path& points_path, const fs::path& out_path, const Config& cfg,
                     std::uint64_t seed) {
    const std::vector<Vec3> points = read_points(points_path);
    const PrecalibrationResult res = precalibrate_membrane(points);

    PrecalFile pre;
    pre.T_Ph2M = res.T_Ph2M;
    pre.rms_mm = res.rms;
    pre.inlier_mask.reserve(res.inlier_mask.size());
    for (bool b : res.inlier_mask) pre.inlier_mask.push_back(b ? 1 : 0);
    pre.config_echo = make_echo("precalibrate", seed, cfg);
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
    write_precal(out_path, pre);

    std::size_t inliers = 0;
    for (bool b : res.inlier_mask)
        if (b) ++inliers;
    std::cout << "precalibrate: " << points.size() << " points, " << inliers
              << " inliers, rms_mm " << fmt6(res.rms) << "\n";
    for (std::size_t i = 0; i < res.inlier_mask.size(); ++i)
        if (!res.inlier_mask[i]) std::cout << "warning: point " << i << " flagged as outlier\n";
    return 0;
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

struct LoadedVolumes {
    std::vector<PlaneObservation> observations;
    std::vector<std::string> failed_ids;
    ScaleVector s{1.0, 1.0, 1.0};
};

LoadedVolumes load_and_extract(const fs::path& volumes_dir, const fs::path& poses_path,
                               const Config& cfg, bool strict_poses) {
    const std::vector<PoseRecord> records = read_pose_log(poses_path);
    std::map<std::string, const PoseRecord*> by_id;
    for (const PoseRecord& r : records) by_id[r.id] = &r;

    const std::vector<fs::path> files = list_files(volumes_dir, ".usvol");
    if (files.empty()) throw IoError(volumes_dir.string() + ": no .usvol files");
    const auto manual = cfg.manual_lines();
    const double v_tissue = cfg.get_double("sos.v_tissue", 1540.0);

    LoadedVolumes out;
    bool have_scale = false;
    for (const fs::path& f : files) {
        const std::string id = f.stem().string();
        const auto rec = by_id.find(id);
        if (rec == by_id.end()) {
            if (strict_poses)
                throw IoError(poses_path.string() + ": no pose record for volume '" + id + "'");
            std::cout << "warning: no pose record for volume '" << id << "', skipped\n";
            continue;
        }
        const Volume vol = read_volume(f);
        if (!have_scale) {
            out.s = vol.scale;
            have_scale = true;
        } else if (std::abs(vol.scale.sx - out.s.sx) > 1e-12 ||
                   std::abs(vol.scale.sy - out.s.sy) > 1e-12 ||
                   std::abs(vol.scale.sz - out.s.sz) > 1e-12) {
            throw std::invalid_argument("volume '" + id + "' disagrees on voxel scale");
        }
        const ProbeGeometry g(vol.probe_origin_voxel, vol.probe_radius_mm);
        const SosContext ctx = SosContext::at_temperature(vol.temperature_c, v_tissue);
        const auto mxy = manual.find(id + ".xy");
        const auto mzy = manual.find(id + ".zy");
        try {
            PlaneObservation obs =
                extract_plane(vol, g, ctx, mxy == manual.end() ? nullptr : &mxy->second,
                              mzy == manual.end() ? nullptr : &mzy->second);
            obs.pose = rec->second->pose;
            obs.volume_id = id;
            out.observations.push_back(std::move(obs));
        } catch (const NoLineFoundError& e) {
            std::cout << "warning: membrane detection failed for '" << id << "': " << e.what()
                      << "\n";
            out.failed_ids.push_back(id);
        }
    }
    if (out.observations.empty())
        throw NoLineFoundError("membrane detection failed in every volume");
    return out;
}

int cmd_calibrate(const fs::path& volumes_dir, const fs::path& poses_path,
                  const fs::path& precal_path, const Config& cfg, std::uint64_t seed,
                  const fs::path& out) {
    fs::create_directories(out);
    const PrecalFile pre = read_precal(precal_path);
    LoadedVolumes loaded = load_and_extract(volumes_dir, poses_path, cfg, true);

    CalibrationProblem problem;
    problem.observations = std::move(loaded.observations);
    problem.T_Ph2M = pre.T_Ph2M;
    problem.s = loaded.s;

    const SolverConfig sc = solver_from_config(cfg, seed);
    const CalibrationResult result = solve(problem, sc);
    const PrecisionReport report = feature_precision(problem.observations, result, problem);
    const auto echo = make_echo("calibrate", seed, cfg);

    CalibrationFile cal;
    cal.T_U2Pr = result.T_U2Pr;
    cal.s = problem.s;
    cal.rms_residual_mm = result.rms_residual;
    cal.max_residual_mm = result.max_residual;
    cal.converged = result.converged;
    cal.solver = sc;
    cal.config_echo = echo;
    write_calibration(out / "calibration.uscalib", cal);

    std::ostringstream rep;
    rep << format_precision_report("feature_precision", report);
    for (std::size_t i = 0; i < problem.observations.size(); ++i)
        rep << "observation " << problem.observations[i].volume_id << " rms_mm "
            << fmt6(result.per_observation_rms[i]) << '\n';
    for (const std::string& id : loaded.failed_ids) rep << "warning detection_failed " << id << '\n';
    rep << "rms_residual_mm " << fmt6(result.rms_residual) << '\n';
    rep << "max_residual_mm " << fmt6(result.max_residual) << '\n';
    rep << "converged " << (result.converged ? 1 : 0) << '\n';
    rep << "condition_flag " << (result.diagnostics.condition_flag ? 1 : 0) << '\n';
    rep << format_config_echo(echo);
    {
        std::ofstream f(out / "report.txt");
        if (!f) throw IoError((out / "report.txt").string() + ": cannot open for writing");
        f << rep.str();
    }
    std::cout << rep.str();
    std::cout << "calibrate: wrote " << (out / "calibration.uscalib").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// backtest
// ---------------------------------------------------------------------------

/// In-slice radial SoS correction (distorted/raw -> corrected metric), valid
/// because both extraction slices contain the scan-head origin.
struct SliceSos {
    double ou, ov;  ///< in-slice origin, metric mm
    double r;       ///< scan-head radius, mm
    double ratio;   ///< v_tissue / v_water

    std::optional<std::pair<double, double>> correct(double u, double v) const {
        const double du = u - ou, dv = v - ov;
        const double d = std::hypot(du, dv);
        if (d <= r + 1e-9) return std::nullopt;
        const double dc = r + ratio * (d - r);
        return std::make_pair(ou + du * dc / d, ov + dv * dc / d);
    }
    std::optional<std::pair<double, double>> uncorrect(double u, double v) const {
        const double du = u - ou, dv = v - ov;
        const double d = std::hypot(du, dv);
        if (d <= r + 1e-9) return std::nullopt;
        const double draw = r + (d - r) / ratio;
        return std::make_pair(ou + du * draw / d, ov + dv * draw / d);
    }
};

void canonicalize(double& rho, double& theta) {
    theta = std::fmod(theta, 2.0 * kPi);
    if (theta < 0) theta += 2.0 * kPi;
    if (theta >= kPi) {
        theta -= kPi;
        rho = -rho;
    }
}

/// Total-least-squares line through metric points: returns (rho_mm, theta).
Line2D fit_line_metric(const std::vector<std::pair<double, double>>& pts) {
    double mu = 0, mv = 0;
    for (const auto& [u, v] : pts) {
        mu += u;
        mv += v;
    }
    mu /= static_cast<double>(pts.size());
    mv /= static_cast<double>(pts.size());
    double suu = 0, suv = 0, svv = 0;
    for (const auto& [u, v] : pts) {
        suu += (u - mu) * (u - mu);
        suv += (u - mu) * (v - mv);
        svv += (v - mv) * (v - mv);
    }
    // Smallest eigenvector of [[suu, suv], [suv, svv]] is the line normal.
    const double tr = suu + svv;
    const double det = suu * svv - suv * suv;
    const double lam = 0.5 * tr - std::sqrt(std::max(0.25 * tr * tr - det, 0.0));
    double nx, ny;
    if (std::abs(suv) > 1e-15) {
        nx = lam - svv;
        ny = suv;
    } else if (suu <= svv) {
        nx = 1;
        ny = 0;
    } else {
        nx = 0;
        ny = 1;
    }
    const double nn = std::hypot(nx, ny);
    Line2D out;
    out.theta = std::atan2(ny / nn, nx / nn);
    out.rho = (nx * mu + ny * mv) / nn;
    canonicalize(out.rho, out.theta);
    return out;
}

struct SliceDelta {
    std::string volume_id, slice;
    double distance_mm = 0.0, angle_deg = 0.0;
};

int cmd_backtest(const fs::path& volumes_dir, const fs::path& poses_path,
                 const fs::path& precal_path, const fs::path& calib_path, const Config& cfg,
                 std::uint64_t seed, const fs::path& out) {
    fs::create_directories(out);
    const CalibrationFile cal = read_calibration(calib_path);
    const PrecalFile pre = read_precal(precal_path);
    const std::vector<PoseRecord> records = read_pose_log(poses_path);
    std::map<std::string, const PoseRecord*> by_id;
    for (const PoseRecord& r : records) by_id[r.id] = &r;
    const auto manual = cfg.manual_lines();
    const double v_tissue = cfg.get_double("sos.v_tissue", 1540.0);

    const std::vector<fs::path> files = list_files(volumes_dir, ".usvol");
    if (files.empty()) throw IoError(volumes_dir.string() + ": no .usvol files");

    std::vector<SliceDelta> deltas;
    for (const fs::path& f : files) {
        const std::string id = f.stem().string();
        const auto rec = by_id.find(id);
        if (rec == by_id.end()) {
            std::cout << "warning: no pose record for volume '" << id << "', skipped\n";
            continue;
        }
        const Volume vol = read_volume(f);
        const ProbeGeometry g(vol.probe_origin_voxel, vol.probe_radius_mm);
        const SosContext ctx = SosContext::at_temperature(vol.temperature_c, v_tissue);
        const RigidTransform chain = pre.T_Ph2M * rec->second->pose * cal.T_U2Pr;
        const Vec3 n = chain.rotation().row(2).transpose();
        const double tz = chain.translation().z();

        for (const std::string slice_name : {std::string("xy"), std::string("zy")}) {
            const Slice2D slice = extraction_slice(vol, g, slice_name);

            // Predicted line in corrected metric in-slice coordinates.
            double a, b, c0, fixed_mm, ou, ov;
            if (slice_name == "xy") {
                const double z0 = std::round(g.origin_voxel.z());
                fixed_mm = z0 * vol.scale.sz;
                a = n.x();
                b = n.y();
                c0 = n.z() * fixed_mm + tz;
                ou = g.origin_voxel.x() * vol.scale.sx;
                ov = g.origin_voxel.y() * vol.scale.sy;
            } else {
                const double x0 = std::round(g.origin_voxel.x());
                fixed_mm = x0 * vol.scale.sx;
                a = n.z();  // columns are volume z
                b = n.y();
                c0 = n.x() * fixed_mm + tz;
                ou = g.origin_voxel.z() * vol.scale.sz;
                ov = g.origin_voxel.y() * vol.scale.sy;
            }
            const double nn = std::hypot(a, b);
            if (nn < 1e-9) {
                std::cout << "warning: plane nearly parallel to slice " << id << "/" << slice_name
                          << ", skipped\n";
                continue;
            }
            Line2D pred;
            pred.theta = std::atan2(b / nn, a / nn);
            pred.rho = -c0 / nn;
            canonicalize(pred.rho, pred.theta);

            // Detected line (raw pixels), manual override honoured.
            Line2D det;
            const auto m = manual.find(id + "." + slice_name);
            if (m != manual.end()) {
                det = m->second;
            } else {
                try {
                    det = hough_lines(slice, hough_threshold(slice));
                } catch (const NoLineFoundError& e) {
                    std::cout << "warning: detection failed for " << id << "/" << slice_name
                              << ": " << e.what() << "\n";
                    continue;
                }
            }

            // Sample the detected line, correct into metric space, refit.
            const SliceSos sos{ou, ov, g.surface_radius, ctx.ratio()};
            std::vector<std::pair<double, double>> corrected;
            for (const auto& [px, py] : sample_line_segment(det, slice.width, slice.height, 64)) {
                const auto c = sos.correct(px * slice.scale_x, py * slice.scale_y);
                if (c) corrected.push_back(*c);
            }
            if (corrected.size() < 2) {
                std::cout << "warning: detected line lies inside the dead zone for " << id << "/"
                          << slice_name << ", skipped\n";
                continue;
            }
            const Line2D det_mm = fit_line_metric(corrected);

            // Angle delta: acute angle between the two line normals.
            double dth = det_mm.theta - pred.theta;
            while (dth > kPi / 2) dth -= kPi;
            while (dth < -kPi / 2) dth += kPi;
            // Distance delta: predicted-line residual at the detected points'
            // centroid (where the membrane actually was measured).
            double cu = 0, cv = 0;
            for (const auto& [u, v] : corrected) {
                cu += u;
                cv += v;
            }
            cu /= static_cast<double>(corrected.size());
            cv /= static_cast<double>(corrected.size());
            const double dist =
                std::abs(std::cos(pred.theta) * cu + std::sin(pred.theta) * cv - pred.rho);

            SliceDelta d;
            d.volume_id = id;
            d.slice = slice_name;
            d.distance_mm = dist;
            d.angle_deg = std::abs(dth) * 180.0 / kPi;
            deltas.push_back(d);

            // Overlay: detected line at 200, predicted (inverse-distorted back
            // into raw pixel space) burned at 255.
            std::vector<std::uint8_t> img = slice.px;
            auto burn = [&](double col, double row, std::uint8_t val) {
                const long x = std::lround(col), y = std::lround(row);
                if (x >= 0 && x < slice.width && y >= 0 && y < slice.height)
                    img[static_cast<std::size_t>(y) * slice.width + x] =
                        std::max(img[static_cast<std::size_t>(y) * slice.width + x], val);
            };
            const double diag = std::hypot(slice.width, slice.height);
            for (double t = -diag; t <= diag; t += 0.25) {
                const double dx = det.rho * std::cos(det.theta) - t * std::sin(det.theta);
                const double dy = det.rho * std::sin(det.theta) + t * std::cos(det.theta);
                burn(dx, dy, 200);
            }
            const double diag_mm = diag * std::max(slice.scale_x, slice.scale_y);
            const double step_mm = 0.25 * std::min(slice.scale_x, slice.scale_y);
            for (double t = -diag_mm; t <= diag_mm; t += step_mm) {
                const double u = pred.rho * std::cos(pred.theta) - t * std::sin(pred.theta);
                const double v = pred.rho * std::sin(pred.theta) + t * std::cos(pred.theta);
                const auto raw = sos.uncorrect(u, v);
                if (raw) burn(raw->first / slice.scale_x, raw->second / slice.scale_y, 255);
            }
            write_pgm(out / (id + "_" + slice_name + ".pgm"), slice.width, slice.height, img);
        }
    }
    if (deltas.empty()) throw NoLineFoundError("back-test produced no usable slice");

    std::ostringstream rep;
    rep << "# volume slice distance_mm angle_deg\n";
    double dmax = 0, amax = 0;
    for (const SliceDelta& d : deltas) {
        rep << d.volume_id << ' ' << d.slice << ' ' << fmt6(d.distance_mm) << ' '
            << fmt6(d.angle_deg) << '\n';
        dmax = std::max(dmax, d.distance_mm);
        amax = std::max(amax, d.angle_deg);
    }
    rep << "max_distance_mm " << fmt6(dmax) << '\n';
    rep << "max_angle_deg " << fmt6(amax) << '\n';
    rep << format_config_echo(make_echo("backtest", seed, cfg));
    {
        std::ofstream f(out / "backtest.txt");
        if (!f) throw IoError((out / "backtest.txt").string() + ": cannot open for writing");
        f << rep.str();
    }
    std::cout << rep.str();
    return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

int cmd_evaluate(const fs::path& calibs_dir, const fs::path& beads_path, const Config& cfg,
                 std::uint64_t seed, const fs::path& out) {
    fs::create_directories(out);
    const std::vector<fs::path> files = list_files(calibs_dir, ".uscalib");
    if (files.size() < 2)
        throw InsufficientDataError("evaluate: need at least 2 calibration files, found " +
                                    std::to_string(files.size()));

    std::vector<CalibrationResult> results;
    ScaleVector s{1.0, 1.0, 1.0};
    for (std::size_t i = 0; i < files.size(); ++i) {
        const CalibrationFile cal = read_calibration(files[i]);
        if (i == 0) s = cal.s;
        else if (std::abs(cal.s.sx - s.sx) > 1e-9 || std::abs(cal.s.sy - s.sy) > 1e-9 ||
                 std::abs(cal.s.sz - s.sz) > 1e-9)
            throw std::invalid_argument("calibration files disagree on voxel scale");
        CalibrationResult r;
        r.T_U2Pr = cal.T_U2Pr;
        results.push_back(std::move(r));
    }

    std::array<int, 3> dims = {199, 199, 199};
    if (cfg.has("scene.dims")) {
        const auto v = split_doubles("scene.dims", cfg.get("scene.dims", ""), 3);
        for (int a = 0; a < 3; ++a) dims[a] = static_cast<int>(v[a]);
    }

    const PrecisionReport precision = calibration_precision(results, s, dims);
    std::ostringstream rep;
    rep << format_precision_report("calibration_precision", precision);
    rep << "calibration_count " << results.size() << '\n';

    if (!beads_path.empty()) {
        const BeadFile bf = read_beads(beads_path);
        std::map<std::string, std::vector<Vec3>> left_by_id, right_by_id;
        for (const BeadEntry& e : bf.entries) {
            auto& other = e.left ? right_by_id : left_by_id;
            if (other.count(e.volume_id))
                throw IoError(beads_path.string() + ": volume '" + e.volume_id +
                              "' mixes left and right beads");
            (e.left ? left_by_id : right_by_id)[e.volume_id].push_back(e.voxel);
        }
        std::vector<std::vector<Vec3>> left_sets, right_sets;
        for (auto& [id, v] : left_by_id) left_sets.push_back(std::move(v));
        for (auto& [id, v] : right_by_id) right_sets.push_back(std::move(v));

        const std::string pairing = cfg.get("reconstruction.pairing", "index_matched");
        PairingMode mode;
        if (pairing == "index_matched") mode = PairingMode::index_matched;
        else if (pairing == "cross_product") mode = PairingMode::cross_product;
        else
            throw std::invalid_argument(
                "config key 'reconstruction.pairing': expected index_matched or cross_product");
        const AccuracyReport acc =
            reconstruction_accuracy(left_sets, right_sets, results, bf.d_B, s, mode);
        rep << format_accuracy_report("reconstruction_accuracy", acc);
    } else {
        rep << "# reconstruction_accuracy skipped: no bead data supplied\n";
    }
    rep << format_config_echo(make_echo("evaluate", seed, cfg));
    {
        std::ofstream f(out / "evaluation.txt");
        if (!f) throw IoError((out / "evaluation.txt").string() + ": cannot open for writing");
        f << rep.str();
    }
    std::cout << rep.str();
    return 0;
}

// ---------------------------------------------------------------------------

int run_guarded(const std::function<int()>& body) {
    try {
        return body();
    } catch (const SolverFailure& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    } catch (const NoLineFoundError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const SosRangeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 6;
    } catch (const SosGeometryError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 6;
    } catch (const DegenerateInputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 6;
    } catch (const InsufficientDataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 6;
    } catch (const EmptySceneError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 6;
    } catch (const PlacementError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 6;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 6;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"3-D freehand ultrasound probe calibration toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_dir = ".", volumes_dir, poses_path, precal_path, calib_path,
                calibs_dir, beads_path, points_path;
    std::uint64_t seed = 1;
    bool with_beads = false;

    CLI::App* sim = app.add_subcommand("simulate", "Render a synthetic calibration session");
    sim->add_option("--config", config_path, "flat key-value config file");
    sim->add_option("--seed", seed, "RNG seed (default 1)");
    sim->add_option("--out", out_dir, "output directory")->required();
    sim->add_flag("--beads", with_beads, "also render the 20 bead-phantom volumes");

    CLI::App* prec = app.add_subcommand("precalibrate", "Fit the membrane plane to surface points");
    prec->add_option("points", points_path, "text file of x y z surface points (mm)")->required();
    prec->add_option("--config", config_path, "flat key-value config file");
    prec->add_option("--seed", seed, "RNG seed (echo only)");
    prec->add_option("--out", out_dir, "output pre-calibration file")->required();

    CLI::App* cab = app.add_subcommand("calibrate", "Solve the probe calibration from volumes");
    cab->add_option("--volumes", volumes_dir, "directory of .usvol files")->required();
    cab->add_option("--poses", poses_path, "pose log file")->required();
    cab->add_option("--precalib", precal_path, "pre-calibration file")->required();
    cab->add_option("--config", config_path, "flat key-value config file");
    cab->add_option("--seed", seed, "solver restart seed (default 1)");
    cab->add_option("--out", out_dir, "output directory");

    CLI::App* back = app.add_subcommand("backtest", "Overlay the solved plane onto the slices");
    back->add_option("--volumes", volumes_dir, "directory of .usvol files")->required();
    back->add_option("--poses", poses_path, "pose log file")->required();
    back->add_option("--precalib", precal_path, "pre-calibration file")->required();
    back->add_option("--calib", calib_path, "calibration file")->required();
    back->add_option("--config", config_path, "flat key-value config file");
    back->add_option("--seed", seed, "RNG seed (echo only)");
    back->add_option("--out", out_dir, "output directory");

    CLI::App* eval = app.add_subcommand("evaluate", "Precision and accuracy reports");
    eval->add_option("--calibs", calibs_dir, "directory of .uscalib files")->required();
    eval->add_option("--beads", beads_path, "bead coordinate file (.usbeads)");
    eval->add_option("--config", config_path, "flat key-value config file");
    eval->add_option("--seed", seed, "RNG seed (echo only)");
    eval->add_option("--out", out_dir, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    return run_guarded([&]() -> int {
        Config cfg;
        if (!config_path.empty()) cfg = Config::from_file(config_path);
        if (sim->parsed()) return cmd_simulate(cfg, seed, out_dir, with_beads);
        if (prec->parsed()) return cmd_precalibrate(points_path, out_dir, cfg, seed);
        if (cab->parsed())
            return cmd_calibrate(volumes_dir, poses_path, precal_path, cfg, seed, out_dir);
        if (back->parsed())
            return cmd_backtest(volumes_dir, poses_path, precal_path, calib_path, cfg, seed,
                                out_dir);
        if (eval->parsed())
            return cmd_evaluate(calibs_dir, beads_path.empty() ? fs::path() : fs::path(beads_path),
                                cfg, seed, out_dir);
        return 2;
    });
}
