#include "uscalib/sim.hpp"
#include "uscalib/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace uscalib {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kPeakIntensity = 220.0;

double deg(double d) { return d * kPi / 180.0; }

/// One protocol table row: membrane orientation and anchor in metric volume
/// space.  tilt = incidence of the plane normal against the probe z axis.
struct ProtocolRow {
    double tilt_deg;
    double azimuth_deg;
    double anchor_frac;  ///< anchor along the slice-intersection axis, fraction of y extent
    double spin_deg;
};

/// Frozen twelve-step table: tilts 25-50 deg, azimuths spread over both signs
/// (kept away from 0/180 so the zy-slice trace clears the scan-head dead
/// zone), anchor fractions away from the probe origin row, spins +-60 deg.
constexpr std::array<ProtocolRow, 12> kProtocol = {{
    {32.0, 40.0, 0.30, 0.0},
    {32.0, 40.0, 0.66, 30.0},
    {32.0, -140.0, 0.27, -20.0},
    {40.0, 70.0, 0.38, 10.0},
    {40.0, -55.0, 0.64, -45.0},
    {25.0, 100.0, 0.34, 60.0},
    {25.0, -100.0, 0.66, 15.0},
    {45.0, 140.0, 0.62, -30.0},
    {45.0, -140.0, 0.36, 45.0},
    {35.0, 125.0, 0.72, 0.0},
    {50.0, 60.0, 0.32, 20.0},
    {35.0, -35.0, 0.68, -60.0},
}};

/// World(metric volume space)-to-membrane transform for one protocol row:
/// plane normal from (tilt, azimuth), anchored at the slice-intersection axis
/// so the membrane trace crosses both extraction slices.
RigidTransform membrane_world(const PhantomScene& scene, const ProtocolRow& row) {
    const double th = deg(row.tilt_deg), az = deg(row.azimuth_deg), sp = deg(row.spin_deg);
    const Vec3 n(std::sin(th) * std::cos(az), std::sin(th) * std::sin(az), std::cos(th));
    Vec3 u = Vec3::UnitX() - n * n.x();
    u.normalize();
    const Vec3 v = n.cross(u);
    Mat3 base;
    base.row(0) = u.transpose();
    base.row(1) = v.transpose();
    base.row(2) = n.transpose();
    const Mat3 R = rot_z(sp) * base;
    const Vec3 anchor(scene.g.origin_voxel.x() * scene.s.sx,
                      row.anchor_frac * (scene.volume_dims[1] - 1) * scene.s.sy,
                      scene.g.origin_voxel.z() * scene.s.sz);
    return {R, -(R * anchor)};
}

}  // namespace

PhantomScene PhantomScene::default_scene() {
    PhantomScene sc;
    EulerPose true_b;
    true_b.yaw = 0.9;
    true_b.pitch = 0.4;
    true_b.roll = -0.7;
    true_b.t = Vec3(40.0, -25.0, 60.0);
    sc.true_T_U2Pr = true_b.to_transform();

    EulerPose ph2m;
    ph2m.yaw = 0.3;
    ph2m.pitch = kPi / 4.0;
    ph2m.roll = 0.1;
    ph2m.t = Vec3(10.0, -30.0, 55.0);
    sc.T_Ph2M = ph2m.to_transform();

    sc.s = ScaleVector(0.477, 0.477, 0.477);
    sc.volume_dims = {199, 199, 199};
    sc.g = ProbeGeometry(Vec3(99.0, 99.0, 20.0), 2.0);
    sc.ctx = SosContext::at_temperature(23.0);
    return sc;
}

RigidTransform membrane_chain(const PhantomScene& scene, const RigidTransform& pose) {
    return scene.T_Ph2M * pose * scene.true_T_U2Pr;
}

std::vector<RigidTransform> protocol_poses(const PhantomScene& scene, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<RigidTransform> poses;
    poses.reserve(kProtocol.size());
    const RigidTransform inv_ph2m = scene.T_Ph2M.inverse();
    const RigidTransform inv_b = scene.true_T_U2Pr.inverse();
    for (const ProtocolRow& row : kProtocol) {
        ProtocolRow jittered = row;
        jittered.tilt_deg += rng.uniform(-1.0, 1.0);
        jittered.azimuth_deg += rng.uniform(-3.0, 3.0);
        jittered.anchor_frac += rng.uniform(-0.01, 0.01);
        jittered.spin_deg += rng.uniform(-5.0, 5.0);
        const RigidTransform w = membrane_world(scene, jittered);
        poses.push_back(inv_ph2m * w * inv_b);
    }
    return poses;
}

Volume render_volume(const PhantomScene& scene, const RigidTransform& pose,
                     const NoiseModel& noise, std::uint64_t seed) {
    Volume vol;
    vol.dims = scene.volume_dims;
    vol.scale = scene.s;
    vol.probe_origin_voxel = scene.g.origin_voxel;
    vol.probe_radius_mm = scene.g.surface_radius;
    vol.temperature_c = scene.ctx.temperature;
    vol.vox.resize(vol.voxel_count());

    Rng rng(seed);
    RigidTransform w = membrane_chain(scene, pose);
    if (noise.line_jitter > 0.0) {
        const double shift = rng.normal(0.0, noise.line_jitter * scene.s.mean());
        w = RigidTransform(w.rotation(), w.translation() + Vec3(0.0, 0.0, shift));
    }
    // Keep the per-volume stream layout fixed: one jitter draw happens
    // whenever the model carries jitter; pose noise consumes its draws in
    // logged_pose(); speckle draws follow in voxel order.

    const Vec3 w3 = w.rotation().row(2).transpose();
    const double wz = w.translation().z();
    const double sigma_mm = std::max(noise.beam_width * scene.s.mean(), 1e-9);
    const double bg = noise.background_level;
    const double k = scene.ctx.ratio();
    const bool distort = std::abs(k - 1.0) > 1e-15;
    const Vec3 o_mm = scene.s.apply(scene.g.origin_voxel);
    const double r = scene.g.surface_radius;

    // Membrane-misses-volume check over the metric cuboid corners.
    {
        bool any_near = false;
        double zmin = 1e300, zmax = -1e300;
        for (int cz = 0; cz < 2; ++cz)
            for (int cy = 0; cy < 2; ++cy)
                for (int cx = 0; cx < 2; ++cx) {
                    const Vec3 corner(cx * (vol.dims[0] - 1) * scene.s.sx,
                                      cy * (vol.dims[1] - 1) * scene.s.sy,
                                      cz * (vol.dims[2] - 1) * scene.s.sz);
                    const double z = w3.dot(corner) + wz;
                    zmin = std::min(zmin, z);
                    zmax = std::max(zmax, z);
                }
        const double near_mm = std::max(4.0 * sigma_mm, 0.5 * scene.s.mean());
        any_near = (zmin <= 0.0 && zmax >= 0.0) ||
                   std::min(std::abs(zmin), std::abs(zmax)) < near_mm;
        if (!any_near) throw EmptySceneError("membrane does not intersect the imaged volume");
    }

    std::size_t idx = 0;
    for (int z = 0; z < vol.dims[2]; ++z)
        for (int y = 0; y < vol.dims[1]; ++y)
            for (int x = 0; x < vol.dims[0]; ++x, ++idx) {
                const Vec3 q(x * scene.s.sx, y * scene.s.sy, z * scene.s.sz);
                double intensity;
                const Vec3 d = q - o_mm;
                const double rho = d.norm();
                if (rho < r) {
                    intensity = bg;  // scan-head dead zone
                } else {
                    // Inverse-map the voxel through the sectorial correction:
                    // a voxel at raw distance rho shows the scene at distance
                    // r + k (rho - r), so the membrane appears compressed and
                    // correct_point restores it exactly.
                    Vec3 qs = q;
                    if (distort && rho > 1e-12)
                        qs = o_mm + (r + k * (rho - r)) * (d / rho);
                    const double zm = w3.dot(qs) + wz;
                    if (noise.beam_width <= 0.0) {
                        // Degenerate zero-width beam: hard half-voxel membrane.
                        intensity = (std::abs(zm) < 0.5 * scene.s.mean()) ? kPeakIntensity : bg;
                    } else {
                        const double a = std::abs(zm) / sigma_mm;
                        intensity =
                            (a > 6.0) ? bg : bg + (kPeakIntensity - bg) * std::exp(-0.5 * a * a);
                    }
                }
                if (noise.speckle_sigma > 0.0)
                    intensity *= 1.0 + noise.speckle_sigma * rng.normal();
                vol.vox[idx] = static_cast<std::uint8_t>(
                    std::clamp(std::lround(intensity), 0L, 255L));
            }
    return vol;
}

RigidTransform logged_pose(const RigidTransform& true_pose, const NoiseModel& noise,
                           std::uint64_t seed) {
    if (noise.pose_noise_rms <= 0.0) return true_pose;
    // Skip the stream slots render_volume consumes first (one jitter draw when
    // enabled) so logged poses stay stable whether or not rendering happened.
    Rng rng = Rng::derive(seed, 0x706f7365ULL);  // dedicated "pose" substream
    const double sigma = noise.pose_noise_rms / std::sqrt(3.0);
    const Vec3 dt(rng.normal(0.0, sigma), rng.normal(0.0, sigma), rng.normal(0.0, sigma));
    return {true_pose.rotation(), true_pose.translation() + dt};
}

BeadPhantom BeadPhantom::default_phantom(const PhantomScene& scene) {
    // Two triangles drawn in a common tilted plane of metric volume space so
    // the six beads are exactly coplanar and the barycenter distance is an
    // exact 60 mm; mapped to phantom space through the true chain at the
    // fixed bead-experiment pose.
    const Vec3 n = Vec3(0.15, -0.10, 0.98).normalized();
    Vec3 e1 = (Vec3::UnitX() - n * n.x()).normalized();
    const Vec3 e2 = n.cross(e1);
    const Vec3 center(0.5 * (scene.volume_dims[0] - 1) * scene.s.sx,
                      0.5 * (scene.volume_dims[1] - 1) * scene.s.sy,
                      0.5 * (scene.volume_dims[2] - 1) * scene.s.sz);

    // Offsets around each barycenter sum to zero exactly; both triangles wind
    // counter-clockwise in (e1, e2) so their normals agree.
    const std::array<std::pair<double, double>, 6> uv = {{
        {-30.0 - 9.6, -8.4}, {-30.0 + 12.0, 2.4}, {-30.0 - 2.4, 6.0},   // left, barycenter (-30, 0)
        {30.0 + 7.2, -9.6}, {30.0 + 3.6, 6.0}, {30.0 - 10.8, 3.6},      // right, barycenter (30, 0)
    }};

    BeadPhantom bp;
    bp.d_B = 60.0;
    const RigidTransform pose = bead_experiment_pose(scene);
    const RigidTransform vol_to_phantom =
        pose * scene.true_T_U2Pr;  // metric volume space -> phantom space
    for (std::size_t i = 0; i < uv.size(); ++i) {
        const Vec3 p_metric = center + uv[i].first * e1 + uv[i].second * e2;
        bp.centers[i] = vol_to_phantom.apply(p_metric);
    }
    return bp;
}

RigidTransform bead_experiment_pose(const PhantomScene& scene) {
    // Any fixed pose works (the probe is immobilized); use a mild compound
    // attitude so nothing is axis-aligned by accident.
    (void)scene;
    EulerPose p;
    p.yaw = 0.25;
    p.pitch = -0.15;
    p.roll = 0.35;
    p.t = Vec3(-20.0, 35.0, 80.0);
    return p.to_transform();
}

BeadRender render_bead_volumes(const PhantomScene& scene, const BeadPhantom& bead,
                               const std::vector<RigidTransform>& poses, const NoiseModel& noise,
                               std::uint64_t seed) {
    if (poses.size() != 20)
        throw std::invalid_argument("render_bead_volumes: expected exactly 20 poses");

    BeadRender out;
    out.volumes.reserve(20);
    out.bead_voxels.reserve(20);
    out.is_left.reserve(20);

    const double bg = noise.background_level;
    const double sigma_vox = std::max(noise.beam_width, 1e-9);

    for (std::size_t j = 0; j < poses.size(); ++j) {
        const bool left = j < 10;
        Rng rng = Rng::derive(seed, 1000 + j);
        const RigidTransform to_voxmetric = (poses[j] * scene.true_T_U2Pr).inverse();

        Volume vol;
        vol.dims = scene.volume_dims;
        vol.scale = scene.s;
        vol.probe_origin_voxel = scene.g.origin_voxel;
        vol.probe_radius_mm = scene.g.surface_radius;
        vol.temperature_c = scene.ctx.temperature;
        vol.vox.assign(vol.voxel_count(),
                       static_cast<std::uint8_t>(std::clamp<long>(std::lround(bg), 0, 255)));

        std::vector<Vec3> centers_vox;
        for (int b = left ? 0 : 3, e = left ? 3 : 6; b < e; ++b) {
            const Vec3 c_metric = to_voxmetric.apply(bead.centers[b]);
            Vec3 c_vox = scene.s.unapply(c_metric);
            if (noise.line_jitter > 0.0) {
                // Centroid noise of 3-D RMS = line_jitter voxels (per-axis
                // sigma = jitter / sqrt(3), matching the pose-noise convention).
                const double sigma = noise.line_jitter / std::sqrt(3.0);
                c_vox += Vec3(rng.normal(0.0, sigma), rng.normal(0.0, sigma),
                              rng.normal(0.0, sigma));
            }
            for (int a = 0; a < 3; ++a)
                if (c_vox[a] < 3.0 || c_vox[a] > vol.dims[a] - 4.0)
                    throw PlacementError("bead falls outside the imaged volume");
            centers_vox.push_back(c_vox);
        }

        for (const Vec3& c : centers_vox) {
            const int x0 = std::max(0, static_cast<int>(std::floor(c.x() - 5 * sigma_vox)));
            const int x1 = std::min(vol.dims[0] - 1, static_cast<int>(std::ceil(c.x() + 5 * sigma_vox)));
            const int y0 = std::max(0, static_cast<int>(std::floor(c.y() - 5 * sigma_vox)));
            const int y1 = std::min(vol.dims[1] - 1, static_cast<int>(std::ceil(c.y() + 5 * sigma_vox)));
            const int z0 = std::max(0, static_cast<int>(std::floor(c.z() - 5 * sigma_vox)));
            const int z1 = std::min(vol.dims[2] - 1, static_cast<int>(std::ceil(c.z() + 5 * sigma_vox)));
            for (int z = z0; z <= z1; ++z)
                for (int y = y0; y <= y1; ++y)
                    for (int x = x0; x <= x1; ++x) {
                        const double r2 = (Vec3(x, y, z) - c).squaredNorm();
                        const double add =
                            (kPeakIntensity - bg) * std::exp(-0.5 * r2 / (sigma_vox * sigma_vox));
                        const std::size_t i = vol.index(x, y, z);
                        const double v = vol.vox[i] + add;
                        vol.vox[i] =
                            static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
                    }
        }

        if (noise.speckle_sigma > 0.0)
            for (auto& v : vol.vox) {
                const double s = v * (1.0 + noise.speckle_sigma * rng.normal());
                v = static_cast<std::uint8_t>(std::clamp(std::lround(s), 0L, 255L));
            }

        out.volumes.push_back(std::move(vol));
        out.bead_voxels.push_back(std::move(centers_vox));
        out.is_left.push_back(left);
    }
    return out;
}

Vec3 locate_blob(const Volume& vol) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < vol.vox.size(); ++i)
        if (vol.vox[i] > vol.vox[best]) best = i;

    const int bx = static_cast<int>(best % vol.dims[0]);
    const int by = static_cast<int>((best / vol.dims[0]) % vol.dims[1]);
    const int bz = static_cast<int>(best / (static_cast<std::size_t>(vol.dims[0]) * vol.dims[1]));

    const int x0 = std::max(0, bx - 2), x1 = std::min(vol.dims[0] - 1, bx + 2);
    const int y0 = std::max(0, by - 2), y1 = std::min(vol.dims[1] - 1, by + 2);
    const int z0 = std::max(0, bz - 2), z1 = std::min(vol.dims[2] - 1, bz + 2);

    int floor_i = 255;
    for (int z = z0; z <= z1; ++z)
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) floor_i = std::min<int>(floor_i, vol.at(x, y, z));

    double m = 0.0;
    Vec3 c = Vec3::Zero();
    for (int z = z0; z <= z1; ++z)
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double w = vol.at(x, y, z) - floor_i;
                m += w;
                c += w * Vec3(x, y, z);
            }
    if (m <= 0.0) return Vec3(bx, by, bz);
    return c / m;
}

}  // namespace uscalib
