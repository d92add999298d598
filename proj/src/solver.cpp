#include "uscalib/solver.hpp"
#include "uscalib/rng.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <limits>
#include <numbers>

namespace uscalib {

namespace {

constexpr double kPi = std::numbers::pi;

/// Per-observation constants of the residual: the third row of A = T_Ph2M * T_Pr2Ph.
struct ObsRow {
    Vec3 a3;      ///< third row of A's rotation
    double a34;   ///< z component of A's translation
    std::vector<Vec3> q;  ///< scaled sample points, mm
};

std::vector<ObsRow> build_rows(const CalibrationProblem& problem) {
    std::vector<ObsRow> rows;
    rows.reserve(problem.observations.size());
    for (const PlaneObservation& obs : problem.observations) {
        const RigidTransform A = problem.T_Ph2M * obs.pose;
        ObsRow row;
        row.a3 = A.rotation().row(2).transpose();
        row.a34 = A.translation().z();
        row.q.reserve(obs.sample_points.size());
        for (const Vec3& p : obs.sample_points) row.q.push_back(problem.s.apply(p));
        rows.push_back(std::move(row));
    }
    return rows;
}

std::size_t total_points(const std::vector<ObsRow>& rows) {
    std::size_t n = 0;
    for (const ObsRow& r : rows) n += r.q.size();
    return n;
}

Mat3 drot_x(double a) {
    Mat3 m;
    m << 0, 0, 0, 0, -std::sin(a), -std::cos(a), 0, std::cos(a), -std::sin(a);
    return m;
}

Mat3 drot_y(double a) {
    Mat3 m;
    m << -std::sin(a), 0, std::cos(a), 0, 0, 0, -std::cos(a), 0, -std::sin(a);
    return m;
}

Mat3 drot_z(double a) {
    Mat3 m;
    m << -std::sin(a), -std::cos(a), 0, std::cos(a), -std::sin(a), 0, 0, 0, 0;
    return m;
}

using Vector6 = Eigen::Matrix<double, 6, 1>;
using Matrix6 = Eigen::Matrix<double, 6, 6>;

EulerPose pose_from(const Vector6& x) {
    EulerPose b;
    b.yaw = x[0];
    b.pitch = x[1];
    b.roll = x[2];
    b.t = Vec3(x[3], x[4], x[5]);
    return b;
}

/// Rotation and its three angle derivatives for the current parameters.
struct RotBundle {
    Mat3 R, dyaw, dpitch, droll;
    explicit RotBundle(const Vector6& x) {
        const Mat3 Rz = rot_z(x[0]), Ry = rot_y(x[1]), Rx = rot_x(x[2]);
        R = Rz * Ry * Rx;
        dyaw = drot_z(x[0]) * Ry * Rx;
        dpitch = Rz * drot_y(x[1]) * Rx;
        droll = Rz * Ry * drot_x(x[2]);
    }
};

double sum_squares(const std::vector<ObsRow>& rows, const Vector6& x) {
    const Mat3 R = rot_z(x[0]) * rot_y(x[1]) * rot_x(x[2]);
    const Vec3 t(x[3], x[4], x[5]);
    double ssq = 0.0;
    for (const ObsRow& row : rows)
        for (const Vec3& q : row.q) {
            const double e = row.a3.dot(R * q + t) + row.a34;
            ssq += e * e;
        }
    return ssq;
}

/// One Levenberg-Marquardt descent from x0.  Returns (x, objective, converged).
struct LmOutcome {
    Vector6 x;
    double objective;
    bool converged;
};

/// Closed-form seeds from the per-observation plane fits.  Each observation
/// constrains R^T a_i = ±n_i (a_i: membrane normal mapped through A_i, n_i:
/// fitted plane normal in metric US space) and a_i^T (R c_i + t) = -d_i.
/// Relative signs follow from pairwise consistency (n_i·n_j must match
/// a_i·a_j); the global sign is the mirrored-probe twin and cannot be
/// resolved from plane data alone, so both rotations (Wahba via Kabsch/SVD)
/// with their linear least-squares translations are returned.
std::vector<Vector6> closed_form_seeds(const std::vector<ObsRow>& rows) {
    struct Fit {
        Vec3 a, n, c;
        double d;
    };
    std::vector<Fit> fits;
    for (const ObsRow& row : rows) {
        if (row.q.size() < 3) continue;
        Vec3 c = Vec3::Zero();
        for (const Vec3& q : row.q) c += q;
        c /= static_cast<double>(row.q.size());
        Mat3 scatter = Mat3::Zero();
        for (const Vec3& q : row.q) scatter += (q - c) * (q - c).transpose();
        const Eigen::SelfAdjointEigenSolver<Mat3> eig(scatter);
        if (eig.info() != Eigen::Success) continue;
        fits.push_back({row.a3, eig.eigenvectors().col(0), c, row.a34});
    }
    if (fits.size() < 3) return {};

    std::vector<double> sign(fits.size(), 1.0);
    for (std::size_t j = 1; j < fits.size(); ++j) {
        double agree = 0.0;
        for (std::size_t k = 0; k < j; ++k)
            agree += sign[k] * fits[j].n.dot(fits[k].n) * fits[j].a.dot(fits[k].a);
        if (agree < 0.0) sign[j] = -1.0;
    }

    std::vector<Vector6> seeds;
    for (const double flip : {1.0, -1.0}) {
        Mat3 gain = Mat3::Zero();
        for (std::size_t i = 0; i < fits.size(); ++i)
            gain += fits[i].a * (flip * sign[i] * fits[i].n).transpose();
        const Eigen::JacobiSVD<Mat3> svd(gain, Eigen::ComputeFullU | Eigen::ComputeFullV);
        Mat3 fix = Mat3::Identity();
        fix(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant();
        const Mat3 R = svd.matrixU() * fix * svd.matrixV().transpose();

        Eigen::Matrix<double, Eigen::Dynamic, 3> lhs(fits.size(), 3);
        Eigen::VectorXd rhs(fits.size());
        for (std::size_t i = 0; i < fits.size(); ++i) {
            lhs.row(i) = fits[i].a.transpose();
            rhs[static_cast<Eigen::Index>(i)] = -fits[i].d - fits[i].a.dot(R * fits[i].c);
        }
        const Vec3 t = lhs.colPivHouseholderQr().solve(rhs);
        try {
            const EulerPose e = EulerPose::from_transform(RigidTransform(R, t));
            Vector6 x;
            x << e.yaw, e.pitch, e.roll, e.t.x(), e.t.y(), e.t.z();
            seeds.push_back(x);
        } catch (const std::exception&) {
            // Degenerate fit (e.g. near-parallel normals): skip this seed.
        }
    }
    return seeds;
}

LmOutcome lm_descent(const std::vector<ObsRow>& rows, Vector6 x, const SolverConfig& cfg) {
    const std::size_t n = total_points(rows);
    Eigen::VectorXd r(n);
    Eigen::MatrixXd J(n, 6);

    double lambda = cfg.lambda0;
    double ssq = sum_squares(rows, x);
    bool converged = false;

    for (int iter = 0; iter < cfg.max_iterations; ++iter) {
        const RotBundle rb(x);
        const Vec3 t(x[3], x[4], x[5]);
        std::size_t k = 0;
        for (const ObsRow& row : rows)
            for (const Vec3& q : row.q) {
                r[k] = row.a3.dot(rb.R * q + t) + row.a34;
                J(k, 0) = row.a3.dot(rb.dyaw * q);
                J(k, 1) = row.a3.dot(rb.dpitch * q);
                J(k, 2) = row.a3.dot(rb.droll * q);
                J(k, 3) = row.a3.x();
                J(k, 4) = row.a3.y();
                J(k, 5) = row.a3.z();
                ++k;
            }
        const Matrix6 jtj = J.transpose() * J;
        const Vector6 jtr = J.transpose() * r;

        Matrix6 damped = jtj;
        for (int d = 0; d < 6; ++d)
            damped(d, d) += lambda * std::max(jtj(d, d), 1e-12);
        const Vector6 step = damped.ldlt().solve(-jtr);
        if (!step.allFinite()) {
            lambda *= cfg.lambda_factor;
            if (lambda > 1e15) break;
            continue;
        }
        const Vector6 x_new = x + step;
        const double ssq_new = sum_squares(rows, x_new);
        // Non-strict acceptance: a seed that starts at the optimum produces a
        // ~zero step with no strictly improving objective, which must count
        // as convergence rather than exhausting the damping schedule.
        if (ssq_new <= ssq) {
            const double rel = (ssq - ssq_new) / std::max(ssq, 1e-300);
            x = x_new;
            ssq = ssq_new;
            lambda /= cfg.lambda_factor;
            if (rel < cfg.rel_tol) {
                converged = true;
                break;
            }
        } else {
            lambda *= cfg.lambda_factor;
            if (lambda > 1e15) break;
        }
    }
    return {x, ssq, converged};
}

}  // namespace

double residual(const EulerPose& b, const RigidTransform& A, const ScaleVector& s, const Vec3& p) {
    const Vec3 q = s.apply(p);
    const Mat3 R = rot_z(b.yaw) * rot_y(b.pitch) * rot_x(b.roll);
    const Vec3 a3 = A.rotation().row(2).transpose();
    return a3.dot(R * q + b.t) + A.translation().z();
}

std::array<double, 6> residual_gradient(const EulerPose& b, const RigidTransform& A,
                                        const ScaleVector& s, const Vec3& p) {
    const Vec3 q = s.apply(p);
    Vector6 x;
    x << b.yaw, b.pitch, b.roll, b.t.x(), b.t.y(), b.t.z();
    const RotBundle rb(x);
    const Vec3 a3 = A.rotation().row(2).transpose();
    return {a3.dot(rb.dyaw * q), a3.dot(rb.dpitch * q), a3.dot(rb.droll * q),
            a3.x(), a3.y(), a3.z()};
}

CalibrationResult solve(const CalibrationProblem& problem, const SolverConfig& cfg) {
    if (problem.observations.size() < 2)
        throw std::invalid_argument("solve: at least two observations are required");
    const std::vector<ObsRow> rows = build_rows(problem);
    if (total_points(rows) < 6)
        throw std::invalid_argument("solve: at least six sample points are required");

    Rng rng(cfg.seed);
    LmOutcome best{Vector6::Zero(), std::numeric_limits<double>::infinity(), false};
    int best_restart = -1;
    bool have = false;

    // Converged descents dominate unconverged ones; within the same class the
    // strictly lower objective wins, so ties keep the earliest descent.
    const auto consider = [&](const LmOutcome& out, int index) {
        const bool take = !have || (out.converged && !best.converged) ||
                          (out.converged == best.converged && out.objective < best.objective);
        if (take) {
            best = out;
            best_restart = index;
            have = true;
        }
    };

    // Closed-form seeds first.  The plane-distance objective admits a
    // near-symmetric twin (the probe mirrored to the other side of the
    // membrane) whose broad basin can catch every random restart when the
    // protocol's incidence diversity is modest; descending from both sign
    // choices guarantees the true basin is always visited.
    for (const Vector6& x0 : closed_form_seeds(rows)) consider(lm_descent(rows, x0, cfg), -1);

    for (int restart = 0; restart < cfg.restarts; ++restart) {
        Vector6 x0;
        for (int a = 0; a < 3; ++a) x0[a] = rng.uniform(-kPi, kPi);
        for (int a = 3; a < 6; ++a)
            x0[a] = rng.uniform(-cfg.translation_range, cfg.translation_range);
        consider(lm_descent(rows, x0, cfg), restart);
    }
    const bool any_converged = best.converged;

    CalibrationResult res;
    const EulerPose bp = pose_from(best.x);
    res.T_U2Pr = bp.to_transform();
    res.objective = best.objective;
    res.converged = any_converged;
    res.best_restart = best_restart;

    double ssq = 0.0, mx = 0.0;
    std::size_t n = 0;
    for (const ObsRow& row : rows) {
        double oss = 0.0;
        const Mat3& R = res.T_U2Pr.rotation();
        const Vec3& t = res.T_U2Pr.translation();
        for (const Vec3& q : row.q) {
            const double e = row.a3.dot(R * q + t) + row.a34;
            oss += e * e;
            ssq += e * e;
            mx = std::max(mx, std::abs(e));
            ++n;
        }
        res.per_observation_rms.push_back(row.q.empty() ? 0.0
                                                        : std::sqrt(oss / static_cast<double>(row.q.size())));
    }
    res.rms_residual = n ? std::sqrt(ssq / static_cast<double>(n)) : 0.0;
    res.max_residual = mx;
    res.diagnostics = observability(problem, bp);

    if (!any_converged) throw SolverFailure(res);
    return res;
}

ObservabilityReport observability(const CalibrationProblem& problem, const EulerPose& at) {
    const std::vector<ObsRow> rows = build_rows(problem);
    const std::size_t n = total_points(rows);
    ObservabilityReport rep;
    if (n == 0) {
        rep.condition_flag = true;
        return rep;
    }

    Vector6 x;
    x << at.yaw, at.pitch, at.roll, at.t.x(), at.t.y(), at.t.z();
    const double h = 1e-5;

    Eigen::MatrixXd J(n, 6);
    for (int col = 0; col < 6; ++col) {
        Vector6 xp = x, xm = x;
        xp[col] += h;
        xm[col] -= h;
        const Mat3 Rp = rot_z(xp[0]) * rot_y(xp[1]) * rot_x(xp[2]);
        const Mat3 Rm = rot_z(xm[0]) * rot_y(xm[1]) * rot_x(xm[2]);
        const Vec3 tp(xp[3], xp[4], xp[5]), tm(xm[3], xm[4], xm[5]);
        std::size_t k = 0;
        for (const ObsRow& row : rows)
            for (const Vec3& q : row.q) {
                const double ep = row.a3.dot(Rp * q + tp) + row.a34;
                const double em = row.a3.dot(Rm * q + tm) + row.a34;
                J(k, col) = (ep - em) / (2.0 * h);
                ++k;
            }
    }

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(J);
    const auto& sv = svd.singularValues();
    for (int i = 0; i < 6; ++i)
        rep.singular_values[i] = (i < sv.size()) ? sv[i] : 0.0;
    const double largest = rep.singular_values[0];
    rep.condition_flag = largest <= 0.0 || rep.singular_values[5] / largest < 1e-6;
    return rep;
}

}  // namespace uscalib
