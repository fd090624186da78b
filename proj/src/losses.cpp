#include "usip/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "usip/kdtree.hpp"

namespace usip {

namespace {

// Index of the nearest point in `set`, ties by lowest index.
int nearest_index(const Vec3& p, std::span<const Vec3> set) {
    int best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < set.size(); ++j) {
        const double d2 = (p - set[j]).squaredNorm();
        if (d2 < best_d2) {
            best_d2 = d2;
            best = static_cast<int>(j);
        }
    }
    return best;
}

std::vector<Vec3> positions_of(std::span<const ad::Value> vs) {
    std::vector<Vec3> out;
    out.reserve(vs.size());
    for (const ad::Value& v : vs) {
        if (v.rows() != 3 || v.cols() != 1) {
            throw std::invalid_argument("loss: keypoint Values must be 3x1");
        }
        out.emplace_back(v.data()(0, 0), v.data()(1, 0), v.data()(2, 0));
    }
    return out;
}

std::vector<double> scalars_of(std::span<const ad::Value> vs) {
    std::vector<double> out;
    out.reserve(vs.size());
    for (const ad::Value& v : vs) out.push_back(v.scalar());
    return out;
}

struct ChamferMatches {
    std::vector<int> fwd;  // for each i: argmin_j |q_i - qp_j|
    std::vector<int> rev;  // for each j: argmin_i |q_i - qp_j|
};

ChamferMatches chamfer_matches(std::span<const Vec3> q, std::span<const Vec3> qp) {
    ChamferMatches m;
    m.fwd.reserve(q.size());
    m.rev.reserve(qp.size());
    for (const Vec3& p : q) m.fwd.push_back(nearest_index(p, qp));
    for (const Vec3& p : qp) m.rev.push_back(nearest_index(p, q));
    return m;
}

void check_nonempty(std::span<const Vec3> q, std::span<const Vec3> qp,
                    const char* what) {
    if (q.empty() || qp.empty()) {
        throw std::invalid_argument(std::string(what) + ": empty point set");
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Plain evaluations

double chamfer_loss(std::span<const Vec3> q, std::span<const Vec3> qp) {
    check_nonempty(q, qp, "chamfer_loss");
    const ChamferMatches m = chamfer_matches(q, qp);
    double loss = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
        loss += (q[i] - qp[static_cast<std::size_t>(m.fwd[i])]).squaredNorm();
    }
    for (std::size_t j = 0; j < qp.size(); ++j) {
        loss += (q[static_cast<std::size_t>(m.rev[j])] - qp[j]).squaredNorm();
    }
    return loss;
}

double prob_chamfer_loss(std::span<const Vec3> q, std::span<const double> sigma,
                         std::span<const Vec3> qp, std::span<const double> sigma_p,
                         LossBreakdown* breakdown) {
    check_nonempty(q, qp, "prob_chamfer_loss");
    if (q.size() != sigma.size() || qp.size() != sigma_p.size()) {
        throw std::invalid_argument("prob_chamfer_loss: sigma length mismatch");
    }
    for (double s : sigma) {
        if (!(s > 0.0)) throw std::invalid_argument("prob_chamfer_loss: sigma must be > 0");
    }
    for (double s : sigma_p) {
        if (!(s > 0.0)) throw std::invalid_argument("prob_chamfer_loss: sigma must be > 0");
    }
    const ChamferMatches m = chamfer_matches(q, qp);
    double loss = 0.0;
    if (breakdown) {
        breakdown->d_ij.clear();
        breakdown->d_ji.clear();
        breakdown->sigma_ij.clear();
        breakdown->sigma_ji.clear();
    }
    for (std::size_t i = 0; i < q.size(); ++i) {
        const std::size_t j = static_cast<std::size_t>(m.fwd[i]);
        const double d = (q[i] - qp[j]).norm();
        const double s = 0.5 * (sigma[i] + sigma_p[j]);
        loss += prob_chamfer_term(d, s);
        if (breakdown) {
            breakdown->d_ij.push_back(d);
            breakdown->sigma_ij.push_back(s);
        }
    }
    for (std::size_t j = 0; j < qp.size(); ++j) {
        const std::size_t i = static_cast<std::size_t>(m.rev[j]);
        const double d = (q[i] - qp[j]).norm();
        const double s = 0.5 * (sigma_p[j] + sigma[i]);
        loss += prob_chamfer_term(d, s);
        if (breakdown) {
            breakdown->d_ji.push_back(d);
            breakdown->sigma_ji.push_back(s);
        }
    }
    return loss;
}

double sigma_stationary(double d) {
    if (!(d > 0.0)) throw std::invalid_argument("sigma_stationary: d must be positive");
    // Minimize g(t) = t + d * exp(-t) for t = ln(sigma); g is unimodal.
    const auto g = [d](double t) { return t + d * std::exp(-t); };
    double lo = -30.0, hi = 30.0;
    const double inv_phi = 0.5 * (std::sqrt(5.0) - 1.0);
    double t1 = hi - inv_phi * (hi - lo);
    double t2 = lo + inv_phi * (hi - lo);
    double g1 = g(t1), g2 = g(t2);
    for (int it = 0; it < 300; ++it) {
        if (g1 < g2) {
            hi = t2;
            t2 = t1;
            g2 = g1;
            t1 = hi - inv_phi * (hi - lo);
            g1 = g(t1);
        } else {
            lo = t1;
            t1 = t2;
            g1 = g2;
            t2 = lo + inv_phi * (hi - lo);
            g2 = g(t2);
        }
    }
    return std::exp(0.5 * (lo + hi));
}

namespace {

double point_term_against_cloud(std::span<const Vec3> q, const PointCloud& x,
                                bool plane, std::vector<int>* matches) {
    if (x.points.empty()) throw std::invalid_argument("point loss: empty cloud");
    if (plane && !x.has_normals()) {
        throw std::invalid_argument("point_to_plane_loss: cloud lacks normals");
    }
    const KdTree3 tree(x.points);
    double loss = 0.0;
    for (const Vec3& p : q) {
        const int j = tree.nearest(p);
        if (matches) matches->push_back(j);
        if (plane) {
            const double r = x.normals[static_cast<std::size_t>(j)].dot(
                p - x.points[static_cast<std::size_t>(j)]);
            loss += r * r;
        } else {
            loss += (p - x.points[static_cast<std::size_t>(j)]).squaredNorm();
        }
    }
    return loss;
}

}  // namespace

double point_to_point_loss(std::span<const Vec3> q, const PointCloud& x,
                           std::span<const Vec3> qt, const PointCloud& xt) {
    return point_term_against_cloud(q, x, false, nullptr) +
           point_term_against_cloud(qt, xt, false, nullptr);
}

double point_to_plane_loss(std::span<const Vec3> q, const PointCloud& x,
                           std::span<const Vec3> qt, const PointCloud& xt) {
    return point_term_against_cloud(q, x, true, nullptr) +
           point_term_against_cloud(qt, xt, true, nullptr);
}

LossBreakdown total_loss(std::span<const Vec3> q, std::span<const double> sigma,
                         std::span<const Vec3> qp, std::span<const double> sigma_p,
                         const PointCloud& x, const PointCloud& xt,
                         std::span<const Vec3> qt, double lambda, LossMode mode) {
    if (lambda < 0.0) throw std::invalid_argument("total_loss: lambda must be >= 0");
    LossBreakdown bd;
    bd.chamfer_term = prob_chamfer_loss(q, sigma, qp, sigma_p, &bd);
    bd.point_term = mode == LossMode::kPoint ? point_to_point_loss(q, x, qt, xt)
                                             : point_to_plane_loss(q, x, qt, xt);
    bd.total = bd.chamfer_term + lambda * bd.point_term;
    return bd;
}

// ---------------------------------------------------------------------------
// Differentiable versions

ad::Value chamfer_loss_t(ad::Tape& tape, std::span<const ad::Value> q,
                         std::span<const ad::Value> qp) {
    const std::vector<Vec3> a = positions_of(q);
    const std::vector<Vec3> b = positions_of(qp);
    check_nonempty(a, b, "chamfer_loss");
    const ChamferMatches m = chamfer_matches(a, b);

    double loss = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        loss += (a[i] - b[static_cast<std::size_t>(m.fwd[i])]).squaredNorm();
    }
    for (std::size_t j = 0; j < b.size(); ++j) {
        loss += (a[static_cast<std::size_t>(m.rev[j])] - b[j]).squaredNorm();
    }

    std::vector<int> q_ids, qp_ids;
    for (const ad::Value& v : q) q_ids.push_back(v.id);
    for (const ad::Value& v : qp) qp_ids.push_back(v.id);

    Eigen::MatrixXd out(1, 1);
    out(0, 0) = loss;
    return tape.custom(out, [a, b, m, q_ids, qp_ids](ad::Tape& t, int self) {
        const double g = t.grad(self)(0, 0);
        auto accumulate = [&](int qi, int bj, const Vec3& diff) {
            t.grad(q_ids[static_cast<std::size_t>(qi)]) += 2.0 * g * diff;
            t.grad(qp_ids[static_cast<std::size_t>(bj)]) -= 2.0 * g * diff;
        };
        for (std::size_t i = 0; i < a.size(); ++i) {
            const std::size_t j = static_cast<std::size_t>(m.fwd[i]);
            accumulate(static_cast<int>(i), static_cast<int>(j), a[i] - b[j]);
        }
        for (std::size_t j = 0; j < b.size(); ++j) {
            const std::size_t i = static_cast<std::size_t>(m.rev[j]);
            accumulate(static_cast<int>(i), static_cast<int>(j), a[i] - b[j]);
        }
    });
}

ad::Value prob_chamfer_loss_t(ad::Tape& tape, std::span<const ad::Value> q,
                              std::span<const ad::Value> sigma,
                              std::span<const ad::Value> qp,
                              std::span<const ad::Value> sigma_p,
                              LossBreakdown* breakdown) {
    const std::vector<Vec3> a = positions_of(q);
    const std::vector<Vec3> b = positions_of(qp);
    const std::vector<double> sa = scalars_of(sigma);
    const std::vector<double> sb = scalars_of(sigma_p);
    LossBreakdown local;
    const double loss = prob_chamfer_loss(a, sa, b, sb, &local);
    if (breakdown) *breakdown = local;

    const ChamferMatches m = chamfer_matches(a, b);
    std::vector<int> q_ids, qp_ids, sa_ids, sb_ids;
    for (const ad::Value& v : q) q_ids.push_back(v.id);
    for (const ad::Value& v : qp) qp_ids.push_back(v.id);
    for (const ad::Value& v : sigma) sa_ids.push_back(v.id);
    for (const ad::Value& v : sigma_p) sb_ids.push_back(v.id);

    Eigen::MatrixXd out(1, 1);
    out(0, 0) = loss;
    return tape.custom(out, [a, b, sa, sb, m, q_ids, qp_ids, sa_ids,
                             sb_ids](ad::Tape& t, int self) {
        const double g = t.grad(self)(0, 0);
        // One matched term: d/dd = 1/s; d/ds = 1/s - d/s^2, split half/half
        // between the two sigmas through s = (s_i + s'_j) / 2.
        auto accumulate = [&](std::size_t i, std::size_t j) {
            const Vec3 diff = a[i] - b[j];
            const double d = diff.norm();
            const double s = 0.5 * (sa[i] + sb[j]);
            if (d > 0.0) {
                const Vec3 unit = diff / d;
                t.grad(q_ids[i]) += (g / s) * unit;
                t.grad(qp_ids[j]) -= (g / s) * unit;
            }
            const double ds = g * (1.0 / s - d / (s * s)) * 0.5;
            t.grad(sa_ids[i])(0, 0) += ds;
            t.grad(sb_ids[j])(0, 0) += ds;
        };
        for (std::size_t i = 0; i < a.size(); ++i) {
            accumulate(i, static_cast<std::size_t>(m.fwd[i]));
        }
        for (std::size_t j = 0; j < b.size(); ++j) {
            accumulate(static_cast<std::size_t>(m.rev[j]), j);
        }
    });
}

namespace {

ad::Value point_term_t(ad::Tape& tape, std::span<const ad::Value> q,
                       const PointCloud& x, bool plane) {
    const std::vector<Vec3> a = positions_of(q);
    std::vector<int> matches;
    matches.reserve(a.size());
    const double loss = point_term_against_cloud(a, x, plane, &matches);

    std::vector<int> q_ids;
    for (const ad::Value& v : q) q_ids.push_back(v.id);

    Eigen::MatrixXd out(1, 1);
    out(0, 0) = loss;
    if (plane) {
        std::vector<Vec3> normals, anchors;
        for (int j : matches) {
            normals.push_back(x.normals[static_cast<std::size_t>(j)]);
            anchors.push_back(x.points[static_cast<std::size_t>(j)]);
        }
        return tape.custom(out, [a, q_ids, normals, anchors](ad::Tape& t, int self) {
            const double g = t.grad(self)(0, 0);
            for (std::size_t i = 0; i < a.size(); ++i) {
                const double r = normals[i].dot(a[i] - anchors[i]);
                t.grad(q_ids[i]) += 2.0 * g * r * normals[i];
            }
        });
    }
    std::vector<Vec3> anchors;
    for (int j : matches) anchors.push_back(x.points[static_cast<std::size_t>(j)]);
    return tape.custom(out, [a, q_ids, anchors](ad::Tape& t, int self) {
        const double g = t.grad(self)(0, 0);
        for (std::size_t i = 0; i < a.size(); ++i) {
            t.grad(q_ids[i]) += 2.0 * g * (a[i] - anchors[i]);
        }
    });
}

}  // namespace

ad::Value point_to_point_loss_t(ad::Tape& tape, std::span<const ad::Value> q,
                                const PointCloud& x,
                                std::span<const ad::Value> qt,
                                const PointCloud& xt) {
    return tape.add(point_term_t(tape, q, x, false), point_term_t(tape, qt, xt, false));
}

ad::Value point_to_plane_loss_t(ad::Tape& tape, std::span<const ad::Value> q,
                                const PointCloud& x,
                                std::span<const ad::Value> qt,
                                const PointCloud& xt) {
    return tape.add(point_term_t(tape, q, x, true), point_term_t(tape, qt, xt, true));
}

TotalLossResult total_loss_t(ad::Tape& tape, std::span<const ad::Value> q,
                             std::span<const ad::Value> sigma,
                             std::span<const ad::Value> qp,
                             std::span<const ad::Value> sigma_p,
                             const PointCloud& x, const PointCloud& xt,
                             std::span<const ad::Value> qt, double lambda,
                             LossMode mode) {
    if (lambda < 0.0) throw std::invalid_argument("total_loss: lambda must be >= 0");
    TotalLossResult res;
    const ad::Value chamfer = prob_chamfer_loss_t(tape, q, sigma, qp, sigma_p, &res.breakdown);
    const ad::Value point = mode == LossMode::kPoint
                                ? point_to_point_loss_t(tape, q, x, qt, xt)
                                : point_to_plane_loss_t(tape, q, x, qt, xt);
    res.value = tape.add(chamfer, tape.scale(point, lambda));
    res.breakdown.chamfer_term = chamfer.scalar();
    res.breakdown.point_term = point.scalar();
    res.breakdown.total = res.value.scalar();
    return res;
}

}  // namespace usip
