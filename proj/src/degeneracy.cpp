#include "usip/degeneracy.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "usip/eval.hpp"
#include "usip/geometry.hpp"
#include "usip/losses.hpp"

namespace usip {

std::string degeneracy_class_name(DegeneracyClass cls) {
    switch (cls) {
        case DegeneracyClass::kNone: return "none";
        case DegeneracyClass::kCentroid: return "centroid";
        case DegeneracyClass::kPrincipalAxis: return "principal_axis";
    }
    throw std::invalid_argument("unknown degeneracy class");
}

namespace {

Mat3 cloud_covariance(const PointCloud& cloud) {
    const Vec3 c = cloud.centroid();
    Mat3 cov = Mat3::Zero();
    for (const Vec3& p : cloud.points) {
        const Vec3 d = p - c;
        cov += d * d.transpose();
    }
    return cov / static_cast<double>(cloud.size());
}

std::vector<Vec3> transformed(const std::vector<Vec3>& pts, const RigidTransform& t) {
    std::vector<Vec3> out;
    out.reserve(pts.size());
    for (const Vec3& p : pts) out.push_back(t.apply(p));
    return out;
}

}  // namespace

void covariance_axes(const PointCloud& cloud, Mat3* axes, Vec3* eigenvalues) {
    const Mat3 cov = cloud_covariance(cloud);
    Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    const Vec3 evals = eig.eigenvalues();  // ascending
    const double lam_max = evals[2];
    if (lam_max <= 0.0 || evals[1] <= 1e-12 * lam_max) {
        throw IndeterminateError("cloud covariance has rank < 2");
    }
    // Repeated eigenvalues leave the principal axes undefined.
    if ((evals[2] - evals[1]) < 1e-9 * lam_max || (evals[1] - evals[0]) < 1e-9 * lam_max) {
        throw IndeterminateError("cloud covariance has repeated eigenvalues");
    }
    if (axes) *axes = eig.eigenvectors();
    if (eigenvalues) *eigenvalues = evals;
}

double equivariance_residual(const MultiDetector& detector, const PointCloud& cloud,
                             int trials, std::uint64_t seed) {
    if (trials < 1) throw std::invalid_argument("equivariance_residual: trials must be >= 1");
    const double radius = cloud.bounding_radius();
    if (radius <= 0.0) {
        throw std::invalid_argument("equivariance_residual: degenerate cloud");
    }

    const std::vector<KeypointSet> base = detector(cloud);
    if (base.empty()) throw std::invalid_argument("equivariance_residual: detector gave no output");

    double sum = 0.0;
    for (int trial = 0; trial < trials; ++trial) {
        const RigidTransform t = random_se3(
            RotationMode::kFull3D, radius,
            derive_seed(seed, seed_stage::kTransform, static_cast<std::uint64_t>(trial)));
        const std::vector<KeypointSet> moved = detector(apply_transform(cloud, t));

        double best = std::numeric_limits<double>::infinity();
        for (const KeypointSet& reference : base) {
            const std::vector<Vec3> expected = transformed(reference.positions, t);
            for (const KeypointSet& got : moved) {
                const double m = static_cast<double>(
                    std::max(reference.positions.size(), got.positions.size()));
                const double chamfer = chamfer_loss(got.positions, expected);
                best = std::min(best, chamfer / (2.0 * m * radius * radius));
            }
        }
        sum += best;
    }
    return sum / trials;
}

double equivariance_residual(const Detector& detector, const PointCloud& cloud,
                             int trials, std::uint64_t seed) {
    return equivariance_residual(
        MultiDetector([&detector](const PointCloud& c) {
            return std::vector<KeypointSet>{detector(c)};
        }),
        cloud, trials, seed);
}

DegeneracyVerdict classify(const KeypointSet& kps, const PointCloud& cloud) {
    if (kps.size() < 4) throw std::invalid_argument("classify: need M >= 4 keypoints");
    const Vec3 centroid = cloud.centroid();
    const double radius = cloud.bounding_radius();
    if (radius <= 0.0) throw IndeterminateError("classify: degenerate cloud");

    const Mat3 cov = cloud_covariance(cloud);
    Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    const Vec3 evals = eig.eigenvalues();
    if (evals[2] <= 0.0 || evals[1] <= 1e-12 * evals[2]) {
        throw IndeterminateError("classify: cloud covariance has rank < 2");
    }

    DegeneracyVerdict verdict;
    for (const Vec3& q : kps.positions) {
        verdict.centroid_spread =
            std::max(verdict.centroid_spread, (q - centroid).norm() / radius);
    }

    // Best-fit line through the centroid along one of the covariance
    // eigenvectors; keep the axis minimizing the RMS keypoint distance.
    double best_rms = std::numeric_limits<double>::infinity();
    double best_spread_along = 0.0;
    for (int axis = 0; axis < 3; ++axis) {
        const Vec3 u = eig.eigenvectors().col(axis);
        double sq_sum = 0.0;
        double spread = 0.0;
        for (const Vec3& q : kps.positions) {
            const Vec3 d = q - centroid;
            const double along = d.dot(u);
            sq_sum += (d - along * u).squaredNorm();
            spread = std::max(spread, std::abs(along));
        }
        const double rms = std::sqrt(sq_sum / static_cast<double>(kps.size()));
        if (rms < best_rms) {
            best_rms = rms;
            best_spread_along = spread;
        }
    }
    verdict.axis_residual = best_rms / radius;

    if (verdict.centroid_spread < kCentroidSpreadThreshold) {
        verdict.cls = DegeneracyClass::kCentroid;
    } else if (verdict.axis_residual < kAxisResidualThreshold &&
               best_spread_along / radius > kCentroidSpreadThreshold) {
        verdict.cls = DegeneracyClass::kPrincipalAxis;
    } else {
        verdict.cls = DegeneracyClass::kNone;
    }
    return verdict;
}

KeypointSet centroid_detector(const PointCloud& cloud, int m) {
    if (m < 1) throw std::invalid_argument("centroid_detector: m must be >= 1");
    KeypointSet kps;
    kps.positions.assign(static_cast<std::size_t>(m), cloud.centroid());
    kps.sigmas.assign(static_cast<std::size_t>(m), 1.0);
    return kps;
}

std::vector<KeypointSet> principal_axis_detector(const PointCloud& cloud,
                                                 std::span<const double> coefficients) {
    if (coefficients.empty()) {
        throw std::invalid_argument("principal_axis_detector: no coefficients");
    }
    Mat3 axes;
    covariance_axes(cloud, &axes, nullptr);
    const Vec3 u1 = axes.col(2);  // dominant axis
    const Vec3 c = cloud.centroid();
    std::vector<KeypointSet> variants;
    for (double sign : {1.0, -1.0}) {
        KeypointSet kps;
        for (double coeff : coefficients) {
            kps.positions.push_back(c + sign * coeff * u1);
            kps.sigmas.push_back(1.0);
        }
        variants.push_back(std::move(kps));
    }
    return variants;
}

// ---------------------------------------------------------------------------
// Sweep

ad::ParamStore default_trainer(const std::vector<PointCloud>& corpus,
                               const TrainConfig& cfg) {
    ad::ParamStore store(derive_seed(cfg.seed, seed_stage::kParamInit));
    train(corpus, cfg, "", "", &store);
    return store;
}

std::vector<SweepCell> mk_sweep(const Trainer& trainer, const TrainConfig& base_cfg,
                                std::span<const int> m_values,
                                std::span<const int> k_values,
                                const std::vector<PointCloud>& corpus,
                                const SweepOptions& options) {
    if (m_values.empty() || k_values.empty()) {
        throw std::invalid_argument("mk_sweep: empty grids");
    }
    if (corpus.empty()) throw std::invalid_argument("mk_sweep: empty corpus");

    std::vector<SweepCell> cells;
    for (int m : m_values) {
        for (int k : k_values) {
            SweepCell cell;
            cell.m = m;
            cell.k = k;
            TrainConfig cfg = base_cfg;
            cfg.fpn.proposal_count = m;
            cfg.fpn.node_knn = std::min(k, m);
            try {
                ad::ParamStore store = trainer(corpus, cfg);

                const auto detect = [&](const PointCloud& cloud) {
                    return propose(cloud, store, cfg.fpn,
                                   derive_seed(cfg.seed, seed_stage::kEval));
                };

                int n_centroid = 0, n_axis = 0, n_indeterminate = 0, n_ok = 0;
                double spread_sum = 0.0, axis_sum = 0.0;
                for (const PointCloud& cloud : corpus) {
                    try {
                        const DegeneracyVerdict v = classify(detect(cloud), cloud);
                        spread_sum += v.centroid_spread;
                        axis_sum += v.axis_residual;
                        if (v.cls == DegeneracyClass::kCentroid) ++n_centroid;
                        if (v.cls == DegeneracyClass::kPrincipalAxis) ++n_axis;
                        ++n_ok;
                    } catch (const IndeterminateError&) {
                        ++n_indeterminate;
                    }
                }
                if (n_ok == 0) {
                    cell.verdict = "indeterminate";
                } else {
                    cell.centroid_spread = spread_sum / n_ok;
                    cell.axis_residual = axis_sum / n_ok;
                    cell.degenerate_fraction =
                        static_cast<double>(n_centroid + n_axis) / n_ok;
                    if (cell.degenerate_fraction >= 0.5) {
                        cell.verdict = n_centroid >= n_axis ? "centroid" : "principal_axis";
                    } else {
                        cell.verdict = "none";
                    }
                }

                cell.equivariance_residual = equivariance_residual(
                    Detector(detect), corpus.front(), options.eval_trials,
                    derive_seed(options.seed, seed_stage::kEval));

                // Mean repeatability over a few fresh pairs.
                double rep_sum = 0.0;
                int rep_count = 0;
                for (int p = 0; p < options.eval_pairs; ++p) {
                    const PointCloud& cloud = corpus[static_cast<std::size_t>(p) % corpus.size()];
                    const TrainingPair pair = make_pair(
                        cloud, base_cfg.augmentation,
                        derive_seed(options.seed, seed_stage::kPairs,
                                    static_cast<std::uint64_t>(p)));
                    const int n_kp = std::min(options.repeat_keypoints, m);
                    const KeypointSet a = select_top(detect(pair.source), n_kp);
                    const KeypointSet b = select_top(detect(pair.transformed), n_kp);
                    rep_sum += repeatability(a.positions, b.positions, pair.transform,
                                             options.epsilon);
                    ++rep_count;
                }
                cell.repeatability = rep_count > 0 ? rep_sum / rep_count : 0.0;
            } catch (const std::exception& e) {
                cell.verdict = std::string("error:") + e.what();
            }
            cells.push_back(std::move(cell));
        }
    }
    return cells;
}

std::string sweep_csv(const std::vector<SweepCell>& cells) {
    std::ostringstream out;
    out << "M,K,verdict,centroid_spread,axis_residual,equivariance_residual,repeatability\n";
    char line[256];
    for (const SweepCell& c : cells) {
        std::snprintf(line, sizeof(line), "%d,%d,%s,%.9g,%.9g,%.9g,%.9g\n", c.m, c.k,
                      c.verdict.c_str(), c.centroid_spread, c.axis_residual,
                      c.equivariance_residual, c.repeatability);
        out << line;
    }
    return out.str();
}

}  // namespace usip
