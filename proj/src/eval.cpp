#include "usip/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "usip/geometry.hpp"
#include "usip/kdtree.hpp"
#include "usip/training.hpp"

namespace usip {

// ---------------------------------------------------------------------------
// Repeatability

double repeatability(std::span<const Vec3> q, std::span<const Vec3> qt,
                     const RigidTransform& t, double eps) {
    if (q.empty() || qt.empty()) {
        throw std::invalid_argument("repeatability: empty keypoint set");
    }
    if (eps <= 0.0) throw std::invalid_argument("repeatability: eps must be > 0");
    const KdTree3 tree(std::vector<Vec3>(qt.begin(), qt.end()));
    int hits = 0;
    for (const Vec3& p : q) {
        if (tree.nearest_distance(t.apply(p)) < eps) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(q.size());
}

std::vector<EvalPair> make_eval_pairs(const std::vector<PointCloud>& corpus,
                                      int count, const AugmentationSpec& aug,
                                      std::uint64_t seed) {
    if (corpus.empty()) throw std::invalid_argument("make_eval_pairs: empty corpus");
    if (count < 1) throw std::invalid_argument("make_eval_pairs: count must be >= 1");
    aug.validate();
    std::vector<EvalPair> pairs;
    pairs.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const std::uint64_t pair_seed =
            derive_seed(seed, seed_stage::kEval, static_cast<std::uint64_t>(i));
        EvalPair pair;
        pair.a = corpus[static_cast<std::size_t>(i) % corpus.size()];
        pair.t_ab = random_se3(aug.rotation_mode, aug.translation_range,
                               derive_seed(pair_seed, seed_stage::kTransform));
        pair.b = apply_transform(pair.a, pair.t_ab);
        if (aug.noise_sigma > 0.0) {
            pair.b = add_gaussian_noise(pair.b, aug.noise_sigma,
                                        derive_seed(pair_seed, seed_stage::kNoise));
        }
        if (aug.downsample_factor > 1) {
            pair.b = random_downsample(pair.b, aug.downsample_factor,
                                       derive_seed(pair_seed, seed_stage::kDownsample));
        }
        pairs.push_back(std::move(pair));
    }
    return pairs;
}

KeypointSet random_sampling_detector(const PointCloud& cloud, int n,
                                     std::uint64_t seed) {
    if (n < 1 || static_cast<std::size_t>(n) > cloud.size()) {
        throw std::invalid_argument("random_sampling_detector: need 1 <= n <= N");
    }
    Rng rng(derive_seed(seed, seed_stage::kBaseline));
    const std::vector<int> idx =
        rng.sample_without_replacement(static_cast<int>(cloud.size()), n);
    KeypointSet kps;
    kps.positions.reserve(static_cast<std::size_t>(n));
    for (int i : idx) kps.positions.push_back(cloud.points[static_cast<std::size_t>(i)]);
    kps.sigmas.assign(static_cast<std::size_t>(n), 1.0);
    return kps;
}

EvalDetector fpn_detector(ad::ParamStore& params, const FPNConfig& cfg) {
    return [&params, cfg](const PointCloud& cloud, std::uint64_t seed) {
        return propose(cloud, params, cfg, seed);
    };
}

EvalDetector random_detector(int n) {
    return [n](const PointCloud& cloud, std::uint64_t seed) {
        return random_sampling_detector(cloud, n, seed);
    };
}

namespace {

KeypointSet top_or_all(const KeypointSet& kps, int n) {
    return static_cast<std::size_t>(n) >= kps.size() ? kps : select_top(kps, n);
}

}  // namespace

RepeatabilityReport repeatability_report(const EvalDetector& detector,
                                         const std::vector<EvalPair>& pairs,
                                         std::span<const int> counts, double eps,
                                         std::uint64_t seed) {
    if (pairs.empty()) throw std::invalid_argument("repeatability_report: no pairs");
    for (std::size_t i = 1; i < counts.size(); ++i) {
        if (counts[i] <= counts[i - 1]) {
            throw std::invalid_argument("repeatability_report: counts must increase");
        }
    }
    RepeatabilityReport report;
    report.epsilon = eps;
    report.counts.assign(counts.begin(), counts.end());
    report.detector_fwd.assign(counts.size(), 0.0);
    report.detector_rev.assign(counts.size(), 0.0);
    report.baseline_fwd.assign(counts.size(), 0.0);
    report.baseline_rev.assign(counts.size(), 0.0);

    for (std::size_t p = 0; p < pairs.size(); ++p) {
        const EvalPair& pair = pairs[p];
        const std::uint64_t sa = derive_seed(seed, seed_stage::kEval, 2 * p);
        const std::uint64_t sb = derive_seed(seed, seed_stage::kEval, 2 * p + 1);
        const KeypointSet det_a = detector(pair.a, sa);
        const KeypointSet det_b = detector(pair.b, sb);
        const RigidTransform inv = pair.t_ab.inverse();
        for (std::size_t ci = 0; ci < counts.size(); ++ci) {
            const int n = counts[ci];
            const KeypointSet a = top_or_all(det_a, n);
            const KeypointSet b = top_or_all(det_b, n);
            report.detector_fwd[ci] +=
                repeatability(a.positions, b.positions, pair.t_ab, eps);
            report.detector_rev[ci] += repeatability(b.positions, a.positions, inv, eps);
            const KeypointSet ra = random_sampling_detector(pair.a, n, sa);
            const KeypointSet rb = random_sampling_detector(pair.b, n, sb);
            report.baseline_fwd[ci] +=
                repeatability(ra.positions, rb.positions, pair.t_ab, eps);
            report.baseline_rev[ci] += repeatability(rb.positions, ra.positions, inv, eps);
        }
    }
    const double inv_pairs = 1.0 / static_cast<double>(pairs.size());
    for (std::size_t ci = 0; ci < counts.size(); ++ci) {
        report.detector_fwd[ci] *= inv_pairs;
        report.detector_rev[ci] *= inv_pairs;
        report.baseline_fwd[ci] *= inv_pairs;
        report.baseline_rev[ci] *= inv_pairs;
    }
    return report;
}

std::vector<RobustnessRow> robustness_sweep(const EvalDetector& detector,
                                            const std::vector<PointCloud>& corpus,
                                            SweepKind kind,
                                            std::span<const double> levels,
                                            int n_keypoints, double eps,
                                            std::uint64_t seed,
                                            const AugmentationSpec& pair_aug) {
    if (levels.empty()) throw std::invalid_argument("robustness_sweep: empty levels");
    // Clean pairs; the sweep applies its own perturbation per level.
    AugmentationSpec aug = pair_aug;
    aug.noise_sigma = 0.0;
    aug.downsample_factor = 1;
    const std::vector<EvalPair> pairs =
        make_eval_pairs(corpus, static_cast<int>(corpus.size()), aug, seed);

    std::vector<RobustnessRow> rows;
    for (std::size_t li = 0; li < levels.size(); ++li) {
        const double level = levels[li];
        RobustnessRow row;
        row.level = level;
        double sum = 0.0;
        int used = 0;
        for (std::size_t p = 0; p < pairs.size(); ++p) {
            const EvalPair& pair = pairs[p];
            const std::uint64_t perturb_seed =
                derive_seed(seed, seed_stage::kNoise, li * pairs.size() + p);
            PointCloud b = pair.b;
            if (kind == SweepKind::kNoise) {
                if (level < 0.0) throw std::invalid_argument("robustness_sweep: negative noise");
                b = add_gaussian_noise(b, level, perturb_seed);
            } else {
                const int factor = std::max(1, static_cast<int>(std::llround(level)));
                if (b.size() / static_cast<std::size_t>(factor) <
                    static_cast<std::size_t>(n_keypoints)) {
                    row.available = false;
                    break;
                }
                b = random_downsample(b, factor, perturb_seed);
            }
            const std::uint64_t sa = derive_seed(seed, seed_stage::kEval, 2 * p);
            const std::uint64_t sb = derive_seed(seed, seed_stage::kEval, 2 * p + 1);
            KeypointSet ka;
            KeypointSet kb;
            try {
                ka = top_or_all(detector(pair.a, sa), n_keypoints);
                kb = top_or_all(detector(b, sb), n_keypoints);
            } catch (const std::invalid_argument&) {
                row.available = false;  // detector cannot run on this level
                break;
            }
            sum += repeatability(ka.positions, kb.positions, pair.t_ab, eps);
            ++used;
        }
        if (row.available && used > 0) row.repeatability = sum / used;
        rows.push_back(row);
    }
    return rows;
}

std::string robustness_csv(std::span<const RobustnessRow> rows, SweepKind kind) {
    std::ostringstream out;
    out << (kind == SweepKind::kNoise ? "noise_sigma" : "downsample_factor")
        << ",repeatability,available\n";
    char line[128];
    for (const RobustnessRow& r : rows) {
        std::snprintf(line, sizeof(line), "%.9g,%.9g,%d\n", r.level, r.repeatability,
                      r.available ? 1 : 0);
        out << line;
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// Descriptors

void DescriptorConfig::validate() const {
    if (dim < 1) throw std::invalid_argument("DescriptorConfig: dim must be >= 1");
    for (const std::vector<int>* ws : {&point_widths, &head_widths}) {
        for (int w : *ws) {
            if (w < 1) throw std::invalid_argument("DescriptorConfig: widths must be >= 1");
        }
    }
}

namespace {

ad::Value desc_mlp(ad::Tape& tape, ad::ParamStore& params, const std::string& prefix,
                   const std::vector<int>& widths, ad::Value in, bool relu_last) {
    ad::Value x = in;
    int fan_in = static_cast<int>(in.rows());
    for (std::size_t layer = 0; layer < widths.size(); ++layer) {
        const std::string tag = prefix + "." + std::to_string(layer);
        ad::Parameter& w = params.get_or_create(tag + ".w", widths[layer], fan_in,
                                                std::sqrt(2.0 / fan_in));
        ad::Parameter& b = params.get_or_create(tag + ".b", widths[layer], 1, 0.0);
        x = tape.dense(tape.leaf(w), tape.leaf(b), x);
        if (relu_last || layer + 1 < widths.size()) x = tape.relu(x);
        fan_in = widths[layer];
    }
    return x;
}

}  // namespace

void init_descriptor_params(ad::ParamStore& params, const DescriptorConfig& cfg) {
    cfg.validate();
    int fan_in = 3;
    for (std::size_t layer = 0; layer < cfg.point_widths.size(); ++layer) {
        params.get_or_create("desc.point." + std::to_string(layer) + ".w",
                             cfg.point_widths[layer], fan_in, std::sqrt(2.0 / fan_in));
        params.get_or_create("desc.point." + std::to_string(layer) + ".b",
                             cfg.point_widths[layer], 1, 0.0);
        fan_in = cfg.point_widths[layer];
    }
    std::vector<int> head = cfg.head_widths;
    head.push_back(cfg.dim);
    for (std::size_t layer = 0; layer < head.size(); ++layer) {
        params.get_or_create("desc.head." + std::to_string(layer) + ".w", head[layer],
                             fan_in, std::sqrt(2.0 / fan_in));
        params.get_or_create("desc.head." + std::to_string(layer) + ".b", head[layer], 1,
                             0.0);
        fan_in = head[layer];
    }
}

std::vector<ad::Value> describe_t(ad::Tape& tape, const PointCloud& cloud,
                                  const KeypointSet& kps, double radius,
                                  ad::ParamStore& params, const DescriptorConfig& cfg,
                                  std::vector<std::uint8_t>* empty_flags) {
    cfg.validate();
    if (radius <= 0.0) throw std::invalid_argument("describe: radius must be > 0");
    const KdTree3 tree(cloud.points);

    std::vector<int> head = cfg.head_widths;
    head.push_back(cfg.dim);

    std::vector<ad::Value> descriptors;
    descriptors.reserve(kps.size());
    if (empty_flags) empty_flags->assign(kps.size(), 0);
    for (std::size_t m = 0; m < kps.size(); ++m) {
        const Vec3& anchor = kps.positions[m];
        const std::vector<int> ball = tree.radius(anchor, radius);
        if (ball.empty()) {
            if (empty_flags) (*empty_flags)[m] = 1;
            descriptors.push_back(tape.constant(Eigen::MatrixXd(Eigen::MatrixXd::Zero(cfg.dim, 1))));
            continue;
        }
        std::vector<ad::Value> feats;
        feats.reserve(ball.size());
        for (int idx : ball) {
            const Vec3 rel = cloud.points[static_cast<std::size_t>(idx)] - anchor;
            feats.push_back(desc_mlp(tape, params, "desc.point", cfg.point_widths,
                                     tape.constant(rel), true));
        }
        ad::Value pooled = tape.maxpool(feats);
        ad::Value raw = desc_mlp(tape, params, "desc.head", head, pooled, false);
        descriptors.push_back(tape.l2_normalize(raw));
    }
    return descriptors;
}

std::vector<Descriptor> describe(const PointCloud& cloud, const KeypointSet& kps,
                                 double radius, ad::ParamStore& params,
                                 const DescriptorConfig& cfg) {
    ad::Tape tape;
    std::vector<std::uint8_t> empty_flags;
    const std::vector<ad::Value> values =
        describe_t(tape, cloud, kps, radius, params, cfg, &empty_flags);
    std::vector<Descriptor> out;
    out.reserve(values.size());
    for (std::size_t m = 0; m < values.size(); ++m) {
        Descriptor d;
        d.vector = values[m].data().col(0);
        d.anchor = static_cast<int>(m);
        d.empty = empty_flags[m] != 0;
        out.push_back(std::move(d));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Triplet losses

namespace {

// Weights of the weighted triplet losses: w_m = M * max(xi - sigma_m, 0) /
// sum_j max(xi - sigma_j, 0); all-zero weights are reported to the caller.
std::vector<double> triplet_weights(std::span<const double> sigma, double xi,
                                    bool* all_zero) {
    std::vector<double> hat(sigma.size());
    double sum = 0.0;
    for (std::size_t m = 0; m < sigma.size(); ++m) {
        hat[m] = std::max(xi - sigma[m], 0.0);
        sum += hat[m];
    }
    *all_zero = sum <= 0.0;
    if (*all_zero) return std::vector<double>(sigma.size(), 0.0);
    const double scale = static_cast<double>(sigma.size()) / sum;
    for (double& w : hat) w *= scale;
    return hat;
}

double descriptor_distance(const ad::Value& a, const ad::Value& b) {
    return (a.data() - b.data()).norm();
}

// Hinge over one (anchor, positive, negative) triple as a fused tape node.
ad::Value hinge_triplet(ad::Tape& tape, const ad::Value& anchor,
                        const ad::Value& pos, const ad::Value& neg, double weight,
                        double gamma) {
    const Eigen::VectorXd da = anchor.data().col(0) - pos.data().col(0);
    const Eigen::VectorXd db = anchor.data().col(0) - neg.data().col(0);
    const double dp = da.norm();
    const double dn = db.norm();
    const double margin = dp - dn + gamma;
    Eigen::MatrixXd out(1, 1);
    out(0, 0) = weight * std::max(margin, 0.0);
    const int aid = anchor.id, pid = pos.id, nid = neg.id;
    return tape.custom(out, [da, db, dp, dn, margin, weight, aid, pid,
                             nid](ad::Tape& t, int self) {
        if (margin <= 0.0) return;
        const double g = weight * t.grad(self)(0, 0);
        if (dp > 0.0) {
            const Eigen::VectorXd u = da / dp;
            t.grad(aid) += g * u;
            t.grad(pid) -= g * u;
        }
        if (dn > 0.0) {
            const Eigen::VectorXd u = db / dn;
            t.grad(aid) -= g * u;
            t.grad(nid) += g * u;
        }
    });
}

}  // namespace

WeakTripletResult triplet_loss_weak(ad::Tape& tape, std::span<const ad::Value> f_anchor,
                                    std::span<const double> sigma_anchor,
                                    std::span<const ad::Value> f_pos,
                                    std::span<const ad::Value> f_neg, double gamma,
                                    double xi) {
    if (f_anchor.empty() || f_pos.empty() || f_neg.empty()) {
        throw std::invalid_argument("triplet_loss_weak: empty descriptor set");
    }
    if (f_anchor.size() != sigma_anchor.size()) {
        throw std::invalid_argument("triplet_loss_weak: sigma length mismatch");
    }
    if (gamma <= 0.0 || xi <= 0.0) {
        throw std::invalid_argument("triplet_loss_weak: gamma and xi must be > 0");
    }
    WeakTripletResult result;
    std::vector<double> weights = triplet_weights(sigma_anchor, xi, &result.all_weights_zero);
    if (result.all_weights_zero) {
        result.loss = tape.constant_scalar(0.0);
        return result;
    }
    std::vector<ad::Value> terms;
    terms.reserve(f_anchor.size());
    for (std::size_t m = 0; m < f_anchor.size(); ++m) {
        // Nearest positive and nearest negative; matches fixed in backward.
        std::size_t best_p = 0, best_n = 0;
        double dp = std::numeric_limits<double>::infinity();
        double dn = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < f_pos.size(); ++i) {
            const double d = descriptor_distance(f_anchor[m], f_pos[i]);
            if (d < dp) {
                dp = d;
                best_p = i;
            }
        }
        for (std::size_t j = 0; j < f_neg.size(); ++j) {
            const double d = descriptor_distance(f_anchor[m], f_neg[j]);
            if (d < dn) {
                dn = d;
                best_n = j;
            }
        }
        terms.push_back(hinge_triplet(tape, f_anchor[m], f_pos[best_p], f_neg[best_n],
                                      weights[m], gamma));
    }
    result.loss = tape.sum(terms);
    return result;
}

StrongTripletResult triplet_loss_strong(
    ad::Tape& tape, std::span<const ad::Value> f, std::span<const Vec3> q,
    std::span<const ad::Value> f_prime, std::span<const Vec3> q_prime,
    const RigidTransform& pose, const RigidTransform& pose_prime, double gamma,
    double rho, double xi, std::span<const double> sigma, std::uint64_t seed) {
    if (f.size() != q.size() || f_prime.size() != q_prime.size()) {
        throw std::invalid_argument("triplet_loss_strong: descriptor/position mismatch");
    }
    if (f.size() != sigma.size()) {
        throw std::invalid_argument("triplet_loss_strong: sigma length mismatch");
    }
    if (rho <= 0.0) throw std::invalid_argument("triplet_loss_strong: rho must be > 0");
    if (gamma <= 0.0 || xi <= 0.0) {
        throw std::invalid_argument("triplet_loss_strong: gamma and xi must be > 0");
    }

    // Map the primed keypoints into the anchor frame: G * G'^-1 * q'.
    const RigidTransform relative = pose.compose(pose_prime.inverse());
    std::vector<Vec3> q_prime_in_anchor;
    q_prime_in_anchor.reserve(q_prime.size());
    for (const Vec3& p : q_prime) q_prime_in_anchor.push_back(relative.apply(p));

    bool all_zero = false;
    std::vector<double> weights = triplet_weights(sigma, xi, &all_zero);

    Rng rng(derive_seed(seed, seed_stage::kMining));
    StrongTripletResult result;
    std::vector<ad::Value> terms;
    for (std::size_t m = 0; m < f.size(); ++m) {
        // Positive: the spatially closest primed keypoint within rho.
        int pos = -1;
        double best_pos_d = rho;
        std::vector<int> beyond;
        for (std::size_t i = 0; i < q_prime_in_anchor.size(); ++i) {
            const double d = (q[m] - q_prime_in_anchor[i]).norm();
            if (d < best_pos_d) {
                best_pos_d = d;
                pos = static_cast<int>(i);
            }
            if (d > rho) beyond.push_back(static_cast<int>(i));
        }
        if (pos < 0 || beyond.empty()) {
            ++result.skipped_anchors;
            continue;
        }
        // Mining: half the anchors draw a random beyond-rho negative, half
        // take the hardest (shortest keypoint distance beyond rho).
        int neg;
        if (rng.uniform() < 0.5) {
            neg = beyond[static_cast<std::size_t>(rng.uniform_int(
                static_cast<int>(beyond.size())))];
        } else {
            neg = beyond.front();
            double best = std::numeric_limits<double>::infinity();
            for (int j : beyond) {
                const double d =
                    (q[m] - q_prime_in_anchor[static_cast<std::size_t>(j)]).norm();
                if (d < best) {
                    best = d;
                    neg = j;
                }
            }
        }
        terms.push_back(hinge_triplet(tape, f[m], f_prime[static_cast<std::size_t>(pos)],
                                      f_prime[static_cast<std::size_t>(neg)], weights[m],
                                      gamma));
    }
    result.loss = terms.empty() ? tape.constant_scalar(0.0) : tape.sum(terms);
    return result;
}

// ---------------------------------------------------------------------------
// Matching and registration

std::vector<DescriptorMatch> match(std::span<const Descriptor> fa,
                                   std::span<const Descriptor> fb,
                                   bool mutual_check) {
    if (fa.empty() || fb.empty()) throw std::invalid_argument("match: empty descriptor set");
    const auto nearest_in = [](const Descriptor& d, std::span<const Descriptor> set) {
        int best = -1;
        double best_dist = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < set.size(); ++j) {
            if (set[j].empty) continue;
            const double dist = (d.vector - set[j].vector).norm();
            if (dist < best_dist) {
                best_dist = dist;
                best = static_cast<int>(j);
            }
        }
        return std::pair<int, double>(best, best_dist);
    };
    std::vector<DescriptorMatch> out;
    for (std::size_t i = 0; i < fa.size(); ++i) {
        if (fa[i].empty) continue;
        const auto [j, dist] = nearest_in(fa[i], fb);
        if (j < 0) continue;
        if (mutual_check) {
            const auto [back, back_dist] =
                nearest_in(fb[static_cast<std::size_t>(j)], fa);
            if (back != static_cast<int>(i)) continue;
        }
        out.push_back({static_cast<int>(i), j, dist});
    }
    return out;
}

RansacResult ransac_register(std::span<const Correspondence> correspondences,
                             int iterations, double inlier_threshold,
                             std::uint64_t seed) {
    const int n = static_cast<int>(correspondences.size());
    if (n < 3) throw std::invalid_argument("ransac_register: need at least 3 correspondences");
    if (iterations < 1) throw std::invalid_argument("ransac_register: iterations must be >= 1");
    if (inlier_threshold <= 0.0) {
        throw std::invalid_argument("ransac_register: inlier_threshold must be > 0");
    }

    Rng rng(derive_seed(seed, seed_stage::kRansac));
    const auto count_inliers = [&](const RigidTransform& t,
                                   std::vector<std::uint8_t>* mask) {
        int count = 0;
        for (int i = 0; i < n; ++i) {
            const Correspondence& c = correspondences[static_cast<std::size_t>(i)];
            const bool inlier = (t.apply(c.p) - c.q).norm() < inlier_threshold;
            if (mask) (*mask)[static_cast<std::size_t>(i)] = inlier ? 1 : 0;
            if (inlier) ++count;
        }
        return count;
    };

    RigidTransform best_model;
    int best_inliers = -1;
    std::vector<Vec3> sample_p(3), sample_q(3);
    for (int it = 0; it < iterations; ++it) {
        const std::vector<int> pick = rng.sample_without_replacement(n, 3);
        for (int s = 0; s < 3; ++s) {
            sample_p[static_cast<std::size_t>(s)] =
                correspondences[static_cast<std::size_t>(pick[static_cast<std::size_t>(s)])].p;
            sample_q[static_cast<std::size_t>(s)] =
                correspondences[static_cast<std::size_t>(pick[static_cast<std::size_t>(s)])].q;
        }
        RigidTransform model;
        try {
            model = kabsch_align(sample_p, sample_q);
        } catch (const DegenerateGeometryError&) {
            continue;  // collinear minimal sample
        }
        const int inliers = count_inliers(model, nullptr);
        if (inliers > best_inliers) {
            best_inliers = inliers;
            best_model = model;
        }
    }
    if (best_inliers < 3) {
        throw DegenerateGeometryError("ransac_register: no non-degenerate sample found");
    }

    RansacResult result;
    result.iterations = iterations;
    result.inlier_mask.assign(static_cast<std::size_t>(n), 0);
    count_inliers(best_model, &result.inlier_mask);

    // Refit on the full inlier set of the best model, then recompute the
    // mask against the refit transform so mask and transform stay consistent.
    std::vector<Vec3> in_p, in_q;
    for (int i = 0; i < n; ++i) {
        if (result.inlier_mask[static_cast<std::size_t>(i)]) {
            in_p.push_back(correspondences[static_cast<std::size_t>(i)].p);
            in_q.push_back(correspondences[static_cast<std::size_t>(i)].q);
        }
    }
    if (in_p.size() >= 3) {
        try {
            best_model = kabsch_align(in_p, in_q);
        } catch (const DegenerateGeometryError&) {
            // Keep the minimal-sample model when the inlier set is degenerate.
        }
    }
    result.transform = best_model;
    result.inlier_count = count_inliers(best_model, &result.inlier_mask);
    return result;
}

RegistrationMetrics registration_metrics(const RigidTransform& estimate,
                                         const RigidTransform& ground_truth) {
    RegistrationMetrics m;
    m.rte = (estimate.translation - ground_truth.translation).norm();
    const double trace = (ground_truth.rotation.transpose() * estimate.rotation).trace();
    const double arg = std::clamp(0.5 * (trace - 1.0), -1.0, 1.0);
    m.rre_deg = std::acos(arg) * 180.0 / std::numbers::pi;
    m.success = m.rte < 2.0 && m.rre_deg < 5.0;
    return m;
}

RegistrationReport registration_report(const EvalDetector& detector,
                                       ad::ParamStore& desc_params,
                                       const DescriptorConfig& desc_cfg,
                                       const std::vector<EvalPair>& pairs,
                                       int n_keypoints, double desc_radius,
                                       int ransac_iterations,
                                       double inlier_threshold,
                                       std::uint64_t seed) {
    if (pairs.empty()) throw std::invalid_argument("registration_report: no pairs");
    RegistrationReport report;
    report.ransac_iterations = ransac_iterations;
    report.pairs = static_cast<int>(pairs.size());

    std::vector<double> rtes, rres;
    double inlier_sum = 0.0;
    int inlier_reports = 0;
    int failures = 0;
    for (std::size_t p = 0; p < pairs.size(); ++p) {
        const EvalPair& pair = pairs[p];
        const std::uint64_t sa = derive_seed(seed, seed_stage::kEval, 2 * p);
        const std::uint64_t sb = derive_seed(seed, seed_stage::kEval, 2 * p + 1);
        bool success = false;
        try {
            const KeypointSet ka = top_or_all(detector(pair.a, sa), n_keypoints);
            const KeypointSet kb = top_or_all(detector(pair.b, sb), n_keypoints);
            const std::vector<Descriptor> fa =
                describe(pair.a, ka, desc_radius, desc_params, desc_cfg);
            const std::vector<Descriptor> fb =
                describe(pair.b, kb, desc_radius, desc_params, desc_cfg);
            const std::vector<DescriptorMatch> matches = match(fa, fb, false);
            std::vector<Correspondence> corr;
            corr.reserve(matches.size());
            for (const DescriptorMatch& mt : matches) {
                corr.push_back({ka.positions[static_cast<std::size_t>(mt.a)],
                                kb.positions[static_cast<std::size_t>(mt.b)]});
            }
            const RansacResult ransac = ransac_register(
                corr, ransac_iterations, inlier_threshold,
                derive_seed(seed, seed_stage::kRansac, p));
            const RegistrationMetrics metrics =
                registration_metrics(ransac.transform, pair.t_ab);
            rtes.push_back(metrics.rte);
            rres.push_back(metrics.rre_deg);
            inlier_sum += static_cast<double>(ransac.inlier_count) /
                          static_cast<double>(corr.size());
            ++inlier_reports;
            success = metrics.success;
        } catch (const std::exception&) {
            success = false;
        }
        if (!success) ++failures;
    }
    report.failure_rate = static_cast<double>(failures) / static_cast<double>(pairs.size());
    if (inlier_reports > 0) report.inlier_ratio = inlier_sum / inlier_reports;
    const auto mean_std = [](const std::vector<double>& v, double* mean, double* sd) {
        if (v.empty()) {
            *mean = 0.0;
            *sd = 0.0;
            return;
        }
        double m = 0.0;
        for (double x : v) m += x;
        m /= static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) var += (x - m) * (x - m);
        *mean = m;
        *sd = std::sqrt(var / static_cast<double>(v.size()));
    };
    mean_std(rtes, &report.rte_mean, &report.rte_std);
    mean_std(rres, &report.rre_mean, &report.rre_std);
    return report;
}

std::string repeatability_csv(const RepeatabilityReport& report) {
    std::ostringstream out;
    out << "n_keypoints,repeatability,repeatability_reverse,baseline,baseline_reverse\n";
    char line[160];
    for (std::size_t i = 0; i < report.counts.size(); ++i) {
        std::snprintf(line, sizeof(line), "%d,%.9g,%.9g,%.9g,%.9g\n", report.counts[i],
                      report.detector_fwd[i], report.detector_rev[i],
                      report.baseline_fwd[i], report.baseline_rev[i]);
        out << line;
    }
    return out.str();
}

std::string registration_csv(const RegistrationReport& report) {
    std::ostringstream out;
    out << "pairs,failure_rate,inlier_ratio,rte_mean,rte_std,rre_mean,rre_std,ransac_iterations\n";
    char line[256];
    std::snprintf(line, sizeof(line), "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%d\n",
                  report.pairs, report.failure_rate, report.inlier_ratio,
                  report.rte_mean, report.rte_std, report.rre_mean, report.rre_std,
                  report.ransac_iterations);
    out << line;
    return out.str();
}

}  // namespace usip
