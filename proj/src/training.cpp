#include "usip/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "usip/geometry.hpp"

namespace usip {

void TrainConfig::validate() const {
    if (pairs_per_cloud < 1) throw std::invalid_argument("TrainConfig: L must be >= 1");
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (max_steps < 0) throw std::invalid_argument("TrainConfig: max_steps must be >= 0");
    if (learning_rate <= 0.0) throw std::invalid_argument("TrainConfig: lr must be > 0");
    if (lambda < 0.0) throw std::invalid_argument("TrainConfig: lambda must be >= 0");
    if (batch_accumulation < 1) {
        throw std::invalid_argument("TrainConfig: batch_accumulation must be >= 1");
    }
    augmentation.validate();
    fpn.validate();
}

TrainingPair make_pair(const PointCloud& cloud, const AugmentationSpec& aug,
                       std::uint64_t seed) {
    aug.validate();
    TrainingPair pair;
    pair.source = aug.noise_sigma > 0.0
                      ? add_gaussian_noise(cloud, aug.noise_sigma,
                                           derive_seed(seed, seed_stage::kNoise))
                      : cloud;
    pair.transform = random_se3(aug.rotation_mode, aug.translation_range,
                                derive_seed(seed, seed_stage::kTransform));
    pair.transformed = apply_transform(pair.source, pair.transform);
    return pair;
}

std::vector<TrainingPair> make_pairs(const PointCloud& cloud, int count,
                                     const AugmentationSpec& aug,
                                     std::uint64_t seed) {
    if (count < 1) throw std::invalid_argument("make_pairs: count must be >= 1");
    std::vector<TrainingPair> pairs;
    pairs.reserve(static_cast<std::size_t>(count));
    for (int l = 0; l < count; ++l) {
        pairs.push_back(make_pair(cloud, aug, derive_seed(seed, seed_stage::kPairs,
                                                          static_cast<std::uint64_t>(l))));
    }
    return pairs;
}

namespace {

struct StepLoss {
    ad::Tape tape;
    ad::Value loss;
    LossBreakdown breakdown;
};

// Forward + loss for one pair; the caller decides when to backpropagate.
void forward_pair(StepLoss& s, const TrainingPair& pair, ad::ParamStore& store,
                  const TrainConfig& cfg, std::int64_t step_index) {
    const std::uint64_t seed_a =
        derive_seed(cfg.seed, seed_stage::kProposeA, static_cast<std::uint64_t>(step_index));
    const std::uint64_t seed_b =
        derive_seed(cfg.seed, seed_stage::kProposeB, static_cast<std::uint64_t>(step_index));

    ProposalTape prop_a = propose_t(s.tape, pair.source, store, cfg.fpn, seed_a);
    ProposalTape prop_b = propose_t(s.tape, pair.transformed, store, cfg.fpn, seed_b);

    // Undo the transformation on the transformed cloud's proposals; their
    // saliency uncertainties carry over unchanged.
    const RigidTransform inv = pair.transform.inverse();
    std::vector<ad::Value> q_prime;
    q_prime.reserve(prop_b.positions.size());
    for (const ad::Value& qt : prop_b.positions) {
        q_prime.push_back(s.tape.affine(qt, inv.rotation, inv.translation));
    }

    TotalLossResult total = total_loss_t(
        s.tape, prop_a.positions, prop_a.sigmas, q_prime, prop_b.sigmas,
        pair.source, pair.transformed, prop_b.positions, cfg.lambda, cfg.loss_mode);
    s.loss = total.value;
    s.breakdown = total.breakdown;

    if (!std::isfinite(s.breakdown.chamfer_term)) {
        throw TrainingDivergedError("non-finite chamfer term in training loss");
    }
    if (!std::isfinite(s.breakdown.point_term)) {
        throw TrainingDivergedError("non-finite point term in training loss");
    }
    if (!std::isfinite(s.breakdown.total)) {
        throw TrainingDivergedError("non-finite total training loss");
    }
}

}  // namespace

LossBreakdown train_step(const TrainingPair& pair, ad::ParamStore& store,
                         const TrainConfig& cfg, std::int64_t step_index) {
    cfg.validate();
    if (pair.source.size() < static_cast<std::size_t>(cfg.fpn.proposal_count) ||
        pair.transformed.size() < static_cast<std::size_t>(cfg.fpn.proposal_count)) {
        throw std::invalid_argument("train_step: cloud smaller than proposal count");
    }
    StepLoss s;
    forward_pair(s, pair, store, cfg, step_index);
    s.tape.backward(s.loss);
    adam_step(store, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    return s.breakdown;
}

TrainResult train(const std::vector<PointCloud>& dataset, const TrainConfig& cfg,
                  const std::string& checkpoint_path,
                  const std::string& curve_csv_path,
                  ad::ParamStore* resume_store) {
    cfg.validate();
    if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
    for (const PointCloud& cloud : dataset) {
        if (cloud.size() < static_cast<std::size_t>(cfg.fpn.proposal_count)) {
            throw std::invalid_argument("train: cloud smaller than proposal count");
        }
    }

    ad::ParamStore local_store(derive_seed(cfg.seed, seed_stage::kParamInit));
    ad::ParamStore& store = resume_store ? *resume_store : local_store;
    init_fpn_params(store, cfg.fpn);
    store_fpn_config(store, cfg.fpn);

    const std::int64_t n_clouds = static_cast<std::int64_t>(dataset.size());
    std::int64_t total_steps =
        static_cast<std::int64_t>(cfg.epochs) * n_clouds * cfg.pairs_per_cloud;
    if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);

    std::ofstream csv;
    if (!curve_csv_path.empty()) {
        csv.open(curve_csv_path);
        if (!csv) throw IoError("cannot open loss curve CSV: " + curve_csv_path);
        csv << "step,total,chamfer,point\n";
    }

    TrainResult result;
    const std::int64_t first_step = store.step();
    for (std::int64_t step = first_step; step < total_steps; ++step) {
        // Step -> (cloud, pair) schedule is a pure function of the step
        // index, so a resumed run continues the exact same sequence.
        const std::int64_t cloud_idx = (step / cfg.pairs_per_cloud) % n_clouds;
        const std::uint64_t pair_seed =
            derive_seed(cfg.seed, seed_stage::kPairs, static_cast<std::uint64_t>(step));
        const TrainingPair pair =
            make_pair(dataset[static_cast<std::size_t>(cloud_idx)], cfg.augmentation, pair_seed);

        LossBreakdown bd;
        if (cfg.batch_accumulation == 1) {
            StepLoss s;
            forward_pair(s, pair, store, cfg, step);
            s.tape.backward(s.loss);
            adam_step(store, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
            bd = s.breakdown;
        } else {
            // Gradients averaged over the accumulation batch.
            const double inv = 1.0 / cfg.batch_accumulation;
            for (int b = 0; b < cfg.batch_accumulation; ++b) {
                const std::uint64_t sub_seed =
                    derive_seed(pair_seed, seed_stage::kPairs, static_cast<std::uint64_t>(b));
                const TrainingPair sub_pair =
                    b == 0 ? pair
                           : make_pair(dataset[static_cast<std::size_t>(cloud_idx)],
                                       cfg.augmentation, sub_seed);
                StepLoss s;
                forward_pair(s, sub_pair, store, cfg, step);
                const ad::Value scaled = s.tape.scale(s.loss, inv);
                s.tape.backward(scaled);
                if (b == 0) bd = s.breakdown;
            }
            adam_step(store, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        }

        if (csv.is_open()) {
            char line[160];
            std::snprintf(line, sizeof(line), "%lld,%.17g,%.17g,%.17g\n",
                          static_cast<long long>(step), bd.total, bd.chamfer_term,
                          bd.point_term);
            csv << line;
        }
        result.curve.push_back(std::move(bd));
        ++result.steps;
    }

    if (!checkpoint_path.empty()) store.save(checkpoint_path);
    if (csv.is_open() && !csv) throw IoError("loss curve CSV write failed");
    return result;
}

// ---------------------------------------------------------------------------
// Synthetic shapes

namespace {

struct Triangle {
    Vec3 a, b, c;
    double area() const { return 0.5 * (b - a).cross(c - a).norm(); }
};

void add_quad(std::vector<Triangle>& tris, const Vec3& a, const Vec3& b,
              const Vec3& c, const Vec3& d) {
    tris.push_back({a, b, c});
    tris.push_back({a, c, d});
}

// Area-weighted triangle pick + uniform barycentric sample.
PointCloud sample_triangles(const std::vector<Triangle>& tris, int n_points,
                            Rng& rng) {
    std::vector<double> cumulative;
    cumulative.reserve(tris.size());
    double total = 0.0;
    for (const Triangle& t : tris) {
        total += t.area();
        cumulative.push_back(total);
    }
    PointCloud cloud;
    cloud.points.reserve(static_cast<std::size_t>(n_points));
    for (int i = 0; i < n_points; ++i) {
        const double r = rng.uniform(0.0, total);
        const std::size_t k = static_cast<std::size_t>(
            std::lower_bound(cumulative.begin(), cumulative.end(), r) -
            cumulative.begin());
        const Triangle& t = tris[std::min(k, tris.size() - 1)];
        double u = rng.uniform(), v = rng.uniform();
        if (u + v > 1.0) {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        cloud.points.push_back(t.a + u * (t.b - t.a) + v * (t.c - t.a));
    }
    return cloud;
}

double max_pairwise(const std::vector<Vec3>& pts) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        for (std::size_t j = i + 1; j < pts.size(); ++j) {
            d2 = std::max(d2, (pts[i] - pts[j]).squaredNorm());
        }
    }
    return std::sqrt(d2);
}

void center_and_unit_diameter(std::vector<Triangle>& tris,
                              std::vector<Vec3>& corners) {
    Vec3 c = Vec3::Zero();
    for (const Vec3& p : corners) c += p;
    c /= static_cast<double>(corners.size());
    const double diam = max_pairwise(corners);
    const double scale = 1.0 / diam;
    for (Vec3& p : corners) p = (p - c) * scale;
    for (Triangle& t : tris) {
        t.a = (t.a - c) * scale;
        t.b = (t.b - c) * scale;
        t.c = (t.c - c) * scale;
    }
}

}  // namespace

SyntheticShape parse_shape(const std::string& name) {
    if (name == "box") return SyntheticShape::kBox;
    if (name == "l_bracket") return SyntheticShape::kLBracket;
    if (name == "pyramid") return SyntheticShape::kPyramid;
    if (name == "plane_with_bumps") return SyntheticShape::kPlaneWithBumps;
    throw std::invalid_argument("unknown shape: " + name);
}

std::string shape_name(SyntheticShape shape) {
    switch (shape) {
        case SyntheticShape::kBox: return "box";
        case SyntheticShape::kLBracket: return "l_bracket";
        case SyntheticShape::kPyramid: return "pyramid";
        case SyntheticShape::kPlaneWithBumps: return "plane_with_bumps";
    }
    throw std::invalid_argument("unknown shape enum");
}

SyntheticCloud gen_synthetic(SyntheticShape shape, int n_points, double jitter,
                             std::uint64_t seed) {
    if (n_points < 100) throw std::invalid_argument("gen_synthetic: n_points must be >= 100");
    if (jitter < 0.0) throw std::invalid_argument("gen_synthetic: jitter must be >= 0");
    Rng rng(derive_seed(seed, seed_stage::kShape));

    std::vector<Triangle> tris;
    std::vector<Vec3> corners;

    switch (shape) {
        case SyntheticShape::kBox: {
            const double a = 1.0;
            const double b = rng.uniform(0.6, 0.85);
            const double c = rng.uniform(0.35, 0.6);
            for (int sx : {-1, 1}) {
                for (int sy : {-1, 1}) {
                    for (int sz : {-1, 1}) {
                        corners.emplace_back(0.5 * a * sx, 0.5 * b * sy, 0.5 * c * sz);
                    }
                }
            }
            const auto v = [&](int sx, int sy, int sz) {
                return Vec3(0.5 * a * sx, 0.5 * b * sy, 0.5 * c * sz);
            };
            add_quad(tris, v(-1, -1, -1), v(1, -1, -1), v(1, 1, -1), v(-1, 1, -1));
            add_quad(tris, v(-1, -1, 1), v(1, -1, 1), v(1, 1, 1), v(-1, 1, 1));
            add_quad(tris, v(-1, -1, -1), v(1, -1, -1), v(1, -1, 1), v(-1, -1, 1));
            add_quad(tris, v(-1, 1, -1), v(1, 1, -1), v(1, 1, 1), v(-1, 1, 1));
            add_quad(tris, v(-1, -1, -1), v(-1, 1, -1), v(-1, 1, 1), v(-1, -1, 1));
            add_quad(tris, v(1, -1, -1), v(1, 1, -1), v(1, 1, 1), v(1, -1, 1));
            break;
        }
        case SyntheticShape::kLBracket: {
            // L cross-section in xy, extruded along z. Outer a x b with an
            // (a - w) x (b - h) quadrant removed: 6 polygon vertices.
            const double a = 1.0;
            const double b = rng.uniform(0.7, 0.95);
            const double w = rng.uniform(0.3, 0.5) * a;
            const double h = rng.uniform(0.3, 0.5) * b;
            const double depth = rng.uniform(0.3, 0.5);
            const std::vector<Eigen::Vector2d> poly = {
                {0.0, 0.0}, {a, 0.0}, {a, h}, {w, h}, {w, b}, {0.0, b}};
            for (double z : {0.0, depth}) {
                for (const Eigen::Vector2d& p : poly) corners.emplace_back(p.x(), p.y(), z);
            }
            // Side faces.
            for (std::size_t i = 0; i < poly.size(); ++i) {
                const Eigen::Vector2d& p = poly[i];
                const Eigen::Vector2d& q = poly[(i + 1) % poly.size()];
                add_quad(tris, Vec3(p.x(), p.y(), 0.0), Vec3(q.x(), q.y(), 0.0),
                         Vec3(q.x(), q.y(), depth), Vec3(p.x(), p.y(), depth));
            }
            // Top and bottom: the L splits into two rectangles.
            for (double z : {0.0, depth}) {
                add_quad(tris, Vec3(0, 0, z), Vec3(a, 0, z), Vec3(a, h, z), Vec3(0, h, z));
                add_quad(tris, Vec3(0, h, z), Vec3(w, h, z), Vec3(w, b, z), Vec3(0, b, z));
            }
            break;
        }
        case SyntheticShape::kPyramid: {
            const double s = 1.0;
            const double height = rng.uniform(0.6, 0.9);
            const Vec3 apex(0.0, 0.0, height);
            const std::vector<Vec3> base = {
                {-0.5 * s, -0.5 * s, 0.0},
                {0.5 * s, -0.5 * s, 0.0},
                {0.5 * s, 0.5 * s, 0.0},
                {-0.5 * s, 0.5 * s, 0.0}};
            corners = base;
            corners.push_back(apex);
            add_quad(tris, base[0], base[1], base[2], base[3]);
            for (int i = 0; i < 4; ++i) {
                tris.push_back({base[static_cast<std::size_t>(i)],
                                base[static_cast<std::size_t>((i + 1) % 4)], apex});
            }
            break;
        }
        case SyntheticShape::kPlaneWithBumps: {
            const double a = 1.0, b = 0.6;
            struct Bump { Eigen::Vector2d center; double amp, width; };
            std::vector<Bump> bumps;
            for (int i = 0; i < 3; ++i) {
                bumps.push_back({{rng.uniform(-0.3, 0.3), rng.uniform(-0.18, 0.18)},
                                 rng.uniform(0.04, 0.08),
                                 rng.uniform(0.05, 0.1)});
            }
            const auto height = [&](double x, double y) {
                double z = 0.0;
                for (const Bump& bump : bumps) {
                    const double dx = x - bump.center.x(), dy = y - bump.center.y();
                    z += bump.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * bump.width * bump.width));
                }
                return z;
            };
            for (int sx : {-1, 1}) {
                for (int sy : {-1, 1}) {
                    corners.emplace_back(0.5 * a * sx, 0.5 * b * sy,
                                         height(0.5 * a * sx, 0.5 * b * sy));
                }
            }
            for (const Bump& bump : bumps) {
                corners.emplace_back(bump.center.x(), bump.center.y(),
                                     height(bump.center.x(), bump.center.y()));
            }
            // Graph surface: sample the rectangle, lift analytically.
            SyntheticCloud out;
            const double diam = max_pairwise(corners);
            const double scale = 1.0 / diam;
            Vec3 centroid = Vec3::Zero();
            for (const Vec3& p : corners) centroid += p;
            centroid /= static_cast<double>(corners.size());
            out.cloud.points.reserve(static_cast<std::size_t>(n_points));
            for (int i = 0; i < n_points; ++i) {
                const double x = rng.uniform(-0.5 * a, 0.5 * a);
                const double y = rng.uniform(-0.5 * b, 0.5 * b);
                out.cloud.points.push_back((Vec3(x, y, height(x, y)) - centroid) * scale);
            }
            for (const Vec3& p : corners) {
                out.salient_points.push_back((p - centroid) * scale);
            }
            if (jitter > 0.0) {
                out.cloud = add_gaussian_noise(out.cloud, jitter,
                                               derive_seed(seed, seed_stage::kNoise));
            }
            return out;
        }
    }

    center_and_unit_diameter(tris, corners);
    SyntheticCloud out;
    out.cloud = sample_triangles(tris, n_points, rng);
    out.salient_points = corners;
    if (jitter > 0.0) {
        out.cloud =
            add_gaussian_noise(out.cloud, jitter, derive_seed(seed, seed_stage::kNoise));
    }
    return out;
}

std::vector<PointCloud> synthetic_corpus(int count, int n_points, double jitter,
                                         std::uint64_t seed) {
    const SyntheticShape shapes[] = {SyntheticShape::kBox, SyntheticShape::kLBracket,
                                     SyntheticShape::kPyramid};
    std::vector<PointCloud> corpus;
    corpus.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        corpus.push_back(gen_synthetic(shapes[i % 3], n_points, jitter,
                                       derive_seed(seed, seed_stage::kShape,
                                                   static_cast<std::uint64_t>(i)))
                             .cloud);
    }
    return corpus;
}

}  // namespace usip
