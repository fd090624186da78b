#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "usip/eval.hpp"
#include "usip/geometry.hpp"
#include "usip/training.hpp"

using namespace usip;

namespace {

std::vector<Vec3> random_points(Rng& rng, int n, double scale = 1.0) {
    std::vector<Vec3> out;
    for (int i = 0; i < n; ++i) {
        out.emplace_back(scale * rng.uniform(-1, 1), scale * rng.uniform(-1, 1),
                         scale * rng.uniform(-1, 1));
    }
    return out;
}

Descriptor unit_descriptor(std::initializer_list<double> xs, int anchor) {
    Descriptor d;
    d.vector = Eigen::VectorXd((Eigen::Index)xs.size());
    Eigen::Index i = 0;
    for (double x : xs) d.vector[i++] = x;
    d.vector.normalize();
    d.anchor = anchor;
    return d;
}

}  // namespace

TEST_CASE("repeatability: self pair is exactly 1") {
    Rng rng(1);
    const std::vector<Vec3> q = random_points(rng, 50);
    CHECK(repeatability(q, q, RigidTransform::identity(), 0.01) == 1.0);
}

TEST_CASE("repeatability: 2 of 4 within epsilon gives 0.5") {
    const std::vector<Vec3> q = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0),
                                 Vec3(3, 0, 0)};
    const std::vector<Vec3> qt = {Vec3(0, 0, 0.005), Vec3(1, 0, 0.005),
                                  Vec3(2, 0, 0.5), Vec3(3, 0, 0.5)};
    CHECK(repeatability(q, qt, RigidTransform::identity(), 0.01) == 0.5);
}

TEST_CASE("repeatability: transformed keypoints against their images") {
    Rng rng(2);
    const std::vector<Vec3> q = random_points(rng, 30);
    const RigidTransform t = random_se3(RotationMode::kFull3D, 2.0, 5);
    std::vector<Vec3> qt;
    for (const Vec3& p : q) qt.push_back(t.apply(p));
    CHECK(repeatability(q, qt, t, 1e-6) == 1.0);
    CHECK_THROWS_AS(repeatability(q, qt, t, 0.0), std::invalid_argument);
}

TEST_CASE("repeatability on a constructed 60% overlap pair matches the fraction") {
    // 100 source points; the partner keeps 60 of them and replaces the rest
    // with far-away points, then gets rigidly moved.
    Rng rng(3);
    PointCloud a;
    a.points = random_points(rng, 100);
    PointCloud b_raw;
    for (int i = 0; i < 60; ++i) b_raw.points.push_back(a.points[(std::size_t)i]);
    for (int i = 0; i < 40; ++i) {
        b_raw.points.push_back(Vec3(50, 50, 50) + random_points(rng, 1)[0]);
    }
    const RigidTransform t = random_se3(RotationMode::kFull3D, 1.0, 6);
    const PointCloud b = apply_transform(b_raw, t);
    const double rep = repeatability(a.points, b.points, t, 0.03);
    CHECK(std::abs(rep - 0.6) <= 0.01);  // within 1/N
}

TEST_CASE("random sampling detector: n cloud points, deterministic per seed") {
    Rng rng(4);
    PointCloud cloud;
    cloud.points = random_points(rng, 80);
    const KeypointSet a = random_sampling_detector(cloud, 16, 9);
    const KeypointSet b = random_sampling_detector(cloud, 16, 9);
    REQUIRE(a.size() == 16);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.positions[i] == b.positions[i]);
    std::set<double> xs;
    for (const Vec3& p : cloud.points) xs.insert(p.x());
    for (const Vec3& p : a.positions) CHECK(xs.count(p.x()) == 1);
    CHECK_THROWS_AS(random_sampling_detector(cloud, 81, 0), std::invalid_argument);
}

TEST_CASE("robustness sweep: level zero equals unperturbed repeatability; rows per level") {
    const std::vector<PointCloud> corpus = synthetic_corpus(4, 220, 0.002, 5);
    const EvalDetector detector = random_detector(16);
    const std::vector<double> levels = {0.0, 0.01, 0.02};
    const std::vector<RobustnessRow> rows = robustness_sweep(
        detector, corpus, SweepKind::kNoise, levels, 16, 0.05, 11);
    REQUIRE(rows.size() == levels.size());
    for (std::size_t i = 0; i < rows.size(); ++i) CHECK(rows[i].level == levels[i]);

    // Reference: same pairs (same seed), no perturbation at level 0.
    AugmentationSpec aug;
    aug.rotation_mode = RotationMode::kFull3D;
    const std::vector<EvalPair> pairs =
        make_eval_pairs(corpus, (int)corpus.size(), aug, 11);
    double expect = 0.0;
    for (std::size_t p = 0; p < pairs.size(); ++p) {
        const KeypointSet ka = detector(pairs[p].a, derive_seed(11, seed_stage::kEval, 2 * p));
        const KeypointSet kb =
            detector(pairs[p].b, derive_seed(11, seed_stage::kEval, 2 * p + 1));
        expect += repeatability(ka.positions, kb.positions, pairs[p].t_ab, 0.05);
    }
    expect /= (double)pairs.size();
    CHECK(rows[0].repeatability == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("robustness sweep: oversized downsample level marked unavailable") {
    const std::vector<PointCloud> corpus = synthetic_corpus(2, 150, 0.002, 6);
    const std::vector<double> levels = {1.0, 32.0};
    const std::vector<RobustnessRow> rows = robustness_sweep(
        random_detector(16), corpus, SweepKind::kDownsample, levels, 16, 0.05, 12);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].available);
    CHECK_FALSE(rows[1].available);  // 150/32 = 4 points < 16 keypoints
}

TEST_CASE("random baseline stays near chance level across noise") {
    const std::vector<PointCloud> corpus = synthetic_corpus(6, 300, 0.002, 7);
    const std::vector<double> levels = {0.0, 0.01, 0.02, 0.04};
    const std::vector<RobustnessRow> rows = robustness_sweep(
        random_detector(16), corpus, SweepKind::kNoise, levels, 16, 0.03, 13);
    double mean = 0.0;
    for (const RobustnessRow& r : rows) mean += r.repeatability;
    mean /= (double)rows.size();
    for (const RobustnessRow& r : rows) {
        CHECK(r.repeatability <= std::max(3.0 * mean, 0.15));
    }
}

TEST_CASE("describe: unit norm, joint-translation invariance, duplicate patches") {
    const SyntheticCloud shape = gen_synthetic(SyntheticShape::kBox, 400, 0.002, 8);
    DescriptorConfig cfg;
    cfg.dim = 16;
    cfg.point_widths = {8, 16};
    cfg.head_widths = {16};
    ad::ParamStore params(21);
    KeypointSet kps;
    for (int i = 0; i < 6; ++i) {
        kps.positions.push_back(shape.cloud.points[(std::size_t)(i * 40)]);
        kps.sigmas.push_back(0.5);
    }
    const double radius = 0.12;
    const std::vector<Descriptor> base =
        describe(shape.cloud, kps, radius, params, cfg);
    REQUIRE(base.size() == kps.size());
    for (const Descriptor& d : base) {
        REQUIRE_FALSE(d.empty);
        CHECK(std::abs(d.vector.norm() - 1.0) < 1e-9);
    }

    // Joint translation leaves descriptors unchanged within float noise.
    const Vec3 t(3.0, -1.0, 2.0);
    PointCloud moved = shape.cloud;
    for (Vec3& p : moved.points) p += t;
    KeypointSet moved_kps = kps;
    for (Vec3& p : moved_kps.positions) p += t;
    const std::vector<Descriptor> moved_desc =
        describe(moved, moved_kps, radius, params, cfg);
    for (std::size_t i = 0; i < base.size(); ++i) {
        CHECK((moved_desc[i].vector - base[i].vector).cwiseAbs().maxCoeff() < 1e-9);
    }

    // Identical local geometry -> identical descriptors: copy a patch far away.
    PointCloud dup;
    const Vec3 anchor = kps.positions[0];
    std::vector<Vec3> patch;
    for (const Vec3& p : shape.cloud.points) {
        if ((p - anchor).norm() <= radius * 1.5) patch.push_back(p - anchor);
    }
    const Vec3 here(0, 0, 0), there(10, 10, 10);
    for (const Vec3& rel : patch) {
        dup.points.push_back(here + rel);
        dup.points.push_back(there + rel);
    }
    KeypointSet two;
    two.positions = {here, there};
    two.sigmas = {0.5, 0.5};
    const std::vector<Descriptor> twin = describe(dup, two, radius, params, cfg);
    CHECK((twin[0].vector - twin[1].vector).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("describe: empty balls flagged with zero vectors") {
    PointCloud cloud;
    cloud.points = {Vec3(0, 0, 0), Vec3(0.1, 0, 0)};
    DescriptorConfig cfg;
    cfg.dim = 8;
    cfg.point_widths = {4, 8};
    cfg.head_widths = {8};
    ad::ParamStore params(22);
    KeypointSet kps;
    kps.positions = {Vec3(0, 0, 0), Vec3(100, 0, 0)};
    kps.sigmas = {0.5, 0.5};
    const std::vector<Descriptor> out = describe(cloud, kps, 0.5, params, cfg);
    CHECK_FALSE(out[0].empty);
    CHECK(out[1].empty);
    CHECK(out[1].vector.isZero(0.0));
}

TEST_CASE("weak triplet: inactive hinge, vanished weights, weight normalization") {
    ad::Tape tape;
    const auto val = [&tape](const Descriptor& d) {
        return tape.constant(Eigen::MatrixXd(d.vector));
    };
    const Descriptor anchor = unit_descriptor({1, 0, 0, 0}, 0);
    const Descriptor pos = unit_descriptor({1, 0, 0, 0}, 0);     // distance 0
    const Descriptor neg = unit_descriptor({0, 1, 0, 0}, 0);     // distance sqrt(2)
    std::vector<ad::Value> fa = {val(anchor)};
    std::vector<ad::Value> fp = {val(pos)};
    std::vector<ad::Value> fn = {val(neg)};

    // gamma below the negative distance: hinge inactive.
    const WeakTripletResult inactive =
        triplet_loss_weak(tape, fa, std::vector<double>{0.2}, fp, fn, 0.4, 1.0);
    CHECK(inactive.loss.scalar() == 0.0);
    CHECK_FALSE(inactive.all_weights_zero);

    // All sigmas above xi: every weight vanishes.
    const WeakTripletResult zeroed =
        triplet_loss_weak(tape, fa, std::vector<double>{2.0}, fp, fn, 0.4, 1.0);
    CHECK(zeroed.loss.scalar() == 0.0);
    CHECK(zeroed.all_weights_zero);

    // Weights sum to M whenever any is positive: check through the loss of a
    // construction where every hinge is exactly 1.
    const Descriptor far_pos = unit_descriptor({0, 0, 1, 0}, 0);
    std::vector<ad::Value> fa3 = {val(anchor), val(anchor), val(anchor)};
    std::vector<ad::Value> fp3 = {val(far_pos)};
    std::vector<ad::Value> fn3 = {val(far_pos)};  // same distance: margin = gamma
    const double gamma = 1.0;
    const WeakTripletResult res = triplet_loss_weak(
        tape, fa3, std::vector<double>{0.2, 0.6, 0.9}, fp3, fn3, gamma, 1.0);
    // Each term = w_m * gamma, sum w_m = M = 3.
    CHECK(res.loss.scalar() == doctest::Approx(3.0 * gamma).epsilon(1e-12));
}

TEST_CASE("strong triplet: skip counting and constructed hand value") {
    ad::Tape tape;
    const int dim = 4;
    const auto unit = [&](int axis) {
        Eigen::MatrixXd m(dim, 1);
        m.setZero();
        m(axis, 0) = 1.0;
        return tape.constant(m);
    };
    // Anchors and primed sets share keypoint positions under identity poses.
    const std::vector<Vec3> q = {Vec3(0, 0, 0), Vec3(1, 0, 0)};
    const std::vector<Vec3> qp = {Vec3(0.01, 0, 0), Vec3(1.01, 0, 0)};
    std::vector<ad::Value> f = {unit(0), unit(1)};
    std::vector<ad::Value> fp = {unit(0), unit(1)};
    const RigidTransform id;

    // rho smaller than every keypoint gap: all anchors skipped, loss 0.
    const StrongTripletResult skipped = triplet_loss_strong(
        tape, f, q, fp, qp, id, id, 0.4, 0.001, 1.0, std::vector<double>{0.2, 0.2}, 3);
    CHECK(skipped.loss.scalar() == 0.0);
    CHECK(skipped.skipped_anchors == 2);

    // Positive at distance 0 in descriptor space, negative equidistant:
    // margin = gamma for both anchors, weights sum to 2.
    const StrongTripletResult active = triplet_loss_strong(
        tape, f, q, fp, qp, id, id, 0.7, 0.1, 1.0, std::vector<double>{0.5, 0.5}, 3);
    CHECK(active.skipped_anchors == 0);
    // Each anchor: positive its own twin (d = 0); the only beyond-rho
    // candidate is the other primed descriptor at distance sqrt(2).
    const double expected = 2.0 * std::max(0.0 - std::sqrt(2.0) + 0.7, 0.0);
    CHECK(active.loss.scalar() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("match: identity, orthogonal frame, mutual subset") {
    std::vector<Descriptor> fa = {unit_descriptor({1, 0, 0, 0}, 0),
                                  unit_descriptor({0, 1, 0, 0}, 1)};
    const std::vector<DescriptorMatch> self = match(fa, fa, false);
    REQUIRE(self.size() == 2);
    CHECK(self[0].b == 0);
    CHECK(self[1].b == 1);

    // Orthogonal candidates except one: nearest is the non-orthogonal one.
    std::vector<Descriptor> fb = {unit_descriptor({0, 0, 1, 0}, 0),
                                  unit_descriptor({0.9, 0.1, 0, 0}, 1),
                                  unit_descriptor({0, 0, 0, 1}, 2)};
    const std::vector<DescriptorMatch> m = match(
        std::vector<Descriptor>{unit_descriptor({1, 0, 0, 0}, 0)}, fb, false);
    REQUIRE(m.size() == 1);
    CHECK(m[0].b == 1);

    // Mutual check output is a subset of the plain output.
    Rng rng(14);
    std::vector<Descriptor> ra, rb;
    for (int i = 0; i < 12; ++i) {
        Eigen::VectorXd v(6), w(6);
        for (int k = 0; k < 6; ++k) {
            v[k] = rng.normal();
            w[k] = rng.normal();
        }
        ra.push_back({v.normalized(), i, false});
        rb.push_back({w.normalized(), i, false});
    }
    const auto plain = match(ra, rb, false);
    const auto mutual = match(ra, rb, true);
    CHECK(mutual.size() <= plain.size());
    for (const DescriptorMatch& mm : mutual) {
        const bool found = std::any_of(plain.begin(), plain.end(),
                                       [&](const DescriptorMatch& pm) {
                                           return pm.a == mm.a && pm.b == mm.b;
                                       });
        CHECK(found);
    }
}

TEST_CASE("ransac: noiseless all-inlier correspondences recover T") {
    Rng rng(15);
    const RigidTransform t = random_se3(RotationMode::kFull3D, 2.0, 16);
    std::vector<Correspondence> corr;
    for (int i = 0; i < 20; ++i) {
        const Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        corr.push_back({p, t.apply(p)});
    }
    const RansacResult res = ransac_register(corr, 10, 0.05, 17);
    CHECK((res.transform.rotation - t.rotation).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((res.transform.translation - t.translation).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(res.inlier_count == 20);
}

TEST_CASE("ransac: 30% inliers, mask consistent with threshold") {
    Rng rng(18);
    const RigidTransform t = random_se3(RotationMode::kFull3D, 1.0, 19);
    const double threshold = 0.05;
    std::vector<Correspondence> corr;
    for (int i = 0; i < 30; ++i) {
        const Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        corr.push_back({p, t.apply(p)});
    }
    int outliers = 0;
    while (outliers < 70) {
        const Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        const Vec3 q(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3));
        if ((t.apply(p) - q).norm() < 2.0 * threshold) continue;  // keep outliers out
        corr.push_back({p, q});
        ++outliers;
    }
    const RansacResult res = ransac_register(corr, 1000, threshold, 20);
    CHECK((res.transform.rotation - t.rotation).cwiseAbs().maxCoeff() < 1e-9);
    for (std::size_t i = 0; i < corr.size(); ++i) {
        const double residual = (res.transform.apply(corr[i].p) - corr[i].q).norm();
        if (res.inlier_mask[i]) CHECK(residual < threshold);
        else CHECK(residual >= threshold);
    }
    // Pure function of (corr, iters, threshold, seed).
    const RansacResult again = ransac_register(corr, 1000, threshold, 20);
    CHECK(again.transform.rotation == res.transform.rotation);
    CHECK(again.transform.translation == res.transform.translation);

    CHECK_THROWS_AS(ransac_register(std::vector<Correspondence>{corr[0], corr[1]}, 10,
                                    threshold, 0),
                    std::invalid_argument);
}

TEST_CASE("registration metrics: identity, 10-degree offset, thresholds") {
    const RigidTransform id;
    const RegistrationMetrics same = registration_metrics(id, id);
    CHECK(same.rte == 0.0);
    CHECK(same.rre_deg == 0.0);
    CHECK(same.success);

    RigidTransform z10;
    const double a = 10.0 * 3.14159265358979323846 / 180.0;
    z10.rotation << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
    const RegistrationMetrics ten = registration_metrics(z10, id);
    CHECK(std::abs(ten.rre_deg - 10.0) < 1e-9);
    CHECK_FALSE(ten.success);  // RRE 10 >= 5
}

TEST_CASE("registration metrics: success thresholds RTE < 2 and RRE < 5") {
    const RigidTransform id;
    RigidTransform far_t;
    far_t.translation = Vec3(2.5, 0, 0);
    const RegistrationMetrics metrics = registration_metrics(far_t, id);
    CHECK(metrics.rte == 2.5);
    CHECK_FALSE(metrics.success);  // RTE 2.5 fails regardless of RRE 0

    RigidTransform near_t;
    near_t.translation = Vec3(1.0, 0, 0);
    CHECK(registration_metrics(near_t, id).success);
}
