#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "usip/geometry.hpp"
#include "usip/kdtree.hpp"

using namespace usip;

namespace {

PointCloud random_cloud(Rng& rng, int n, double scale = 1.0) {
    PointCloud cloud;
    for (int i = 0; i < n; ++i) {
        cloud.points.emplace_back(scale * rng.uniform(-1.0, 1.0),
                                  scale * rng.uniform(-1.0, 1.0),
                                  scale * rng.uniform(-1.0, 1.0));
    }
    return cloud;
}

// O(Nk) brute-force reference for the kNN contract.
std::vector<int> brute_knn(const Vec3& q, const std::vector<Vec3>& pts, int k) {
    std::vector<int> idx(pts.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        const double da = (pts[(std::size_t)a] - q).squaredNorm();
        const double db = (pts[(std::size_t)b] - q).squaredNorm();
        if (da != db) return da < db;
        return a < b;
    });
    idx.resize((std::size_t)k);
    return idx;
}

double rotation_angle_deg(const Mat3& r) {
    const double arg = std::clamp(0.5 * (r.trace() - 1.0), -1.0, 1.0);
    return std::acos(arg) * 180.0 / 3.14159265358979323846;
}

}  // namespace

TEST_CASE("fps: M = N returns every index") {
    Rng rng(11);
    PointCloud cloud = random_cloud(rng, 17);
    const FpsResult fps = fps_sample(cloud, 17, 0);
    std::set<int> seen(fps.indices.begin(), fps.indices.end());
    CHECK(seen.size() == 17);
}

TEST_CASE("fps: unit square corners beat the center") {
    PointCloud cloud;
    cloud.points = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(1, 1, 0), Vec3(0, 1, 0),
                    Vec3(0.5, 0.5, 0)};
    for (std::uint64_t seed : {0ULL, 1ULL, 2ULL, 3ULL, 7ULL}) {
        const FpsResult fps = fps_sample(cloud, 4, seed);
        std::set<int> seen(fps.indices.begin(), fps.indices.end());
        CHECK(seen == std::set<int>{0, 1, 2, 3});
    }
}

TEST_CASE("fps: M = 1 gives the deterministic seed index") {
    Rng rng(5);
    PointCloud cloud = random_cloud(rng, 40);
    const FpsResult a = fps_sample(cloud, 1, 3);
    const FpsResult b = fps_sample(cloud, 1, 3);
    CHECK(a.indices == b.indices);
    CHECK(a.indices.size() == 1);
}

TEST_CASE("fps: greedy invariant on random clouds") {
    Rng rng(23);
    for (int trial = 0; trial < 10; ++trial) {
        PointCloud cloud = random_cloud(rng, 50);
        const int m = 12;
        const FpsResult fps = fps_sample(cloud, m, (std::uint64_t)trial);
        for (int step = 1; step < m; ++step) {
            const auto min_dist_to_prior = [&](const Vec3& p) {
                double d = std::numeric_limits<double>::infinity();
                for (int s = 0; s < step; ++s) {
                    d = std::min(d, (p - fps.positions[(std::size_t)s]).squaredNorm());
                }
                return d;
            };
            const double selected = min_dist_to_prior(fps.positions[(std::size_t)step]);
            for (int i = 0; i < 50; ++i) {
                const bool chosen = std::find(fps.indices.begin(),
                                              fps.indices.begin() + step + 1,
                                              i) != fps.indices.begin() + step + 1;
                if (chosen) continue;
                CHECK(selected >= min_dist_to_prior(cloud.points[(std::size_t)i]));
            }
        }
    }
}

TEST_CASE("fps: M > N rejected") {
    Rng rng(1);
    PointCloud cloud = random_cloud(rng, 5);
    CHECK_THROWS_AS(fps_sample(cloud, 6, 0), std::invalid_argument);
}

TEST_CASE("knn: query at an existing point returns that index first") {
    Rng rng(2);
    PointCloud cloud = random_cloud(rng, 30);
    const std::vector<Vec3> queries = {cloud.points[13]};
    const auto result = knn_search(queries, cloud, 1);
    CHECK(result[0][0] == 13);
}

TEST_CASE("knn: collinear points, middle query") {
    PointCloud cloud;
    cloud.points = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(3, 0, 0)};
    // Query between the first two: both flanking points come back first.
    const auto between = knn_search(std::vector<Vec3>{Vec3(0.9, 0, 0)}, cloud, 2);
    CHECK(between[0] == std::vector<int>{1, 0});
    // Query on the middle point itself matches brute force exactly.
    const auto at_middle = knn_search(std::vector<Vec3>{Vec3(1, 0, 0)}, cloud, 2);
    CHECK(at_middle[0] == brute_knn(Vec3(1, 0, 0), cloud.points, 2));
}

TEST_CASE("knn: equals brute force on 200 random clouds") {
    Rng rng(37);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 5 + rng.uniform_int(60);
        PointCloud cloud = random_cloud(rng, n);
        // Duplicated points exercise the tie-break path.
        if (n > 8 && trial % 3 == 0) {
            cloud.points[(std::size_t)(n - 1)] = cloud.points[2];
            cloud.points[(std::size_t)(n - 2)] = cloud.points[2];
        }
        const int k = 1 + rng.uniform_int(n);
        std::vector<Vec3> queries = {cloud.points[(std::size_t)rng.uniform_int(n)],
                                     Vec3(rng.uniform(-2, 2), rng.uniform(-2, 2),
                                          rng.uniform(-2, 2))};
        const auto result = knn_search(queries, cloud, k);
        for (std::size_t qi = 0; qi < queries.size(); ++qi) {
            REQUIRE(result[qi] == brute_knn(queries[qi], cloud.points, k));
        }
    }
}

TEST_CASE("knn: k > N rejected") {
    Rng rng(3);
    PointCloud cloud = random_cloud(rng, 4);
    CHECK_THROWS_AS(knn_search(std::vector<Vec3>{Vec3(0, 0, 0)}, cloud, 5),
                    std::invalid_argument);
}

TEST_CASE("kdtree radius query matches brute force") {
    Rng rng(41);
    PointCloud cloud = random_cloud(rng, 80);
    const KdTree3 tree(cloud.points);
    for (int trial = 0; trial < 20; ++trial) {
        const Vec3 q(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        const double r = rng.uniform(0.05, 1.0);
        std::vector<int> expected;
        for (int i = 0; i < 80; ++i) {
            if ((cloud.points[(std::size_t)i] - q).norm() <= r) expected.push_back(i);
        }
        CHECK(tree.radius(q, r) == expected);
    }
}

TEST_CASE("grouping: nodes equal to points makes every point own itself") {
    Rng rng(4);
    PointCloud cloud = random_cloud(rng, 25);
    const NodeGrouping g = point_to_node_group(cloud, cloud.points);
    for (int i = 0; i < 25; ++i) {
        CHECK(g.assignment[(std::size_t)i] == i);
        CHECK(g.normalized_offsets[(std::size_t)i].isZero(0.0));
    }
}

TEST_CASE("grouping: two nodes split points by nearest") {
    PointCloud cloud;
    cloud.points = {Vec3(1, 0, 0), Vec3(9, 0, 0)};
    const std::vector<Vec3> nodes = {Vec3(0, 0, 0), Vec3(10, 0, 0)};
    const NodeGrouping g = point_to_node_group(cloud, nodes);
    CHECK(g.assignment == std::vector<int>{0, 1});
}

TEST_CASE("grouping: equidistant point goes to the lower node index") {
    PointCloud cloud;
    cloud.points = {Vec3(5, 0, 0)};
    const std::vector<Vec3> nodes = {Vec3(0, 0, 0), Vec3(10, 0, 0)};
    const NodeGrouping g = point_to_node_group(cloud, nodes);
    CHECK(g.assignment[0] == 0);
}

TEST_CASE("grouping: partition + argmin owner + bit-exact reconstruction") {
    Rng rng(51);
    for (int trial = 0; trial < 20; ++trial) {
        PointCloud cloud = random_cloud(rng, 60, rng.uniform(0.5, 50.0));
        const int m = 2 + rng.uniform_int(10);
        std::vector<Vec3> nodes;
        for (int i = 0; i < m; ++i) {
            nodes.emplace_back(rng.uniform(-50, 50), rng.uniform(-50, 50),
                               rng.uniform(-50, 50));
        }
        const NodeGrouping g = point_to_node_group(cloud, nodes);
        std::set<int> covered;
        for (int node = 0; node < m; ++node) {
            for (int i : g.groups[(std::size_t)node]) {
                CHECK(covered.insert(i).second);  // disjoint
                CHECK(g.assignment[(std::size_t)i] == node);
            }
            CHECK((g.empty[(std::size_t)node] != 0) == g.groups[(std::size_t)node].empty());
        }
        CHECK(covered.size() == cloud.size());  // union = all indices
        for (int i = 0; i < 60; ++i) {
            const int owner = g.assignment[(std::size_t)i];
            const double owner_d =
                (cloud.points[(std::size_t)i] - nodes[(std::size_t)owner]).squaredNorm();
            for (int node = 0; node < m; ++node) {
                const double d =
                    (cloud.points[(std::size_t)i] - nodes[(std::size_t)node]).squaredNorm();
                CHECK(owner_d <= d);
            }
            // reconstruct() must give back the point bit-for-bit
            const Vec3 rec = g.reconstruct(i);
            CHECK(rec.x() == cloud.points[(std::size_t)i].x());
            CHECK(rec.y() == cloud.points[(std::size_t)i].y());
            CHECK(rec.z() == cloud.points[(std::size_t)i].z());
        }
    }
}

TEST_CASE("normals: z = 0 plane gives +-z normals") {
    Rng rng(6);
    PointCloud cloud;
    for (int i = 0; i < 100; ++i) {
        cloud.points.emplace_back(rng.uniform(-1, 1), rng.uniform(-1, 1), 0.0);
    }
    const NormalsResult res = estimate_normals(cloud, 8);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        CHECK(res.degenerate[i] == 0);
        CHECK(std::abs(std::abs(res.cloud.normals[i].z()) - 1.0) < 1e-9);
    }
}

TEST_CASE("normals: unit sphere normals within 15 degrees of radial") {
    Rng rng(7);
    PointCloud cloud;
    for (int i = 0; i < 600; ++i) {
        Vec3 v(rng.normal(), rng.normal(), rng.normal());
        cloud.points.push_back(v.normalized());
    }
    const NormalsResult res = estimate_normals(cloud, 8);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Vec3 radial = cloud.points[i];  // outward
        const double cosang = res.cloud.normals[i].dot(radial);
        CHECK(cosang > std::cos(15.0 * 3.14159265358979323846 / 180.0));
    }
}

TEST_CASE("normals: repeated point neighborhood flagged degenerate") {
    PointCloud cloud;
    for (int i = 0; i < 10; ++i) cloud.points.emplace_back(1.0, 2.0, 3.0);
    cloud.points.emplace_back(5.0, 5.0, 5.0);
    const NormalsResult res = estimate_normals(cloud, 5);
    CHECK(res.degenerate[0] == 1);
    CHECK(res.cloud.normals[0] == Vec3(0, 0, 1));
}

TEST_CASE("apply_transform: identity, inverse, translation") {
    Rng rng(8);
    PointCloud cloud = random_cloud(rng, 40);
    const PointCloud same = apply_transform(cloud, RigidTransform::identity());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        CHECK(same.points[i] == cloud.points[i]);
    }

    const RigidTransform t = random_se3(RotationMode::kFull3D, 2.0, 99);
    const PointCloud back = apply_transform(apply_transform(cloud, t), t.inverse());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        CHECK((back.points[i] - cloud.points[i]).cwiseAbs().maxCoeff() < 1e-10);
    }

    RigidTransform shift;
    shift.translation = Vec3(0.5, -2.0, 3.25);
    const PointCloud moved = apply_transform(cloud, shift);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        CHECK(moved.points[i] == cloud.points[i] + shift.translation);
    }
}

TEST_CASE("apply_transform preserves pairwise distances") {
    Rng rng(9);
    PointCloud cloud = random_cloud(rng, 30, 5.0);
    const RigidTransform t = random_se3(RotationMode::kFull3D, 10.0, 123);
    const PointCloud moved = apply_transform(cloud, t);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        for (std::size_t j = i + 1; j < cloud.size(); ++j) {
            const double before = (cloud.points[i] - cloud.points[j]).norm();
            const double after = (moved.points[i] - moved.points[j]).norm();
            CHECK(std::abs(after - before) <= 1e-9 * std::max(before, 1.0));
        }
    }
}

TEST_CASE("random_se3: orthonormal, planar keeps z") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const RigidTransform t = random_se3(RotationMode::kFull3D, 1.0, seed);
        CHECK(t.is_valid(1e-12));
        const RigidTransform p = random_se3(RotationMode::kPlanar, 1.0, seed);
        CHECK(p.is_valid(1e-12));
        CHECK((p.rotation * Vec3(0, 0, 1)) == Vec3(0, 0, 1));
    }
}

TEST_CASE("random_se3: full-3D rotations have near-zero mean entries") {
    Mat3 mean = Mat3::Zero();
    const int trials = 100000;
    for (int i = 0; i < trials; ++i) {
        mean += random_se3(RotationMode::kFull3D, 0.0, (std::uint64_t)i).rotation;
    }
    mean /= (double)trials;
    CHECK(mean.cwiseAbs().maxCoeff() < 0.02);
}

TEST_CASE("noise: sigma 0 identical; displacement std matches sigma") {
    Rng rng(10);
    PointCloud cloud = random_cloud(rng, 10000);
    const PointCloud same = add_gaussian_noise(cloud, 0.0, 77);
    CHECK(same.points[123] == cloud.points[123]);

    const double sigma = 0.1;
    const PointCloud noisy = add_gaussian_noise(cloud, sigma, 77);
    for (int axis = 0; axis < 3; ++axis) {
        double sum = 0.0, sum_sq = 0.0;
        for (std::size_t i = 0; i < cloud.size(); ++i) {
            const double d = noisy.points[i][axis] - cloud.points[i][axis];
            sum += d;
            sum_sq += d * d;
        }
        const double n = (double)cloud.size();
        const double var = sum_sq / n - (sum / n) * (sum / n);
        const double sd = std::sqrt(var);
        CHECK(sd > 0.095);
        CHECK(sd < 0.105);
    }
}

TEST_CASE("downsample: factor 1 keeps the set; zero-keep rejected") {
    Rng rng(12);
    PointCloud cloud = random_cloud(rng, 20);
    const PointCloud same = random_downsample(cloud, 1, 5);
    std::multiset<double> before, after;
    for (const Vec3& p : cloud.points) before.insert(p.x());
    for (const Vec3& p : same.points) after.insert(p.x());
    CHECK(before == after);

    PointCloud tiny = random_cloud(rng, 3);
    CHECK_THROWS_AS(random_downsample(tiny, 4, 0), std::invalid_argument);

    const PointCloud third = random_downsample(cloud, 3, 5);
    CHECK(third.size() == 6);
}

TEST_CASE("kabsch: identity, 90-degree rotation, noisy recovery") {
    Rng rng(13);
    std::vector<Vec3> p;
    for (int i = 0; i < 10; ++i) {
        p.emplace_back(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    }
    const RigidTransform id = kabsch_align(p, p);
    CHECK((id.rotation - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(id.translation.cwiseAbs().maxCoeff() < 1e-10);

    RigidTransform z90;
    z90.rotation << 0, -1, 0, 1, 0, 0, 0, 0, 1;
    z90.translation = Vec3(0.3, -0.7, 1.1);
    std::vector<Vec3> q;
    for (const Vec3& x : p) q.push_back(z90.apply(x));
    const RigidTransform rec = kabsch_align(p, q);
    CHECK((rec.rotation - z90.rotation).cwiseAbs().maxCoeff() < 1e-9);

    // 100 points, noise sigma 0.01: rotation angle error under 1 degree.
    std::vector<Vec3> big_p, big_q;
    const RigidTransform t = random_se3(RotationMode::kFull3D, 1.0, 321);
    for (int i = 0; i < 100; ++i) {
        const Vec3 x(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        big_p.push_back(x);
        big_q.push_back(t.apply(x) + 0.01 * Vec3(rng.normal(), rng.normal(), rng.normal()));
    }
    const RigidTransform noisy = kabsch_align(big_p, big_q);
    CHECK(rotation_angle_deg(noisy.rotation.transpose() * t.rotation) < 1.0);
}

TEST_CASE("kabsch: recovers 100 random transforms within 1e-9") {
    Rng rng(14);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<Vec3> p;
        for (int i = 0; i < 12; ++i) {
            p.emplace_back(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        }
        const RigidTransform t = random_se3(RotationMode::kFull3D, 5.0, (std::uint64_t)trial);
        std::vector<Vec3> q;
        for (const Vec3& x : p) q.push_back(t.apply(x));
        const RigidTransform rec = kabsch_align(p, q);
        CHECK((rec.rotation - t.rotation).cwiseAbs().maxCoeff() < 1e-9);
        CHECK((rec.translation - t.translation).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("kabsch: collinear input rejected") {
    std::vector<Vec3> p = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(2, 0, 0), Vec3(3, 0, 0)};
    CHECK_THROWS_AS(kabsch_align(p, p), DegenerateGeometryError);
    CHECK_THROWS_AS(kabsch_align(std::vector<Vec3>{Vec3(0, 0, 0), Vec3(1, 0, 0)},
                                 std::vector<Vec3>{Vec3(0, 0, 0), Vec3(1, 0, 0)}),
                    std::invalid_argument);
}

TEST_CASE("PointCloud validation") {
    PointCloud empty;
    CHECK_THROWS_AS(empty.validate(), std::invalid_argument);
    PointCloud bad;
    bad.points.emplace_back(0, 0, std::numeric_limits<double>::quiet_NaN());
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    PointCloud with_normals;
    with_normals.points.emplace_back(0, 0, 0);
    with_normals.normals.emplace_back(0, 0, 2.0);
    CHECK_THROWS_AS(with_normals.validate(), std::invalid_argument);
    with_normals.normals[0] = Vec3(0, 0, 1);
    CHECK_NOTHROW(with_normals.validate());
}
