#include "usip/geometry.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace usip {

FpsResult fps_sample(const PointCloud& cloud, int m, std::uint64_t seed) {
    const int n = static_cast<int>(cloud.size());
    if (n < 1) throw std::invalid_argument("fps_sample: empty cloud");
    if (m < 1 || m > n) throw std::invalid_argument("fps_sample: need 1 <= m <= N");

    const Vec3 c = cloud.centroid();
    double max_d2 = -1.0;
    for (int i = 0; i < n; ++i) {
        max_d2 = std::max(max_d2, (cloud.points[static_cast<std::size_t>(i)] - c).squaredNorm());
    }
    std::vector<int> candidates;
    for (int i = 0; i < n; ++i) {
        if ((cloud.points[static_cast<std::size_t>(i)] - c).squaredNorm() == max_d2) {
            candidates.push_back(i);
        }
    }
    const int start = candidates[static_cast<std::size_t>(seed % candidates.size())];

    std::vector<double> min_d2(static_cast<std::size_t>(n),
                               std::numeric_limits<double>::infinity());
    std::vector<std::uint8_t> taken(static_cast<std::size_t>(n), 0);
    FpsResult out;
    out.indices.reserve(static_cast<std::size_t>(m));
    out.positions.reserve(static_cast<std::size_t>(m));

    int current = start;
    for (int pick = 0; pick < m; ++pick) {
        out.indices.push_back(current);
        out.positions.push_back(cloud.points[static_cast<std::size_t>(current)]);
        taken[static_cast<std::size_t>(current)] = 1;
        if (pick + 1 == m) break;
        int best = -1;
        double best_d2 = -1.0;
        for (int i = 0; i < n; ++i) {
            if (taken[static_cast<std::size_t>(i)]) continue;
            const double d2 =
                std::min(min_d2[static_cast<std::size_t>(i)],
                         (cloud.points[static_cast<std::size_t>(i)] -
                          cloud.points[static_cast<std::size_t>(current)])
                             .squaredNorm());
            min_d2[static_cast<std::size_t>(i)] = d2;
            if (d2 > best_d2) {
                best_d2 = d2;
                best = i;
            }
        }
        current = best;
    }
    return out;
}

std::vector<std::vector<int>> knn_search(std::span<const Vec3> queries,
                                         const PointCloud& cloud, int k) {
    if (k < 1 || static_cast<std::size_t>(k) > cloud.size()) {
        throw std::invalid_argument("knn_search: need 1 <= k <= N");
    }
    const KdTree3 tree(cloud.points);
    std::vector<std::vector<int>> out;
    out.reserve(queries.size());
    for (const Vec3& q : queries) out.push_back(tree.knn(q, k));
    return out;
}

NodeGrouping point_to_node_group(const PointCloud& cloud,
                                 const std::vector<Vec3>& nodes) {
    if (nodes.empty()) throw std::invalid_argument("point_to_node_group: no nodes");
    const int n = static_cast<int>(cloud.size());
    const int m = static_cast<int>(nodes.size());

    NodeGrouping g;
    g.nodes = nodes;
    g.assignment.resize(static_cast<std::size_t>(n));
    g.normalized_offsets.resize(static_cast<std::size_t>(n));
    g.reconstruction_residuals.resize(static_cast<std::size_t>(n));
    g.groups.assign(static_cast<std::size_t>(m), {});
    g.empty.assign(static_cast<std::size_t>(m), 1);

    const KdTree3 tree(nodes);
    for (int i = 0; i < n; ++i) {
        const Vec3& p = cloud.points[static_cast<std::size_t>(i)];
        const int owner = tree.nearest(p);
        g.assignment[static_cast<std::size_t>(i)] = owner;
        g.groups[static_cast<std::size_t>(owner)].push_back(i);
        g.empty[static_cast<std::size_t>(owner)] = 0;
        const Vec3 offset = p - nodes[static_cast<std::size_t>(owner)];
        const Vec3 sum = offset + nodes[static_cast<std::size_t>(owner)];
        g.normalized_offsets[static_cast<std::size_t>(i)] = offset;
        g.reconstruction_residuals[static_cast<std::size_t>(i)] = p - sum;
    }
    return g;
}

NormalsResult estimate_normals(const PointCloud& cloud, int k) {
    const int n = static_cast<int>(cloud.size());
    if (k < 3 || k > n) throw std::invalid_argument("estimate_normals: need 3 <= k <= N");

    NormalsResult res;
    res.cloud = cloud;
    res.cloud.normals.resize(static_cast<std::size_t>(n));
    res.degenerate.assign(static_cast<std::size_t>(n), 0);

    const KdTree3 tree(cloud.points);
    const Vec3 global_centroid = cloud.centroid();

    for (int i = 0; i < n; ++i) {
        const std::vector<int> nbrs = tree.knn(cloud.points[static_cast<std::size_t>(i)], k);
        Vec3 mean = Vec3::Zero();
        for (int j : nbrs) mean += cloud.points[static_cast<std::size_t>(j)];
        mean /= static_cast<double>(k);
        Mat3 cov = Mat3::Zero();
        for (int j : nbrs) {
            const Vec3 d = cloud.points[static_cast<std::size_t>(j)] - mean;
            cov += d * d.transpose();
        }
        cov /= static_cast<double>(k);

        Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
        const Vec3 evals = eig.eigenvalues();  // ascending
        const double lam_max = evals[2];
        if (lam_max <= 0.0 || evals[1] <= 1e-12 * lam_max) {
            res.cloud.normals[static_cast<std::size_t>(i)] = Vec3(0.0, 0.0, 1.0);
            res.degenerate[static_cast<std::size_t>(i)] = 1;
            continue;
        }
        Vec3 normal = eig.eigenvectors().col(0);  // least variance
        normal.normalize();
        const double orient = normal.dot(mean - global_centroid);
        if (orient < 0.0) {
            normal = -normal;
        } else if (orient == 0.0) {
            if (normal.z() < 0.0) normal = -normal;
            else if (normal.z() == 0.0 && normal.y() < 0.0) normal = -normal;
            else if (normal.z() == 0.0 && normal.y() == 0.0 && normal.x() < 0.0) normal = -normal;
        }
        res.cloud.normals[static_cast<std::size_t>(i)] = normal;
    }
    return res;
}

PointCloud apply_transform(const PointCloud& cloud, const RigidTransform& t) {
    PointCloud out;
    out.points.reserve(cloud.points.size());
    for (const Vec3& p : cloud.points) out.points.push_back(t.rotation * p + t.translation);
    out.normals.reserve(cloud.normals.size());
    for (const Vec3& nrm : cloud.normals) out.normals.push_back(t.rotation * nrm);
    return out;
}

RigidTransform random_se3(RotationMode mode, double translation_range,
                          std::uint64_t seed) {
    if (translation_range < 0.0) {
        throw std::invalid_argument("random_se3: translation_range must be >= 0");
    }
    Rng rng(seed);
    RigidTransform t;
    if (mode == RotationMode::kPlanar) {
        const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double c = std::cos(theta), s = std::sin(theta);
        t.rotation << c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0;
    } else {
        // Uniform unit quaternion -> uniform rotation.
        Eigen::Vector4d q;
        double norm2 = 0.0;
        do {
            for (int i = 0; i < 4; ++i) q[i] = rng.normal();
            norm2 = q.squaredNorm();
        } while (norm2 < 1e-12);
        q /= std::sqrt(norm2);
        t.rotation = Eigen::Quaterniond(q[0], q[1], q[2], q[3]).toRotationMatrix();
    }
    for (int i = 0; i < 3; ++i) {
        t.translation[i] = rng.uniform(-translation_range, translation_range);
    }
    return t;
}

PointCloud add_gaussian_noise(const PointCloud& cloud, double sigma,
                              std::uint64_t seed) {
    if (sigma < 0.0) throw std::invalid_argument("add_gaussian_noise: sigma must be >= 0");
    if (sigma == 0.0) return cloud;
    Rng rng(seed);
    PointCloud out = cloud;
    for (Vec3& p : out.points) {
        p.x() += sigma * rng.normal();
        p.y() += sigma * rng.normal();
        p.z() += sigma * rng.normal();
    }
    return out;
}

PointCloud random_downsample(const PointCloud& cloud, int factor,
                             std::uint64_t seed) {
    if (factor < 1) throw std::invalid_argument("random_downsample: factor must be >= 1");
    const int n = static_cast<int>(cloud.size());
    const int keep = n / factor;
    if (keep < 1) throw std::invalid_argument("random_downsample: floor(N/factor) must be >= 1");
    Rng rng(seed);
    const std::vector<int> idx = rng.sample_without_replacement(n, keep);
    PointCloud out;
    out.points.reserve(static_cast<std::size_t>(keep));
    for (int i : idx) out.points.push_back(cloud.points[static_cast<std::size_t>(i)]);
    if (cloud.has_normals()) {
        out.normals.reserve(static_cast<std::size_t>(keep));
        for (int i : idx) out.normals.push_back(cloud.normals[static_cast<std::size_t>(i)]);
    }
    return out;
}

RigidTransform kabsch_align(std::span<const Vec3> src, std::span<const Vec3> dst) {
    if (src.size() != dst.size()) {
        throw std::invalid_argument("kabsch_align: size mismatch");
    }
    if (src.size() < 3) throw std::invalid_argument("kabsch_align: need at least 3 pairs");

    Vec3 src_mean = Vec3::Zero(), dst_mean = Vec3::Zero();
    for (std::size_t i = 0; i < src.size(); ++i) {
        src_mean += src[i];
        dst_mean += dst[i];
    }
    src_mean /= static_cast<double>(src.size());
    dst_mean /= static_cast<double>(src.size());

    Mat3 h = Mat3::Zero();
    for (std::size_t i = 0; i < src.size(); ++i) {
        h += (src[i] - src_mean) * (dst[i] - dst_mean).transpose();
    }

    Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Vec3 s = svd.singularValues();
    // Collinear (or coincident) input leaves the rotation under-determined.
    if (s[0] <= 0.0 || s[1] <= 1e-9 * s[0]) {
        throw DegenerateGeometryError("kabsch_align: degenerate (collinear) point sets");
    }
    Mat3 d = Mat3::Identity();
    d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0 ? -1.0 : 1.0;

    RigidTransform t;
    t.rotation = svd.matrixV() * d * svd.matrixU().transpose();
    t.translation = dst_mean - t.rotation * src_mean;
    return t;
}

}  // namespace usip
