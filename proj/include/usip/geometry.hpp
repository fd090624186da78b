#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "usip/kdtree.hpp"
#include "usip/point_cloud.hpp"

namespace usip {

struct FpsResult {
    std::vector<int> indices;
    std::vector<Vec3> positions;
};

// Farthest point sampling. The first index is the lowest index among points
// farthest from the centroid, rotated by the seed through that candidate set;
// each subsequent pick maximizes the min distance to the selected set, ties
// broken by lowest index. Throws std::invalid_argument when m > N or m < 1.
FpsResult fps_sample(const PointCloud& cloud, int m, std::uint64_t seed);

// Exact kNN for each query; per-query lists sorted by (distance, index).
// Throws std::invalid_argument when k > N or k < 1.
std::vector<std::vector<int>> knn_search(std::span<const Vec3> queries,
                                         const PointCloud& cloud, int k);

struct NodeGrouping {
    std::vector<Vec3> nodes;
    std::vector<int> assignment;           // per point: owning node index
    std::vector<Vec3> normalized_offsets;  // per point: X - S(owner)
    std::vector<std::vector<int>> groups;  // per node: point indices ascending
    std::vector<std::uint8_t> empty;       // per node: group is empty
    // Rounding residual of offset + node per point. The sum cannot always
    // represent the original coordinate exactly, but x - fl(offset + node)
    // is exact (Sterbenz), so adding it back restores the point bit-for-bit.
    std::vector<Vec3> reconstruction_residuals;

    // Offset + owner node position; bit-exact equal to the original point.
    Vec3 reconstruct(int point_index) const {
        const std::size_t i = static_cast<std::size_t>(point_index);
        const Vec3 sum =
            normalized_offsets[i] + nodes[static_cast<std::size_t>(assignment[i])];
        return sum + reconstruction_residuals[i];
    }
};

// Assign every point to its nearest node (ties by lowest node index).
NodeGrouping point_to_node_group(const PointCloud& cloud,
                                 const std::vector<Vec3>& nodes);

struct NormalsResult {
    PointCloud cloud;
    std::vector<std::uint8_t> degenerate;  // per point: rank < 2 neighborhood
};

// PCA normals over k-neighborhoods; sign fixed to point away from the global
// centroid (nonnegative z on the ambiguous case). Degenerate neighborhoods
// get (0,0,1) and a flag. Requires 3 <= k <= N.
NormalsResult estimate_normals(const PointCloud& cloud, int k);

PointCloud apply_transform(const PointCloud& cloud, const RigidTransform& t);

// Planar mode: rotation about z uniform in [0, 2pi). Full-3D: uniform over
// SO(3) via a uniformly sampled unit quaternion. Translation uniform in
// [-range, range]^3.
RigidTransform random_se3(RotationMode mode, double translation_range,
                          std::uint64_t seed);

PointCloud add_gaussian_noise(const PointCloud& cloud, double sigma,
                              std::uint64_t seed);

// Keeps floor(N / factor) points chosen uniformly without replacement.
PointCloud random_downsample(const PointCloud& cloud, int factor,
                             std::uint64_t seed);

// Least-squares rigid transform T minimizing sum |T(src_i) - dst_i|^2, with
// the reflection excluded by the determinant sign correction. Requires at
// least 3 non-collinear pairs; throws DegenerateGeometryError otherwise.
RigidTransform kabsch_align(std::span<const Vec3> src, std::span<const Vec3> dst);

}  // namespace usip
