#pragma once

#include <vector>

#include "usip/point_cloud.hpp"

namespace usip {

// Exact 3-d kd-tree. Results are identical to brute force under the global
// tie-break rule: neighbors ordered by (distance, index) ascending. No
// approximation anywhere; repeatability protocols depend on exactness.
class KdTree3 {
public:
    explicit KdTree3(const std::vector<Vec3>& points);

    std::size_t size() const { return points_.size(); }

    // k nearest neighbors of q, sorted by nondecreasing distance, ties by
    // lowest index. Throws std::invalid_argument when k > size().
    std::vector<int> knn(const Vec3& q, int k) const;

    int nearest(const Vec3& q) const;
    double nearest_distance(const Vec3& q) const;

    // All indices with |p - q| <= r, sorted by index.
    std::vector<int> radius(const Vec3& q, double r) const;

private:
    struct Node {
        int axis = -1;        // -1 marks a leaf
        double split = 0.0;
        int left = -1, right = -1;
        int begin = 0, end = 0;  // index range into order_ (leaves only)
    };

    struct Candidate {
        double d2;
        int index;
        // "Worse" = larger distance, then larger index.
        bool operator<(const Candidate& o) const {
            if (d2 != o.d2) return d2 < o.d2;
            return index < o.index;
        }
    };

    int build(int begin, int end);
    void search_knn(int node, const Vec3& q, int k,
                    std::vector<Candidate>& heap) const;
    void search_radius(int node, const Vec3& q, double r2,
                       std::vector<int>& out) const;

    std::vector<Vec3> points_;
    std::vector<int> order_;
    std::vector<Node> nodes_;
    int root_ = -1;
};

}  // namespace usip
