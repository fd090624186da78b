#include "usip/kdtree.hpp"

#include <algorithm>
#include <numeric>

namespace usip {

namespace {
constexpr int kLeafSize = 16;
}

KdTree3::KdTree3(const std::vector<Vec3>& points) : points_(points) {
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), 0);
    if (!points_.empty()) {
        nodes_.reserve(2 * points_.size() / kLeafSize + 8);
        root_ = build(0, static_cast<int>(points_.size()));
    }
}

int KdTree3::build(int begin, int end) {
    Node node;
    if (end - begin <= kLeafSize) {
        node.begin = begin;
        node.end = end;
        nodes_.push_back(node);
        return static_cast<int>(nodes_.size()) - 1;
    }
    Vec3 lo = points_[static_cast<std::size_t>(order_[static_cast<std::size_t>(begin)])];
    Vec3 hi = lo;
    for (int i = begin + 1; i < end; ++i) {
        const Vec3& p = points_[static_cast<std::size_t>(order_[static_cast<std::size_t>(i)])];
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    const Vec3 extent = hi - lo;
    int axis = 0;
    if (extent[1] > extent[axis]) axis = 1;
    if (extent[2] > extent[axis]) axis = 2;
    if (extent[axis] <= 0.0) {
        // All points coincide along every axis; keep as a leaf.
        node.begin = begin;
        node.end = end;
        nodes_.push_back(node);
        return static_cast<int>(nodes_.size()) - 1;
    }
    const int mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](int a, int b) {
                         const double pa = points_[static_cast<std::size_t>(a)][axis];
                         const double pb = points_[static_cast<std::size_t>(b)][axis];
                         if (pa != pb) return pa < pb;
                         return a < b;
                     });
    node.axis = axis;
    node.split = points_[static_cast<std::size_t>(order_[static_cast<std::size_t>(mid)])][axis];
    const int self = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    const int left = build(begin, mid);
    const int right = build(mid, end);
    nodes_[static_cast<std::size_t>(self)].left = left;
    nodes_[static_cast<std::size_t>(self)].right = right;
    return self;
}

void KdTree3::search_knn(int node_id, const Vec3& q, int k,
                         std::vector<Candidate>& heap) const {
    const Node& node = nodes_[static_cast<std::size_t>(node_id)];
    if (node.axis < 0) {
        for (int i = node.begin; i < node.end; ++i) {
            const int idx = order_[static_cast<std::size_t>(i)];
            const double d2 = (points_[static_cast<std::size_t>(idx)] - q).squaredNorm();
            const Candidate c{d2, idx};
            if (static_cast<int>(heap.size()) < k) {
                heap.push_back(c);
                std::push_heap(heap.begin(), heap.end());
            } else if (c < heap.front()) {
                std::pop_heap(heap.begin(), heap.end());
                heap.back() = c;
                std::push_heap(heap.begin(), heap.end());
            }
        }
        return;
    }
    const double delta = q[node.axis] - node.split;
    const int near = delta < 0.0 ? node.left : node.right;
    const int far = delta < 0.0 ? node.right : node.left;
    search_knn(near, q, k, heap);
    // Descend the far side unless it provably cannot improve the result.
    // On exact distance ties a lower index may still win, so only a strict
    // inequality prunes.
    if (static_cast<int>(heap.size()) < k || delta * delta <= heap.front().d2) {
        search_knn(far, q, k, heap);
    }
}

std::vector<int> KdTree3::knn(const Vec3& q, int k) const {
    if (k < 1) throw std::invalid_argument("KdTree3::knn: k must be >= 1");
    if (static_cast<std::size_t>(k) > points_.size()) {
        throw std::invalid_argument("KdTree3::knn: k exceeds point count");
    }
    std::vector<Candidate> heap;
    heap.reserve(static_cast<std::size_t>(k) + 1);
    search_knn(root_, q, k, heap);
    std::sort_heap(heap.begin(), heap.end());
    std::vector<int> out;
    out.reserve(heap.size());
    for (const Candidate& c : heap) out.push_back(c.index);
    return out;
}

int KdTree3::nearest(const Vec3& q) const { return knn(q, 1)[0]; }

double KdTree3::nearest_distance(const Vec3& q) const {
    const int idx = nearest(q);
    return (points_[static_cast<std::size_t>(idx)] - q).norm();
}

void KdTree3::search_radius(int node_id, const Vec3& q, double r2,
                            std::vector<int>& out) const {
    const Node& node = nodes_[static_cast<std::size_t>(node_id)];
    if (node.axis < 0) {
        for (int i = node.begin; i < node.end; ++i) {
            const int idx = order_[static_cast<std::size_t>(i)];
            if ((points_[static_cast<std::size_t>(idx)] - q).squaredNorm() <= r2) {
                out.push_back(idx);
            }
        }
        return;
    }
    const double delta = q[node.axis] - node.split;
    const int near = delta < 0.0 ? node.left : node.right;
    const int far = delta < 0.0 ? node.right : node.left;
    search_radius(near, q, r2, out);
    if (delta * delta <= r2) search_radius(far, q, r2, out);
}

std::vector<int> KdTree3::radius(const Vec3& q, double r) const {
    if (r < 0.0) throw std::invalid_argument("KdTree3::radius: r must be >= 0");
    std::vector<int> out;
    if (root_ >= 0) search_radius(root_, q, r * r, out);
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace usip
