#include "usip/point_cloud.hpp"

#include <cmath>

namespace usip {

Vec3 PointCloud::centroid() const {
    Vec3 c = Vec3::Zero();
    for (const Vec3& p : points) c += p;
    return c / static_cast<double>(points.size());
}

double PointCloud::bounding_radius() const {
    const Vec3 c = centroid();
    double r2 = 0.0;
    for (const Vec3& p : points) r2 = std::max(r2, (p - c).squaredNorm());
    return std::sqrt(r2);
}

double PointCloud::diameter() const {
    double d2 = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        for (std::size_t j = i + 1; j < points.size(); ++j) {
            d2 = std::max(d2, (points[i] - points[j]).squaredNorm());
        }
    }
    return std::sqrt(d2);
}

void PointCloud::validate() const {
    if (points.empty()) throw std::invalid_argument("PointCloud: N must be >= 1");
    for (const Vec3& p : points) {
        if (!p.allFinite()) throw std::invalid_argument("PointCloud: non-finite coordinate");
    }
    if (!normals.empty()) {
        if (normals.size() != points.size()) {
            throw std::invalid_argument("PointCloud: normals/points length mismatch");
        }
        for (const Vec3& n : normals) {
            if (!n.allFinite() || std::abs(n.norm() - 1.0) > 1e-9) {
                throw std::invalid_argument("PointCloud: normal is not unit length");
            }
        }
    }
}

bool RigidTransform::is_valid(double tol) const {
    if (!rotation.allFinite() || !translation.allFinite()) return false;
    const Mat3 rtr = rotation.transpose() * rotation;
    if (((rtr - Mat3::Identity()).array().abs() > tol).any()) return false;
    return std::abs(rotation.determinant() - 1.0) <= tol;
}

}  // namespace usip
