#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <vector>

#include "usip/common.hpp"

namespace usip {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Positions (and optional unit normals) of N points in a shared metric frame.
struct PointCloud {
    std::vector<Vec3> points;
    std::vector<Vec3> normals;  // empty, or one unit normal per point

    std::size_t size() const { return points.size(); }
    bool has_normals() const { return !normals.empty(); }

    Vec3 centroid() const;
    // Max distance from the centroid.
    double bounding_radius() const;
    // Exact max pairwise distance. O(N^2); meant for setup code, not loops.
    double diameter() const;

    // Throws std::invalid_argument on violated invariants: N >= 1, finite
    // coordinates, unit normals (within 1e-9) when present.
    void validate() const;
};

enum class RotationMode { kPlanar, kFull3D };

// SE(3) element. rotation must be orthonormal with det +1.
struct RigidTransform {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

    RigidTransform inverse() const {
        RigidTransform inv;
        inv.rotation = rotation.transpose();
        inv.translation = -(rotation.transpose() * translation);
        return inv;
    }

    // this ∘ other: apply `other` first.
    RigidTransform compose(const RigidTransform& other) const {
        RigidTransform out;
        out.rotation = rotation * other.rotation;
        out.translation = rotation * other.translation + translation;
        return out;
    }

    static RigidTransform identity() { return RigidTransform{}; }

    bool is_valid(double tol = 1e-12) const;
};

// Pair-perturbation settings used by training and the evaluation sweeps.
struct AugmentationSpec {
    double noise_sigma = 0.0;       // same units as the cloud
    int downsample_factor = 1;      // alpha >= 1
    RotationMode rotation_mode = RotationMode::kFull3D;
    double translation_range = 0.0;

    void validate() const {
        if (noise_sigma < 0.0) throw std::invalid_argument("AugmentationSpec: noise_sigma < 0");
        if (downsample_factor < 1) throw std::invalid_argument("AugmentationSpec: downsample_factor < 1");
        if (translation_range < 0.0) throw std::invalid_argument("AugmentationSpec: translation_range < 0");
    }
};

}  // namespace usip
