#pragma once

#include <string>
#include <vector>

#include "usip/point_cloud.hpp"

namespace usip {

// ASCII XYZ: one "x y z[ nx ny nz]" per line. Written with 17 significant
// digits so a read-back reproduces the doubles exactly.
PointCloud read_xyz(const std::string& path);
void write_xyz(const std::string& path, const PointCloud& cloud);

// ASCII PLY with a vertex element carrying x/y/z (and optionally nx/ny/nz)
// float properties. Only the subset this project writes is parsed.
PointCloud read_ply(const std::string& path);
void write_ply(const std::string& path, const PointCloud& cloud);

// Colored keypoint dump: cloud vertices in gray, keypoints red-scaled by
// sigma (bright red for small sigma, darker with larger sigma).
void write_keypoints_ply(const std::string& path, const PointCloud& cloud,
                         const std::vector<Vec3>& keypoints,
                         const std::vector<double>& sigmas);

// Dispatches on extension: .ply -> PLY, anything else -> XYZ.
PointCloud read_cloud(const std::string& path);

}  // namespace usip
