#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "usip/training.hpp"

namespace usip {

// Line-based key=value run configuration ('#' starts a comment). Unknown
// keys are rejected; every run writes its resolved configuration next to its
// outputs so a replay is fully determined by the sidecar.
struct RunConfig {
    std::string dataset_dir;
    std::string output_dir = ".";
    std::string profile = "model";  // lidar | rgbd | model
    double epsilon = 0.03;          // resolved from the profile unless set
    std::uint64_t seed = 0;
    TrainConfig train;

    static RunConfig from_file(const std::string& path);
    static RunConfig from_entries(const std::map<std::string, std::string>& entries);

    // Every key with its resolved value, in stable order.
    std::string resolved_text() const;
    void write_sidecar(const std::string& path) const;
};

// Repeatability threshold defaults per dataset profile.
double profile_epsilon(const std::string& profile);

// Rotation regime per profile: lidar pairs rotate about the up-axis only.
RotationMode profile_rotation(const std::string& profile);

}  // namespace usip
