#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "usip/autodiff.hpp"
#include "usip/geometry.hpp"
#include "usip/point_cloud.hpp"

namespace usip {

// Feature proposal network configuration. The receptive field grows with
// node_knn (K) and shrinks with proposal_count (M).
struct FPNConfig {
    int proposal_count = 64;    // M
    int cluster_point_cap = 64; // per-cluster points fed to the first net
    int node_knn = 9;           // K: fan-in of the node aggregation layer
    std::vector<int> widths1 = {32, 64};
    std::vector<int> widths2 = {64, 64};
    std::vector<int> widths_head = {64, 32, 4};
    double sigma_floor = 1e-4;

    void validate() const;
};

struct KeypointSet {
    std::vector<Vec3> positions;
    std::vector<double> sigmas;

    std::size_t size() const { return positions.size(); }
};

// Differentiable proposal handles: positions are 3x1 Values, sigmas 1x1.
struct ProposalTape {
    std::vector<ad::Value> positions;
    std::vector<ad::Value> sigmas;
    std::vector<Vec3> nodes;
    std::vector<std::uint8_t> empty_cluster;

    KeypointSet to_keypoints() const;
};

// Runs the full proposal pipeline on a tape: FPS nodes, point-to-node
// clusters normalized by their node, shared per-point network + max-pool,
// kNN aggregation over nodes with relative positions, and an offset head.
// All network inputs are node-relative differences, which makes the output
// translation equivariant by construction. Requires N >= M.
ProposalTape propose_t(ad::Tape& tape, const PointCloud& cloud,
                       ad::ParamStore& params, const FPNConfig& cfg,
                       std::uint64_t seed);

// Inference wrapper around propose_t.
KeypointSet propose(const PointCloud& cloud, ad::ParamStore& params,
                    const FPNConfig& cfg, std::uint64_t seed);

// Drops keypoints with sigma > sigma_threshold, then greedily keeps the rest
// in increasing-sigma order, suppressing any within `radius` of a kept one.
KeypointSet nms_filter(const KeypointSet& kps, double radius,
                       double sigma_threshold);

// The n lowest-sigma keypoints, ties by index.
KeypointSet select_top(const KeypointSet& kps, int n);

// Ensures every parameter of the configured FPN exists in the store.
void init_fpn_params(ad::ParamStore& params, const FPNConfig& cfg);

// Serializes the architecture into checkpoint attributes / restores it.
void store_fpn_config(ad::ParamStore& params, const FPNConfig& cfg);
FPNConfig load_fpn_config(const ad::ParamStore& params);

}  // namespace usip
