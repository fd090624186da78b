#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "usip/autodiff.hpp"
#include "usip/fpn.hpp"
#include "usip/point_cloud.hpp"

namespace usip {

// --- Repeatability -----------------------------------------------------------

// Fraction of keypoints q_i whose transformed position R*q_i + t lies within
// eps of its nearest neighbor in qt.
double repeatability(std::span<const Vec3> q, std::span<const Vec3> qt,
                     const RigidTransform& t, double eps);

struct RepeatabilityReport {
    double epsilon = 0.0;
    std::vector<int> counts;               // strictly increasing
    std::vector<double> detector_fwd;      // per count
    std::vector<double> detector_rev;
    std::vector<double> baseline_fwd;      // random-sampling baseline
    std::vector<double> baseline_rev;
};

// Evaluation pair: b = perturb(T(a)) with the ground-truth transform kept.
struct EvalPair {
    PointCloud a;
    PointCloud b;
    RigidTransform t_ab;
};

std::vector<EvalPair> make_eval_pairs(const std::vector<PointCloud>& corpus,
                                      int count, const AugmentationSpec& aug,
                                      std::uint64_t seed);

// Detector under evaluation; the seed feeds any internal subsampling.
using EvalDetector = std::function<KeypointSet(const PointCloud&, std::uint64_t)>;

// n uniformly chosen cloud points with constant sigma.
KeypointSet random_sampling_detector(const PointCloud& cloud, int n,
                                     std::uint64_t seed);

EvalDetector fpn_detector(ad::ParamStore& params, const FPNConfig& cfg);
EvalDetector random_detector(int n);

// Mean repeatability of `detector` and the random baseline over pairs at the
// requested keypoint counts, both match directions.
RepeatabilityReport repeatability_report(const EvalDetector& detector,
                                         const std::vector<EvalPair>& pairs,
                                         std::span<const int> counts, double eps,
                                         std::uint64_t seed);

// --- Robustness sweeps --------------------------------------------------------

enum class SweepKind { kNoise, kDownsample };

struct RobustnessRow {
    double level = 0.0;
    double repeatability = 0.0;
    bool available = true;  // false when downsampling leaves too few points
};

// For each level, perturbs the transformed side of every pair, re-detects and
// averages repeatability. Pairs are generated internally from the corpus.
std::vector<RobustnessRow> robustness_sweep(const EvalDetector& detector,
                                            const std::vector<PointCloud>& corpus,
                                            SweepKind kind,
                                            std::span<const double> levels,
                                            int n_keypoints, double eps,
                                            std::uint64_t seed,
                                            const AugmentationSpec& pair_aug = {});

std::string robustness_csv(std::span<const RobustnessRow> rows, SweepKind kind);

// --- Descriptors ---------------------------------------------------------------

struct Descriptor {
    Eigen::VectorXd vector;  // unit norm unless the ball was empty
    int anchor = -1;         // keypoint index
    bool empty = false;
};

struct DescriptorConfig {
    int dim = 32;  // L
    std::vector<int> point_widths = {32, 64};
    std::vector<int> head_widths = {32};

    void validate() const;
};

void init_descriptor_params(ad::ParamStore& params, const DescriptorConfig& cfg);

// Ball neighborhoods around each keypoint, normalized by the keypoint,
// shared per-point network + max-pool + head, L2-normalized. Empty balls
// yield a flagged zero descriptor.
std::vector<Descriptor> describe(const PointCloud& cloud, const KeypointSet& kps,
                                 double radius, ad::ParamStore& params,
                                 const DescriptorConfig& cfg);

// Differentiable descriptors for triplet-loss training.
std::vector<ad::Value> describe_t(ad::Tape& tape, const PointCloud& cloud,
                                  const KeypointSet& kps, double radius,
                                  ad::ParamStore& params, const DescriptorConfig& cfg,
                                  std::vector<std::uint8_t>* empty_flags = nullptr);

// --- Triplet losses -------------------------------------------------------------

struct WeakTripletResult {
    ad::Value loss;
    bool all_weights_zero = false;
};

// sum_m w_m * hinge(min_i |f_m - f_i| - min_j |f_m - f_j| + gamma), with
// w_m = M * max(xi - sigma_m, 0) / sum_j max(xi - sigma_j, 0).
WeakTripletResult triplet_loss_weak(ad::Tape& tape, std::span<const ad::Value> f_anchor,
                                    std::span<const double> sigma_anchor,
                                    std::span<const ad::Value> f_pos,
                                    std::span<const ad::Value> f_neg, double gamma,
                                    double xi);

struct StrongTripletResult {
    ad::Value loss;
    int skipped_anchors = 0;
};

// Positives are descriptor pairs whose keypoints coincide under the ground
// truth poses (within rho); negatives mined beyond rho, half random and half
// hardest. Anchors without positives are skipped and counted.
StrongTripletResult triplet_loss_strong(
    ad::Tape& tape, std::span<const ad::Value> f, std::span<const Vec3> q,
    std::span<const ad::Value> f_prime, std::span<const Vec3> q_prime,
    const RigidTransform& pose, const RigidTransform& pose_prime, double gamma,
    double rho, double xi, std::span<const double> sigma, std::uint64_t seed);

// --- Matching and registration ----------------------------------------------------

struct DescriptorMatch {
    int a = -1;
    int b = -1;
    double distance = 0.0;
};

// Nearest neighbor in descriptor space for each entry of fa; with
// mutual_check only reciprocal pairs are kept. Empty-flagged descriptors
// never match.
std::vector<DescriptorMatch> match(std::span<const Descriptor> fa,
                                   std::span<const Descriptor> fb,
                                   bool mutual_check = false);

struct Correspondence {
    Vec3 p;
    Vec3 q;
};

struct RansacResult {
    RigidTransform transform;
    std::vector<std::uint8_t> inlier_mask;
    int inlier_count = 0;
    int iterations = 0;
};

// Seeded minimal-sample (3 pairs) loop with a closed-form fit per sample;
// the best model is refit on its full inlier set and the mask recomputed.
RansacResult ransac_register(std::span<const Correspondence> correspondences,
                             int iterations, double inlier_threshold,
                             std::uint64_t seed);

struct RegistrationMetrics {
    double rte = 0.0;      // meters
    double rre_deg = 0.0;  // degrees
    bool success = false;  // RTE < 2 and RRE < 5
};

RegistrationMetrics registration_metrics(const RigidTransform& estimate,
                                         const RigidTransform& ground_truth);

struct RegistrationReport {
    double failure_rate = 0.0;
    double inlier_ratio = 0.0;
    double rte_mean = 0.0, rte_std = 0.0;
    double rre_mean = 0.0, rre_std = 0.0;
    int ransac_iterations = 0;
    int pairs = 0;
};

// Full pipeline over pairs: detect, describe, match, RANSAC, metrics.
RegistrationReport registration_report(const EvalDetector& detector,
                                       ad::ParamStore& desc_params,
                                       const DescriptorConfig& desc_cfg,
                                       const std::vector<EvalPair>& pairs,
                                       int n_keypoints, double desc_radius,
                                       int ransac_iterations,
                                       double inlier_threshold,
                                       std::uint64_t seed);

std::string repeatability_csv(const RepeatabilityReport& report);
std::string registration_csv(const RegistrationReport& report);

}  // namespace usip
