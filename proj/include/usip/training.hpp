#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "usip/fpn.hpp"
#include "usip/losses.hpp"
#include "usip/point_cloud.hpp"

namespace usip {

// {X, X-tilde, T} with transformed = apply_transform(source, transform).
struct TrainingPair {
    PointCloud source;
    PointCloud transformed;
    RigidTransform transform;
};

struct TrainConfig {
    int pairs_per_cloud = 4;  // L
    int epochs = 3;
    std::int64_t max_steps = 2000;  // 0 = unlimited
    double learning_rate = 1e-3;
    double lambda = 0.5;
    LossMode loss_mode = LossMode::kPoint;
    AugmentationSpec augmentation{
        .noise_sigma = 0.005,  // 0.5% of a unit-diameter cloud
        .downsample_factor = 1,
        .rotation_mode = RotationMode::kFull3D,
        .translation_range = 0.1,
    };
    int batch_accumulation = 1;  // pairs per optimizer step, gradients averaged
    std::uint64_t seed = 0;
    FPNConfig fpn;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
};

// L pairs with independent random transforms. Mild Gaussian noise (when
// configured) perturbs the source before the transform is applied, so the
// pair invariant transformed == T(source) holds exactly.
std::vector<TrainingPair> make_pairs(const PointCloud& cloud, int count,
                                     const AugmentationSpec& aug,
                                     std::uint64_t seed);

TrainingPair make_pair(const PointCloud& cloud, const AugmentationSpec& aug,
                       std::uint64_t seed);

// One optimization step: propose on both clouds, un-transform the proposals
// of the transformed cloud (sigmas carried over unchanged), evaluate the
// combined loss, backpropagate, apply one adaptive-moment update. The step
// index seeds the per-step randomness, which is what makes checkpoint
// resumption bit-identical.
LossBreakdown train_step(const TrainingPair& pair, ad::ParamStore& store,
                         const TrainConfig& cfg, std::int64_t step_index);

struct TrainResult {
    std::vector<LossBreakdown> curve;
    std::int64_t steps = 0;
};

// Full loop over epochs x clouds x pairs (optionally capped). Writes the
// checkpoint and a per-step loss CSV ("step,total,chamfer,point"). Passing a
// preloaded store resumes from its step counter.
TrainResult train(const std::vector<PointCloud>& dataset, const TrainConfig& cfg,
                  const std::string& checkpoint_path,
                  const std::string& curve_csv_path,
                  ad::ParamStore* resume_store = nullptr);

// --- Synthetic shapes -------------------------------------------------------

enum class SyntheticShape { kBox, kLBracket, kPyramid, kPlaneWithBumps };

SyntheticShape parse_shape(const std::string& name);
std::string shape_name(SyntheticShape shape);

struct SyntheticCloud {
    PointCloud cloud;
    std::vector<Vec3> salient_points;  // analytic corners, diagnostics only
};

// Uniform surface samples of an analytic solid (unit diameter, centered),
// plus optional Gaussian jitter. Salient points are the exact corners; they
// are never used for training. Requires n_points >= 100.
SyntheticCloud gen_synthetic(SyntheticShape shape, int n_points, double jitter,
                             std::uint64_t seed);

// Mixed corpus cycling through box / l_bracket / pyramid.
std::vector<PointCloud> synthetic_corpus(int count, int n_points, double jitter,
                                         std::uint64_t seed);

}  // namespace usip
