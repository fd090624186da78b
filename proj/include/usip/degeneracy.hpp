#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "usip/fpn.hpp"
#include "usip/point_cloud.hpp"
#include "usip/training.hpp"

namespace usip {

enum class DegeneracyClass { kNone, kCentroid, kPrincipalAxis };

std::string degeneracy_class_name(DegeneracyClass cls);

struct DegeneracyVerdict {
    DegeneracyClass cls = DegeneracyClass::kNone;
    double centroid_spread = 0.0;        // max keypoint-to-centroid / radius
    double axis_residual = 0.0;          // RMS distance to best axis / radius
    double equivariance_residual = 0.0;  // filled by the harness when measured
};

// Fractions of the cloud bounding radius. The paper classifies the collapse
// visually; fixed thresholds make the verdict testable.
inline constexpr double kCentroidSpreadThreshold = 0.05;
inline constexpr double kAxisResidualThreshold = 0.05;

using Detector = std::function<KeypointSet(const PointCloud&)>;
// A detector may expose symmetry variants (eigenvector sign flips); the
// residual takes the best-matching variant pair per trial.
using MultiDetector = std::function<std::vector<KeypointSet>(const PointCloud&)>;

// Mean over random SE(3) trials of the two-sided squared chamfer distance
// between detector(T(Y)) and T(detector(Y)), normalized by 2 * M * radius^2.
// Low values mean the equivariance identity holds, which is the signature
// shared by trivial solutions and ideal detectors; report it alongside the
// geometric classification, never instead of it.
double equivariance_residual(const MultiDetector& detector, const PointCloud& cloud,
                             int trials, std::uint64_t seed);
double equivariance_residual(const Detector& detector, const PointCloud& cloud,
                             int trials, std::uint64_t seed);

// Geometric classification of a keypoint set against its cloud. Requires
// M >= 4 and a cloud covariance of rank >= 2 (IndeterminateError otherwise).
DegeneracyVerdict classify(const KeypointSet& kps, const PointCloud& cloud);

// Analytic reference detectors used as executable forms of the two lemmas.
KeypointSet centroid_detector(const PointCloud& cloud, int m);
// Keypoints centroid + c * U1 along the dominant covariance eigenvector;
// returns both sign variants since the eigenvector sign is arbitrary.
std::vector<KeypointSet> principal_axis_detector(const PointCloud& cloud,
                                                 std::span<const double> coefficients);

// Covariance eigenvectors (columns, ascending eigenvalue) with eigenvalues.
// Throws IndeterminateError when eigenvalues repeat (relative gap < 1e-9)
// or the covariance has rank < 2.
void covariance_axes(const PointCloud& cloud, Mat3* axes, Vec3* eigenvalues);

// --- M/K sweep ---------------------------------------------------------------

struct SweepCell {
    int m = 0;
    int k = 0;
    std::string verdict;  // none | centroid | principal_axis | indeterminate | error:<msg>
    double centroid_spread = 0.0;
    double axis_residual = 0.0;
    double equivariance_residual = 0.0;
    double repeatability = 0.0;
    double degenerate_fraction = 0.0;  // corpus clouds with a degenerate verdict
};

using Trainer =
    std::function<ad::ParamStore(const std::vector<PointCloud>&, const TrainConfig&)>;

// Default trainer: the training module's loop (checkpoint/CSV suppressed).
ad::ParamStore default_trainer(const std::vector<PointCloud>& corpus,
                               const TrainConfig& cfg);

struct SweepOptions {
    int eval_trials = 8;       // equivariance trials per cell
    int eval_pairs = 10;       // repeatability pairs per cell
    int repeat_keypoints = 16;
    double epsilon = 0.03;
    std::uint64_t seed = 0;
};

// Trains one FPN per (M, K) on the corpus, classifies its proposals on every
// corpus cloud and aggregates. Per-cell training errors are recorded in the
// verdict column rather than aborting the sweep. Rows ordered by (M, K).
std::vector<SweepCell> mk_sweep(const Trainer& trainer, const TrainConfig& base_cfg,
                                std::span<const int> m_values,
                                std::span<const int> k_values,
                                const std::vector<PointCloud>& corpus,
                                const SweepOptions& options = {});

// Header "M,K,verdict,centroid_spread,axis_residual,equivariance_residual,repeatability".
std::string sweep_csv(const std::vector<SweepCell>& cells);

}  // namespace usip
