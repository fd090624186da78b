#pragma once

#include <span>
#include <vector>

#include "usip/autodiff.hpp"
#include "usip/point_cloud.hpp"

namespace usip {

enum class LossMode { kPoint, kPlane };

struct LossBreakdown {
    double total = 0.0;
    double chamfer_term = 0.0;
    double point_term = 0.0;
    std::vector<double> d_ij, d_ji;          // nearest-neighbor distances
    std::vector<double> sigma_ij, sigma_ji;  // averaged rate parameters
};

// --- Plain evaluations -----------------------------------------------------

// Two-sided chamfer with squared distances.
double chamfer_loss(std::span<const Vec3> q, std::span<const Vec3> qp);

// Negative log-likelihood of the matched distances under per-pair
// exponential distributions; d is the non-squared Euclidean distance and
// sigma_ij = (sigma_i + sigma'_j) / 2. Fills per-pair sequences when a
// breakdown is supplied.
double prob_chamfer_loss(std::span<const Vec3> q, std::span<const double> sigma,
                         std::span<const Vec3> qp, std::span<const double> sigma_p,
                         LossBreakdown* breakdown = nullptr);

// One directional term of the probabilistic chamfer loss.
inline double prob_chamfer_term(double d, double sigma) {
    return std::log(sigma) + d / sigma;
}

// Numerically minimizes ln(sigma) + d / sigma over sigma > 0 and returns the
// argmin. Golden-section search over a fixed log-space bracket; serves as an
// executable check that the optimum sits at sigma = d.
double sigma_stationary(double d);

double point_to_point_loss(std::span<const Vec3> q, const PointCloud& x,
                           std::span<const Vec3> qt, const PointCloud& xt);

// Squared point-to-plane residual against the nearest point's normal.
double point_to_plane_loss(std::span<const Vec3> q, const PointCloud& x,
                           std::span<const Vec3> qt, const PointCloud& xt);

LossBreakdown total_loss(std::span<const Vec3> q, std::span<const double> sigma,
                         std::span<const Vec3> qp, std::span<const double> sigma_p,
                         const PointCloud& x, const PointCloud& xt,
                         std::span<const Vec3> qt, double lambda, LossMode mode);

// --- Differentiable versions ----------------------------------------------
// Positions are 3x1 Values, sigmas 1x1 Values. Nearest-neighbor matches are
// fixed during backward; gradients are analytic through the matches.

ad::Value chamfer_loss_t(ad::Tape& tape, std::span<const ad::Value> q,
                         std::span<const ad::Value> qp);

ad::Value prob_chamfer_loss_t(ad::Tape& tape, std::span<const ad::Value> q,
                              std::span<const ad::Value> sigma,
                              std::span<const ad::Value> qp,
                              std::span<const ad::Value> sigma_p,
                              LossBreakdown* breakdown = nullptr);

ad::Value point_to_point_loss_t(ad::Tape& tape, std::span<const ad::Value> q,
                                const PointCloud& x,
                                std::span<const ad::Value> qt,
                                const PointCloud& xt);

ad::Value point_to_plane_loss_t(ad::Tape& tape, std::span<const ad::Value> q,
                                const PointCloud& x,
                                std::span<const ad::Value> qt,
                                const PointCloud& xt);

struct TotalLossResult {
    ad::Value value;
    LossBreakdown breakdown;
};

TotalLossResult total_loss_t(ad::Tape& tape, std::span<const ad::Value> q,
                             std::span<const ad::Value> sigma,
                             std::span<const ad::Value> qp,
                             std::span<const ad::Value> sigma_p,
                             const PointCloud& x, const PointCloud& xt,
                             std::span<const ad::Value> qt, double lambda,
                             LossMode mode);

}  // namespace usip
