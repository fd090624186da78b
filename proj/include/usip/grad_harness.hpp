#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "usip/autodiff.hpp"

namespace usip {

// Seeded random instances of every differentiable objective, checked against
// central finite differences. Backs the grad-check CLI command.
struct GradCheckCase {
    std::string name;
    ad::GradCheckReport report;
};

ad::GradCheckReport check_chamfer_grad(std::uint64_t seed);
ad::GradCheckReport check_prob_chamfer_grad(std::uint64_t seed);
ad::GradCheckReport check_point_to_point_grad(std::uint64_t seed);
ad::GradCheckReport check_point_to_plane_grad(std::uint64_t seed);
ad::GradCheckReport check_triplet_weak_grad(std::uint64_t seed);
ad::GradCheckReport check_triplet_strong_grad(std::uint64_t seed);
// End-to-end: d(total training loss) / d(FPN parameters) on a small pair.
ad::GradCheckReport check_fpn_objective_grad(std::uint64_t seed);

// scope: "losses", "fpn" or "all".
std::vector<GradCheckCase> run_grad_checks(const std::string& scope,
                                           std::uint64_t seed, int instances);

}  // namespace usip
