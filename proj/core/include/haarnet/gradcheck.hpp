#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "haarnet/tensor.hpp"

namespace haarnet {

struct GradCheckOptions {
    uint64_t seed = 1234;
    int cases_per_op = 10;
    double tol = 1e-3;              // relative error bound
    int max_param_coords = 24;      // sampled coordinates per auxiliary parameter tensor
    std::vector<std::string> ops;   // empty = every op
};

struct GradViolation {
    std::string op;
    int case_index = 0;
    std::string coordinate;
    double analytic = 0.0;
    double numeric = 0.0;
    double error = 0.0;
};

const std::vector<std::string>& gradcheck_all_ops();

// Compares reverse-mode gradients against central differences on seeded
// cases. Coordinates whose +-eps interval provably contains a subgradient
// kink (the analytic gradient differs on the two sides) are not tie-free and
// are excluded rather than reported.
std::vector<GradViolation> run_gradcheck(const GradCheckOptions& opts);

}  // namespace haarnet
