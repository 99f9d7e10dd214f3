// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference suite over the differentiable ops, the model modules
// and a tiny end-to-end model.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ntrm/backbone.hpp"

namespace ntrm {

struct GradGroupResult {
    std::string scope;
    std::string group;
    std::int64_t entries = 0;
    double max_rel_error = 0.0;
    // Location of the worst entry.
    std::string worst_leaf;
    std::int64_t worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

/// "op", "module", "full-model-tiny".
const std::vector<std::string>& gradient_scopes();

/// K = 2, w = 4, d = 8, L = 2, f64.
ModelConfig tiny_model_config(GnnVariant variant);

/// Runs every check in `scope`; throws std::invalid_argument for an unknown scope.
std::vector<GradGroupResult> run_gradient_suite(const std::string& scope, std::uint64_t seed = 7);

}  // namespace ntrm
