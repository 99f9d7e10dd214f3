// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference verification of tape gradients.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ntrm/tensor.hpp"

namespace ntrm {

struct GradCheckOptions {
    double step = 1e-5;
    // Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
    double abs_floor = 1e-6;
    // Entries probed per leaf; 0 probes every entry. A partial sample takes
    // three quarters of its entries from those with a non-zero analytic
    // gradient when there are enough of them.
    std::int64_t max_entries_per_leaf = 0;
    std::uint64_t seed = 0;
    // Replays the branch decisions of the unperturbed input (see BranchTape)
    // in every probe, so kinks near x do not spoil the difference quotient.
    bool freeze_branches = false;
    // Richardson extrapolation (4 D(h/2) - D(h)) / 3 of the central difference.
    bool extrapolate = false;
};

struct LeafCheck {
    std::string name;
    std::int64_t entries_checked = 0;
    double max_rel_error = 0.0;
    std::int64_t worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

struct GradCheckReport {
    std::vector<LeafCheck> leaves;
    double max_rel_error() const;
};

double relative_error(double analytic, double numeric, double abs_floor);

/// `loss_fn` must rebuild the scalar loss from the current values of `leaves`
/// each time it is called. Leaves must be f64.
GradCheckReport check_gradients(const std::function<Tensor()>& loss_fn,
                                const std::vector<std::pair<std::string, Tensor>>& leaves,
                                const GradCheckOptions& options = {});

}  // namespace ntrm
