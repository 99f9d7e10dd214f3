// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0

#include "ntrm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace ntrm {

double GradCheckReport::max_rel_error() const {
    double m = 0.0;
    for (const auto& l : leaves) {
        m = std::max(m, l.max_rel_error);
    }
    return m;
}

double relative_error(double analytic, double numeric, double abs_floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
    return std::abs(analytic - numeric) / denom;
}

GradCheckReport check_gradients(const std::function<Tensor()>& loss_fn,
                                const std::vector<std::pair<std::string, Tensor>>& leaves,
                                const GradCheckOptions& options) {
    for (const auto& [name, leaf] : leaves) {
        if (leaf.dtype() != DType::f64) {
            throw std::invalid_argument("check_gradients: leaf " + name + " is not f64");
        }
    }
    std::vector<Tensor> handles;
    for (const auto& [name, leaf] : leaves) {
        handles.push_back(leaf);
        handles.back().zero_grad();
    }
    {
        Tensor loss = loss_fn();
        loss.backward();
    }

    std::vector<std::uint64_t> branches;
    std::size_t recorded = 0;
    if (options.freeze_branches) {
        NoGradGuard guard;
        BranchTape tape(BranchTape::Mode::record, branches);
        loss_fn();
        recorded = branches.size();
    }
    auto eval = [&]() {
        NoGradGuard guard;
        if (!options.freeze_branches) return loss_fn().item();
        BranchTape tape(BranchTape::Mode::replay, branches);
        const double v = loss_fn().item();
        if (tape.consumed() != recorded) {
            throw std::logic_error("branch replay consumed " + std::to_string(tape.consumed()) + " of " +
                                   std::to_string(recorded) + " decisions");
        }
        return v;
    };

    std::mt19937_64 rng(options.seed);
    GradCheckReport report;
    for (std::size_t li = 0; li < handles.size(); ++li) {
        Tensor& leaf = handles[li];
        const auto analytic = leaf.grad_values();
        std::vector<std::int64_t> idx;
        const auto n = static_cast<std::int64_t>(analytic.size());
        if (options.max_entries_per_leaf > 0 && n > options.max_entries_per_leaf) {
            std::vector<std::int64_t> live, dead;
            for (std::int64_t i = 0; i < n; ++i) {
                (analytic[static_cast<std::size_t>(i)] != 0.0 ? live : dead).push_back(i);
            }
            std::shuffle(live.begin(), live.end(), rng);
            std::shuffle(dead.begin(), dead.end(), rng);
            const auto want = options.max_entries_per_leaf;
            auto take_live = std::min<std::int64_t>(static_cast<std::int64_t>(live.size()), (3 * want + 3) / 4);
            const auto take_dead = std::min<std::int64_t>(static_cast<std::int64_t>(dead.size()), want - take_live);
            take_live = std::min<std::int64_t>(static_cast<std::int64_t>(live.size()), want - take_dead);
            idx.assign(live.begin(), live.begin() + take_live);
            idx.insert(idx.end(), dead.begin(), dead.begin() + take_dead);
            std::sort(idx.begin(), idx.end());
        } else {
            idx.resize(static_cast<std::size_t>(n));
            std::iota(idx.begin(), idx.end(), 0);
        }
        LeafCheck check;
        check.name = leaves[li].first;
        auto values = leaf.mutable_data<double>();
        for (auto i : idx) {
            const auto k = static_cast<std::size_t>(i);
            const double orig = values[k];
            auto diff = [&](double h) {
                values[k] = orig + h;
                const double plus = eval();
                values[k] = orig - h;
                const double minus = eval();
                values[k] = orig;
                return (plus - minus) / (2.0 * h);
            };
            const double coarse = diff(options.step);
            const double numeric =
                options.extrapolate ? (4.0 * diff(options.step / 2.0) - coarse) / 3.0 : coarse;
            const double err = relative_error(analytic[k], numeric, options.abs_floor);
            ++check.entries_checked;
            if (err > check.max_rel_error || check.worst_index < 0) {
                check.max_rel_error = std::max(check.max_rel_error, err);
                check.worst_index = i;
                check.worst_analytic = analytic[k];
                check.worst_numeric = numeric;
            }
        }
        report.leaves.push_back(check);
    }
    return report;
}

}  // namespace ntrm
