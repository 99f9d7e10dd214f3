// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dual-stage class-weighted cross-entropy and segmentation metrics.

#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "ntrm/label_map.hpp"
#include "ntrm/tensor.hpp"

namespace ntrm {

inline constexpr double kLogFloor = 1e-12;

/// w_c = N / (N_c * K); classes with N_c = 0 get weight 0.
std::vector<double> dynamic_class_weights(const LabelMap& labels, int classes);

/// -(1/N) sum_n w_{y_n} log(max(softmax(logits)_n[y_n], 1e-12)).
/// logits: B x K x H x W matching the label map.
Tensor weighted_ce(const Tensor& logits, const LabelMap& labels, const std::vector<double>& weights);

struct CompositeLoss {
    Tensor total;
    Tensor final_term;
    Tensor aux_term;
};

/// L = CE_w(final, y) + lambda * CE_w(upsample(init), y), both terms weighted
/// by the same per-batch dynamic weights.
CompositeLoss composite_loss(const Tensor& final_logits, const Tensor& init_logits,
                             const LabelMap& labels, double lambda);

/// Per-pixel argmax over channels; ties go to the lowest class index.
LabelMap argmax_labels(const Tensor& logits);

/// K x K counts, row = ground truth, column = prediction.
std::vector<std::int64_t> confusion_matrix(const LabelMap& pred, const LabelMap& gt, int classes);

struct MetricReport {
    int classes = 0;
    double accuracy = 0.0;
    std::vector<double> iou;
    std::vector<double> dice;
    // False for classes absent from both prediction and ground truth; those
    // are left out of the means.
    std::vector<bool> counted;
    double mean_iou = 0.0;
    double mean_dice = 0.0;
    std::vector<std::int64_t> confusion;
};

MetricReport metrics_from_confusion(const std::vector<std::int64_t>& confusion, int classes);
MetricReport compute_metrics(const LabelMap& pred, const LabelMap& gt, int classes);

/// Flat document: accuracy, miou, dice, per_class.<c>.iou, per_class.<c>.dice
/// (null for uncounted classes).
nlohmann::json report_document(const MetricReport& report);

}  // namespace ntrm
