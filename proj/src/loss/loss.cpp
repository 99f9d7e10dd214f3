// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0

#include "ntrm/loss.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "ntrm/ops.hpp"

namespace ntrm {

using detail::buf;
using detail::grad_buf;

std::vector<double> dynamic_class_weights(const LabelMap& labels, int classes) {
    labels.check_range(classes);
    std::vector<std::int64_t> counts(static_cast<std::size_t>(classes), 0);
    for (auto v : labels.data) ++counts[static_cast<std::size_t>(v)];
    const auto n = static_cast<double>(labels.size());
    std::vector<double> w(static_cast<std::size_t>(classes), 0.0);
    for (int c = 0; c < classes; ++c) {
        const auto nc = counts[static_cast<std::size_t>(c)];
        if (nc > 0) w[static_cast<std::size_t>(c)] = n / (static_cast<double>(nc) * classes);
    }
    return w;
}

Tensor weighted_ce(const Tensor& logits, const LabelMap& labels, const std::vector<double>& weights) {
    if (logits.rank() != 4 || logits.size(0) != labels.batch || logits.size(2) != labels.height ||
        logits.size(3) != labels.width) {
        throw ShapeError("weighted_ce: logits " + shape_str(logits.shape()) + " vs labels [" +
                         std::to_string(labels.batch) + "," + std::to_string(labels.height) + "," +
                         std::to_string(labels.width) + "]");
    }
    const auto b = logits.size(0), k = logits.size(1), hw = logits.size(2) * logits.size(3);
    if (static_cast<std::int64_t>(weights.size()) != k) {
        throw ShapeError("weighted_ce: " + std::to_string(weights.size()) + " weights for " +
                         std::to_string(k) + " classes");
    }
    labels.check_range(static_cast<int>(k));
    const auto n = static_cast<double>(b * hw);
    auto y = std::make_shared<std::vector<std::int32_t>>(labels.data);
    auto w = std::make_shared<std::vector<double>>(weights);

    return visit_dtype(logits.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& x = buf<T>(logits.impl().data);
        // Softmax probabilities kept for the backward pass.
        auto prob = std::make_shared<std::vector<double>>(x.size());
        double total = 0.0;
        std::vector<double> e(static_cast<std::size_t>(k));
        // Pixels whose target probability sits on the log floor.
        auto floored = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(b * hw));
        for (std::int64_t bi = 0; bi < b; ++bi) {
            for (std::int64_t p = 0; p < hw; ++p) {
                const auto base = static_cast<std::size_t>(bi * k * hw + p);
                double m = -INFINITY;
                for (std::int64_t c = 0; c < k; ++c) m = std::max(m, static_cast<double>(x[base + static_cast<std::size_t>(c * hw)]));
                double z = 0.0;
                for (std::int64_t c = 0; c < k; ++c) {
                    e[static_cast<std::size_t>(c)] = std::exp(static_cast<double>(x[base + static_cast<std::size_t>(c * hw)]) - m);
                    z += e[static_cast<std::size_t>(c)];
                }
                for (std::int64_t c = 0; c < k; ++c) {
                    (*prob)[base + static_cast<std::size_t>(c * hw)] = e[static_cast<std::size_t>(c)] / z;
                }
                const auto yc = (*y)[static_cast<std::size_t>(bi * hw + p)];
                const double py = (*prob)[base + static_cast<std::size_t>(yc * hw)];
                const auto fl = static_cast<std::uint8_t>(detail::branch(py < kLogFloor ? 1 : 0));
                (*floored)[static_cast<std::size_t>(bi * hw + p)] = fl;
                total -= (*w)[static_cast<std::size_t>(yc)] * std::log(fl ? kLogFloor : py);
            }
        }
        std::vector<T> out{static_cast<T>(total / n)};
        auto li = logits.impl_ptr();
        return detail::make_result(
            "weighted_ce", {}, logits.dtype(), Buffer(std::move(out)), {logits},
            [li, prob, floored, y, w, b, k, hw, n](const TensorImpl& o) {
                const double g = static_cast<double>(buf<T>(*o.grad)[0]);
                auto& gx = grad_buf<T>(*li);
                for (std::int64_t bi = 0; bi < b; ++bi) {
                    for (std::int64_t p = 0; p < hw; ++p) {
                        const auto base = static_cast<std::size_t>(bi * k * hw + p);
                        const auto yc = (*y)[static_cast<std::size_t>(bi * hw + p)];
                        // The log floor is flat below 1e-12, so such pixels pass no gradient.
                        if ((*floored)[static_cast<std::size_t>(bi * hw + p)]) continue;
                        const double s = g * (*w)[static_cast<std::size_t>(yc)] / n;
                        if (s == 0.0) continue;
                        for (std::int64_t c = 0; c < k; ++c) {
                            const auto idx = base + static_cast<std::size_t>(c * hw);
                            gx[idx] += static_cast<T>(s * ((*prob)[idx] - (c == yc ? 1.0 : 0.0)));
                        }
                    }
                }
            });
    });
}

CompositeLoss composite_loss(const Tensor& final_logits, const Tensor& init_logits,
                             const LabelMap& labels, double lambda) {
    const auto w = dynamic_class_weights(labels, static_cast<int>(final_logits.size(1)));
    CompositeLoss out;
    {
        ScopeLabel scope("loss.final");
        out.final_term = weighted_ce(final_logits, labels, w);
    }
    {
        ScopeLabel scope("loss.aux");
        out.aux_term = weighted_ce(upsample_bilinear(init_logits, labels.height, labels.width), labels, w);
    }
    ScopeLabel scope("loss.total");
    out.total = add(out.final_term, scale(out.aux_term, lambda));
    return out;
}

LabelMap argmax_labels(const Tensor& logits) {
    if (logits.rank() != 4) {
        throw ShapeError("argmax_labels: expected B x K x H x W, got " + shape_str(logits.shape()));
    }
    const auto b = logits.size(0), k = logits.size(1), h = logits.size(2), w = logits.size(3);
    const auto v = logits.values();
    std::vector<std::int32_t> out(static_cast<std::size_t>(b * h * w));
    for (std::int64_t bi = 0; bi < b; ++bi) {
        for (std::int64_t p = 0; p < h * w; ++p) {
            std::int32_t best = 0;
            double bv = v[static_cast<std::size_t>(bi * k * h * w + p)];
            for (std::int64_t c = 1; c < k; ++c) {
                const double cv = v[static_cast<std::size_t>((bi * k + c) * h * w + p)];
                if (cv > bv) {
                    bv = cv;
                    best = static_cast<std::int32_t>(c);
                }
            }
            out[static_cast<std::size_t>(bi * h * w + p)] = best;
        }
    }
    return LabelMap(b, h, w, std::move(out));
}

std::vector<std::int64_t> confusion_matrix(const LabelMap& pred, const LabelMap& gt, int classes) {
    if (pred.batch != gt.batch || pred.height != gt.height || pred.width != gt.width) {
        throw ShapeError("confusion_matrix: prediction and ground truth label maps differ in shape");
    }
    pred.check_range(classes);
    gt.check_range(classes);
    std::vector<std::int64_t> conf(static_cast<std::size_t>(classes * classes), 0);
    for (std::size_t i = 0; i < gt.data.size(); ++i) {
        ++conf[static_cast<std::size_t>(gt.data[i] * classes + pred.data[i])];
    }
    return conf;
}

MetricReport metrics_from_confusion(const std::vector<std::int64_t>& conf, int classes) {
    if (static_cast<int>(conf.size()) != classes * classes) {
        throw ShapeError("metrics_from_confusion: matrix size " + std::to_string(conf.size()) +
                         " for " + std::to_string(classes) + " classes");
    }
    MetricReport r;
    r.classes = classes;
    r.confusion = conf;
    r.iou.assign(static_cast<std::size_t>(classes), 0.0);
    r.dice.assign(static_cast<std::size_t>(classes), 0.0);
    r.counted.assign(static_cast<std::size_t>(classes), false);
    std::int64_t correct = 0, total = 0;
    int counted = 0;
    for (int c = 0; c < classes; ++c) {
        std::int64_t tp = conf[static_cast<std::size_t>(c * classes + c)], fp = 0, fn = 0;
        for (int o = 0; o < classes; ++o) {
            if (o == c) continue;
            fn += conf[static_cast<std::size_t>(c * classes + o)];
            fp += conf[static_cast<std::size_t>(o * classes + c)];
        }
        correct += tp;
        for (int o = 0; o < classes; ++o) total += conf[static_cast<std::size_t>(c * classes + o)];
        if (tp + fp + fn == 0) continue;
        r.counted[static_cast<std::size_t>(c)] = true;
        ++counted;
        r.iou[static_cast<std::size_t>(c)] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
        r.dice[static_cast<std::size_t>(c)] = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
        r.mean_iou += r.iou[static_cast<std::size_t>(c)];
        r.mean_dice += r.dice[static_cast<std::size_t>(c)];
    }
    r.accuracy = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    if (counted > 0) {
        r.mean_iou /= counted;
        r.mean_dice /= counted;
    }
    return r;
}

MetricReport compute_metrics(const LabelMap& pred, const LabelMap& gt, int classes) {
    return metrics_from_confusion(confusion_matrix(pred, gt, classes), classes);
}

nlohmann::json report_document(const MetricReport& r) {
    nlohmann::json j;
    j["accuracy"] = r.accuracy;
    j["miou"] = r.mean_iou;
    j["dice"] = r.mean_dice;
    for (int c = 0; c < r.classes; ++c) {
        const std::string key = "per_class." + std::to_string(c);
        if (r.counted[static_cast<std::size_t>(c)]) {
            j[key + ".iou"] = r.iou[static_cast<std::size_t>(c)];
            j[key + ".dice"] = r.dice[static_cast<std::size_t>(c)];
        } else {
            j[key + ".iou"] = nullptr;
            j[key + ".dice"] = nullptr;
        }
    }
    return j;
}

}  // namespace ntrm
