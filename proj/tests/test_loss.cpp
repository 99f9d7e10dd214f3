// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>

#include "ntrm/gradcheck.hpp"
#include "ntrm/loss.hpp"
#include "oracle.hpp"
#include "test_util.hpp"

using namespace ntrm;
using namespace ntrm::testing;

namespace {

LabelMap random_labels(std::mt19937_64& rng, int b, int h, int w, int k) {
    std::vector<std::int32_t> y(static_cast<std::size_t>(b * h * w));
    for (auto& v : y) v = static_cast<std::int32_t>(rand_int(rng, 0, k - 1));
    return LabelMap(b, h, w, std::move(y));
}

/// Confusion matrix with random counts, some rows and columns left empty.
std::vector<std::int64_t> random_confusion(std::mt19937_64& rng, int k) {
    std::vector<std::int64_t> conf(static_cast<std::size_t>(k * k), 0);
    for (auto& v : conf) v = rand_int(rng, 0, 3) == 0 ? 0 : rand_int(rng, 0, 50);
    return conf;
}

}  // namespace

TEST_CASE("dynamic class weights") {
    CHECK(dynamic_class_weights(LabelMap(1, 1, 3, {0, 0, 1}), 2) == std::vector<double>{0.75, 1.5});
    CHECK(dynamic_class_weights(LabelMap(1, 2, 2, {0, 1, 2, 3}), 4) == std::vector<double>{1, 1, 1, 1});
    CHECK(dynamic_class_weights(LabelMap(1, 1, 4, {0, 0, 2, 2}), 3) == std::vector<double>{2.0 / 3.0, 0.0, 2.0 / 3.0});
    std::mt19937_64 rng(1);
    for (int t = 0; t < 200; ++t) {
        const int k = static_cast<int>(rand_int(rng, 2, 6));
        const LabelMap y = random_labels(rng, static_cast<int>(rand_int(rng, 1, 3)), 3, 4, k);
        CHECK(oracle::max_scaled_error(dynamic_class_weights(y, k), oracle::class_weights(y.data, k)) < 1e-12);
    }
}

TEST_CASE("weighted cross-entropy") {
    std::mt19937_64 rng(2);
    SUBCASE("uniform prediction with unit weights is ln K") {
        for (int k : {2, 3, 5}) {
            const LabelMap y = random_labels(rng, 2, 3, 3, k);
            const double l = weighted_ce(Tensor::zeros({2, k, 3, 3}), y, std::vector<double>(static_cast<std::size_t>(k), 1.0)).item();
            CHECK(l == doctest::Approx(std::log(k)).epsilon(1e-14));
        }
    }
    SUBCASE("confident correct prediction is near zero") {
        std::vector<double> logits(2 * 4, -20.0);
        const LabelMap y(1, 2, 2, {0, 1, 1, 0});
        for (int p = 0; p < 4; ++p) logits[static_cast<std::size_t>(y.data[static_cast<std::size_t>(p)] * 4 + p)] = 20.0;
        CHECK(weighted_ce(Tensor::from_values({1, 2, 2, 2}, logits), y, {1.0, 1.0}).item() < 1e-15);
    }
    SUBCASE("the log floor caps a hopeless pixel") {
        const double l = weighted_ce(Tensor::from_values({1, 2, 1, 1}, {0.0, -1000.0}), LabelMap(1, 1, 1, {1}), {1.0, 1.0}).item();
        CHECK(l == doctest::Approx(-std::log(1e-12)).epsilon(1e-14));
    }
    SUBCASE("random instances match the oracle") {
        for (int t = 0; t < 200; ++t) {
            const int k = static_cast<int>(rand_int(rng, 2, 5)), b = static_cast<int>(rand_int(rng, 1, 2));
            const Tensor logits = randn({b, k, 3, 2}, rng, 3.0);
            const LabelMap y = random_labels(rng, b, 3, 2, k);
            const auto w = uniform({k}, rng, 0.0, 3.0).values();
            CHECK(oracle::scaled_error(weighted_ce(logits, y, w).item(),
                                       oracle::weighted_ce(logits.values(), y.data, b, k, 3, 2, w)) < 1e-12);
        }
    }
    SUBCASE("scaling the weights scales the loss") {
        const Tensor logits = randn({1, 3, 4, 4}, rng);
        const LabelMap y = random_labels(rng, 1, 4, 4, 3);
        const std::vector<double> w{0.5, 1.5, 2.0};
        const double base = weighted_ce(logits, y, w).item();
        for (double s : {0.25, 2.0, 8.0}) {
            CHECK(weighted_ce(logits, y, {w[0] * s, w[1] * s, w[2] * s}).item() == doctest::Approx(s * base).epsilon(1e-14));
        }
    }
    SUBCASE("gradient matches finite differences") {
        const Tensor logits = leaf(randn({2, 3, 3, 3}, rng));
        const LabelMap y = random_labels(rng, 2, 3, 3, 3);
        const auto w = dynamic_class_weights(y, 3);
        const auto report = check_gradients([&] { return weighted_ce(logits, y, w); }, {{"logits", logits}});
        CHECK(report.max_rel_error() < 1e-6);
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(weighted_ce(Tensor::zeros({1, 2, 2, 2}), LabelMap(1, 2, 3, {0, 0, 0, 0, 0, 0}), {1, 1}), ShapeError);
        CHECK_THROWS_AS(weighted_ce(Tensor::zeros({1, 2, 1, 1}), LabelMap(1, 1, 1, {2}), {1, 1}), std::invalid_argument);
    }
}

TEST_CASE("composite loss") {
    std::mt19937_64 rng(3);
    SUBCASE("lambda 0 is the final term; equal stages give (1 + lambda) CE") {
        const Tensor f = randn({1, 2, 4, 4}, rng);
        const LabelMap y = random_labels(rng, 1, 4, 4, 2);
        const CompositeLoss zero = composite_loss(f, randn({1, 2, 2, 2}, rng), y, 0.0);
        CHECK(zero.total.item() == zero.final_term.item());
        const CompositeLoss same = composite_loss(f, f, y, 0.4);
        CHECK(same.total.item() == doctest::Approx(1.4 * same.final_term.item()).epsilon(1e-15));
        CHECK(same.aux_term.item() == same.final_term.item());
    }
    SUBCASE("2 x 2, K = 2 by hand") {
        // Final logits favor the truth at three of four pixels; init is one coarse pixel.
        const LabelMap y(1, 2, 2, {0, 0, 0, 1});
        const Tensor f = Tensor::from_values({1, 2, 2, 2}, {2, 1, 0, 0, 0, 0, 1, 1});
        const Tensor i = Tensor::from_values({1, 2, 1, 1}, {0.5, -0.5});
        const CompositeLoss l = composite_loss(f, i, y, 0.4);
        const double w0 = 4.0 / 6.0, w1 = 2.0;
        auto nll = [](double a, double b) { return std::log(std::exp(a) + std::exp(b)) - a; };
        const double fin = (w0 * nll(2, 0) + w0 * nll(1, 0) + w0 * nll(0, 1) + w1 * nll(1, 0)) / 4.0;
        const double aux = (3 * w0 * nll(0.5, -0.5) + w1 * nll(-0.5, 0.5)) / 4.0;
        CHECK(l.final_term.item() == doctest::Approx(fin).epsilon(1e-14));
        CHECK(l.aux_term.item() == doctest::Approx(aux).epsilon(1e-14));
        CHECK(l.total.item() == doctest::Approx(fin + 0.4 * aux).epsilon(1e-14));
    }
    SUBCASE("random instances decompose as the oracle") {
        for (int t = 0; t < 200; ++t) {
            const int k = static_cast<int>(rand_int(rng, 2, 4)), b = static_cast<int>(rand_int(rng, 1, 2));
            const int h0 = static_cast<int>(rand_int(rng, 1, 3)), w0 = static_cast<int>(rand_int(rng, 1, 3));
            const int h = h0 * 4, w = w0 * 4;
            const Tensor f = randn({b, k, h, w}, rng, 2.0), init = randn({b, k, h0, w0}, rng, 2.0);
            const LabelMap y = random_labels(rng, b, h, w, k);
            const double lambda = uniform({1}, rng, 0.0, 1.0).item();
            const CompositeLoss l = composite_loss(f, init, y, lambda);
            const auto cw = oracle::class_weights(y.data, k);
            const double fin = oracle::weighted_ce(f.values(), y.data, b, k, h, w, cw);
            const double aux = oracle::weighted_ce(oracle::upsample(init.values(), b * k, h0, w0, h, w), y.data, b, k, h, w, cw);
            CHECK(oracle::scaled_error(l.final_term.item(), fin) < 1e-12);
            CHECK(oracle::scaled_error(l.aux_term.item(), aux) < 1e-12);
            CHECK(oracle::scaled_error(l.total.item(), fin + lambda * aux) < 1e-12);
        }
    }
}

TEST_CASE("argmax breaks ties toward the lowest class") {
    const Tensor logits = Tensor::from_values({1, 3, 1, 3}, {1, 0, 2, 1, 5, 2, 0, 5, 2});
    CHECK(argmax_labels(logits).data == std::vector<std::int32_t>{0, 1, 0});
}

TEST_CASE("metric examples") {
    SUBCASE("perfect prediction") {
        const LabelMap y(1, 2, 2, {0, 1, 2, 1});
        const MetricReport r = compute_metrics(y, y, 3);
        CHECK(r.accuracy == 1.0);
        CHECK(r.mean_iou == 1.0);
        CHECK(r.mean_dice == 1.0);
    }
    SUBCASE("disjoint predictions score zero") {
        const MetricReport r = compute_metrics(LabelMap(1, 1, 4, {1, 1, 0, 0}), LabelMap(1, 1, 4, {0, 0, 1, 1}), 2);
        CHECK(r.iou == std::vector<double>{0.0, 0.0});
        CHECK(r.dice == std::vector<double>{0.0, 0.0});
        CHECK(r.accuracy == 0.0);
    }
    SUBCASE("half overlap of equal regions") {
        // Class 1: ground truth {0, 1}, prediction {1, 2}.
        const MetricReport r = compute_metrics(LabelMap(1, 1, 4, {0, 1, 1, 0}), LabelMap(1, 1, 4, {1, 1, 0, 0}), 2);
        CHECK(r.iou[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
        CHECK(r.dice[1] == 0.5);
    }
    SUBCASE("classes absent from both sides are not counted") {
        const MetricReport r = compute_metrics(LabelMap(1, 1, 2, {0, 1}), LabelMap(1, 1, 2, {0, 1}), 4);
        CHECK(r.counted == std::vector<bool>{true, true, false, false});
        CHECK(r.mean_iou == 1.0);
        const nlohmann::json doc = report_document(r);
        CHECK(doc["miou"] == 1.0);
        CHECK(doc["per_class.0.iou"] == 1.0);
        CHECK(doc["per_class.3.dice"].is_null());
    }
    SUBCASE("confusion rows count the ground truth") {
        std::mt19937_64 rng(4);
        const LabelMap gt = random_labels(rng, 2, 5, 5, 4), pred = random_labels(rng, 2, 5, 5, 4);
        const auto conf = confusion_matrix(pred, gt, 4);
        for (int c = 0; c < 4; ++c) {
            std::int64_t row = 0, count = 0;
            for (int o = 0; o < 4; ++o) row += conf[static_cast<std::size_t>(c * 4 + o)];
            for (auto v : gt.data) count += v == c;
            CHECK(row == count);
        }
        CHECK_THROWS_AS(confusion_matrix(LabelMap(1, 1, 2, {0, 0}), LabelMap(1, 2, 1, {0, 0}), 2), ShapeError);
    }
}

TEST_CASE("Dice and IoU identity on random confusion matrices") {
    std::mt19937_64 rng(5);
    for (int t = 0; t < 500; ++t) {
        const int k = static_cast<int>(rand_int(rng, 2, 6));
        const auto conf = random_confusion(rng, k);
        const MetricReport r = metrics_from_confusion(conf, k);
        for (int c = 0; c < k; ++c) {
            const double iou = r.iou[static_cast<std::size_t>(c)], dice = r.dice[static_cast<std::size_t>(c)];
            CHECK(std::abs(dice - 2.0 * iou / (1.0 + iou)) < 1e-12);
            CHECK(iou >= 0.0);
            CHECK(dice <= 1.0);
        }
    }
}

TEST_CASE("metrics from the confusion matrix equal per-class set counts") {
    std::mt19937_64 rng(6);
    for (int t = 0; t < 100; ++t) {
        const int k = static_cast<int>(rand_int(rng, 2, 5));
        const LabelMap gt = random_labels(rng, 1, 4, 6, k), pred = random_labels(rng, 1, 4, 6, k);
        const MetricReport r = compute_metrics(pred, gt, k);
        double sum_iou = 0.0;
        int counted = 0;
        for (int c = 0; c < k; ++c) {
            double inter = 0, uni = 0, a = 0, b = 0;
            for (std::size_t i = 0; i < gt.data.size(); ++i) {
                const bool g = gt.data[i] == c, p = pred.data[i] == c;
                inter += g && p;
                uni += g || p;
                a += g;
                b += p;
            }
            if (uni == 0) continue;
            ++counted;
            sum_iou += inter / uni;
            CHECK(r.iou[static_cast<std::size_t>(c)] == doctest::Approx(inter / uni).epsilon(1e-15));
            CHECK(r.dice[static_cast<std::size_t>(c)] == doctest::Approx(2 * inter / (a + b)).epsilon(1e-15));
        }
        CHECK(r.mean_iou == doctest::Approx(sum_iou / counted).epsilon(1e-14));
    }
}
