// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <random>

#include "ntrm/loss.hpp"
#include "ntrm/model.hpp"
#include "test_util.hpp"

using namespace ntrm;
using namespace ntrm::testing;

namespace {

ModelConfig small_config(GnnVariant variant = GnnVariant::attention) {
    ModelConfig cfg;
    cfg.num_classes = 3;
    cfg.base_width = 4;
    cfg.node_dim = 8;
    cfg.gnn_variant = variant;
    return cfg;
}

}  // namespace

TEST_CASE("Kaiming init: conv weight variance is 2 / fan_in") {
    Model model(ModelConfig{});
    model.params().initialize(11);
    // Pool standardized draws from every conv weight: w * sqrt(fan_in / 2).
    double sum = 0.0, sq = 0.0;
    std::int64_t n = 0;
    for (const auto& path : model.params().paths()) {
        const Param& p = model.params().param(path);
        if (p.init != InitScheme::kaiming_normal) continue;
        const double s = std::sqrt(static_cast<double>(p.fan_in) / 2.0);
        for (double v : p.value.values()) {
            sum += v * s;
            sq += v * v * s * s;
            ++n;
        }
        // Each tensor on its own, where it is large enough to say anything.
        if (p.value.numel() >= 10000) {
            const auto v = p.value.values();
            double q = 0.0;
            for (double x : v) q += x * x;
            const double var = q / static_cast<double>(v.size());
            CHECK(var == doctest::Approx(2.0 / static_cast<double>(p.fan_in)).epsilon(0.2));
        }
    }
    REQUIRE(n >= 10000);
    const double mean = sum / static_cast<double>(n);
    const double var = sq / static_cast<double>(n) - mean * mean;
    CHECK(std::abs(mean) < 0.05);
    CHECK(var == doctest::Approx(1.0).epsilon(0.2));
}

TEST_CASE("Xavier init stays inside its bound; embeddings, BN and biases follow their schemes") {
    Model model(ModelConfig{});
    model.params().initialize(3);
    std::int64_t xavier = 0, global = 0;
    for (const auto& path : model.params().paths()) {
        const Param& p = model.params().param(path);
        const auto v = p.value.values();
        switch (p.init) {
            case InitScheme::xavier_uniform: {
                const double b = std::sqrt(6.0 / static_cast<double>(p.fan_in + p.fan_out));
                for (double x : v) CHECK(std::abs(x) <= b);
                xavier += p.value.numel();
                break;
            }
            case InitScheme::global_normal: {
                double q = 0.0;
                for (double x : v) q += x * x;
                // 5 x 64 draws from N(0, 0.02^2).
                CHECK(std::sqrt(q / static_cast<double>(v.size())) == doctest::Approx(0.02).epsilon(0.2));
                global += p.value.numel();
                break;
            }
            case InitScheme::ones:
                for (double x : v) CHECK(x == 1.0);
                break;
            case InitScheme::zeros:
                for (double x : v) CHECK(x == 0.0);
                break;
            case InitScheme::kaiming_normal:
                break;
        }
    }
    CHECK(xavier > 0);
    CHECK(global == 5 * 64);
    for (const auto& [path, buf] : model.params().buffers()) {
        const double expect = path.ends_with("running_var") ? 1.0 : 0.0;
        for (double x : buf.values()) CHECK(x == expect);
    }
}

TEST_CASE("initialization is a function of the seed") {
    Model a(small_config()), b(small_config()), c(small_config());
    a.params().initialize(5);
    b.params().initialize(5);
    c.params().initialize(6);
    bool any_diff = false;
    for (const auto& path : a.params().paths()) {
        CHECK(a.params().get(path).values() == b.params().get(path).values());
        any_diff = any_diff || a.params().get(path).values() != c.params().get(path).values();
    }
    CHECK(any_diff);
}

TEST_CASE("encoder and decoder shapes follow the stride ladder") {
    ModelConfig cfg;
    Model model(cfg);
    model.params().initialize(1);
    std::mt19937_64 rng(2);
    const Tensor x = randn({2, 3, 64, 64}, rng);
    NoGradGuard ng;
    const EncoderFeatures enc = encode(model.params(), cfg, x, false);
    const std::int64_t w = cfg.base_width;
    CHECK(enc.e[0].shape() == Shape{2, w, 32, 32});
    CHECK(enc.e[1].shape() == Shape{2, w, 16, 16});
    CHECK(enc.e[2].shape() == Shape{2, 2 * w, 8, 8});
    CHECK(enc.e[3].shape() == Shape{2, 4 * w, 4, 4});
    CHECK(enc.e[4].shape() == Shape{2, 64, 2, 2});

    const Tensor d1 = decode_stage(model.params(), cfg, 1, enc.e[4], enc.e[3], false);
    const Tensor d2 = decode_stage(model.params(), cfg, 2, d1, enc.e[2], false);
    CHECK(d1.shape() == Shape{2, 4 * w, 4, 4});
    CHECK(d2.shape() == Shape{2, 2 * w, 8, 8});

    const ForwardOutput out = model.forward(x, false);
    CHECK(out.init_logits.shape() == Shape{2, 5, 2, 2});
    CHECK(out.final_logits.shape() == Shape{2, 5, 64, 64});
    CHECK(out.probs.shape() == Shape{2, 5, 8, 8});
    CHECK(out.trm.fused.shape() == d2.shape());
    CHECK(out.trm.images.size() == 2);
}

TEST_CASE("input sizes not divisible by 32 are rejected") {
    Model model(small_config());
    model.params().initialize(1);
    NoGradGuard ng;
    CHECK_THROWS_AS(model.forward(Tensor::zeros({1, 3, 48, 64}), false), ShapeError);
    CHECK_THROWS_AS(model.forward(Tensor::zeros({1, 1, 64, 64}), false), ShapeError);
    try {
        model.forward(Tensor::zeros({1, 3, 64, 40}), false);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("not divisible by 32") != std::string::npos);
    }
}

TEST_CASE("zero input gives finite outputs") {
    Model model(ModelConfig{});
    model.params().initialize(4);
    NoGradGuard ng;
    const ForwardOutput out = model.forward(Tensor::zeros({1, 3, 32, 32}), true);
    for (double v : out.final_logits.values()) REQUIRE(std::isfinite(v));
}

TEST_CASE("eval forward is a pure function of input and parameters") {
    Model model(small_config());
    model.params().initialize(8);
    std::mt19937_64 rng(9);
    const Tensor one = randn({1, 3, 32, 32}, rng);
    const auto v = one.values();
    std::vector<double> twice(v);
    twice.insert(twice.end(), v.begin(), v.end());
    const Tensor pair = Tensor::from_values({2, 3, 32, 32}, twice);
    NoGradGuard ng;
    const auto a = model.forward(one, false).final_logits.values();
    const auto b = model.forward(one, false).final_logits.values();
    CHECK(a == b);
    const auto p = model.forward(pair, false).final_logits.values();
    const std::size_t half = p.size() / 2;
    CHECK(std::vector<double>(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(half)) ==
          std::vector<double>(p.begin() + static_cast<std::ptrdiff_t>(half), p.end()));
}

TEST_CASE("initial head and probabilities") {
    SUBCASE("zero weights give uniform probabilities") {
        ModelConfig cfg = small_config();
        cfg.num_classes = 2;
        ParamStore store;
        register_backbone(store, cfg);
        store.initialize(1);
        store.get("head.initial.weight").assign(std::vector<double>(store.get("head.initial.weight").numel(), 0.0));
        std::mt19937_64 rng(1);
        const Tensor e5 = randn({1, 8 * cfg.base_width, 2, 2}, rng);
        const Tensor logits = initial_head(store, e5);
        CHECK(logits.shape() == Shape{1, 2, 2, 2});
        for (double v : logits.values()) CHECK(v == 0.0);
        for (double v : initial_probs(logits, 8, 8).values()) CHECK(v == 0.5);
    }
    SUBCASE("probabilities sum to one and saturate") {
        std::vector<double> l(3 * 4, 0.0);
        for (int i = 0; i < 4; ++i) l[static_cast<std::size_t>(4 + i)] = 10.0;
        const Tensor p = initial_probs(Tensor::from_values({1, 3, 2, 2}, l), 8, 8);
        CHECK(p.shape() == Shape{1, 3, 8, 8});
        const auto v = p.values();
        for (int i = 0; i < 64; ++i) {
            const double s = v[static_cast<std::size_t>(i)] + v[static_cast<std::size_t>(64 + i)] +
                             v[static_cast<std::size_t>(128 + i)];
            CHECK(std::abs(s - 1.0) < 1e-9);
            CHECK(v[static_cast<std::size_t>(64 + i)] > 0.9999);
        }
    }
}

TEST_CASE("every parameter receives a gradient") {
    for (const auto variant : {GnnVariant::simple, GnnVariant::attention}) {
        CAPTURE(gnn_variant_name(variant));
        ModelConfig cfg = small_config(variant);
        cfg.num_classes = 2;
        cfg.tau = 0.4;
        Model model(cfg);
        model.params().initialize(21);
        // Near-uniform coarse probabilities so both classes are proposed and meet.
        Tensor& hw = model.params().get("head.initial.weight");
        hw.assign(scale(hw, 0.0).values());
        std::mt19937_64 rng(22);
        const Tensor x = randn({2, 3, 32, 32}, rng);
        std::vector<std::int32_t> y(2 * 32 * 32);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<std::int32_t>(i % 32 < 16);
        model.params().zero_grad();
        const ForwardOutput out = model.forward(x, true);
        REQUIRE_FALSE(out.trm.images[0].graph.edges.empty());
        composite_loss(out.final_logits, out.init_logits, LabelMap(2, 32, 32, y), 0.4).total.backward();
        for (const auto& path : model.params().paths()) {
            CAPTURE(path);
            const auto g = model.params().get(path).grad_values();
            double norm = 0.0;
            for (double v : g) norm += std::abs(v);
            // All classes are present, so no global embedding is substituted;
            // with one neighbor per node the attention softmax is constant in q.
            if (path == "trm.global_embeddings" || path.ends_with("attention.q")) {
                CHECK(norm == 0.0);
            } else {
                CHECK(norm > 0.0);
            }
        }
    }
}

TEST_CASE("model config JSON round trip and validation") {
    ModelConfig cfg = small_config(GnnVariant::simple);
    cfg.use_edge_weights = true;
    cfg.class_names = {"tumor", "stroma", "background"};
    const nlohmann::json j = cfg;
    const ModelConfig back = j.get<ModelConfig>();
    CHECK(nlohmann::json(back) == j);
    CHECK(back.gnn_variant == GnnVariant::simple);
    CHECK(back.class_name(1) == "stroma");
    CHECK(ModelConfig{}.class_name(3) == "class3");

    nlohmann::json bad = j;
    bad["tua"] = 0.5;
    CHECK_THROWS_AS(bad.get<ModelConfig>(), std::invalid_argument);
    for (const auto& [key, value] : std::vector<std::pair<std::string, nlohmann::json>>{
             {"num_classes", 1}, {"tau", 1.0}, {"tau", 0.0}, {"node_dim", 0}, {"gnn_layers", 0}}) {
        CAPTURE(key);
        nlohmann::json b = j;
        b[key] = value;
        CHECK_THROWS_AS(b.get<ModelConfig>().validate(), std::invalid_argument);
    }
    CHECK_THROWS_AS(parse_gnn_variant("gcn"), std::invalid_argument);
}
