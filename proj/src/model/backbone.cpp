// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0

#include "ntrm/backbone.hpp"

#include <stdexcept>

#include "ntrm/json_util.hpp"
#include "ntrm/ops.hpp"

namespace ntrm {

std::string gnn_variant_name(GnnVariant v) {
    return v == GnnVariant::simple ? "simple" : "attention";
}

GnnVariant parse_gnn_variant(const std::string& name) {
    if (name == "simple") return GnnVariant::simple;
    if (name == "attention") return GnnVariant::attention;
    throw std::invalid_argument("unknown gnn_variant '" + name + "' (expected simple or attention)");
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (num_classes < 2) fail("num_classes must be >= 2");
    if (base_width < 1) fail("base_width must be >= 1");
    if (node_dim < 1) fail("node_dim must be >= 1");
    if (gnn_layers < 1) fail("gnn_layers must be >= 1");
    if (!(tau > 0.0 && tau < 1.0)) fail("tau must lie in (0, 1)");
    if (!(pool_eps > 0.0)) fail("pool_eps must be positive");
    if (blocks_per_stage < 1) fail("blocks_per_stage must be >= 1");
    if (ffn_hidden < 0) fail("ffn_hidden must be >= 0");
    if (class_names.size() > static_cast<std::size_t>(num_classes)) {
        fail("more class_names than classes");
    }
}

std::string ModelConfig::class_name(int c) const {
    if (static_cast<std::size_t>(c) < class_names.size() && !class_names[static_cast<std::size_t>(c)].empty()) {
        return class_names[static_cast<std::size_t>(c)];
    }
    return "class" + std::to_string(c);
}

std::array<std::int64_t, 5> ModelConfig::decoder_channels() const {
    const std::int64_t w = base_width;
    return {4 * w, 2 * w, w, w, w};
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"num_classes", c.num_classes},
                       {"base_width", c.base_width},
                       {"node_dim", c.node_dim},
                       {"gnn_layers", c.gnn_layers},
                       {"gnn_variant", gnn_variant_name(c.gnn_variant)},
                       {"tau", c.tau},
                       {"pool_eps", c.pool_eps},
                       {"use_edge_weights", c.use_edge_weights},
                       {"boundary_aware_edges", c.boundary_aware_edges},
                       {"blocks_per_stage", c.blocks_per_stage},
                       {"ffn_hidden", c.ffn_width()},
                       {"leaky_slope", c.leaky_slope},
                       {"dtype", dtype_name(c.dtype)},
                       {"class_names", c.class_names}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    reject_unknown_keys(j,
                        {"num_classes", "base_width", "node_dim", "gnn_layers", "gnn_variant", "tau",
                         "pool_eps", "use_edge_weights", "boundary_aware_edges", "blocks_per_stage",
                         "ffn_hidden", "leaky_slope", "dtype", "class_names"},
                        "model");
    read_key(j, "num_classes", c.num_classes);
    read_key(j, "base_width", c.base_width);
    read_key(j, "node_dim", c.node_dim);
    read_key(j, "gnn_layers", c.gnn_layers);
    if (j.contains("gnn_variant")) c.gnn_variant = parse_gnn_variant(j.at("gnn_variant").get<std::string>());
    read_key(j, "tau", c.tau);
    read_key(j, "pool_eps", c.pool_eps);
    read_key(j, "use_edge_weights", c.use_edge_weights);
    read_key(j, "boundary_aware_edges", c.boundary_aware_edges);
    read_key(j, "blocks_per_stage", c.blocks_per_stage);
    read_key(j, "ffn_hidden", c.ffn_hidden);
    read_key(j, "leaky_slope", c.leaky_slope);
    if (j.contains("dtype")) c.dtype = parse_dtype(j.at("dtype").get<std::string>());
    read_key(j, "class_names", c.class_names);
}

namespace {

std::string block_path(int n) { return "encoder.block" + std::to_string(n); }

struct StageSpec {
    std::int64_t in, out;
    int stride;
};

// Encoder stages producing E2..E5.
std::array<StageSpec, 4> stage_specs(const ModelConfig& cfg) {
    const std::int64_t w = cfg.base_width;
    return {StageSpec{w, w, 1}, StageSpec{w, 2 * w, 2}, StageSpec{2 * w, 4 * w, 2},
            StageSpec{4 * w, 8 * w, 2}};
}

std::int64_t decoder_in_channels(const ModelConfig& cfg, int stage) {
    const std::int64_t w = cfg.base_width;
    const auto dec = cfg.decoder_channels();
    switch (stage) {
        case 1: return 8 * w + 4 * w;   // E5 + E4
        case 2: return dec[0] + 2 * w;  // D1 + E3
        case 3: return dec[1] + w;      // D2' + E2
        case 4: return dec[2] + w;      // D3 + E1
        default: return dec[3];         // D4
    }
}

Tensor conv_bn(ParamStore& store, const std::string& conv, const std::string& bn, const Tensor& x,
               int stride, int pad, bool training) {
    return apply_batch_norm(store, bn, apply_conv(store, conv, x, stride, pad), training);
}

Tensor basic_block(ParamStore& store, const std::string& path, const Tensor& x, int stride,
                   bool training) {
    Tensor y = relu(conv_bn(store, path + ".conv1", path + ".bn1", x, stride, 1, training));
    y = conv_bn(store, path + ".conv2", path + ".bn2", y, 1, 1, training);
    Tensor shortcut = x;
    if (store.contains(path + ".down.conv.weight")) {
        shortcut = conv_bn(store, path + ".down.conv", path + ".down.bn", x, stride, 0, training);
    }
    ScopeLabel scope(path);
    return relu(add(y, shortcut));
}

}  // namespace

void register_backbone(ParamStore& store, const ModelConfig& cfg) {
    const std::int64_t w = cfg.base_width;
    add_conv(store, "encoder.stem.conv", 3, w, 3, false);
    store.add_batch_norm("encoder.stem.bn", w);

    int n = 1;
    for (const auto& s : stage_specs(cfg)) {
        for (int b = 0; b < cfg.blocks_per_stage; ++b, ++n) {
            const std::string p = block_path(n);
            const std::int64_t in = b == 0 ? s.in : s.out;
            add_conv(store, p + ".conv1", in, s.out, 3, false);
            store.add_batch_norm(p + ".bn1", s.out);
            add_conv(store, p + ".conv2", s.out, s.out, 3, false);
            store.add_batch_norm(p + ".bn2", s.out);
            if (b == 0 && (s.stride != 1 || s.in != s.out)) {
                add_conv(store, p + ".down.conv", s.in, s.out, 1, false);
                store.add_batch_norm(p + ".down.bn", s.out);
            }
        }
    }

    const auto dec = cfg.decoder_channels();
    for (int stage = 1; stage <= 5; ++stage) {
        const std::string p = "decoder.stage" + std::to_string(stage);
        const auto out = dec[static_cast<std::size_t>(stage - 1)];
        add_conv(store, p + ".conv1", decoder_in_channels(cfg, stage), out, 3, false);
        store.add_batch_norm(p + ".bn1", out);
        add_conv(store, p + ".conv2", out, out, 3, false);
        store.add_batch_norm(p + ".bn2", out);
    }

    add_conv(store, "head.initial", 8 * w, cfg.num_classes, 1, true);
    add_conv(store, "head.final", dec[4], cfg.num_classes, 1, true);
}

EncoderFeatures encode(ParamStore& store, const ModelConfig& cfg, const Tensor& x, bool training) {
    if (x.rank() != 4 || x.size(1) != 3) {
        throw ShapeError("encode: expected B x 3 x H x W input, got " + shape_str(x.shape()));
    }
    if (x.size(2) % 32 != 0 || x.size(3) % 32 != 0) {
        throw ShapeError("encode: input spatial size " + std::to_string(x.size(2)) + "x" +
                         std::to_string(x.size(3)) + " is not divisible by 32");
    }
    EncoderFeatures f;
    f.e[0] = relu(conv_bn(store, "encoder.stem.conv", "encoder.stem.bn", x, 2, 1, training));
    Tensor h = maxpool2d(f.e[0], 3, 2, 1);
    int n = 1;
    const auto specs = stage_specs(cfg);
    for (std::size_t s = 0; s < specs.size(); ++s) {
        for (int b = 0; b < cfg.blocks_per_stage; ++b, ++n) {
            h = basic_block(store, block_path(n), h, b == 0 ? specs[s].stride : 1, training);
        }
        f.e[s + 1] = h;
    }
    return f;
}

Tensor decode_stage(ParamStore& store, const ModelConfig& cfg, int stage, const Tensor& prev,
                    const Tensor& skip, bool training) {
    (void)cfg;
    if (stage < 1 || stage > 5) {
        throw std::invalid_argument("decode_stage: stage must be in 1..5");
    }
    const std::string p = "decoder.stage" + std::to_string(stage);
    const auto oh = 2 * prev.size(2), ow = 2 * prev.size(3);
    Tensor h = upsample_bilinear(prev, oh, ow);
    if (skip.defined()) {
        if (skip.size(2) != oh || skip.size(3) != ow) {
            throw ShapeError("decode_stage " + std::to_string(stage) + ": upsampled " +
                             shape_str(h.shape()) + " does not match skip " +
                             shape_str(skip.shape()));
        }
        h = concat({h, skip}, 1);
    }
    h = relu(conv_bn(store, p + ".conv1", p + ".bn1", h, 1, 1, training));
    return relu(conv_bn(store, p + ".conv2", p + ".bn2", h, 1, 1, training));
}

Tensor initial_head(ParamStore& store, const Tensor& e5) {
    return apply_conv(store, "head.initial", e5, 1, 0);
}

Tensor initial_probs(const Tensor& logits, std::int64_t h2, std::int64_t w2) {
    return softmax(upsample_bilinear(logits, h2, w2), 1);
}

Tensor final_head(ParamStore& store, const Tensor& d5) {
    return apply_conv(store, "head.final", d5, 1, 0);
}

}  // namespace ntrm
