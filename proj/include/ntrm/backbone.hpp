// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0
//
// ResNet-style encoder, five-stage decoder and the two segmentation heads.
//
// Encoder ladder (w = base width), strides relative to the input:
//   E1: w  @ 2   stem conv3x3/2 + BN + ReLU
//   E2: w  @ 4   maxpool 3/2 then basic blocks
//   E3: 2w @ 8,  E4: 4w @ 16,  E5: 8w @ 32
// Decoder: D1 = Dec(E5, E4) 4w, D2 = Dec(D1, E3) 2w, D3 = Dec(D2', E2) w,
// D4 = Dec(D3, E1) w, D5 = Dec(D4) w.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntrm/params.hpp"
#include "ntrm/tensor.hpp"

namespace ntrm {

enum class GnnVariant { simple, attention };

std::string gnn_variant_name(GnnVariant v);
GnnVariant parse_gnn_variant(const std::string& name);

struct ModelConfig {
    int num_classes = 5;
    int base_width = 8;
    int node_dim = 64;
    int gnn_layers = 2;
    GnnVariant gnn_variant = GnnVariant::attention;
    double tau = 0.5;
    double pool_eps = 1e-6;
    bool use_edge_weights = false;
    bool boundary_aware_edges = false;
    int blocks_per_stage = 2;
    // Hidden width of the attention-variant FFN; 0 means 2 * node_dim.
    int ffn_hidden = 0;
    double leaky_slope = 0.2;
    DType dtype = DType::f64;
    // Display names for graph dumps; empty entries fall back to "class<c>".
    std::vector<std::string> class_names;

    void validate() const;
    int ffn_width() const { return ffn_hidden > 0 ? ffn_hidden : 2 * node_dim; }
    std::string class_name(int c) const;
    /// Channel widths of D1..D5.
    std::array<std::int64_t, 5> decoder_channels() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct EncoderFeatures {
    std::array<Tensor, 5> e;  // E1..E5
};

void register_backbone(ParamStore& store, const ModelConfig& cfg);

/// x: B x 3 x H x W with H, W divisible by 32.
EncoderFeatures encode(ParamStore& store, const ModelConfig& cfg, const Tensor& x, bool training);

/// Decoder stage `stage` in 1..5: upsample x2, concat `skip` when defined,
/// then two conv3x3 + BN + ReLU.
Tensor decode_stage(ParamStore& store, const ModelConfig& cfg, int stage, const Tensor& prev,
                    const Tensor& skip, bool training);

/// 1x1 conv from 8w to K channels on E5; raw logits.
Tensor initial_head(ParamStore& store, const Tensor& e5);
/// Bilinear resize of the initial logits to (h2, w2), then channel softmax.
Tensor initial_probs(const Tensor& logits, std::int64_t h2, std::int64_t w2);
/// 1x1 conv from w to K channels on D5; raw logits.
Tensor final_head(ParamStore& store, const Tensor& d5);

}  // namespace ntrm
