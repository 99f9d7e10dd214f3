// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tissue relation module: per-image graph over predicted tissue regions,
// message passing over that graph, and projection back onto D2.

#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ntrm/backbone.hpp"
#include "ntrm/params.hpp"
#include "ntrm/tensor.hpp"

namespace ntrm {

struct MaskSet {
    std::int64_t classes = 0;
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<std::uint8_t> masks;  // classes x height x width, values 0/1
    std::vector<bool> present;

    std::int64_t pixels() const { return height * width; }
    const std::uint8_t* mask(std::int64_t c) const { return masks.data() + c * pixels(); }
    std::int64_t area(std::int64_t c) const;

    /// Builds a set from raw 0/1 maps, deriving presence from the sums.
    static MaskSet from_masks(std::int64_t classes, std::int64_t height, std::int64_t width,
                              std::vector<std::uint8_t> masks);
};

/// 3x3 binary dilation with zero padding (max-pool k=3, s=1, p=1).
std::vector<std::uint8_t> dilate(const std::uint8_t* mask, std::int64_t height, std::int64_t width);

/// p: K x H x W (or 1 x K x H x W) probabilities. M_c = [maxpool3(p_c) > tau].
MaskSet region_proposal(const Tensor& p, double tau);

/// Directed pairs (i, j), i != j, both present, whose dilated masks
/// intersect; both directions are listed, sorted ascending.
std::vector<std::pair<std::int64_t, std::int64_t>> form_edges(const MaskSet& masks);

/// Fraction of mask i lying inside dilate(mask j). Throws when i is absent.
double boundary_ratio(const MaskSet& masks, std::int64_t i, std::int64_t j);

/// F: d x H x W (or 1 x d x H x W). h_c = sum(F * M_c) / (sum(M_c) + eps); K x d.
Tensor masked_average(const Tensor& features, const MaskSet& masks, double eps);

/// Row c is H[c] when class c is present, else G[c].
Tensor substitute_global(const Tensor& node_features, const MaskSet& masks,
                         const Tensor& global_embeddings);

/// S(:, x, y) = sum over c of h_c * M_c(x, y); d x H x W. Per-pixel sums are
/// accumulated in ascending value order, so S does not depend on class order.
Tensor project_spatial(const Tensor& node_features, const MaskSet& masks);

struct EdgeMlpParams {
    Tensor w1, b1, w2, b2;
};

struct SimpleLayerParams {
    Tensor weight;  // d x d
    Tensor bias;    // d
};

struct AttentionLayerParams {
    Tensor weight;  // d x d, shared by the logits and the messages
    Tensor q;       // 2d
    Tensor ln1_gamma, ln1_beta;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Tensor ln2_gamma, ln2_beta;
};

struct TissueGraph {
    std::int64_t num_nodes = 0;
    Tensor node_features;  // H' (after global substitution), K x d
    std::vector<std::pair<std::int64_t, std::int64_t>> edges;
    Tensor edge_features;  // E x d, row e belongs to edges[e]; undefined when E = 0
    std::vector<double> boundary_ij;  // filled when boundary-aware edges are on
    std::vector<double> boundary_ji;
    Tensor edge_weights;  // E, when edge weights are on

    std::vector<std::int64_t> sources() const;
    std::vector<std::int64_t> targets() const;
};

/// e_ij = W2 relu(W1 [h_i || h_j (|| b_ij || b_ji)] + b1) + b2 for every edge.
Tensor edge_mlp(const Tensor& node_features,
                const std::vector<std::pair<std::int64_t, std::int64_t>>& edges,
                const std::vector<double>* boundary_ij, const std::vector<double>* boundary_ji,
                const EdgeMlpParams& params);

/// w_ij = sigmoid(e_ij^T W e_ij) per row of `edge_features`.
Tensor edge_weight(const Tensor& edge_features, const Tensor& weight);

/// For every edge (j, i) carrying a message into i:
/// a = leaky_relu(q^T [W h_i || W h_j]), normalized over the in-edges of i.
Tensor attention_coeffs(const Tensor& node_features,
                        const std::vector<std::pair<std::int64_t, std::int64_t>>& edges,
                        const Tensor& q, const Tensor& weight, double slope);

/// h_i <- relu(sum over in-edges (j, i) of W h_j * e_ji + b).
Tensor gnn_layer_simple(const Tensor& h, const TissueGraph& graph, const SimpleLayerParams& p);

/// h~ = LN(h + sum alpha_ij (W h_j * e_ji) [* w_ji]); h' = LN(h~ + FFN(h~)).
Tensor gnn_layer_attention(const Tensor& h, const TissueGraph& graph, const AttentionLayerParams& p,
                           double slope, bool use_edge_weights);

/// Parameter lookups by path; GNN layers count from 1.
EdgeMlpParams edge_mlp_params(ParamStore& store);
SimpleLayerParams simple_layer_params(ParamStore& store, int layer);
AttentionLayerParams attention_layer_params(ParamStore& store, int layer);

Tensor run_gnn(ParamStore& store, const ModelConfig& cfg, const Tensor& h, const TissueGraph& graph);

/// D2' = D2 + BN(conv1x1(S)).
Tensor fuse(ParamStore& store, const Tensor& d2, const Tensor& s, bool training);

void register_trm(ParamStore& store, const ModelConfig& cfg);

struct TrmImage {
    MaskSet masks;
    TissueGraph graph;
    Tensor refined;  // H^(L), K x d
    Tensor spatial;  // S, d x H2 x W2
};

struct TrmOutput {
    Tensor fused;  // D2', same shape as D2
    std::vector<TrmImage> images;
};

/// p: B x K x H2 x W2 probabilities, d2: B x 2w x H2 x W2. One graph per image.
TrmOutput trm_forward(ParamStore& store, const ModelConfig& cfg, const Tensor& p, const Tensor& d2,
                      bool training);

/// Graph document for one image: nodes, edges (ascending (i, j)) and a config echo.
nlohmann::json graph_document(const TrmImage& image, const ModelConfig& cfg);

}  // namespace ntrm
