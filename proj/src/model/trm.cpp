// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0

#include "ntrm/trm.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ntrm/ops.hpp"

namespace ntrm {

using detail::buf;
using detail::grad_buf;
using detail::make_result;

std::int64_t MaskSet::area(std::int64_t c) const {
    const auto* m = mask(c);
    std::int64_t n = 0;
    for (std::int64_t i = 0; i < pixels(); ++i) n += m[i];
    return n;
}

MaskSet MaskSet::from_masks(std::int64_t classes, std::int64_t height, std::int64_t width,
                            std::vector<std::uint8_t> masks) {
    if (static_cast<std::int64_t>(masks.size()) != classes * height * width) {
        throw ShapeError("MaskSet: " + std::to_string(masks.size()) + " mask values for " +
                         std::to_string(classes) + " x " + std::to_string(height) + " x " +
                         std::to_string(width));
    }
    MaskSet m;
    m.classes = classes;
    m.height = height;
    m.width = width;
    m.masks = std::move(masks);
    for (auto& v : m.masks) {
        if (v > 1) throw std::invalid_argument("MaskSet: mask values must be 0 or 1");
    }
    m.present.resize(static_cast<std::size_t>(classes));
    for (std::int64_t c = 0; c < classes; ++c) m.present[static_cast<std::size_t>(c)] = m.area(c) > 0;
    return m;
}

namespace {

template <typename T>
std::vector<T> window_max3(const T* src, std::int64_t h, std::int64_t w) {
    std::vector<T> out(static_cast<std::size_t>(h * w));
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            T m = src[y * w + x];
            for (std::int64_t yy = std::max<std::int64_t>(0, y - 1); yy <= std::min(h - 1, y + 1); ++yy) {
                for (std::int64_t xx = std::max<std::int64_t>(0, x - 1); xx <= std::min(w - 1, x + 1); ++xx) {
                    m = std::max(m, src[yy * w + xx]);
                }
            }
            out[static_cast<std::size_t>(y * w + x)] = m;
        }
    }
    return out;
}

Tensor as_matrix(const Tensor& x, const char* op) {
    if (x.rank() == 2) return x;
    if (x.rank() == 3) return reshape(x, {x.size(0), x.size(1) * x.size(2)});
    if (x.rank() == 4 && x.size(0) == 1) return reshape(x, {x.size(1), x.size(2) * x.size(3)});
    throw ShapeError(std::string(op) + ": expected d x H x W features, got " + shape_str(x.shape()));
}

}  // namespace

std::vector<std::uint8_t> dilate(const std::uint8_t* mask, std::int64_t height, std::int64_t width) {
    return window_max3(mask, height, width);
}

MaskSet region_proposal(const Tensor& p, double tau) {
    Shape s = p.shape();
    if (s.size() == 4 && s[0] == 1) s.erase(s.begin());
    if (s.size() != 3) {
        throw ShapeError("region_proposal: expected K x H x W probabilities, got " + shape_str(p.shape()));
    }
    const auto k = s[0], h = s[1], w = s[2];
    const auto v = p.values();
    std::vector<std::uint8_t> masks(static_cast<std::size_t>(k * h * w));
    for (std::int64_t c = 0; c < k; ++c) {
        const auto pooled = window_max3(v.data() + c * h * w, h, w);
        for (std::int64_t i = 0; i < h * w; ++i) {
            masks[static_cast<std::size_t>(c * h * w + i)] = pooled[static_cast<std::size_t>(i)] > tau ? 1 : 0;
        }
    }
    if (detail::branch_tape_active()) {
        for (auto& m : masks) m = static_cast<std::uint8_t>(detail::branch(m));
    }
    return MaskSet::from_masks(k, h, w, std::move(masks));
}

std::vector<std::pair<std::int64_t, std::int64_t>> form_edges(const MaskSet& m) {
    std::vector<std::vector<std::uint8_t>> dil(static_cast<std::size_t>(m.classes));
    for (std::int64_t c = 0; c < m.classes; ++c) {
        if (m.present[static_cast<std::size_t>(c)]) dil[static_cast<std::size_t>(c)] = dilate(m.mask(c), m.height, m.width);
    }
    std::vector<std::pair<std::int64_t, std::int64_t>> edges;
    for (std::int64_t i = 0; i < m.classes; ++i) {
        for (std::int64_t j = i + 1; j < m.classes; ++j) {
            if (!m.present[static_cast<std::size_t>(i)] || !m.present[static_cast<std::size_t>(j)]) continue;
            const auto& a = dil[static_cast<std::size_t>(i)];
            const auto& b = dil[static_cast<std::size_t>(j)];
            bool touch = false;
            for (std::size_t p = 0; p < a.size() && !touch; ++p) touch = a[p] && b[p];
            if (touch) {
                edges.emplace_back(i, j);
                edges.emplace_back(j, i);
            }
        }
    }
    std::sort(edges.begin(), edges.end());
    return edges;
}

double boundary_ratio(const MaskSet& m, std::int64_t i, std::int64_t j) {
    if (!m.present.at(static_cast<std::size_t>(i))) {
        throw std::invalid_argument("boundary_ratio: class " + std::to_string(i) +
                                    " is absent, ratio undefined");
    }
    const auto dj = dilate(m.mask(j), m.height, m.width);
    const auto* mi = m.mask(i);
    std::int64_t hit = 0, total = 0;
    for (std::int64_t p = 0; p < m.pixels(); ++p) {
        hit += mi[p] & dj[static_cast<std::size_t>(p)];
        total += mi[p];
    }
    return static_cast<double>(hit) / static_cast<double>(total);
}

Tensor masked_average(const Tensor& features, const MaskSet& masks, double eps) {
    const Tensor f = as_matrix(features, "masked_average");
    if (f.size(1) != masks.pixels()) {
        throw ShapeError("masked_average: features " + shape_str(features.shape()) + " vs masks " +
                         std::to_string(masks.height) + "x" + std::to_string(masks.width));
    }
    std::vector<double> m(masks.masks.begin(), masks.masks.end());
    std::vector<double> denom(static_cast<std::size_t>(masks.classes));
    for (std::int64_t c = 0; c < masks.classes; ++c) {
        denom[static_cast<std::size_t>(c)] = static_cast<double>(masks.area(c)) + eps;
    }
    const Tensor mt = Tensor::from_values({masks.classes, masks.pixels()}, m, f.dtype());
    const Tensor dt = Tensor::from_values({masks.classes, 1}, denom, f.dtype());
    return div(matmul(mt, transpose(f)), dt);
}

Tensor substitute_global(const Tensor& node_features, const MaskSet& masks,
                         const Tensor& global_embeddings) {
    return select_rows(node_features, global_embeddings, masks.present);
}

Tensor project_spatial(const Tensor& node_features, const MaskSet& masks) {
    if (node_features.rank() != 2 || node_features.size(0) != masks.classes) {
        throw ShapeError("project_spatial: node features " + shape_str(node_features.shape()) +
                         " for " + std::to_string(masks.classes) + " masks");
    }
    const auto k = masks.classes, d = node_features.size(1), n = masks.pixels();
    auto ms = std::make_shared<MaskSet>(masks);
    return visit_dtype(node_features.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& hv = buf<T>(node_features.impl().data);
        std::vector<T> out(static_cast<std::size_t>(d * n), T(0));
        std::vector<std::int64_t> cover;
        std::vector<T> terms;
        for (std::int64_t p = 0; p < n; ++p) {
            cover.clear();
            for (std::int64_t c = 0; c < k; ++c) {
                if (ms->mask(c)[p]) cover.push_back(c);
            }
            if (cover.empty()) continue;
            for (std::int64_t j = 0; j < d; ++j) {
                terms.clear();
                for (auto c : cover) terms.push_back(hv[static_cast<std::size_t>(c * d + j)]);
                std::sort(terms.begin(), terms.end());
                T acc = T(0);
                for (T t : terms) acc += t;
                out[static_cast<std::size_t>(j * n + p)] = acc;
            }
        }
        auto hi = node_features.impl_ptr();
        return make_result("project_spatial", {d, masks.height, masks.width}, node_features.dtype(),
                           Buffer(std::move(out)), {node_features}, [hi, ms, k, d, n](const TensorImpl& o) {
                               const auto& g = buf<T>(*o.grad);
                               auto& gh = grad_buf<T>(*hi);
                               for (std::int64_t c = 0; c < k; ++c) {
                                   const auto* m = ms->mask(c);
                                   for (std::int64_t j = 0; j < d; ++j) {
                                       T acc = T(0);
                                       for (std::int64_t p = 0; p < n; ++p) {
                                           if (m[p]) acc += g[static_cast<std::size_t>(j * n + p)];
                                       }
                                       gh[static_cast<std::size_t>(c * d + j)] += acc;
                                   }
                               }
                           });
    });
}

std::vector<std::int64_t> TissueGraph::sources() const {
    std::vector<std::int64_t> s;
    for (const auto& e : edges) s.push_back(e.first);
    return s;
}

std::vector<std::int64_t> TissueGraph::targets() const {
    std::vector<std::int64_t> t;
    for (const auto& e : edges) t.push_back(e.second);
    return t;
}

Tensor edge_mlp(const Tensor& node_features,
                const std::vector<std::pair<std::int64_t, std::int64_t>>& edges,
                const std::vector<double>* boundary_ij, const std::vector<double>* boundary_ji,
                const EdgeMlpParams& params) {
    if (edges.empty()) {
        throw std::invalid_argument("edge_mlp: empty edge list");
    }
    std::vector<std::int64_t> src, dst;
    for (const auto& [i, j] : edges) {
        src.push_back(i);
        dst.push_back(j);
    }
    std::vector<Tensor> parts{take_rows(node_features, src), take_rows(node_features, dst)};
    if (boundary_ij && boundary_ji) {
        const auto e = static_cast<std::int64_t>(edges.size());
        std::vector<double> b(static_cast<std::size_t>(2 * e));
        for (std::int64_t r = 0; r < e; ++r) {
            b[static_cast<std::size_t>(2 * r)] = boundary_ij->at(static_cast<std::size_t>(r));
            b[static_cast<std::size_t>(2 * r + 1)] = boundary_ji->at(static_cast<std::size_t>(r));
        }
        parts.push_back(Tensor::from_values({e, 2}, b, node_features.dtype()));
    }
    const Tensor in = concat(parts, 1);
    return linear(relu(linear(in, params.w1, params.b1)), params.w2, params.b2);
}

Tensor edge_weight(const Tensor& edge_features, const Tensor& weight) {
    return sigmoid(sum_axis(mul(matmul(edge_features, weight), edge_features), 1));
}

Tensor attention_coeffs(const Tensor& node_features,
                        const std::vector<std::pair<std::int64_t, std::int64_t>>& edges,
                        const Tensor& q, const Tensor& weight, double slope) {
    const auto k = node_features.size(0), d = node_features.size(1);
    if (q.numel() != 2 * d) {
        throw ShapeError("attention_coeffs: q " + shape_str(q.shape()) + " for node dim " +
                         std::to_string(d));
    }
    std::vector<std::int64_t> src, dst;
    for (const auto& [j, i] : edges) {
        src.push_back(j);
        dst.push_back(i);
    }
    const Tensor wh = linear(node_features, weight);
    const Tensor self_score = reshape(matmul(wh, reshape(slice(q, 0, 0, d), {d, 1})), {k});
    const Tensor nb_score = reshape(matmul(wh, reshape(slice(q, 0, d, d), {d, 1})), {k});
    const Tensor logits = leaky_relu(add(take_rows(self_score, dst), take_rows(nb_score, src)), slope);
    return segment_softmax(logits, dst, k);
}

Tensor gnn_layer_simple(const Tensor& h, const TissueGraph& graph, const SimpleLayerParams& p) {
    const auto k = h.size(0), d = h.size(1);
    Tensor agg = Tensor::zeros({k, d}, h.dtype());
    if (!graph.edges.empty()) {
        const auto src = graph.sources();
        const auto dst = graph.targets();
        const Tensor msg = mul(take_rows(linear(h, p.weight), src), graph.edge_features);
        agg = scatter_add_rows(msg, dst, k);
    }
    return relu(add(agg, p.bias));
}

Tensor gnn_layer_attention(const Tensor& h, const TissueGraph& graph, const AttentionLayerParams& p,
                           double slope, bool use_edge_weights) {
    const auto k = h.size(0);
    Tensor mixed = h;
    if (!graph.edges.empty()) {
        const auto src = graph.sources();
        const auto dst = graph.targets();
        const auto e = static_cast<std::int64_t>(graph.edges.size());
        const Tensor alpha = attention_coeffs(h, graph.edges, p.q, p.weight, slope);
        Tensor msg = mul(take_rows(linear(h, p.weight), src), graph.edge_features);
        msg = mul(msg, reshape(alpha, {e, 1}));
        if (use_edge_weights) {
            msg = mul(msg, reshape(graph.edge_weights, {e, 1}));
        }
        mixed = add(h, scatter_add_rows(msg, dst, k));
    }
    const Tensor ht = layer_norm(mixed, p.ln1_gamma, p.ln1_beta);
    const Tensor ffn = linear(relu(linear(ht, p.ffn_w1, p.ffn_b1)), p.ffn_w2, p.ffn_b2);
    return layer_norm(add(ht, ffn), p.ln2_gamma, p.ln2_beta);
}

namespace {

std::string layer_path(int layer) { return "trm.gnn.layer" + std::to_string(layer); }

}  // namespace

EdgeMlpParams edge_mlp_params(ParamStore& store) {
    return {store.get("trm.edge_mlp.fc1.weight"), store.get("trm.edge_mlp.fc1.bias"),
            store.get("trm.edge_mlp.fc2.weight"), store.get("trm.edge_mlp.fc2.bias")};
}

SimpleLayerParams simple_layer_params(ParamStore& store, int layer) {
    const auto p = layer_path(layer);
    return {store.get(p + ".message.weight"), store.get(p + ".message.bias")};
}

AttentionLayerParams attention_layer_params(ParamStore& store, int layer) {
    const auto p = layer_path(layer);
    return {store.get(p + ".message.weight"), store.get(p + ".attention.q"),
            store.get(p + ".ln1.weight"),     store.get(p + ".ln1.bias"),
            store.get(p + ".ffn.fc1.weight"), store.get(p + ".ffn.fc1.bias"),
            store.get(p + ".ffn.fc2.weight"), store.get(p + ".ffn.fc2.bias"),
            store.get(p + ".ln2.weight"),     store.get(p + ".ln2.bias")};
}

Tensor run_gnn(ParamStore& store, const ModelConfig& cfg, const Tensor& h, const TissueGraph& graph) {
    Tensor x = h;
    for (int l = 1; l <= cfg.gnn_layers; ++l) {
        ScopeLabel scope(layer_path(l));
        if (cfg.gnn_variant == GnnVariant::simple) {
            x = gnn_layer_simple(x, graph, simple_layer_params(store, l));
        } else {
            x = gnn_layer_attention(x, graph, attention_layer_params(store, l), cfg.leaky_slope,
                                    cfg.use_edge_weights);
        }
    }
    return x;
}

Tensor fuse(ParamStore& store, const Tensor& d2, const Tensor& s, bool training) {
    const Tensor proj = apply_batch_norm(store, "trm.fuse.bn", apply_conv(store, "trm.fuse.conv", s, 1, 0),
                                         training);
    if (proj.shape() != d2.shape()) {
        throw ShapeError("fuse: projected " + shape_str(proj.shape()) + " vs D2 " + shape_str(d2.shape()));
    }
    ScopeLabel scope("trm.fuse");
    return add(d2, proj);
}

void register_trm(ParamStore& store, const ModelConfig& cfg) {
    const std::int64_t d = cfg.node_dim;
    const std::int64_t c2 = cfg.decoder_channels()[1];
    add_conv(store, "trm.psi.conv", c2, d, 3, false);
    store.add_batch_norm("trm.psi.bn", d);
    store.add("trm.global_embeddings", {cfg.num_classes, d}, InitScheme::global_normal);
    add_linear(store, "trm.edge_mlp.fc1", 2 * d + (cfg.boundary_aware_edges ? 2 : 0), d);
    add_linear(store, "trm.edge_mlp.fc2", d, d);
    if (cfg.use_edge_weights) {
        store.add("trm.edge_weight", {d, d}, InitScheme::xavier_uniform, d, d);
    }
    for (int l = 1; l <= cfg.gnn_layers; ++l) {
        const auto p = layer_path(l);
        if (cfg.gnn_variant == GnnVariant::simple) {
            add_linear(store, p + ".message", d, d, true);
        } else {
            add_linear(store, p + ".message", d, d, false);
            store.add(p + ".attention.q", {2 * d}, InitScheme::xavier_uniform, 2 * d, 1);
            add_layer_norm(store, p + ".ln1", d);
            add_linear(store, p + ".ffn.fc1", d, cfg.ffn_width());
            add_linear(store, p + ".ffn.fc2", cfg.ffn_width(), d);
            add_layer_norm(store, p + ".ln2", d);
        }
    }
    add_conv(store, "trm.fuse.conv", d, c2, 1, false);
    store.add_batch_norm("trm.fuse.bn", c2);
}

TrmOutput trm_forward(ParamStore& store, const ModelConfig& cfg, const Tensor& p, const Tensor& d2,
                      bool training) {
    if (p.rank() != 4 || d2.rank() != 4 || p.size(0) != d2.size(0) || p.size(2) != d2.size(2) ||
        p.size(3) != d2.size(3) || p.size(1) != cfg.num_classes) {
        throw ShapeError("trm_forward: probabilities " + shape_str(p.shape()) + " vs D2 " +
                         shape_str(d2.shape()));
    }
    const auto batch = p.size(0), h2 = p.size(2), w2 = p.size(3);
    const std::int64_t d = cfg.node_dim;

    Tensor features;
    {
        const Tensor f = apply_conv(store, "trm.psi.conv", d2, 1, 1);
        features = apply_batch_norm(store, "trm.psi.bn", f, training);
        ScopeLabel scope("trm.psi");
        features = relu(features);
    }

    TrmOutput out;
    std::vector<Tensor> spatial;
    const Tensor& g = store.get("trm.global_embeddings");
    for (std::int64_t b = 0; b < batch; ++b) {
        TrmImage img;
        {
            NoGradGuard ng;
            img.masks = region_proposal(slice(p, 0, b, 1), cfg.tau);
        }
        ScopeLabel scope("trm.graph");
        const Tensor fb = reshape(slice(features, 0, b, 1), {d, h2 * w2});
        TissueGraph& graph = img.graph;
        graph.num_nodes = cfg.num_classes;
        graph.node_features = substitute_global(masked_average(fb, img.masks, cfg.pool_eps), img.masks, g);
        graph.edges = form_edges(img.masks);
        if (!graph.edges.empty()) {
            if (cfg.boundary_aware_edges) {
                for (const auto& [i, j] : graph.edges) {
                    graph.boundary_ij.push_back(boundary_ratio(img.masks, i, j));
                    graph.boundary_ji.push_back(boundary_ratio(img.masks, j, i));
                }
            }
            ScopeLabel mlp_scope("trm.edge_mlp");
            graph.edge_features =
                edge_mlp(graph.node_features, graph.edges,
                         cfg.boundary_aware_edges ? &graph.boundary_ij : nullptr,
                         cfg.boundary_aware_edges ? &graph.boundary_ji : nullptr, edge_mlp_params(store));
            if (cfg.use_edge_weights) {
                graph.edge_weights = edge_weight(graph.edge_features, store.get("trm.edge_weight"));
            }
        }
        img.refined = run_gnn(store, cfg, graph.node_features, graph);
        img.spatial = project_spatial(img.refined, img.masks);
        spatial.push_back(reshape(img.spatial, {1, d, h2, w2}));
        out.images.push_back(std::move(img));
    }
    const Tensor s = batch == 1 ? spatial.front() : concat(spatial, 0);
    out.fused = fuse(store, d2, s, training);
    return out;
}

nlohmann::json graph_document(const TrmImage& image, const ModelConfig& cfg) {
    using nlohmann::json;
    json nodes = json::array();
    const auto emb = image.refined.values();
    const auto d = image.refined.size(1);
    for (std::int64_t c = 0; c < image.masks.classes; ++c) {
        std::vector<double> row(emb.begin() + c * d, emb.begin() + (c + 1) * d);
        nodes.push_back({{"class_id", c},
                         {"class_name", cfg.class_name(static_cast<int>(c))},
                         {"present", static_cast<bool>(image.masks.present[static_cast<std::size_t>(c)])},
                         {"mask_area_px", image.masks.area(c)},
                         {"embedding", row}});
    }
    json edges = json::array();
    const auto& g = image.graph;
    const auto feat = g.edges.empty() ? std::vector<double>{} : g.edge_features.values();
    const auto weights = g.edge_weights.defined() ? g.edge_weights.values() : std::vector<double>{};
    for (std::size_t e = 0; e < g.edges.size(); ++e) {
        double norm = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            const double v = feat[e * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
            norm += v * v;
        }
        json edge{{"i", g.edges[e].first}, {"j", g.edges[e].second}, {"feature_norm", std::sqrt(norm)}};
        if (!g.boundary_ij.empty()) edge["boundary_ratio"] = g.boundary_ij[e];
        if (!weights.empty()) edge["weight"] = weights[e];
        edges.push_back(edge);
    }
    return json{{"nodes", nodes},
                {"edges", edges},
                {"config",
                 {{"tau", cfg.tau},
                  {"gnn_variant", gnn_variant_name(cfg.gnn_variant)},
                  {"gnn_layers", cfg.gnn_layers},
                  {"node_dim", cfg.node_dim},
                  {"use_edge_weights", cfg.use_edge_weights},
                  {"boundary_aware_edges", cfg.boundary_aware_edges}}}};
}

}  // namespace ntrm
