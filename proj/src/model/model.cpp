// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0

#include "ntrm/model.hpp"

#include "ntrm/ops.hpp"

namespace ntrm {

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)), store_(cfg_.dtype) {
    cfg_.validate();
    register_backbone(store_, cfg_);
    register_trm(store_, cfg_);
}

ForwardOutput Model::forward(const Tensor& x, bool training) {
    const Tensor input = x.dtype() == cfg_.dtype ? x : x.to(cfg_.dtype);
    ForwardOutput out;
    const EncoderFeatures enc = encode(store_, cfg_, input, training);
    const Tensor d1 = decode_stage(store_, cfg_, 1, enc.e[4], enc.e[3], training);
    out.d2 = decode_stage(store_, cfg_, 2, d1, enc.e[2], training);
    out.init_logits = initial_head(store_, enc.e[4]);
    {
        NoGradGuard ng;
        out.probs = initial_probs(out.init_logits, out.d2.size(2), out.d2.size(3));
    }
    out.trm = trm_forward(store_, cfg_, out.probs, out.d2, training);
    const Tensor d3 = decode_stage(store_, cfg_, 3, out.trm.fused, enc.e[1], training);
    const Tensor d4 = decode_stage(store_, cfg_, 4, d3, enc.e[0], training);
    const Tensor d5 = decode_stage(store_, cfg_, 5, d4, Tensor{}, training);
    out.final_logits = final_head(store_, d5);
    return out;
}

}  // namespace ntrm
