// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0
//
// Full network: encoder, D1/D2, initial head, tissue relation module,
// D3..D5 and the final head.

#pragma once

#include "ntrm/backbone.hpp"
#include "ntrm/params.hpp"
#include "ntrm/trm.hpp"

namespace ntrm {

struct ForwardOutput {
    Tensor final_logits;  // B x K x H x W
    Tensor init_logits;   // B x K x H/32 x W/32
    Tensor probs;         // B x K x H2 x W2, untracked
    Tensor d2;
    TrmOutput trm;
};

class Model {
public:
    explicit Model(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    /// Training mode uses batch statistics and updates running BN stats.
    ForwardOutput forward(const Tensor& x, bool training);

private:
    ModelConfig cfg_;
    ParamStore store_;
};

}  // namespace ntrm
