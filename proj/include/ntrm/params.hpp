// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0
//
// Named parameter storage. Every learnable tensor and every batch-norm
// running statistic lives under a stable dotted path such as
// "encoder.block3.conv1.weight".

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ntrm/ops.hpp"
#include "ntrm/tensor.hpp"

namespace ntrm {

enum class InitScheme {
    kaiming_normal,  // N(0, 2 / fan_in), convolution weights
    xavier_uniform,  // U(-b, b), b = sqrt(6 / (fan_in + fan_out)), graph weights
    global_normal,   // N(0, 0.02^2), global tissue embeddings
    ones,
    zeros,
};

struct Param {
    Tensor value;
    InitScheme init = InitScheme::zeros;
    std::int64_t fan_in = 1;
    std::int64_t fan_out = 1;
};

class ParamStore {
public:
    explicit ParamStore(DType dtype = DType::f64) : dtype_(dtype) {}

    Tensor& add(const std::string& path, Shape shape, InitScheme init, std::int64_t fan_in = 1,
                std::int64_t fan_out = 1);
    /// Registers `<path>.weight`/`<path>.bias` (gamma/beta) and the running
    /// statistics `<path>.running_mean`/`<path>.running_var`.
    void add_batch_norm(const std::string& path, std::int64_t channels);

    bool contains(const std::string& path) const { return params_.count(path) > 0; }
    const Tensor& get(const std::string& path) const;
    Tensor& get(const std::string& path);
    const Param& param(const std::string& path) const;
    BatchNormStats& bn_stats(const std::string& path);

    /// Parameter paths in registration order.
    const std::vector<std::string>& paths() const { return order_; }
    /// Running-statistic buffers, keyed by their full path, sorted.
    std::map<std::string, Tensor> buffers() const;
    void set_buffer(const std::string& path, const Tensor& value);

    DType dtype() const { return dtype_; }
    std::int64_t total_size() const;
    void zero_grad();

    /// Draws every parameter from its scheme with one seeded generator, in
    /// registration order, and resets running statistics to mean 0, var 1.
    void initialize(std::uint64_t seed);

private:
    DType dtype_;
    std::vector<std::string> order_;
    std::map<std::string, Param> params_;
    std::vector<std::string> bn_order_;
    std::map<std::string, BatchNormStats> bn_;
};

/// Conv weight (out x in x k x k) registered with Kaiming fan-in init.
void add_conv(ParamStore& store, const std::string& path, std::int64_t in, std::int64_t out,
              int kernel, bool bias);
/// Linear weight (out x in) with Xavier uniform init, bias zero.
void add_linear(ParamStore& store, const std::string& path, std::int64_t in, std::int64_t out,
                bool bias = true);
void add_layer_norm(ParamStore& store, const std::string& path, std::int64_t dim);

Tensor apply_conv(ParamStore& store, const std::string& path, const Tensor& x, int stride,
                  int pad);
Tensor apply_batch_norm(ParamStore& store, const std::string& path, const Tensor& x,
                        bool training);
Tensor apply_linear(ParamStore& store, const std::string& path, const Tensor& x);
Tensor apply_layer_norm(ParamStore& store, const std::string& path, const Tensor& x);

}  // namespace ntrm
