// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0

#include "ntrm/params.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace ntrm {

namespace {

std::out_of_range missing(const std::string& path) {
    return std::out_of_range("no parameter registered at '" + path + "'");
}

}  // namespace

Tensor& ParamStore::add(const std::string& path, Shape shape, InitScheme init,
                        std::int64_t fan_in, std::int64_t fan_out) {
    if (params_.count(path)) {
        throw std::logic_error("parameter '" + path + "' registered twice");
    }
    Param p;
    p.value = Tensor::zeros(std::move(shape), dtype_);
    p.value.set_requires_grad(true);
    p.init = init;
    p.fan_in = fan_in;
    p.fan_out = fan_out;
    order_.push_back(path);
    return params_.emplace(path, std::move(p)).first->second.value;
}

void ParamStore::add_batch_norm(const std::string& path, std::int64_t channels) {
    add(path + ".weight", {channels}, InitScheme::ones);
    add(path + ".bias", {channels}, InitScheme::zeros);
    bn_order_.push_back(path);
    bn_[path] = BatchNormStats{Tensor::zeros({channels}, dtype_),
                               Tensor::full({channels}, 1.0, dtype_)};
}

const Tensor& ParamStore::get(const std::string& path) const { return param(path).value; }

Tensor& ParamStore::get(const std::string& path) {
    auto it = params_.find(path);
    if (it == params_.end()) {
        throw missing(path);
    }
    return it->second.value;
}

const Param& ParamStore::param(const std::string& path) const {
    auto it = params_.find(path);
    if (it == params_.end()) {
        throw missing(path);
    }
    return it->second;
}

BatchNormStats& ParamStore::bn_stats(const std::string& path) {
    auto it = bn_.find(path);
    if (it == bn_.end()) {
        throw missing(path + ".running_mean");
    }
    return it->second;
}

std::map<std::string, Tensor> ParamStore::buffers() const {
    std::map<std::string, Tensor> out;
    for (const auto& [path, st] : bn_) {
        out[path + ".running_mean"] = st.running_mean;
        out[path + ".running_var"] = st.running_var;
    }
    return out;
}

void ParamStore::set_buffer(const std::string& path, const Tensor& value) {
    const auto dot = path.rfind('.');
    const std::string base = dot == std::string::npos ? path : path.substr(0, dot);
    const std::string leafname = dot == std::string::npos ? "" : path.substr(dot + 1);
    BatchNormStats& st = bn_stats(base);
    Tensor& slot = leafname == "running_mean" ? st.running_mean : st.running_var;
    if (leafname != "running_mean" && leafname != "running_var") {
        throw missing(path);
    }
    if (value.shape() != slot.shape()) {
        throw ShapeError("buffer '" + path + "' expects shape " + shape_str(slot.shape()) +
                         ", got " + shape_str(value.shape()));
    }
    slot = value.to(dtype_);
}

std::int64_t ParamStore::total_size() const {
    std::int64_t n = 0;
    for (const auto& [path, p] : params_) {
        n += p.value.numel();
    }
    return n;
}

void ParamStore::zero_grad() {
    for (auto& [path, p] : params_) {
        p.value.zero_grad();
    }
}

void ParamStore::initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (const auto& path : order_) {
        Param& p = params_.at(path);
        std::vector<double> v(static_cast<std::size_t>(p.value.numel()), 0.0);
        switch (p.init) {
            case InitScheme::kaiming_normal: {
                std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(p.fan_in)));
                for (auto& x : v) x = dist(rng);
                break;
            }
            case InitScheme::xavier_uniform: {
                const double b = std::sqrt(6.0 / static_cast<double>(p.fan_in + p.fan_out));
                std::uniform_real_distribution<double> dist(-b, b);
                for (auto& x : v) x = dist(rng);
                break;
            }
            case InitScheme::global_normal: {
                std::normal_distribution<double> dist(0.0, 0.02);
                for (auto& x : v) x = dist(rng);
                break;
            }
            case InitScheme::ones:
                std::fill(v.begin(), v.end(), 1.0);
                break;
            case InitScheme::zeros:
                break;
        }
        p.value.assign(v);
        p.value.clear_grad();
    }
    for (auto& [path, st] : bn_) {
        const auto c = st.running_mean.numel();
        st.running_mean = Tensor::zeros({c}, dtype_);
        st.running_var = Tensor::full({c}, 1.0, dtype_);
    }
}

void add_conv(ParamStore& store, const std::string& path, std::int64_t in, std::int64_t out,
              int kernel, bool bias) {
    const std::int64_t fan_in = in * kernel * kernel;
    store.add(path + ".weight", {out, in, kernel, kernel}, InitScheme::kaiming_normal, fan_in,
              out * kernel * kernel);
    if (bias) {
        store.add(path + ".bias", {out}, InitScheme::zeros);
    }
}

void add_linear(ParamStore& store, const std::string& path, std::int64_t in, std::int64_t out,
                bool bias) {
    store.add(path + ".weight", {out, in}, InitScheme::xavier_uniform, in, out);
    if (bias) {
        store.add(path + ".bias", {out}, InitScheme::zeros);
    }
}

void add_layer_norm(ParamStore& store, const std::string& path, std::int64_t dim) {
    store.add(path + ".weight", {dim}, InitScheme::ones);
    store.add(path + ".bias", {dim}, InitScheme::zeros);
}

Tensor apply_conv(ParamStore& store, const std::string& path, const Tensor& x, int stride,
                  int pad) {
    ScopeLabel scope(path);
    const Tensor& w = store.get(path + ".weight");
    const std::string bias_path = path + ".bias";
    return conv2d(x, w, store.contains(bias_path) ? store.get(bias_path) : Tensor{}, stride, pad);
}

Tensor apply_batch_norm(ParamStore& store, const std::string& path, const Tensor& x,
                        bool training) {
    ScopeLabel scope(path);
    return batch_norm2d(x, store.get(path + ".weight"), store.get(path + ".bias"),
                        store.bn_stats(path), training);
}

Tensor apply_linear(ParamStore& store, const std::string& path, const Tensor& x) {
    ScopeLabel scope(path);
    const std::string bias_path = path + ".bias";
    return linear(x, store.get(path + ".weight"),
                  store.contains(bias_path) ? store.get(bias_path) : Tensor{});
}

Tensor apply_layer_norm(ParamStore& store, const std::string& path, const Tensor& x) {
    ScopeLabel scope(path);
    return layer_norm(x, store.get(path + ".weight"), store.get(path + ".bias"));
}

}  // namespace ntrm
