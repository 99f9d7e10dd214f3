// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0

#include "ntrm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace ntrm {

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::string g_scope;
thread_local BranchTape* g_tape = nullptr;

std::string scope_suffix(const std::string& scope) {
    return scope.empty() ? std::string() : " in " + scope;
}

template <typename V>
std::int64_t first_non_finite(const V& v) {
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) {
            return static_cast<std::int64_t>(i);
        }
    }
    return -1;
}

}  // namespace

std::string dtype_name(DType dtype) {
    return dtype == DType::f32 ? "f32" : "f64";
}

DType parse_dtype(const std::string& name) {
    if (name == "f64") {
        return DType::f64;
    }
    if (name == "f32") {
        return DType::f32;
    }
    throw std::invalid_argument("unknown dtype '" + name + "' (expected f64 or f32)");
}

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) {
            os << ',';
        }
        os << shape[i];
    }
    os << ']';
    return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

ScopeLabel::ScopeLabel(std::string label) : previous_(std::move(label)) { std::swap(previous_, g_scope); }
ScopeLabel::~ScopeLabel() { g_scope = std::move(previous_); }

const std::string& current_scope() { return g_scope; }

BranchTape::BranchTape(Mode mode, std::vector<std::uint64_t>& log) : mode_(mode), log_(&log), previous_(g_tape) {
    if (mode_ == Mode::record) log_->clear();
    g_tape = this;
}
BranchTape::~BranchTape() { g_tape = previous_; }

std::uint64_t BranchTape::decide(std::uint64_t actual) {
    if (mode_ == Mode::record) {
        log_->push_back(actual);
        return actual;
    }
    if (cursor_ >= log_->size()) {
        throw std::logic_error("branch replay ran past the recorded " + std::to_string(log_->size()) + " decisions");
    }
    return (*log_)[cursor_++];
}

namespace detail {
bool branch_tape_active() { return g_tape != nullptr; }
std::uint64_t branch(std::uint64_t actual) { return g_tape ? g_tape->decide(actual) : actual; }
}  // namespace detail

namespace detail {

Buffer make_buffer(DType dtype, std::int64_t n) {
    if (dtype == DType::f32) {
        return Buffer(std::vector<float>(static_cast<std::size_t>(n), 0.0f));
    }
    return Buffer(std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

Tensor make_result(const char* name, Shape shape, DType dtype, Buffer data,
                   const std::vector<Tensor>& inputs,
                   std::function<void(const TensorImpl&)> backward) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->dtype = dtype;
    impl->data = std::move(data);

    const auto bad = std::visit([](const auto& v) { return first_non_finite(v); }, impl->data);
    if (bad >= 0) {
        std::ostringstream os;
        os << name << " produced a non-finite value at flat index " << bad << " (output shape "
           << shape_str(impl->shape) << ")" << scope_suffix(g_scope);
        throw NumericalError(os.str());
    }

    if (grad_enabled() && backward) {
        bool tracked = false;
        for (const auto& in : inputs) {
            tracked = tracked || (in.defined() && in.requires_grad());
        }
        if (tracked) {
            auto fn = std::make_shared<GradFn>();
            fn->name = name;
            fn->scope = g_scope;
            for (const auto& in : inputs) {
                if (in.defined()) {
                    fn->inputs.push_back(in.impl_ptr());
                }
            }
            fn->apply = std::move(backward);
            impl->grad_fn = std::move(fn);
            impl->requires_grad = true;
        }
    }
    return Tensor(std::move(impl));
}

void check_same_dtype(const char* op, const Tensor& a, const Tensor& b) {
    if (a.dtype() != b.dtype()) {
        throw std::invalid_argument(std::string(op) + ": dtype mismatch (" +
                                    dtype_name(a.dtype()) + " vs " + dtype_name(b.dtype()) + ")");
    }
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape, DType dtype) {
    auto impl = std::make_shared<TensorImpl>();
    impl->data = detail::make_buffer(dtype, shape_numel(shape));
    impl->shape = std::move(shape);
    impl->dtype = dtype;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
    Tensor t = zeros(std::move(shape), dtype);
    std::visit(
        [&](auto& v) {
            using T = typename std::decay_t<decltype(v)>::value_type;
            std::fill(v.begin(), v.end(), static_cast<T>(value));
        },
        t.impl_->data);
    return t;
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, DType dtype) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("from_values: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
    }
    Tensor t = zeros(std::move(shape), dtype);
    t.assign(values);
    return t;
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<double> values, DType dtype) {
    return from_values(std::move(shape), std::span<const double>(values.begin(), values.size()),
                       dtype);
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

std::int64_t Tensor::size(int axis) const {
    const int r = rank();
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape()));
    }
    return impl_->shape[static_cast<std::size_t>(a)];
}

std::vector<double> Tensor::values() const {
    return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
                      impl_->data);
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return at(0);
}

double Tensor::at(std::int64_t flat_index) const {
    return std::visit([&](const auto& v) { return static_cast<double>(v.at(static_cast<std::size_t>(flat_index))); },
                      impl_->data);
}

void Tensor::assign(std::span<const double> values) {
    require_leaf("assign");
    if (static_cast<std::int64_t>(values.size()) != numel()) {
        throw ShapeError("assign: " + std::to_string(values.size()) + " values into shape " +
                         shape_str(shape()));
    }
    std::visit(
        [&](auto& v) {
            using T = typename std::decay_t<decltype(v)>::value_type;
            for (std::size_t i = 0; i < v.size(); ++i) {
                v[i] = static_cast<T>(values[i]);
            }
        },
        impl_->data);
}

Tensor& Tensor::set_requires_grad(bool value) {
    require_leaf("set_requires_grad");
    impl_->requires_grad = value;
    return *this;
}

std::vector<double> Tensor::grad_values() const {
    if (!impl_->grad) {
        return std::vector<double>(static_cast<std::size_t>(numel()), 0.0);
    }
    return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
                      *impl_->grad);
}

void Tensor::zero_grad() { impl_->grad = detail::make_buffer(dtype(), numel()); }

void Tensor::require_leaf(const char* what) const {
    if (impl_->grad_fn) {
        throw std::logic_error(std::string(what) + " called on a non-leaf tensor");
    }
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->dtype = impl_->dtype;
    impl->data = impl_->data;
    return Tensor(std::move(impl));
}

Tensor Tensor::clone() const { return detach(); }

Tensor Tensor::to(DType target) const {
    if (target == dtype()) {
        return detach();
    }
    Tensor out = zeros(shape(), target);
    out.assign(values());
    return out;
}

void Tensor::backward() const {
    if (numel() != 1) {
        throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(shape()));
    }
    if (!requires_grad()) {
        throw std::logic_error("backward() on a tensor that does not require grad");
    }

    // Iterative post-order DFS; inputs are visited in recording order so the
    // replay order is a pure function of the recorded graph.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    visited.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        const auto* fn = node->grad_fn.get();
        if (fn && next < fn->inputs.size()) {
            TensorImpl* child = fn->inputs[next++].get();
            if (child->requires_grad && !visited.count(child)) {
                visited.insert(child);
                stack.emplace_back(child, 0);
            }
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }

    for (TensorImpl* node : order) {
        if (node->grad_fn) {
            node->grad = detail::make_buffer(node->dtype, shape_numel(node->shape));
        }
    }
    visit_dtype(dtype(), [&](auto tag) {
        using T = decltype(tag);
        if (impl_->grad_fn) {
            detail::buf<T>(*impl_->grad)[0] = T(1);
        } else {
            detail::grad_buf<T>(*impl_)[0] += T(1);
        }
    });

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (!node->grad_fn) {
            continue;
        }
        const GradFn& fn = *node->grad_fn;
        fn.apply(*node);
        for (const auto& in : fn.inputs) {
            if (!in->grad) {
                continue;
            }
            const auto bad = std::visit([](const auto& v) { return first_non_finite(v); }, *in->grad);
            if (bad >= 0) {
                throw NumericalError(std::string("backward of ") + fn.name +
                                     " produced a non-finite gradient at flat index " +
                                     std::to_string(bad) + scope_suffix(fn.scope));
            }
        }
    }
}

}  // namespace ntrm
