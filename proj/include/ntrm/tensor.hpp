// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle onto a TensorImpl. Values are fixed once an op
// has produced them; the only in-place mutations are the explicit leaf
// accessors used by optimizers, checkpoint loading and batch-norm buffers.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace ntrm {

enum class DType : std::uint8_t { f64 = 0, f32 = 1 };

std::string dtype_name(DType dtype);
DType parse_dtype(const std::string& name);

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised on non-conformable shapes; the message names every shape involved.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when an op produces NaN/Inf or a gradient check fails.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Buffer = std::variant<std::vector<double>, std::vector<float>>;

struct TensorImpl;

struct GradFn {
    const char* name = "";
    // Scope label active when the op was recorded (see ScopeLabel).
    std::string scope;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    // Reads out.grad and accumulates into the grads of `inputs`.
    std::function<void(const TensorImpl& out)> apply;
};

struct TensorImpl {
    Shape shape;
    DType dtype = DType::f64;
    Buffer data;
    std::optional<Buffer> grad;
    bool requires_grad = false;
    std::shared_ptr<GradFn> grad_fn;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, DType dtype = DType::f64);
    static Tensor full(Shape shape, double value, DType dtype = DType::f64);
    static Tensor from_values(Shape shape, std::span<const double> values,
                              DType dtype = DType::f64);
    static Tensor from_values(Shape shape, std::initializer_list<double> values,
                              DType dtype = DType::f64);
    static Tensor scalar(double value, DType dtype = DType::f64);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    /// Size along `axis`; negative axes count from the end.
    std::int64_t size(int axis) const;
    std::int64_t numel() const { return shape_numel(impl_->shape); }
    DType dtype() const { return impl_->dtype; }

    template <typename T>
    std::span<const T> data() const {
        return std::get<std::vector<T>>(impl_->data);
    }
    /// Mutable view; only legal on leaves (parameters, buffers, constants).
    template <typename T>
    std::span<T> mutable_data() {
        require_leaf("mutable_data");
        return std::get<std::vector<T>>(impl_->data);
    }

    std::vector<double> values() const;
    double item() const;
    double at(std::int64_t flat_index) const;
    /// Overwrites the values of a leaf tensor, converting to its dtype.
    void assign(std::span<const double> values);

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool value = true);
    bool is_leaf() const { return impl_->grad_fn == nullptr; }

    bool has_grad() const { return impl_->grad.has_value(); }
    template <typename T>
    std::span<const T> grad() const {
        return std::get<std::vector<T>>(*impl_->grad);
    }
    std::vector<double> grad_values() const;
    /// Allocates (or resets) the gradient buffer to zeros.
    void zero_grad();
    void clear_grad() { impl_->grad.reset(); }

    /// Runs reverse-mode differentiation from this scalar.
    void backward() const;

    /// Same values, cut from the tape.
    Tensor detach() const;
    Tensor to(DType dtype) const;
    Tensor clone() const;

    TensorImpl& impl() const { return *impl_; }
    const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

private:
    void require_leaf(const char* what) const;

    std::shared_ptr<TensorImpl> impl_;
};

/// Disables tape recording in its scope (evaluation, mask construction).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// Names the model component currently executing, e.g. "encoder.block3.conv1".
/// Numerical errors raised by ops, forward or backward, carry the innermost label.
class ScopeLabel {
public:
    explicit ScopeLabel(std::string label);
    ~ScopeLabel();
    ScopeLabel(const ScopeLabel&) = delete;
    ScopeLabel& operator=(const ScopeLabel&) = delete;

private:
    std::string previous_;
};

const std::string& current_scope();

/// Piecewise ops (relu, leaky_relu, maxpool2d) and hard thresholds log their
/// branch decisions while a tape in `record` mode is alive and reuse the
/// logged decisions, in order, while a tape in `replay` mode is alive.
/// Replaying pins the forward pass to the linear piece of the recorded input.
class BranchTape {
public:
    enum class Mode { record, replay };

    BranchTape(Mode mode, std::vector<std::uint64_t>& log);
    ~BranchTape();
    BranchTape(const BranchTape&) = delete;
    BranchTape& operator=(const BranchTape&) = delete;

    /// Logs `actual` (record) or returns the next logged decision (replay).
    std::uint64_t decide(std::uint64_t actual);
    /// Decisions consumed so far in replay mode.
    std::size_t consumed() const { return cursor_; }

private:
    Mode mode_;
    std::vector<std::uint64_t>* log_;
    std::size_t cursor_ = 0;
    BranchTape* previous_;
};

template <typename F>
decltype(auto) visit_dtype(DType dtype, F&& f) {
    if (dtype == DType::f32) {
        return f(float{});
    }
    return f(double{});
}

namespace detail {

/// True while a BranchTape is alive on this thread.
bool branch_tape_active();
/// Records `actual` and returns it, or returns the next replayed decision.
/// Identity when no tape is alive.
std::uint64_t branch(std::uint64_t actual);

Buffer make_buffer(DType dtype, std::int64_t n);

template <typename T>
std::vector<T>& buf(Buffer& b) {
    return std::get<std::vector<T>>(b);
}
template <typename T>
const std::vector<T>& buf(const Buffer& b) {
    return std::get<std::vector<T>>(b);
}

/// Gradient buffer of `impl`, zero-allocated on first use.
template <typename T>
std::vector<T>& grad_buf(TensorImpl& impl) {
    if (!impl.grad) {
        impl.grad = Buffer(std::vector<T>(static_cast<std::size_t>(shape_numel(impl.shape)), T(0)));
    }
    return std::get<std::vector<T>>(*impl.grad);
}

/// Wraps a freshly computed buffer as an op result. Checks finiteness and,
/// when any input is tracked, records `backward` on the tape.
Tensor make_result(const char* name, Shape shape, DType dtype, Buffer data,
                   const std::vector<Tensor>& inputs,
                   std::function<void(const TensorImpl&)> backward);

void check_same_dtype(const char* op, const Tensor& a, const Tensor& b);

}  // namespace detail

}  // namespace ntrm
