// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gemm.hpp"
#include "ntrm/ops.hpp"

namespace ntrm {

using detail::buf;
using detail::grad_buf;
using detail::make_buffer;
using detail::make_result;

namespace {

int normalize_axis(int axis, int rank, const char* op) {
    const int a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
    }
    return a;
}

// Offsets of every output element into each (broadcast) operand.
struct Broadcast {
    Shape out;
    std::vector<std::int64_t> a_off;
    std::vector<std::int64_t> b_off;
    bool same = false;
};

Broadcast broadcast(const char* op, const Shape& a, const Shape& b) {
    Broadcast bc;
    if (a == b) {
        bc.out = a;
        bc.same = true;
        return bc;
    }
    const std::size_t r = std::max(a.size(), b.size());
    Shape pa(r, 1), pb(r, 1);
    std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
    bc.out.resize(r);
    for (std::size_t i = 0; i < r; ++i) {
        if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                             shape_str(b) + " are not broadcast-compatible");
        }
        bc.out[i] = std::max(pa[i], pb[i]);
    }
    std::vector<std::int64_t> sa(r, 0), sb(r, 0);
    std::int64_t acc_a = 1, acc_b = 1;
    for (std::size_t i = r; i-- > 0;) {
        sa[i] = pa[i] == 1 ? 0 : acc_a;
        sb[i] = pb[i] == 1 ? 0 : acc_b;
        acc_a *= pa[i];
        acc_b *= pb[i];
    }
    const std::int64_t n = shape_numel(bc.out);
    bc.a_off.resize(static_cast<std::size_t>(n));
    bc.b_off.resize(static_cast<std::size_t>(n));
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t k = 0; k < n; ++k) {
        bc.a_off[static_cast<std::size_t>(k)] = oa;
        bc.b_off[static_cast<std::size_t>(k)] = ob;
        for (std::size_t d = r; d-- > 0;) {
            if (++idx[d] < bc.out[d]) {
                oa += sa[d];
                ob += sb[d];
                break;
            }
            oa -= sa[d] * (idx[d] - 1);
            ob -= sb[d] * (idx[d] - 1);
            idx[d] = 0;
        }
    }
    return bc;
}

enum class BinOp { add, sub, mul, div };

Tensor binary(const char* name, BinOp op, const Tensor& a, const Tensor& b) {
    detail::check_same_dtype(name, a, b);
    auto bc = std::make_shared<Broadcast>(broadcast(name, a.shape(), b.shape()));
    const std::int64_t n = shape_numel(bc->out);
    return visit_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& av = buf<T>(a.impl().data);
        const auto& bv = buf<T>(b.impl().data);
        std::vector<T> out(static_cast<std::size_t>(n));
        for (std::int64_t k = 0; k < n; ++k) {
            const auto i = static_cast<std::size_t>(k);
            const T x = av[bc->same ? i : static_cast<std::size_t>(bc->a_off[i])];
            const T y = bv[bc->same ? i : static_cast<std::size_t>(bc->b_off[i])];
            switch (op) {
                case BinOp::add: out[i] = x + y; break;
                case BinOp::sub: out[i] = x - y; break;
                case BinOp::mul: out[i] = x * y; break;
                case BinOp::div: out[i] = x / y; break;
            }
        }
        auto ai = a.impl_ptr();
        auto bi = b.impl_ptr();
        return make_result(
            name, bc->out, a.dtype(), Buffer(std::move(out)), {a, b},
            [ai, bi, bc, op, n](const TensorImpl& o) {
                const auto& g = buf<T>(*o.grad);
                const auto& x = buf<T>(ai->data);
                const auto& y = buf<T>(bi->data);
                std::vector<T>* ga = ai->requires_grad ? &grad_buf<T>(*ai) : nullptr;
                std::vector<T>* gb = bi->requires_grad ? &grad_buf<T>(*bi) : nullptr;
                for (std::int64_t k = 0; k < n; ++k) {
                    const auto i = static_cast<std::size_t>(k);
                    const auto ia = bc->same ? i : static_cast<std::size_t>(bc->a_off[i]);
                    const auto ib = bc->same ? i : static_cast<std::size_t>(bc->b_off[i]);
                    switch (op) {
                        case BinOp::add:
                            if (ga) (*ga)[ia] += g[i];
                            if (gb) (*gb)[ib] += g[i];
                            break;
                        case BinOp::sub:
                            if (ga) (*ga)[ia] += g[i];
                            if (gb) (*gb)[ib] -= g[i];
                            break;
                        case BinOp::mul:
                            if (ga) (*ga)[ia] += g[i] * y[ib];
                            if (gb) (*gb)[ib] += g[i] * x[ia];
                            break;
                        case BinOp::div:
                            if (ga) (*ga)[ia] += g[i] / y[ib];
                            if (gb) (*gb)[ib] -= g[i] * x[ia] / (y[ib] * y[ib]);
                            break;
                    }
                }
            });
    });
}

template <typename Fwd, typename Bwd>
Tensor unary(const char* name, const Tensor& x, Fwd fwd, Bwd dfdx) {
    return visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = buf<T>(x.impl().data);
        std::vector<T> out(xv.size());
        for (std::size_t i = 0; i < xv.size(); ++i) {
            out[i] = static_cast<T>(fwd(xv[i]));
        }
        auto xi = x.impl_ptr();
        auto keep = std::make_shared<std::vector<T>>(out);
        return make_result(name, x.shape(), x.dtype(), Buffer(std::move(out)), {x},
                           [xi, keep, dfdx](const TensorImpl& o) {
                               const auto& g = buf<T>(*o.grad);
                               const auto& in = buf<T>(xi->data);
                               auto& gx = grad_buf<T>(*xi);
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   gx[i] += g[i] * static_cast<T>(dfdx(in[i], (*keep)[i]));
                               }
                           });
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinOp::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary("div", BinOp::div, a, b); }

Tensor scale(const Tensor& a, double factor) {
    return unary(
        "scale", a, [factor](auto v) { return v * static_cast<decltype(v)>(factor); },
        [factor](auto, auto) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
    return unary(
        "add_scalar", a, [value](auto v) { return v + static_cast<decltype(v)>(value); },
        [](auto, auto) { return 1.0; });
}

namespace {

// Under a branch tape the sign pattern is logged or replayed, and the op
// becomes x times a constant slope mask.
Tensor taped_piecewise_linear(const Tensor& x, double slope) {
    auto v = x.values();
    for (auto& e : v) e = detail::branch(e > 0 ? 1 : 0) ? 1.0 : slope;
    return mul(x, Tensor::from_values(x.shape(), v, x.dtype()));
}

}  // namespace

Tensor relu(const Tensor& x) {
    if (detail::branch_tape_active()) return taped_piecewise_linear(x, 0.0);
    return unary(
        "relu", x, [](auto v) { return v > 0 ? v : decltype(v)(0); },
        [](auto v, auto) { return v > 0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& x, double slope) {
    if (detail::branch_tape_active()) return taped_piecewise_linear(x, slope);
    return unary(
        "leaky_relu", x,
        [slope](auto v) { return v > 0 ? v : v * static_cast<decltype(v)>(slope); },
        [slope](auto v, auto) { return v > 0 ? 1.0 : slope; });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        "sigmoid", x,
        [](auto v) {
            using T = decltype(v);
            if (v >= 0) {
                return T(1) / (T(1) + std::exp(-v));
            }
            const T e = std::exp(v);
            return e / (T(1) + e);
        },
        [](auto, auto y) { return static_cast<double>(y) * (1.0 - static_cast<double>(y)); });
}

Tensor sum(const Tensor& x) {
    return visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = buf<T>(x.impl().data);
        T acc = T(0);
        for (T v : xv) {
            acc += v;
        }
        auto xi = x.impl_ptr();
        return make_result("sum", Shape{}, x.dtype(), Buffer(std::vector<T>{acc}), {x},
                           [xi](const TensorImpl& o) {
                               const T g = buf<T>(*o.grad)[0];
                               for (auto& v : grad_buf<T>(*xi)) {
                                   v += g;
                               }
                           });
    });
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) {
        throw ShapeError("mean of empty tensor");
    }
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_axis(const Tensor& x, int axis, bool keepdim) {
    const int ax = normalize_axis(axis, x.rank(), "sum_axis");
    const auto& s = x.shape();
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= s[static_cast<std::size_t>(i)];
    for (int i = ax + 1; i < x.rank(); ++i) inner *= s[static_cast<std::size_t>(i)];
    const std::int64_t n = s[static_cast<std::size_t>(ax)];
    Shape out_shape = s;
    if (keepdim) {
        out_shape[static_cast<std::size_t>(ax)] = 1;
    } else {
        out_shape.erase(out_shape.begin() + ax);
    }
    return visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = buf<T>(x.impl().data);
        std::vector<T> out(static_cast<std::size_t>(outer * inner), T(0));
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t k = 0; k < n; ++k) {
                for (std::int64_t i = 0; i < inner; ++i) {
                    out[static_cast<std::size_t>(o * inner + i)] +=
                        xv[static_cast<std::size_t>((o * n + k) * inner + i)];
                }
            }
        }
        auto xi = x.impl_ptr();
        return make_result("sum_axis", out_shape, x.dtype(), Buffer(std::move(out)), {x},
                           [xi, outer, inner, n](const TensorImpl& o) {
                               const auto& g = buf<T>(*o.grad);
                               auto& gx = grad_buf<T>(*xi);
                               for (std::int64_t a = 0; a < outer; ++a) {
                                   for (std::int64_t k = 0; k < n; ++k) {
                                       for (std::int64_t i = 0; i < inner; ++i) {
                                           gx[static_cast<std::size_t>((a * n + k) * inner + i)] +=
                                               g[static_cast<std::size_t>(a * inner + i)];
                                       }
                                   }
                               }
                           });
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
    }
    return visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xi = x.impl_ptr();
        return make_result("reshape", std::move(shape), x.dtype(), x.impl().data, {x},
                           [xi](const TensorImpl& o) {
                               const auto& g = buf<T>(*o.grad);
                               auto& gx = grad_buf<T>(*xi);
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   gx[i] += g[i];
                               }
                           });
    });
}

Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) {
        throw ShapeError("transpose expects a 2-D tensor, got " + shape_str(x.shape()));
    }
    const std::int64_t r = x.size(0), c = x.size(1);
    return visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = buf<T>(x.impl().data);
        std::vector<T> out(xv.size());
        for (std::int64_t i = 0; i < r; ++i) {
            for (std::int64_t j = 0; j < c; ++j) {
                out[static_cast<std::size_t>(j * r + i)] = xv[static_cast<std::size_t>(i * c + j)];
            }
        }
        auto xi = x.impl_ptr();
        return make_result("transpose", Shape{c, r}, x.dtype(), Buffer(std::move(out)), {x},
                           [xi, r, c](const TensorImpl& o) {
                               const auto& g = buf<T>(*o.grad);
                               auto& gx = grad_buf<T>(*xi);
                               for (std::int64_t i = 0; i < r; ++i) {
                                   for (std::int64_t j = 0; j < c; ++j) {
                                       gx[static_cast<std::size_t>(i * c + j)] +=
                                           g[static_cast<std::size_t>(j * r + i)];
                                   }
                               }
                           });
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::check_same_dtype("matmul", a, b);
    if (a.rank() != 2 || b.rank() != 2 || a.size(1) != b.size(0)) {
        throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " are not conformable");
    }
    const std::int64_t m = a.size(0), k = a.size(1), n = b.size(1);
    return visit_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        std::vector<T> out(static_cast<std::size_t>(m * n), T(0));
        detail::gemm_nn(m, n, k, buf<T>(a.impl().data).data(), buf<T>(b.impl().data).data(),
                        out.data());
        auto ai = a.impl_ptr();
        auto bi = b.impl_ptr();
        return make_result("matmul", Shape{m, n}, a.dtype(), Buffer(std::move(out)), {a, b},
                           [ai, bi, m, n, k](const TensorImpl& o) {
                               const auto& g = buf<T>(*o.grad);
                               if (ai->requires_grad) {
                                   detail::gemm_nt(m, k, n, g.data(), buf<T>(bi->data).data(),
                                                   grad_buf<T>(*ai).data());
                               }
                               if (bi->requires_grad) {
                                   detail::gemm_tn(k, n, m, buf<T>(ai->data).data(), g.data(),
                                                   grad_buf<T>(*bi).data());
                               }
                           });
    });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    detail::check_same_dtype("linear", x, weight);
    if (x.rank() != 2 || weight.rank() != 2 || x.size(1) != weight.size(1)) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " and weight " +
                         shape_str(weight.shape()) + " are not conformable");
    }
    if (bias.defined() && (bias.rank() != 1 || bias.size(0) != weight.size(0))) {
        throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
    }
    const std::int64_t n = x.size(0), in = x.size(1), outf = weight.size(0);
    return visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        std::vector<T> out(static_cast<std::size_t>(n * outf), T(0));
        if (bias.defined()) {
            const auto& bv = buf<T>(bias.impl().data);
            for (std::int64_t i = 0; i < n; ++i) {
                std::copy(bv.begin(), bv.end(), out.begin() + i * outf);
            }
        }
        detail::gemm_nt(n, outf, in, buf<T>(x.impl().data).data(),
                        buf<T>(weight.impl().data).data(), out.data());
        auto xi = x.impl_ptr();
        auto wi = weight.impl_ptr();
        auto bi = bias.defined() ? bias.impl_ptr() : nullptr;
        std::vector<Tensor> inputs{x, weight};
        if (bias.defined()) {
            inputs.push_back(bias);
        }
        return make_result("linear", Shape{n, outf}, x.dtype(), Buffer(std::move(out)), inputs,
                           [xi, wi, bi, n, in, outf](const TensorImpl& o) {
                               const auto& g = buf<T>(*o.grad);
                               if (xi->requires_grad) {
                                   detail::gemm_nn(n, in, outf, g.data(), buf<T>(wi->data).data(),
                                                   grad_buf<T>(*xi).data());
                               }
                               if (wi->requires_grad) {
                                   detail::gemm_tn(outf, in, n, g.data(), buf<T>(xi->data).data(),
                                                   grad_buf<T>(*wi).data());
                               }
                               if (bi && bi->requires_grad) {
                                   auto& gb = grad_buf<T>(*bi);
                                   for (std::int64_t i = 0; i < n; ++i) {
                                       for (std::int64_t j = 0; j < outf; ++j) {
                                           gb[static_cast<std::size_t>(j)] +=
                                               g[static_cast<std::size_t>(i * outf + j)];
                                       }
                                   }
                               }
                           });
    });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) {
        throw ShapeError("concat of zero tensors");
    }
    const Tensor& first = parts.front();
    const int ax = normalize_axis(axis, first.rank(), "concat");
    Shape out_shape = first.shape();
    out_shape[static_cast<std::size_t>(ax)] = 0;
    for (const auto& p : parts) {
        detail::check_same_dtype("concat", first, p);
        bool ok = p.rank() == first.rank();
        for (int i = 0; ok && i < first.rank(); ++i) {
            ok = i == ax || p.size(i) == first.size(i);
        }
        if (!ok) {
            std::string msg = "concat along axis " + std::to_string(axis) + ": incompatible shapes";
            for (const auto& q : parts) {
                msg += " " + shape_str(q.shape());
            }
            throw ShapeError(msg);
        }
        out_shape[static_cast<std::size_t>(ax)] += p.size(ax);
    }
    std::int64_t outer = 1;
    for (int i = 0; i < ax; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
    const std::int64_t out_chunk = shape_numel(out_shape) / std::max<std::int64_t>(outer, 1);
    std::vector<std::int64_t> chunks;
    for (const auto& p : parts) {
        chunks.push_back(outer == 0 ? 0 : p.numel() / outer);
    }
    return visit_dtype(first.dtype(), [&](auto tag) {
        using T = decltype(tag);
        std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
        std::int64_t offset = 0;
        for (std::size_t pi = 0; pi < parts.size(); ++pi) {
            const auto& pv = buf<T>(parts[pi].impl().data);
            for (std::int64_t o = 0; o < outer; ++o) {
                std::copy_n(pv.begin() + o * chunks[pi], chunks[pi],
                            out.begin() + o * out_chunk + offset);
            }
            offset += chunks[pi];
        }
        std::vector<std::shared_ptr<TensorImpl>> impls;
        for (const auto& p : parts) {
            impls.push_back(p.impl_ptr());
        }
        return make_result("concat", out_shape, first.dtype(), Buffer(std::move(out)), parts,
                           [impls, chunks, outer, out_chunk](const TensorImpl& o) {
                               const auto& g = buf<T>(*o.grad);
                               std::int64_t off = 0;
                               for (std::size_t pi = 0; pi < impls.size(); ++pi) {
                                   if (impls[pi]->requires_grad) {
                                       auto& gp = grad_buf<T>(*impls[pi]);
                                       for (std::int64_t a = 0; a < outer; ++a) {
                                           for (std::int64_t i = 0; i < chunks[pi]; ++i) {
                                               gp[static_cast<std::size_t>(a * chunks[pi] + i)] +=
                                                   g[static_cast<std::size_t>(a * out_chunk + off + i)];
                                           }
                                       }
                                   }
                                   off += chunks[pi];
                               }
                           });
    });
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
    const int ax = normalize_axis(axis, x.rank(), "slice");
    const std::int64_t n = x.size(ax);
    if (start < 0 || length < 0 || start + length > n) {
        throw ShapeError("slice [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") out of range for axis " +
                         std::to_string(axis) + " of shape " + shape_str(x.shape()));
    }
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= x.size(i);
    for (int i = ax + 1; i < x.rank(); ++i) inner *= x.size(i);
    Shape out_shape = x.shape();
    out_shape[static_cast<std::size_t>(ax)] = length;
    return visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = buf<T>(x.impl().data);
        std::vector<T> out(static_cast<std::size_t>(outer * length * inner));
        for (std::int64_t o = 0; o < outer; ++o) {
            std::copy_n(xv.begin() + (o * n + start) * inner, length * inner,
                        out.begin() + o * length * inner);
        }
        auto xi = x.impl_ptr();
        return make_result("slice", out_shape, x.dtype(), Buffer(std::move(out)), {x},
                           [xi, outer, inner, n, start, length](const TensorImpl& o) {
                               const auto& g = buf<T>(*o.grad);
                               auto& gx = grad_buf<T>(*xi);
                               for (std::int64_t a = 0; a < outer; ++a) {
                                   for (std::int64_t i = 0; i < length * inner; ++i) {
                                       gx[static_cast<std::size_t>((a * n + start) * inner + i)] +=
                                           g[static_cast<std::size_t>(a * length * inner + i)];
                                   }
                               }
                           });
    });
}

Tensor take_rows(const Tensor& x, std::span<const std::int64_t> rows) {
    if (x.rank() < 1) {
        throw ShapeError("take_rows on a scalar");
    }
    const std::int64_t n = x.size(0);
    const std::int64_t width = n == 0 ? 0 : x.numel() / n;
    for (auto r : rows) {
        if (r < 0 || r >= n) {
            throw ShapeError("take_rows: row " + std::to_string(r) + " out of range for shape " +
                             shape_str(x.shape()));
        }
    }
    Shape out_shape = x.shape();
    out_shape[0] = static_cast<std::int64_t>(rows.size());
    auto idx = std::make_shared<std::vector<std::int64_t>>(rows.begin(), rows.end());
    return visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = buf<T>(x.impl().data);
        std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
        for (std::size_t e = 0; e < idx->size(); ++e) {
            std::copy_n(xv.begin() + (*idx)[e] * width, width,
                        out.begin() + static_cast<std::int64_t>(e) * width);
        }
        auto xi = x.impl_ptr();
        return make_result("take_rows", out_shape, x.dtype(), Buffer(std::move(out)), {x},
                           [xi, idx, width](const TensorImpl& o) {
                               const auto& g = buf<T>(*o.grad);
                               auto& gx = grad_buf<T>(*xi);
                               for (std::size_t e = 0; e < idx->size(); ++e) {
                                   for (std::int64_t i = 0; i < width; ++i) {
                                       gx[static_cast<std::size_t>((*idx)[e] * width + i)] +=
                                           g[e * static_cast<std::size_t>(width) + static_cast<std::size_t>(i)];
                                   }
                               }
                           });
    });
}

Tensor scatter_add_rows(const Tensor& x, std::span<const std::int64_t> rows,
                        std::int64_t num_rows) {
    if (x.rank() < 1 || x.size(0) != static_cast<std::int64_t>(rows.size())) {
        throw ShapeError("scatter_add_rows: " + std::to_string(rows.size()) +
                         " row indices for input " + shape_str(x.shape()));
    }
    for (auto r : rows) {
        if (r < 0 || r >= num_rows) {
            throw ShapeError("scatter_add_rows: target row " + std::to_string(r) +
                             " out of range [0, " + std::to_string(num_rows) + ")");
        }
    }
    const std::int64_t width = x.size(0) == 0 ? shape_numel(Shape(x.shape().begin() + 1, x.shape().end()))
                                              : x.numel() / x.size(0);
    Shape out_shape = x.shape();
    out_shape[0] = num_rows;
    auto idx = std::make_shared<std::vector<std::int64_t>>(rows.begin(), rows.end());
    return visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = buf<T>(x.impl().data);
        std::vector<T> out(static_cast<std::size_t>(num_rows * width), T(0));
        std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(num_rows));
        for (std::size_t e = 0; e < idx->size(); ++e) {
            members[static_cast<std::size_t>((*idx)[e])].push_back(e);
        }
        std::vector<T> terms;
        for (std::int64_t r = 0; r < num_rows; ++r) {
            const auto& mem = members[static_cast<std::size_t>(r)];
            for (std::int64_t i = 0; i < width; ++i) {
                terms.clear();
                for (auto e : mem) {
                    terms.push_back(xv[e * static_cast<std::size_t>(width) + static_cast<std::size_t>(i)]);
                }
                std::sort(terms.begin(), terms.end());
                T acc = T(0);
                for (T t : terms) {
                    acc += t;
                }
                out[static_cast<std::size_t>(r * width + i)] = acc;
            }
        }
        auto xi = x.impl_ptr();
        return make_result("scatter_add_rows", out_shape, x.dtype(), Buffer(std::move(out)), {x},
                           [xi, idx, width](const TensorImpl& o) {
                               const auto& g = buf<T>(*o.grad);
                               auto& gx = grad_buf<T>(*xi);
                               for (std::size_t e = 0; e < idx->size(); ++e) {
                                   for (std::int64_t i = 0; i < width; ++i) {
                                       gx[e * static_cast<std::size_t>(width) + static_cast<std::size_t>(i)] +=
                                           g[static_cast<std::size_t>((*idx)[e] * width + i)];
                                   }
                               }
                           });
    });
}

Tensor select_rows(const Tensor& a, const Tensor& b, const std::vector<bool>& take_a) {
    detail::check_same_dtype("select_rows", a, b);
    if (a.shape() != b.shape() || a.rank() < 1 ||
        a.size(0) != static_cast<std::int64_t>(take_a.size())) {
        throw ShapeError("select_rows: shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " with " + std::to_string(take_a.size()) +
                         " selectors");
    }
    const std::int64_t width = a.size(0) == 0 ? 0 : a.numel() / a.size(0);
    auto sel = std::make_shared<std::vector<bool>>(take_a);
    return visit_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& av = buf<T>(a.impl().data);
        const auto& bv = buf<T>(b.impl().data);
        std::vector<T> out(av.size());
        for (std::size_t r = 0; r < sel->size(); ++r) {
            const auto& src = (*sel)[r] ? av : bv;
            std::copy_n(src.begin() + static_cast<std::int64_t>(r) * width, width,
                        out.begin() + static_cast<std::int64_t>(r) * width);
        }
        auto ai = a.impl_ptr();
        auto bi = b.impl_ptr();
        return make_result("select_rows", a.shape(), a.dtype(), Buffer(std::move(out)), {a, b},
                           [ai, bi, sel, width](const TensorImpl& o) {
                               const auto& g = buf<T>(*o.grad);
                               for (std::size_t r = 0; r < sel->size(); ++r) {
                                   TensorImpl& target = (*sel)[r] ? *ai : *bi;
                                   if (!target.requires_grad) {
                                       continue;
                                   }
                                   auto& gt = grad_buf<T>(target);
                                   for (std::int64_t i = 0; i < width; ++i) {
                                       const auto k = r * static_cast<std::size_t>(width) + static_cast<std::size_t>(i);
                                       gt[k] += g[k];
                                   }
                               }
                               // Untaken side still receives an (all-zero) gradient buffer.
                               if (ai->requires_grad) grad_buf<T>(*ai);
                               if (bi->requires_grad) grad_buf<T>(*bi);
                           });
    });
}

Tensor segment_softmax(const Tensor& scores, std::span<const std::int64_t> segment,
                       std::int64_t num_segments) {
    if (scores.rank() != 1 || scores.size(0) != static_cast<std::int64_t>(segment.size())) {
        throw ShapeError("segment_softmax: scores " + shape_str(scores.shape()) + " with " +
                         std::to_string(segment.size()) + " segment ids");
    }
    auto members = std::make_shared<std::vector<std::vector<std::size_t>>>(
        static_cast<std::size_t>(num_segments));
    for (std::size_t e = 0; e < segment.size(); ++e) {
        if (segment[e] < 0 || segment[e] >= num_segments) {
            throw ShapeError("segment_softmax: segment id out of range");
        }
        (*members)[static_cast<std::size_t>(segment[e])].push_back(e);
    }
    return visit_dtype(scores.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& sv = buf<T>(scores.impl().data);
        std::vector<T> out(sv.size());
        std::vector<T> terms;
        for (const auto& mem : *members) {
            if (mem.empty()) {
                continue;
            }
            T mx = sv[mem.front()];
            for (auto e : mem) {
                mx = std::max(mx, sv[e]);
            }
            terms.clear();
            for (auto e : mem) {
                out[e] = std::exp(sv[e] - mx);
                terms.push_back(out[e]);
            }
            std::sort(terms.begin(), terms.end());
            T total = T(0);
            for (T t : terms) {
                total += t;
            }
            for (auto e : mem) {
                out[e] /= total;
            }
        }
        auto keep = std::make_shared<std::vector<T>>(out);
        auto si = scores.impl_ptr();
        return make_result("segment_softmax", scores.shape(), scores.dtype(),
                           Buffer(std::move(out)), {scores},
                           [si, keep, members](const TensorImpl& o) {
                               const auto& g = buf<T>(*o.grad);
                               auto& gs = grad_buf<T>(*si);
                               const auto& y = *keep;
                               for (const auto& mem : *members) {
                                   T dot = T(0);
                                   for (auto e : mem) {
                                       dot += g[e] * y[e];
                                   }
                                   for (auto e : mem) {
                                       gs[e] += y[e] * (g[e] - dot);
                                   }
                               }
                           });
    });
}

Tensor softmax(const Tensor& x, int axis) {
    const int ax = normalize_axis(axis, x.rank(), "softmax");
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= x.size(i);
    for (int i = ax + 1; i < x.rank(); ++i) inner *= x.size(i);
    const std::int64_t n = x.size(ax);
    return visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = buf<T>(x.impl().data);
        std::vector<T> out(xv.size());
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t i = 0; i < inner; ++i) {
                const auto at = [&](std::int64_t k) {
                    return static_cast<std::size_t>((o * n + k) * inner + i);
                };
                T mx = xv[at(0)];
                for (std::int64_t k = 1; k < n; ++k) mx = std::max(mx, xv[at(k)]);
                T total = T(0);
                for (std::int64_t k = 0; k < n; ++k) {
                    out[at(k)] = std::exp(xv[at(k)] - mx);
                    total += out[at(k)];
                }
                for (std::int64_t k = 0; k < n; ++k) out[at(k)] /= total;
            }
        }
        auto keep = std::make_shared<std::vector<T>>(out);
        auto xi = x.impl_ptr();
        return make_result("softmax", x.shape(), x.dtype(), Buffer(std::move(out)), {x},
                           [xi, keep, outer, inner, n](const TensorImpl& o) {
                               const auto& g = buf<T>(*o.grad);
                               auto& gx = grad_buf<T>(*xi);
                               const auto& y = *keep;
                               for (std::int64_t a = 0; a < outer; ++a) {
                                   for (std::int64_t i = 0; i < inner; ++i) {
                                       T dot = T(0);
                                       for (std::int64_t k = 0; k < n; ++k) {
                                           const auto j = static_cast<std::size_t>((a * n + k) * inner + i);
                                           dot += g[j] * y[j];
                                       }
                                       for (std::int64_t k = 0; k < n; ++k) {
                                           const auto j = static_cast<std::size_t>((a * n + k) * inner + i);
                                           gx[j] += y[j] * (g[j] - dot);
                                       }
                                   }
                               }
                           });
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    detail::check_same_dtype("layer_norm", x, gamma);
    detail::check_same_dtype("layer_norm", x, beta);
    if (x.rank() < 1) {
        throw ShapeError("layer_norm on a scalar");
    }
    const std::int64_t d = x.size(-1);
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        throw ShapeError("layer_norm: input " + shape_str(x.shape()) + " with gamma " +
                         shape_str(gamma.shape()) + " and beta " + shape_str(beta.shape()));
    }
    const std::int64_t rows = d == 0 ? 0 : x.numel() / d;
    return visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = buf<T>(x.impl().data);
        const auto& gv = buf<T>(gamma.impl().data);
        const auto& bv = buf<T>(beta.impl().data);
        std::vector<T> out(xv.size());
        auto xhat = std::make_shared<std::vector<T>>(xv.size());
        auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* row = xv.data() + r * d;
            T mu = T(0);
            for (std::int64_t i = 0; i < d; ++i) mu += row[i];
            mu /= static_cast<T>(d);
            T var = T(0);
            for (std::int64_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
            var /= static_cast<T>(d);
            const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
            (*rstd)[static_cast<std::size_t>(r)] = rs;
            for (std::int64_t i = 0; i < d; ++i) {
                const auto k = static_cast<std::size_t>(r * d + i);
                (*xhat)[k] = (row[i] - mu) * rs;
                out[k] = (*xhat)[k] * gv[static_cast<std::size_t>(i)] + bv[static_cast<std::size_t>(i)];
            }
        }
        auto xi = x.impl_ptr();
        auto gi = gamma.impl_ptr();
        auto bi = beta.impl_ptr();
        return make_result(
            "layer_norm", x.shape(), x.dtype(), Buffer(std::move(out)), {x, gamma, beta},
            [xi, gi, bi, xhat, rstd, rows, d](const TensorImpl& o) {
                const auto& g = buf<T>(*o.grad);
                const auto& gam = buf<T>(gi->data);
                if (gi->requires_grad || bi->requires_grad) {
                    auto& gg = grad_buf<T>(*gi);
                    auto& gb = grad_buf<T>(*bi);
                    for (std::int64_t r = 0; r < rows; ++r) {
                        for (std::int64_t i = 0; i < d; ++i) {
                            const auto k = static_cast<std::size_t>(r * d + i);
                            gg[static_cast<std::size_t>(i)] += g[k] * (*xhat)[k];
                            gb[static_cast<std::size_t>(i)] += g[k];
                        }
                    }
                }
                if (!xi->requires_grad) {
                    return;
                }
                auto& gx = grad_buf<T>(*xi);
                for (std::int64_t r = 0; r < rows; ++r) {
                    T mean_dxh = T(0), mean_dxh_xh = T(0);
                    for (std::int64_t i = 0; i < d; ++i) {
                        const auto k = static_cast<std::size_t>(r * d + i);
                        const T dxh = g[k] * gam[static_cast<std::size_t>(i)];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * (*xhat)[k];
                    }
                    mean_dxh /= static_cast<T>(d);
                    mean_dxh_xh /= static_cast<T>(d);
                    const T rs = (*rstd)[static_cast<std::size_t>(r)];
                    for (std::int64_t i = 0; i < d; ++i) {
                        const auto k = static_cast<std::size_t>(r * d + i);
                        const T dxh = g[k] * gam[static_cast<std::size_t>(i)];
                        gx[k] += rs * (dxh - mean_dxh - (*xhat)[k] * mean_dxh_xh);
                    }
                }
            });
    });
}

}  // namespace ntrm
