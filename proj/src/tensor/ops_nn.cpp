// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <limits>

#include "gemm.hpp"
#include "ntrm/ops.hpp"

namespace ntrm {

using detail::buf;
using detail::grad_buf;
using detail::make_result;

std::int64_t conv_out_size(std::int64_t in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

namespace {

struct ConvGeom {
    std::int64_t batch, channels, height, width;
    std::int64_t out_channels, out_h, out_w;
    int kernel, stride, pad;

    std::int64_t col_rows() const { return channels * kernel * kernel; }
    std::int64_t col_cols() const { return out_h * out_w; }
    bool pointwise() const { return kernel == 1 && stride == 1 && pad == 0; }
};

template <typename T>
void im2col(const ConvGeom& g, const T* x, T* cols) {
    const std::int64_t p = g.col_cols();
    for (std::int64_t c = 0; c < g.channels; ++c) {
        for (int ky = 0; ky < g.kernel; ++ky) {
            for (int kx = 0; kx < g.kernel; ++kx) {
                T* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * p;
                for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
                    const std::int64_t iy = oy * g.stride - g.pad + ky;
                    for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
                        const std::int64_t ix = ox * g.stride - g.pad + kx;
                        row[oy * g.out_w + ox] =
                            (iy >= 0 && iy < g.height && ix >= 0 && ix < g.width)
                                ? x[(c * g.height + iy) * g.width + ix]
                                : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const ConvGeom& g, const T* cols, T* dx) {
    const std::int64_t p = g.col_cols();
    for (std::int64_t c = 0; c < g.channels; ++c) {
        for (int ky = 0; ky < g.kernel; ++ky) {
            for (int kx = 0; kx < g.kernel; ++kx) {
                const T* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * p;
                for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
                    const std::int64_t iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.height) {
                        continue;
                    }
                    for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
                        const std::int64_t ix = ox * g.stride - g.pad + kx;
                        if (ix >= 0 && ix < g.width) {
                            dx[(c * g.height + iy) * g.width + ix] += row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

void require_4d(const char* op, const Tensor& x) {
    if (x.rank() != 4) {
        throw ShapeError(std::string(op) + " expects a B x C x H x W tensor, got " +
                         shape_str(x.shape()));
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad) {
    require_4d("conv2d", x);
    detail::check_same_dtype("conv2d", x, weight);
    if (weight.rank() != 4 || weight.size(2) != weight.size(3) || weight.size(2) % 2 == 0) {
        throw ShapeError("conv2d: weight must be O x C x k x k with odd k, got " +
                         shape_str(weight.shape()));
    }
    if (weight.size(1) != x.size(1)) {
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " has " +
                         std::to_string(x.size(1)) + " channels but weight " +
                         shape_str(weight.shape()) + " expects " + std::to_string(weight.size(1)));
    }
    if (bias.defined() && bias.shape() != Shape{weight.size(0)}) {
        throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
    }
    if (stride < 1 || pad < 0) {
        throw ShapeError("conv2d: stride must be >= 1 and pad >= 0");
    }
    ConvGeom g{x.size(0), x.size(1), x.size(2), x.size(3), weight.size(0), 0, 0,
               static_cast<int>(weight.size(2)), stride, pad};
    g.out_h = conv_out_size(g.height, g.kernel, stride, pad);
    g.out_w = conv_out_size(g.width, g.kernel, stride, pad);
    if (g.out_h < 1 || g.out_w < 1) {
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " too small for kernel " +
                         std::to_string(g.kernel));
    }
    const Shape out_shape{g.batch, g.out_channels, g.out_h, g.out_w};

    return visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = buf<T>(x.impl().data);
        const auto& wv = buf<T>(weight.impl().data);
        const std::int64_t rows = g.col_rows(), p = g.col_cols();
        const std::int64_t in_per = g.channels * g.height * g.width;
        const std::int64_t out_per = g.out_channels * p;
        auto cols = std::make_shared<std::vector<T>>();
        if (!g.pointwise()) {
            cols->resize(static_cast<std::size_t>(g.batch * rows * p));
        }
        std::vector<T> out(static_cast<std::size_t>(g.batch * out_per), T(0));
        for (std::int64_t b = 0; b < g.batch; ++b) {
            T* ob = out.data() + b * out_per;
            if (bias.defined()) {
                const auto& bv = buf<T>(bias.impl().data);
                for (std::int64_t o = 0; o < g.out_channels; ++o) {
                    std::fill_n(ob + o * p, p, bv[static_cast<std::size_t>(o)]);
                }
            }
            const T* cb = xv.data() + b * in_per;
            if (!g.pointwise()) {
                T* colb = cols->data() + b * rows * p;
                im2col(g, cb, colb);
                cb = colb;
            }
            detail::gemm_nn(g.out_channels, p, rows, wv.data(), cb, ob);
        }

        auto xi = x.impl_ptr();
        auto wi = weight.impl_ptr();
        auto bi = bias.defined() ? bias.impl_ptr() : nullptr;
        std::vector<Tensor> inputs{x, weight};
        if (bias.defined()) {
            inputs.push_back(bias);
        }
        return make_result(
            "conv2d", out_shape, x.dtype(), Buffer(std::move(out)), inputs,
            [xi, wi, bi, cols, g, rows, p, in_per, out_per](const TensorImpl& o) {
                const auto& gout = buf<T>(*o.grad);
                const auto& w = buf<T>(wi->data);
                const auto& xin = buf<T>(xi->data);
                std::vector<T> dcols(g.pointwise() ? 0 : static_cast<std::size_t>(rows * p));
                for (std::int64_t b = 0; b < g.batch; ++b) {
                    const T* gb = gout.data() + b * out_per;
                    const T* colb = g.pointwise() ? xin.data() + b * in_per
                                                  : cols->data() + b * rows * p;
                    if (wi->requires_grad) {
                        detail::gemm_nt(g.out_channels, rows, p, gb, colb,
                                        grad_buf<T>(*wi).data());
                    }
                    if (bi && bi->requires_grad) {
                        auto& gbias = grad_buf<T>(*bi);
                        for (std::int64_t oc = 0; oc < g.out_channels; ++oc) {
                            T acc = T(0);
                            for (std::int64_t k = 0; k < p; ++k) acc += gb[oc * p + k];
                            gbias[static_cast<std::size_t>(oc)] += acc;
                        }
                    }
                    if (xi->requires_grad) {
                        T* dxb = grad_buf<T>(*xi).data() + b * in_per;
                        if (g.pointwise()) {
                            detail::gemm_tn(rows, p, g.out_channels, w.data(), gb, dxb);
                        } else {
                            std::fill(dcols.begin(), dcols.end(), T(0));
                            detail::gemm_tn(rows, p, g.out_channels, w.data(), gb, dcols.data());
                            col2im(g, dcols.data(), dxb);
                        }
                    }
                }
            });
    });
}

Tensor maxpool2d(const Tensor& x, int kernel, int stride, int pad) {
    require_4d("maxpool2d", x);
    if (kernel < 1 || stride < 1 || pad < 0 || 2 * pad >= kernel + 1) {
        throw ShapeError("maxpool2d: invalid kernel/stride/pad " + std::to_string(kernel) + "/" +
                         std::to_string(stride) + "/" + std::to_string(pad));
    }
    const std::int64_t planes = x.size(0) * x.size(1);
    const std::int64_t h = x.size(2), w = x.size(3);
    const std::int64_t oh = conv_out_size(h, kernel, stride, pad);
    const std::int64_t ow = conv_out_size(w, kernel, stride, pad);
    if (oh < 1 || ow < 1) {
        throw ShapeError("maxpool2d: input " + shape_str(x.shape()) + " too small");
    }
    return visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = buf<T>(x.impl().data);
        std::vector<T> out(static_cast<std::size_t>(planes * oh * ow));
        auto arg = std::make_shared<std::vector<std::int64_t>>(out.size());
        for (std::int64_t pl = 0; pl < planes; ++pl) {
            for (std::int64_t oy = 0; oy < oh; ++oy) {
                for (std::int64_t ox = 0; ox < ow; ++ox) {
                    T best = -std::numeric_limits<T>::infinity();
                    std::int64_t best_i = -1;
                    for (int ky = 0; ky < kernel; ++ky) {
                        const std::int64_t iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < kernel; ++kx) {
                            const std::int64_t ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= w) continue;
                            const std::int64_t i = (pl * h + iy) * w + ix;
                            if (best_i < 0 || xv[static_cast<std::size_t>(i)] > best) {
                                best = xv[static_cast<std::size_t>(i)];
                                best_i = i;
                            }
                        }
                    }
                    const auto k = static_cast<std::size_t>((pl * oh + oy) * ow + ox);
                    out[k] = best;
                    (*arg)[k] = best_i;
                }
            }
        }
        if (detail::branch_tape_active()) {
            for (std::size_t k = 0; k < out.size(); ++k) {
                const auto a = static_cast<std::int64_t>(detail::branch(static_cast<std::uint64_t>((*arg)[k])));
                (*arg)[k] = a;
                out[k] = xv[static_cast<std::size_t>(a)];
            }
        }
        auto xi = x.impl_ptr();
        return make_result("maxpool2d", Shape{x.size(0), x.size(1), oh, ow}, x.dtype(),
                           Buffer(std::move(out)), {x}, [xi, arg](const TensorImpl& o) {
                               const auto& g = buf<T>(*o.grad);
                               auto& gx = grad_buf<T>(*xi);
                               for (std::size_t k = 0; k < g.size(); ++k) {
                                   gx[static_cast<std::size_t>((*arg)[k])] += g[k];
                               }
                           });
    });
}

namespace {

struct LerpAxis {
    std::vector<std::int64_t> lo, hi;
    std::vector<double> frac;
};

LerpAxis lerp_axis(std::int64_t in, std::int64_t out) {
    LerpAxis a;
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::int64_t i = 0; i < out; ++i) {
        double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
        src = std::max(src, 0.0);
        auto lo = static_cast<std::int64_t>(std::floor(src));
        lo = std::min(lo, in - 1);
        a.lo.push_back(lo);
        a.hi.push_back(std::min(lo + 1, in - 1));
        a.frac.push_back(src - static_cast<double>(lo));
    }
    return a;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
    require_4d("upsample_bilinear", x);
    if (out_h <= 0 || out_w <= 0) {
        throw ShapeError("upsample_bilinear: zero target size " + std::to_string(out_h) + "x" +
                         std::to_string(out_w));
    }
    const std::int64_t h = x.size(2), w = x.size(3);
    if (out_h < h || out_w < w) {
        throw ShapeError("upsample_bilinear: target " + std::to_string(out_h) + "x" +
                         std::to_string(out_w) + " smaller than input " + shape_str(x.shape()));
    }
    const std::int64_t planes = x.size(0) * x.size(1);
    auto ay = std::make_shared<LerpAxis>(lerp_axis(h, out_h));
    auto ax = std::make_shared<LerpAxis>(lerp_axis(w, out_w));
    return visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = buf<T>(x.impl().data);
        std::vector<T> out(static_cast<std::size_t>(planes * out_h * out_w));
        for (std::int64_t pl = 0; pl < planes; ++pl) {
            const T* src = xv.data() + pl * h * w;
            T* dst = out.data() + pl * out_h * out_w;
            for (std::int64_t i = 0; i < out_h; ++i) {
                const auto iu = static_cast<std::size_t>(i);
                const T fy = static_cast<T>(ay->frac[iu]);
                const T* r0 = src + ay->lo[iu] * w;
                const T* r1 = src + ay->hi[iu] * w;
                for (std::int64_t j = 0; j < out_w; ++j) {
                    const auto ju = static_cast<std::size_t>(j);
                    const T fx = static_cast<T>(ax->frac[ju]);
                    const auto x0 = ax->lo[ju], x1 = ax->hi[ju];
                    dst[i * out_w + j] = (T(1) - fy) * ((T(1) - fx) * r0[x0] + fx * r0[x1]) +
                                         fy * ((T(1) - fx) * r1[x0] + fx * r1[x1]);
                }
            }
        }
        auto xi = x.impl_ptr();
        return make_result(
            "upsample_bilinear", Shape{x.size(0), x.size(1), out_h, out_w}, x.dtype(),
            Buffer(std::move(out)), {x}, [xi, ay, ax, planes, h, w, out_h, out_w](const TensorImpl& o) {
                const auto& g = buf<T>(*o.grad);
                auto& gx = grad_buf<T>(*xi);
                for (std::int64_t pl = 0; pl < planes; ++pl) {
                    T* dst = gx.data() + pl * h * w;
                    const T* gs = g.data() + pl * out_h * out_w;
                    for (std::int64_t i = 0; i < out_h; ++i) {
                        const auto iu = static_cast<std::size_t>(i);
                        const T fy = static_cast<T>(ay->frac[iu]);
                        T* r0 = dst + ay->lo[iu] * w;
                        T* r1 = dst + ay->hi[iu] * w;
                        for (std::int64_t j = 0; j < out_w; ++j) {
                            const auto ju = static_cast<std::size_t>(j);
                            const T fx = static_cast<T>(ax->frac[ju]);
                            const auto x0 = ax->lo[ju], x1 = ax->hi[ju];
                            const T gv = gs[i * out_w + j];
                            r0[x0] += gv * (T(1) - fy) * (T(1) - fx);
                            r0[x1] += gv * (T(1) - fy) * fx;
                            r1[x0] += gv * fy * (T(1) - fx);
                            r1[x1] += gv * fy * fx;
                        }
                    }
                }
            });
    });
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    BatchNormStats& stats, bool training, double momentum, double eps) {
    require_4d("batch_norm2d", x);
    detail::check_same_dtype("batch_norm2d", x, gamma);
    const std::int64_t b = x.size(0), c = x.size(1), hw = x.size(2) * x.size(3);
    const Shape cs{c};
    if (gamma.shape() != cs || beta.shape() != cs || stats.running_mean.shape() != cs ||
        stats.running_var.shape() != cs) {
        throw ShapeError("batch_norm2d: input " + shape_str(x.shape()) +
                         " with per-channel parameters of shape " + shape_str(gamma.shape()));
    }
    const std::int64_t n = b * hw;
    return visit_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto& xv = buf<T>(x.impl().data);
        const auto& gv = buf<T>(gamma.impl().data);
        const auto& bv = buf<T>(beta.impl().data);
        auto rmean = stats.running_mean.template mutable_data<T>();
        auto rvar = stats.running_var.template mutable_data<T>();
        std::vector<T> out(xv.size());
        auto xhat = std::make_shared<std::vector<T>>(xv.size());
        auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c));
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const auto cu = static_cast<std::size_t>(ch);
            T mu, var;
            if (training) {
                mu = T(0);
                for (std::int64_t bi = 0; bi < b; ++bi) {
                    const T* p = xv.data() + (bi * c + ch) * hw;
                    for (std::int64_t k = 0; k < hw; ++k) mu += p[k];
                }
                mu /= static_cast<T>(n);
                var = T(0);
                for (std::int64_t bi = 0; bi < b; ++bi) {
                    const T* p = xv.data() + (bi * c + ch) * hw;
                    for (std::int64_t k = 0; k < hw; ++k) var += (p[k] - mu) * (p[k] - mu);
                }
                var /= static_cast<T>(n);
                const T unbiased = n > 1 ? var * static_cast<T>(n) / static_cast<T>(n - 1) : var;
                const T m = static_cast<T>(momentum);
                rmean[cu] = (T(1) - m) * rmean[cu] + m * mu;
                rvar[cu] = (T(1) - m) * rvar[cu] + m * unbiased;
            } else {
                mu = rmean[cu];
                var = rvar[cu];
            }
            const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
            (*rstd)[cu] = rs;
            for (std::int64_t bi = 0; bi < b; ++bi) {
                const std::int64_t base = (bi * c + ch) * hw;
                for (std::int64_t k = 0; k < hw; ++k) {
                    const auto i = static_cast<std::size_t>(base + k);
                    (*xhat)[i] = (xv[i] - mu) * rs;
                    out[i] = (*xhat)[i] * gv[cu] + bv[cu];
                }
            }
        }
        auto xi = x.impl_ptr();
        auto gi = gamma.impl_ptr();
        auto bti = beta.impl_ptr();
        return make_result(
            "batch_norm2d", x.shape(), x.dtype(), Buffer(std::move(out)), {x, gamma, beta},
            [xi, gi, bti, xhat, rstd, b, c, hw, n, training](const TensorImpl& o) {
                const auto& g = buf<T>(*o.grad);
                const auto& gam = buf<T>(gi->data);
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    const auto cu = static_cast<std::size_t>(ch);
                    T sum_g = T(0), sum_gx = T(0);
                    for (std::int64_t bi = 0; bi < b; ++bi) {
                        const std::int64_t base = (bi * c + ch) * hw;
                        for (std::int64_t k = 0; k < hw; ++k) {
                            const auto i = static_cast<std::size_t>(base + k);
                            sum_g += g[i];
                            sum_gx += g[i] * (*xhat)[i];
                        }
                    }
                    if (gi->requires_grad) grad_buf<T>(*gi)[cu] += sum_gx;
                    if (bti->requires_grad) grad_buf<T>(*bti)[cu] += sum_g;
                    if (!xi->requires_grad) continue;
                    auto& gx = grad_buf<T>(*xi);
                    const T rs = (*rstd)[cu];
                    const T mean_g = sum_g / static_cast<T>(n);
                    const T mean_gx = sum_gx / static_cast<T>(n);
                    for (std::int64_t bi = 0; bi < b; ++bi) {
                        const std::int64_t base = (bi * c + ch) * hw;
                        for (std::int64_t k = 0; k < hw; ++k) {
                            const auto i = static_cast<std::size_t>(base + k);
                            if (training) {
                                gx[i] += gam[cu] * rs * (g[i] - mean_g - (*xhat)[i] * mean_gx);
                            } else {
                                gx[i] += gam[cu] * rs * g[i];
                            }
                        }
                    }
                }
            });
    });
}

}  // namespace ntrm
