// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0
//
// Row-major GEMM kernels, C += op(A) . op(B). Loop orders keep the innermost
// loop contiguous so the compiler can vectorize it.

#pragma once

#include <cstdint>

namespace ntrm::detail {

// C (M x N) += A (M x K) . B (K x N)
template <typename T>
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c) {
    for (std::int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T(0)) {
                continue;
            }
            const T* brow = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// C (M x N) += A (M x K) . B^T, B stored N x K
template <typename T>
void gemm_nt(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c) {
    for (std::int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        for (std::int64_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = T(0);
            for (std::int64_t p = 0; p < k; ++p) {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] += acc;
        }
    }
}

// C (M x N) += A^T . B, A stored K x M, B stored K x N
template <typename T>
void gemm_tn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c) {
    for (std::int64_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (std::int64_t i = 0; i < m; ++i) {
            const T av = arow[i];
            if (av == T(0)) {
                continue;
            }
            T* crow = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

}  // namespace ntrm::detail
