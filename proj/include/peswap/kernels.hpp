#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

// Raw array kernels shared by the autodiff tape and the cached inference path.
// All matmul-style kernels accumulate into the output; callers zero it first
// when they want a plain product. Loops are laid out so the innermost access
// is contiguous.

namespace peswap::kernels {

// c[m,n] += sum_k a[m,k] * b[n,k]   (b used row-wise: "n-transposed")
template <class Real>
void gemm_nt(const Real* a, const Real* b, Real* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const Real* pa = a + i * k;
        Real* pc = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const Real* pb = b + j * k;
            Real acc{};
#pragma omp simd reduction(+ : acc)
            for (int64_t t = 0; t < k; ++t) acc += pa[t] * pb[t];
            pc[j] += acc;
        }
    }
}

// c[m,n] += sum_k a[m,k] * b[k,n]
template <class Real>
void gemm_nn(const Real* a, const Real* b, Real* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const Real* pa = a + i * k;
        Real* pc = c + i * n;
        for (int64_t t = 0; t < k; ++t) {
            const Real s = pa[t];
            if (s == Real(0)) continue;
            const Real* pb = b + t * n;
#pragma omp simd
            for (int64_t j = 0; j < n; ++j) pc[j] += s * pb[j];
        }
    }
}

// c[m,n] += sum_r a[r,m] * b[r,n]   (both operands read by rows of length m / n)
template <class Real>
void gemm_tn(const Real* a, const Real* b, Real* c, int64_t r, int64_t m, int64_t n) {
    for (int64_t t = 0; t < r; ++t) {
        const Real* pa = a + t * m;
        const Real* pb = b + t * n;
        for (int64_t i = 0; i < m; ++i) {
            const Real s = pa[i];
            if (s == Real(0)) continue;
            Real* pc = c + i * n;
#pragma omp simd
            for (int64_t j = 0; j < n; ++j) pc[j] += s * pb[j];
        }
    }
}

// Row-wise softmax with max subtraction; x and y may alias.
template <class Real>
void softmax_rows(const Real* x, Real* y, int64_t rows, int64_t cols) {
    for (int64_t i = 0; i < rows; ++i) {
        const Real* px = x + i * cols;
        Real* py = y + i * cols;
        Real mx = px[0];
        for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, px[j]);
        Real sum{};
        for (int64_t j = 0; j < cols; ++j) {
            py[j] = std::exp(px[j] - mx);
            sum += py[j];
        }
        const Real inv = Real(1) / sum;
        for (int64_t j = 0; j < cols; ++j) py[j] *= inv;
    }
}

// Row-wise log-softmax (used by inference scoring and loss kernels).
template <class Real>
void log_softmax_rows(const Real* x, Real* y, int64_t rows, int64_t cols) {
    for (int64_t i = 0; i < rows; ++i) {
        const Real* px = x + i * cols;
        Real* py = y + i * cols;
        Real mx = px[0];
        for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, px[j]);
        Real sum{};
        for (int64_t j = 0; j < cols; ++j) sum += std::exp(px[j] - mx);
        const Real lse = std::log(sum) + mx;
        for (int64_t j = 0; j < cols; ++j) py[j] = px[j] - lse;
    }
}

// y = (x - mean) / sqrt(var + eps) * gamma + beta, per row of length `cols`.
// Optionally writes the normalized rows (xhat) and 1/std for backward reuse.
template <class Real>
void layer_norm_rows(const Real* x, const Real* gamma, const Real* beta, Real eps, Real* y,
                     int64_t rows, int64_t cols, Real* xhat = nullptr, Real* inv_std = nullptr) {
    for (int64_t i = 0; i < rows; ++i) {
        const Real* px = x + i * cols;
        Real* py = y + i * cols;
        Real mean{};
        for (int64_t j = 0; j < cols; ++j) mean += px[j];
        mean /= Real(cols);
        Real var{};
        for (int64_t j = 0; j < cols; ++j) {
            const Real d = px[j] - mean;
            var += d * d;
        }
        var /= Real(cols);
        const Real inv = Real(1) / std::sqrt(var + eps);
        for (int64_t j = 0; j < cols; ++j) {
            const Real h = (px[j] - mean) * inv;
            if (xhat) xhat[i * cols + j] = h;
            py[j] = h * gamma[j] + beta[j];
        }
        if (inv_std) inv_std[i] = inv;
    }
}

template <class Real>
void relu(const Real* x, Real* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] > Real(0) ? x[i] : Real(0);
}

// [a,b,c,d] -> [a,c,b,d] copy (splitting/merging attention heads).
template <class Real>
void permute_0213(const Real* x, Real* y, int64_t a, int64_t b, int64_t c, int64_t d) {
    for (int64_t ia = 0; ia < a; ++ia)
        for (int64_t ib = 0; ib < b; ++ib)
            for (int64_t ic = 0; ic < c; ++ic) {
                const Real* px = x + ((ia * b + ib) * c + ic) * d;
                Real* py = y + ((ia * c + ic) * b + ib) * d;
                for (int64_t id = 0; id < d; ++id) py[id] = px[id];
            }
}

} // namespace peswap::kernels
