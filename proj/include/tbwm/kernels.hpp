#pragma once

// Dense numeric kernels used by the autodiff ops and the raw sequence-model
// engine. Every kernel exists in two variants: a serial reference and an
// OpenMP version parallelized over independent output rows. The inner
// accumulation order of each output element is identical in both, so results
// match bitwise for any thread count. kernels::matmul(...) dispatches on a
// process-global flag (TBWM_DETERMINISTIC=1 forces the serial reference).

#include <cmath>
#include <cstdint>

namespace tbwm::kernels {

bool parallel_enabled();
void set_parallel(bool on);

// Work threshold below which the dispatching wrappers stay serial. Depends
// only on operand sizes, never on data or thread count.
inline constexpr std::int64_t kParallelMinWork = 1 << 15;

// ---------------------------------------------------------------------------
// C (m x n) = A (m x k) * B (k x n), row-major. accumulate adds into C.

namespace detail {

// one output row; fixed accumulation order shared by both variants
template <typename T>
inline void matmul_row(const T* __restrict a, const T* __restrict B,
                       T* __restrict c, int k, int n, bool accumulate) {
    if (!accumulate)
        for (int j = 0; j < n; ++j) c[j] = T(0);
    for (int p = 0; p < k; ++p) {
        const T ap = a[p];
        const T* __restrict b = B + static_cast<std::int64_t>(p) * n;
        for (int j = 0; j < n; ++j) c[j] += ap * b[j];
    }
}

}  // namespace detail

template <typename T>
void matmul_serial(const T* A, const T* B, T* C, int m, int k, int n,
                   bool accumulate = false) {
    for (int i = 0; i < m; ++i)
        detail::matmul_row(A + static_cast<std::int64_t>(i) * k, B,
                           C + static_cast<std::int64_t>(i) * n, k, n,
                           accumulate);
}

template <typename T>
void matmul_omp(const T* A, const T* B, T* C, int m, int k, int n,
                bool accumulate = false) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i)
        detail::matmul_row(A + static_cast<std::int64_t>(i) * k, B,
                           C + static_cast<std::int64_t>(i) * n, k, n,
                           accumulate);
}

template <typename T>
void matmul(const T* A, const T* B, T* C, int m, int k, int n,
            bool accumulate = false) {
    const std::int64_t work = std::int64_t(m) * k * n;
    if (parallel_enabled() && work >= kParallelMinWork)
        matmul_omp(A, B, C, m, k, n, accumulate);
    else
        matmul_serial(A, B, C, m, k, n, accumulate);
}

// ---------------------------------------------------------------------------
// C (m x n) = A^T * B where A is (k x m), B is (k x n).

template <typename T>
void matmul_tn_serial(const T* A, const T* B, T* C, int m, int k, int n,
                      bool accumulate = false) {
    for (int i = 0; i < m; ++i) {
        T* c = C + static_cast<std::int64_t>(i) * n;
        if (!accumulate) {
            for (int j = 0; j < n; ++j) c[j] = T(0);
        }
        for (int p = 0; p < k; ++p) {
            const T ap = A[static_cast<std::int64_t>(p) * m + i];
            const T* b = B + static_cast<std::int64_t>(p) * n;
            for (int j = 0; j < n; ++j) c[j] += ap * b[j];
        }
    }
}

template <typename T>
void matmul_tn_omp(const T* A, const T* B, T* C, int m, int k, int n,
                   bool accumulate = false) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        T* c = C + static_cast<std::int64_t>(i) * n;
        if (!accumulate) {
            for (int j = 0; j < n; ++j) c[j] = T(0);
        }
        for (int p = 0; p < k; ++p) {
            const T ap = A[static_cast<std::int64_t>(p) * m + i];
            const T* b = B + static_cast<std::int64_t>(p) * n;
            for (int j = 0; j < n; ++j) c[j] += ap * b[j];
        }
    }
}

template <typename T>
void matmul_tn(const T* A, const T* B, T* C, int m, int k, int n,
               bool accumulate = false) {
    const std::int64_t work = std::int64_t(m) * k * n;
    if (parallel_enabled() && work >= kParallelMinWork)
        matmul_tn_omp(A, B, C, m, k, n, accumulate);
    else
        matmul_tn_serial(A, B, C, m, k, n, accumulate);
}

// ---------------------------------------------------------------------------
// C (m x n) = A * B^T where A is (m x k), B is (n x k).

namespace detail {

template <typename T>
inline void matmul_nt_row(const T* __restrict a, const T* __restrict B,
                          T* __restrict c, int k, int n, bool accumulate) {
    for (int j = 0; j < n; ++j) {
        const T* __restrict b = B + static_cast<std::int64_t>(j) * k;
        T acc = T(0);
        for (int p = 0; p < k; ++p) acc += a[p] * b[p];
        c[j] = accumulate ? c[j] + acc : acc;
    }
}

}  // namespace detail

template <typename T>
void matmul_nt_serial(const T* A, const T* B, T* C, int m, int k, int n,
                      bool accumulate = false) {
    for (int i = 0; i < m; ++i)
        detail::matmul_nt_row(A + static_cast<std::int64_t>(i) * k, B,
                              C + static_cast<std::int64_t>(i) * n, k, n,
                              accumulate);
}

template <typename T>
void matmul_nt_omp(const T* A, const T* B, T* C, int m, int k, int n,
                   bool accumulate = false) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i)
        detail::matmul_nt_row(A + static_cast<std::int64_t>(i) * k, B,
                              C + static_cast<std::int64_t>(i) * n, k, n,
                              accumulate);
}

template <typename T>
void matmul_nt(const T* A, const T* B, T* C, int m, int k, int n,
               bool accumulate = false) {
    const std::int64_t work = std::int64_t(m) * k * n;
    if (parallel_enabled() && work >= kParallelMinWork)
        matmul_nt_omp(A, B, C, m, k, n, accumulate);
    else
        matmul_nt_serial(A, B, C, m, k, n, accumulate);
}

// ---------------------------------------------------------------------------
// Row-wise softmax, numerically stabilized by the row max.

template <typename T>
void softmax_rows_serial(const T* X, T* Y, int rows, int cols) {
    for (int i = 0; i < rows; ++i) {
        const T* x = X + static_cast<std::int64_t>(i) * cols;
        T* y = Y + static_cast<std::int64_t>(i) * cols;
        T mx = x[0];
        for (int j = 1; j < cols; ++j) mx = x[j] > mx ? x[j] : mx;
        T sum = T(0);
        for (int j = 0; j < cols; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        const T inv = T(1) / sum;
        for (int j = 0; j < cols; ++j) y[j] *= inv;
    }
}

template <typename T>
void softmax_rows_omp(const T* X, T* Y, int rows, int cols) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < rows; ++i) {
        const T* x = X + static_cast<std::int64_t>(i) * cols;
        T* y = Y + static_cast<std::int64_t>(i) * cols;
        T mx = x[0];
        for (int j = 1; j < cols; ++j) mx = x[j] > mx ? x[j] : mx;
        T sum = T(0);
        for (int j = 0; j < cols; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        const T inv = T(1) / sum;
        for (int j = 0; j < cols; ++j) y[j] *= inv;
    }
}

template <typename T>
void softmax_rows(const T* X, T* Y, int rows, int cols) {
    const std::int64_t work = std::int64_t(rows) * cols;
    if (parallel_enabled() && work >= kParallelMinWork)
        softmax_rows_omp(X, Y, rows, cols);
    else
        softmax_rows_serial(X, Y, rows, cols);
}

// ---------------------------------------------------------------------------
// Y = X * W + b applied row-wise (b may be null).

template <typename T>
void linear(const T* X, const T* W, const T* b, T* Y, int rows, int in,
            int out) {
    matmul(X, W, Y, rows, in, out);
    if (b) {
        for (int i = 0; i < rows; ++i) {
            T* y = Y + static_cast<std::int64_t>(i) * out;
            for (int j = 0; j < out; ++j) y[j] += b[j];
        }
    }
}

}  // namespace tbwm::kernels
