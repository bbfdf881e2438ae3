// Dense row-major matrix plus the handful of kernels the LSTM needs.
// Parallel loops split output rows statically, so results are bit-identical
// for any thread count.

#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstring>
#include <vector>

#include "nslm/common.hpp"

namespace nslm {

struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<real> data;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, real(0)) {}

    real* row(int i) { return data.data() + static_cast<std::size_t>(i) * cols; }
    const real* row(int i) const { return data.data() + static_cast<std::size_t>(i) * cols; }

    real& at(int i, int j) { return data[static_cast<std::size_t>(i) * cols + j]; }
    real at(int i, int j) const { return data[static_cast<std::size_t>(i) * cols + j]; }

    std::size_t size() const { return data.size(); }

    void zero() { std::fill(data.begin(), data.end(), real(0)); }

    void resize(int r, int c) {
        rows = r;
        cols = c;
        data.assign(static_cast<std::size_t>(r) * c, real(0));
    }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

// C += A * B. All row-major: A is MxK, B is KxN, C is MxN.
inline void gemm_add(Mat& C, const Mat& A, const Mat& B) {
    assert(A.cols == B.rows && C.rows == A.rows && C.cols == B.cols);
    const int M = A.rows, K = A.cols, N = B.cols;
#pragma omp parallel for schedule(static) if (static_cast<long long>(M) * K * N > 65536)
    for (int i = 0; i < M; ++i) {
        real* c = C.row(i);
        const real* a = A.row(i);
        for (int k = 0; k < K; ++k) {
            const real av = a[k];
            const real* b = B.row(k);
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C = A * B.
inline void gemm_set(Mat& C, const Mat& A, const Mat& B) {
    C.zero();
    gemm_add(C, A, B);
}

inline Mat transposed(const Mat& A) {
    Mat T(A.cols, A.rows);
    for (int i = 0; i < A.rows; ++i) {
        const real* a = A.row(i);
        for (int j = 0; j < A.cols; ++j) T.at(j, i) = a[j];
    }
    return T;
}

// W += scale * x^T y for row vectors x (len m) and y (len n); W is m x n.
inline void add_outer(Mat& W, const real* x, int m, const real* y, int n, real scale) {
    assert(W.rows == m && W.cols == n);
    for (int i = 0; i < m; ++i) {
        real* w = W.row(i);
        const real xv = scale * x[i];
        for (int j = 0; j < n; ++j) w[j] += xv * y[j];
    }
}

inline void axpy(real a, const real* x, real* y, int n) {
    for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

inline real dot(const real* x, const real* y, int n) {
    real s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    int i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += x[i] * y[i];
        s1 += x[i + 1] * y[i + 1];
        s2 += x[i + 2] * y[i + 2];
        s3 += x[i + 3] * y[i + 3];
    }
    for (; i < n; ++i) s0 += x[i] * y[i];
    return ((s0 + s1) + (s2 + s3));
}

// y = x * W + b for a single row vector x (len K); W is KxN.
inline void affine_row(const real* x, const Mat& W, const real* b, real* y) {
    const int K = W.rows, N = W.cols;
    if (b)
        std::memcpy(y, b, sizeof(real) * static_cast<std::size_t>(N));
    else
        std::fill(y, y + N, real(0));
    for (int k = 0; k < K; ++k) {
        const real xv = x[k];
        if (xv == real(0)) continue;
        const real* w = W.row(k);
        for (int j = 0; j < N; ++j) y[j] += xv * w[j];
    }
}

}  // namespace nslm
