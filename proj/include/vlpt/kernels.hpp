#pragma once

#include <cstdint>

namespace vlpt::kern {

/// Which implementation the dispatch functions route to. `serial` is the
/// plain reference used by tests; `openmp` is the parallel default. Both
/// accumulate in the same per-element order, so results are bitwise equal
/// for any thread count.
enum class Backend { serial, openmp };

Backend backend();
void set_backend(Backend b);
int max_threads();

// ---------------------------------------------------------------- gemm ----
// Row-major C[M,N] (+)= op(A) * op(B).
// op(A) is M x K: A itself when !ta (lda = K), transposed K x M storage when ta.
// op(B) is K x N likewise.
template <class T>
void gemm(bool ta, bool tb, int64_t M, int64_t N, int64_t K,
          const T* A, const T* B, T* C, bool accumulate);

// Independent gemms over a leading batch dim with the given element strides.
template <class T>
void gemm_batched(bool ta, bool tb, int64_t batch, int64_t M, int64_t N, int64_t K,
                  const T* A, int64_t strideA, const T* B, int64_t strideB,
                  T* C, int64_t strideC, bool accumulate);

// ------------------------------------------------------------- conv2d -----
// im2col for one image: x [C,H,W] -> cols [C*kh*kw, Ho*Wo].
template <class T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W,
            int kh, int kw, int stride, int pad,
            int64_t Ho, int64_t Wo, T* cols);

// Transpose of im2col; accumulates into x [C,H,W].
template <class T>
void col2im(const T* cols, int64_t C, int64_t H, int64_t W,
            int kh, int kw, int stride, int pad,
            int64_t Ho, int64_t Wo, T* x);

// --------------------------------------------------------- activations ----
template <class T> void relu(int64_t n, const T* x, T* y);
template <class T> void relu_backward(int64_t n, const T* x, const T* dy, T* dx);
template <class T> void gelu(int64_t n, const T* x, T* y);
template <class T> void gelu_backward(int64_t n, const T* x, const T* dy, T* dx);

// ------------------------------------------------------------- softmax ----
// Stable softmax over each row of x [rows, cols].
template <class T> void softmax_rows(int64_t rows, int64_t cols, const T* x, T* y);
// dx = (dy - sum(dy * y)) * y, rowwise. dx may alias dy.
template <class T>
void softmax_rows_backward(int64_t rows, int64_t cols, const T* y, const T* dy, T* dx);

// ---------------------------------------------------------- layer norm ----
// Normalize each row of x [rows, cols], then scale/shift by gamma/beta [cols].
// Saves per-row mean and reciprocal std for the backward pass.
template <class T>
void layer_norm(int64_t rows, int64_t cols, const T* x, const T* gamma, const T* beta,
                T eps, T* y, T* mean, T* rstd);
template <class T>
void layer_norm_backward(int64_t rows, int64_t cols, const T* x, const T* gamma,
                         const T* mean, const T* rstd, const T* dy,
                         T* dx, T* dgamma, T* dbeta);

// ---------------------------------------------------------- group norm ----
// x [N,C,H,W], `groups` divides C. Normalizes over each (n, group) slab.
template <class T>
void group_norm(int64_t N, int64_t C, int64_t H, int64_t W, int64_t groups,
                const T* x, const T* gamma, const T* beta, T eps,
                T* y, T* mean, T* rstd);
template <class T>
void group_norm_backward(int64_t N, int64_t C, int64_t H, int64_t W, int64_t groups,
                         const T* x, const T* gamma, const T* mean, const T* rstd,
                         const T* dy, T* dx, T* dgamma, T* dbeta);

// ------------------------------------------------------------ resizing ----
// Bilinear resize x [N,C,H,W] -> y [N,C,Ho,Wo], align_corners=false convention.
template <class T>
void bilinear_resize(int64_t N, int64_t C, int64_t H, int64_t W,
                     int64_t Ho, int64_t Wo, const T* x, T* y);
template <class T>
void bilinear_resize_backward(int64_t N, int64_t C, int64_t H, int64_t W,
                              int64_t Ho, int64_t Wo, const T* dy, T* dx);

// 2x2 stride-2 average pooling (H, W even).
template <class T>
void avgpool2x2(int64_t N, int64_t C, int64_t H, int64_t W, const T* x, T* y);
template <class T>
void avgpool2x2_backward(int64_t N, int64_t C, int64_t H, int64_t W, const T* dy, T* dx);

// ----------------------------------------------------------- embedding ----
// Gather rows: y[i,:] = table[ids[i],:].
template <class T>
void gather_rows(int64_t n, int64_t dim, const T* table, const int32_t* ids, T* y);
// Scatter-add of dy rows into dtable, deterministic accumulation order.
template <class T>
void scatter_add_rows(int64_t n, int64_t dim, const T* dy, const int32_t* ids, T* dtable);

} // namespace vlpt::kern
