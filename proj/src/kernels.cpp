#include "vlpt/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <omp.h>

namespace vlpt::kern {

namespace {
Backend g_backend = Backend::openmp;

template <class T>
T phi_pdf(T x) {
    return std::exp(T(-0.5) * x * x) * T(0.3989422804014326779399460599343);
}

// Dot product with eight independent accumulator lanes. The lane layout is
// fixed, so results are identical regardless of backend or thread count,
// and the independent lanes vectorize without -ffast-math.
template <class T>
T dot8(const T* a, const T* b, int64_t n) {
    T s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
    int64_t k = 0;
    for (; k + 8 <= n; k += 8) {
        s0 += a[k + 0] * b[k + 0];
        s1 += a[k + 1] * b[k + 1];
        s2 += a[k + 2] * b[k + 2];
        s3 += a[k + 3] * b[k + 3];
        s4 += a[k + 4] * b[k + 4];
        s5 += a[k + 5] * b[k + 5];
        s6 += a[k + 6] * b[k + 6];
        s7 += a[k + 7] * b[k + 7];
    }
    T tail = 0;
    for (; k < n; ++k) tail += a[k] * b[k];
    return ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7)) + tail;
}
} // namespace

Backend backend() { return g_backend; }
void set_backend(Backend b) { g_backend = b; }
int max_threads() { return omp_get_max_threads(); }

// ===========================================================================
// Serial reference implementations. Plain loops, one output element at a
// time, reduction order fixed. The openmp variants below must keep the same
// per-element accumulation order so both backends agree bitwise.
// ===========================================================================
namespace ref {

// One output row with A already in row-major [M,K] layout. For tb the B rows
// are contiguous, so each element is a dot product; otherwise accumulate
// axpy-style over contiguous B rows. Per-element reduction order is fixed.
template <class T>
void gemm_row(bool tb, int64_t N, int64_t K, const T* A, const T* B, T* C, bool accumulate,
              int64_t m) {
    T* c = C + m * N;
    const T* a = A + m * K;
    if (tb) {
        for (int64_t n = 0; n < N; ++n) {
            const T s = dot8(a, B + n * K, K);
            c[n] = accumulate ? c[n] + s : s;
        }
        return;
    }
    if (!accumulate) std::fill(c, c + N, T(0));
    for (int64_t k = 0; k < K; ++k) {
        const T av = a[k];
        const T* b = B + k * N;
        for (int64_t n = 0; n < N; ++n) c[n] += av * b[n];
    }
}

// Materialize op(A) row-major once; identical arithmetic, friendlier strides.
template <class T>
void transpose_into(const T* A, int64_t M, int64_t K, std::vector<T>& at) {
    at.resize(static_cast<size_t>(M * K));
    for (int64_t m = 0; m < M; ++m) {
        for (int64_t k = 0; k < K; ++k) at[static_cast<size_t>(m * K + k)] = A[k * M + m];
    }
}

template <class T>
void gemm(bool ta, bool tb, int64_t M, int64_t N, int64_t K,
          const T* A, const T* B, T* C, bool accumulate) {
    std::vector<T> at;
    if (ta) {
        transpose_into(A, M, K, at);
        A = at.data();
    }
    for (int64_t m = 0; m < M; ++m) {
        gemm_row(tb, N, K, A, B, C, accumulate, m);
    }
}

template <class T>
void gemm_batched(bool ta, bool tb, int64_t batch, int64_t M, int64_t N, int64_t K,
                  const T* A, int64_t strideA, const T* B, int64_t strideB,
                  T* C, int64_t strideC, bool accumulate) {
    for (int64_t i = 0; i < batch; ++i) {
        gemm(ta, tb, M, N, K, A + i * strideA, B + i * strideB, C + i * strideC, accumulate);
    }
}

template <class T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W,
            int kh, int kw, int stride, int pad,
            int64_t Ho, int64_t Wo, T* cols) {
    const int64_t rows = C * kh * kw;
    for (int64_t r = 0; r < rows; ++r) {
        const int64_t c = r / (kh * kw);
        const int i = static_cast<int>((r / kw) % kh);
        const int j = static_cast<int>(r % kw);
        T* out = cols + r * (Ho * Wo);
        for (int64_t oh = 0; oh < Ho; ++oh) {
            const int64_t ih = oh * stride - pad + i;
            for (int64_t ow = 0; ow < Wo; ++ow) {
                const int64_t iw = ow * stride - pad + j;
                const bool in = ih >= 0 && ih < H && iw >= 0 && iw < W;
                out[oh * Wo + ow] = in ? x[(c * H + ih) * W + iw] : T(0);
            }
        }
    }
}

template <class T>
void col2im(const T* cols, int64_t C, int64_t H, int64_t W,
            int kh, int kw, int stride, int pad,
            int64_t Ho, int64_t Wo, T* x) {
    for (int64_t c = 0; c < C; ++c) {
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j) {
                const int64_t r = (c * kh + i) * kw + j;
                const T* in = cols + r * (Ho * Wo);
                for (int64_t oh = 0; oh < Ho; ++oh) {
                    const int64_t ih = oh * stride - pad + i;
                    if (ih < 0 || ih >= H) continue;
                    for (int64_t ow = 0; ow < Wo; ++ow) {
                        const int64_t iw = ow * stride - pad + j;
                        if (iw < 0 || iw >= W) continue;
                        x[(c * H + ih) * W + iw] += in[oh * Wo + ow];
                    }
                }
            }
        }
    }
}

template <class T>
void relu(int64_t n, const T* x, T* y) {
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

template <class T>
void relu_backward(int64_t n, const T* x, const T* dy, T* dx) {
    for (int64_t i = 0; i < n; ++i) dx[i] += x[i] > T(0) ? dy[i] : T(0);
}

template <class T>
void gelu(int64_t n, const T* x, T* y) {
    for (int64_t i = 0; i < n; ++i) {
        y[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * T(0.7071067811865475244008443621048)));
    }
}

template <class T>
void gelu_backward(int64_t n, const T* x, const T* dy, T* dx) {
    for (int64_t i = 0; i < n; ++i) {
        const T cdf = T(0.5) * (T(1) + std::erf(x[i] * T(0.7071067811865475244008443621048)));
        dx[i] += dy[i] * (cdf + x[i] * phi_pdf(x[i]));
    }
}

template <class T>
void softmax_rows(int64_t rows, int64_t cols, const T* x, T* y) {
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        T* yr = y + r * cols;
        T mx = xr[0];
        for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        T sum = T(0);
        for (int64_t c = 0; c < cols; ++c) {
            yr[c] = std::exp(xr[c] - mx);
            sum += yr[c];
        }
        const T inv = T(1) / sum;
        for (int64_t c = 0; c < cols; ++c) yr[c] *= inv;
    }
}

template <class T>
void softmax_rows_backward(int64_t rows, int64_t cols, const T* y, const T* dy, T* dx) {
    for (int64_t r = 0; r < rows; ++r) {
        const T* yr = y + r * cols;
        const T* dyr = dy + r * cols;
        T* dxr = dx + r * cols;
        T s = T(0);
        for (int64_t c = 0; c < cols; ++c) s += dyr[c] * yr[c];
        for (int64_t c = 0; c < cols; ++c) dxr[c] += (dyr[c] - s) * yr[c];
    }
}

template <class T>
void layer_norm(int64_t rows, int64_t cols, const T* x, const T* gamma, const T* beta,
                T eps, T* y, T* mean, T* rstd) {
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        T* yr = y + r * cols;
        T mu = T(0);
        for (int64_t c = 0; c < cols; ++c) mu += xr[c];
        mu /= T(cols);
        T var = T(0);
        for (int64_t c = 0; c < cols; ++c) {
            const T d = xr[c] - mu;
            var += d * d;
        }
        var /= T(cols);
        const T rs = T(1) / std::sqrt(var + eps);
        mean[r] = mu;
        rstd[r] = rs;
        for (int64_t c = 0; c < cols; ++c) {
            yr[c] = (xr[c] - mu) * rs * gamma[c] + beta[c];
        }
    }
}

template <class T>
void layer_norm_backward(int64_t rows, int64_t cols, const T* x, const T* gamma,
                         const T* mean, const T* rstd, const T* dy,
                         T* dx, T* dgamma, T* dbeta) {
    // param grads: reduce over rows per column, fixed order
    for (int64_t c = 0; c < cols; ++c) {
        T dg = T(0), db = T(0);
        for (int64_t r = 0; r < rows; ++r) {
            const T xhat = (x[r * cols + c] - mean[r]) * rstd[r];
            dg += dy[r * cols + c] * xhat;
            db += dy[r * cols + c];
        }
        dgamma[c] += dg;
        dbeta[c] += db;
    }
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        const T* dyr = dy + r * cols;
        T* dxr = dx + r * cols;
        const T mu = mean[r], rs = rstd[r];
        T a = T(0), b = T(0);
        for (int64_t c = 0; c < cols; ++c) {
            const T dyh = dyr[c] * gamma[c];
            const T xhat = (xr[c] - mu) * rs;
            a += dyh;
            b += dyh * xhat;
        }
        a /= T(cols);
        b /= T(cols);
        for (int64_t c = 0; c < cols; ++c) {
            const T dyh = dyr[c] * gamma[c];
            const T xhat = (xr[c] - mu) * rs;
            dxr[c] += rs * (dyh - a - xhat * b);
        }
    }
}

template <class T>
void group_norm(int64_t N, int64_t C, int64_t H, int64_t W, int64_t groups,
                const T* x, const T* gamma, const T* beta, T eps,
                T* y, T* mean, T* rstd) {
    const int64_t cg = C / groups;
    const int64_t hw = H * W;
    const int64_t slab = cg * hw;
    for (int64_t ng = 0; ng < N * groups; ++ng) {
        const int64_t n = ng / groups;
        const int64_t g = ng % groups;
        const T* xs = x + (n * C + g * cg) * hw;
        T mu = T(0);
        for (int64_t i = 0; i < slab; ++i) mu += xs[i];
        mu /= T(slab);
        T var = T(0);
        for (int64_t i = 0; i < slab; ++i) {
            const T d = xs[i] - mu;
            var += d * d;
        }
        var /= T(slab);
        const T rs = T(1) / std::sqrt(var + eps);
        mean[ng] = mu;
        rstd[ng] = rs;
        T* ys = y + (n * C + g * cg) * hw;
        for (int64_t cc = 0; cc < cg; ++cc) {
            const T ga = gamma[g * cg + cc], be = beta[g * cg + cc];
            for (int64_t i = 0; i < hw; ++i) {
                ys[cc * hw + i] = (xs[cc * hw + i] - mu) * rs * ga + be;
            }
        }
    }
}

template <class T>
void group_norm_backward(int64_t N, int64_t C, int64_t H, int64_t W, int64_t groups,
                         const T* x, const T* gamma, const T* mean, const T* rstd,
                         const T* dy, T* dx, T* dgamma, T* dbeta) {
    const int64_t cg = C / groups;
    const int64_t hw = H * W;
    const int64_t slab = cg * hw;
    for (int64_t c = 0; c < C; ++c) {
        const int64_t g = c / cg;
        T dg = T(0), db = T(0);
        for (int64_t n = 0; n < N; ++n) {
            const T mu = mean[n * groups + g], rs = rstd[n * groups + g];
            const T* xs = x + (n * C + c) * hw;
            const T* dys = dy + (n * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) {
                dg += dys[i] * (xs[i] - mu) * rs;
                db += dys[i];
            }
        }
        dgamma[c] += dg;
        dbeta[c] += db;
    }
    for (int64_t ng = 0; ng < N * groups; ++ng) {
        const int64_t n = ng / groups;
        const int64_t g = ng % groups;
        const T mu = mean[ng], rs = rstd[ng];
        const T* xs = x + (n * C + g * cg) * hw;
        const T* dys = dy + (n * C + g * cg) * hw;
        T* dxs = dx + (n * C + g * cg) * hw;
        T a = T(0), b = T(0);
        for (int64_t cc = 0; cc < cg; ++cc) {
            const T ga = gamma[g * cg + cc];
            for (int64_t i = 0; i < hw; ++i) {
                const T dyh = dys[cc * hw + i] * ga;
                a += dyh;
                b += dyh * (xs[cc * hw + i] - mu) * rs;
            }
        }
        a /= T(slab);
        b /= T(slab);
        for (int64_t cc = 0; cc < cg; ++cc) {
            const T ga = gamma[g * cg + cc];
            for (int64_t i = 0; i < hw; ++i) {
                const T dyh = dys[cc * hw + i] * ga;
                const T xhat = (xs[cc * hw + i] - mu) * rs;
                dxs[cc * hw + i] += rs * (dyh - a - xhat * b);
            }
        }
    }
}

template <class T>
void bilinear_resize(int64_t N, int64_t C, int64_t H, int64_t W,
                     int64_t Ho, int64_t Wo, const T* x, T* y) {
    const double sh = double(H) / double(Ho);
    const double sw = double(W) / double(Wo);
    for (int64_t p = 0; p < N * C; ++p) {
        const T* xp = x + p * H * W;
        T* yp = y + p * Ho * Wo;
        for (int64_t oh = 0; oh < Ho; ++oh) {
            double fy = (double(oh) + 0.5) * sh - 0.5;
            fy = std::max(0.0, std::min(fy, double(H - 1)));
            const int64_t y0 = static_cast<int64_t>(fy);
            const int64_t y1 = std::min(y0 + 1, H - 1);
            const T wy = T(fy - double(y0));
            for (int64_t ow = 0; ow < Wo; ++ow) {
                double fx = (double(ow) + 0.5) * sw - 0.5;
                fx = std::max(0.0, std::min(fx, double(W - 1)));
                const int64_t x0 = static_cast<int64_t>(fx);
                const int64_t x1 = std::min(x0 + 1, W - 1);
                const T wx = T(fx - double(x0));
                const T v00 = xp[y0 * W + x0], v01 = xp[y0 * W + x1];
                const T v10 = xp[y1 * W + x0], v11 = xp[y1 * W + x1];
                const T top = v00 + (v01 - v00) * wx;
                const T bot = v10 + (v11 - v10) * wx;
                yp[oh * Wo + ow] = top + (bot - top) * wy;
            }
        }
    }
}

template <class T>
void bilinear_resize_backward(int64_t N, int64_t C, int64_t H, int64_t W,
                              int64_t Ho, int64_t Wo, const T* dy, T* dx) {
    const double sh = double(H) / double(Ho);
    const double sw = double(W) / double(Wo);
    for (int64_t p = 0; p < N * C; ++p) {
        const T* dyp = dy + p * Ho * Wo;
        T* dxp = dx + p * H * W;
        for (int64_t oh = 0; oh < Ho; ++oh) {
            double fy = (double(oh) + 0.5) * sh - 0.5;
            fy = std::max(0.0, std::min(fy, double(H - 1)));
            const int64_t y0 = static_cast<int64_t>(fy);
            const int64_t y1 = std::min(y0 + 1, H - 1);
            const T wy = T(fy - double(y0));
            for (int64_t ow = 0; ow < Wo; ++ow) {
                double fx = (double(ow) + 0.5) * sw - 0.5;
                fx = std::max(0.0, std::min(fx, double(W - 1)));
                const int64_t x0 = static_cast<int64_t>(fx);
                const int64_t x1 = std::min(x0 + 1, W - 1);
                const T wx = T(fx - double(x0));
                const T g = dyp[oh * Wo + ow];
                dxp[y0 * W + x0] += g * (T(1) - wy) * (T(1) - wx);
                dxp[y0 * W + x1] += g * (T(1) - wy) * wx;
                dxp[y1 * W + x0] += g * wy * (T(1) - wx);
                dxp[y1 * W + x1] += g * wy * wx;
            }
        }
    }
}

template <class T>
void avgpool2x2(int64_t N, int64_t C, int64_t H, int64_t W, const T* x, T* y) {
    const int64_t Ho = H / 2, Wo = W / 2;
    for (int64_t p = 0; p < N * C; ++p) {
        const T* xp = x + p * H * W;
        T* yp = y + p * Ho * Wo;
        for (int64_t oh = 0; oh < Ho; ++oh) {
            for (int64_t ow = 0; ow < Wo; ++ow) {
                const int64_t ih = oh * 2, iw = ow * 2;
                yp[oh * Wo + ow] = (xp[ih * W + iw] + xp[ih * W + iw + 1] +
                                    xp[(ih + 1) * W + iw] + xp[(ih + 1) * W + iw + 1]) *
                                   T(0.25);
            }
        }
    }
}

template <class T>
void avgpool2x2_backward(int64_t N, int64_t C, int64_t H, int64_t W, const T* dy, T* dx) {
    const int64_t Ho = H / 2, Wo = W / 2;
    for (int64_t p = 0; p < N * C; ++p) {
        const T* dyp = dy + p * Ho * Wo;
        T* dxp = dx + p * H * W;
        for (int64_t oh = 0; oh < Ho; ++oh) {
            for (int64_t ow = 0; ow < Wo; ++ow) {
                const T g = dyp[oh * Wo + ow] * T(0.25);
                const int64_t ih = oh * 2, iw = ow * 2;
                dxp[ih * W + iw] += g;
                dxp[ih * W + iw + 1] += g;
                dxp[(ih + 1) * W + iw] += g;
                dxp[(ih + 1) * W + iw + 1] += g;
            }
        }
    }
}

template <class T>
void gather_rows(int64_t n, int64_t dim, const T* table, const int32_t* ids, T* y) {
    for (int64_t i = 0; i < n; ++i) {
        const T* src = table + int64_t(ids[i]) * dim;
        std::copy(src, src + dim, y + i * dim);
    }
}

template <class T>
void scatter_add_rows(int64_t n, int64_t dim, const T* dy, const int32_t* ids, T* dtable) {
    for (int64_t c = 0; c < dim; ++c) {
        for (int64_t i = 0; i < n; ++i) {
            dtable[int64_t(ids[i]) * dim + c] += dy[i * dim + c];
        }
    }
}

} // namespace ref

// ===========================================================================
// OpenMP implementations. Parallel over independent output slices only; no
// cross-thread accumulation, so the reduction order matches ref:: exactly.
// ===========================================================================
namespace par {

template <class T>
void gemm(bool ta, bool tb, int64_t M, int64_t N, int64_t K,
          const T* A, const T* B, T* C, bool accumulate) {
    std::vector<T> at;
    if (ta) {
        ref::transpose_into(A, M, K, at);
        A = at.data();
    }
#pragma omp parallel for schedule(static)
    for (int64_t m = 0; m < M; ++m) {
        ref::gemm_row(tb, N, K, A, B, C, accumulate, m);
    }
}

template <class T>
void gemm_batched(bool ta, bool tb, int64_t batch, int64_t M, int64_t N, int64_t K,
                  const T* A, int64_t strideA, const T* B, int64_t strideB,
                  T* C, int64_t strideC, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < batch; ++i) {
        ref::gemm(ta, tb, M, N, K, A + i * strideA, B + i * strideB, C + i * strideC, accumulate);
    }
}

template <class T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W,
            int kh, int kw, int stride, int pad,
            int64_t Ho, int64_t Wo, T* cols) {
    const int64_t rows = C * kh * kw;
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        const int64_t c = r / (kh * kw);
        const int i = static_cast<int>((r / kw) % kh);
        const int j = static_cast<int>(r % kw);
        T* out = cols + r * (Ho * Wo);
        for (int64_t oh = 0; oh < Ho; ++oh) {
            const int64_t ih = oh * stride - pad + i;
            for (int64_t ow = 0; ow < Wo; ++ow) {
                const int64_t iw = ow * stride - pad + j;
                const bool in = ih >= 0 && ih < H && iw >= 0 && iw < W;
                out[oh * Wo + ow] = in ? x[(c * H + ih) * W + iw] : T(0);
            }
        }
    }
}

template <class T>
void col2im(const T* cols, int64_t C, int64_t H, int64_t W,
            int kh, int kw, int stride, int pad,
            int64_t Ho, int64_t Wo, T* x) {
    // channels write disjoint planes
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < C; ++c) {
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j) {
                const int64_t r = (c * kh + i) * kw + j;
                const T* in = cols + r * (Ho * Wo);
                for (int64_t oh = 0; oh < Ho; ++oh) {
                    const int64_t ih = oh * stride - pad + i;
                    if (ih < 0 || ih >= H) continue;
                    for (int64_t ow = 0; ow < Wo; ++ow) {
                        const int64_t iw = ow * stride - pad + j;
                        if (iw < 0 || iw >= W) continue;
                        x[(c * H + ih) * W + iw] += in[oh * Wo + ow];
                    }
                }
            }
        }
    }
}

template <class T>
void relu(int64_t n, const T* x, T* y) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

template <class T>
void relu_backward(int64_t n, const T* x, const T* dy, T* dx) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) dx[i] += x[i] > T(0) ? dy[i] : T(0);
}

template <class T>
void gelu(int64_t n, const T* x, T* y) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        y[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * T(0.7071067811865475244008443621048)));
    }
}

template <class T>
void gelu_backward(int64_t n, const T* x, const T* dy, T* dx) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        const T cdf = T(0.5) * (T(1) + std::erf(x[i] * T(0.7071067811865475244008443621048)));
        dx[i] += dy[i] * (cdf + x[i] * phi_pdf(x[i]));
    }
}

template <class T>
void softmax_rows(int64_t rows, int64_t cols, const T* x, T* y) {
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        ref::softmax_rows(1, cols, x + r * cols, y + r * cols);
    }
}

template <class T>
void softmax_rows_backward(int64_t rows, int64_t cols, const T* y, const T* dy, T* dx) {
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        ref::softmax_rows_backward(1, cols, y + r * cols, dy + r * cols, dx + r * cols);
    }
}

template <class T>
void layer_norm(int64_t rows, int64_t cols, const T* x, const T* gamma, const T* beta,
                T eps, T* y, T* mean, T* rstd) {
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        ref::layer_norm(1, cols, x + r * cols, gamma, beta, eps, y + r * cols, mean + r, rstd + r);
    }
}

template <class T>
void layer_norm_backward(int64_t rows, int64_t cols, const T* x, const T* gamma,
                         const T* mean, const T* rstd, const T* dy,
                         T* dx, T* dgamma, T* dbeta) {
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < cols; ++c) {
        T dg = T(0), db = T(0);
        for (int64_t r = 0; r < rows; ++r) {
            const T xhat = (x[r * cols + c] - mean[r]) * rstd[r];
            dg += dy[r * cols + c] * xhat;
            db += dy[r * cols + c];
        }
        dgamma[c] += dg;
        dbeta[c] += db;
    }
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x + r * cols;
        const T* dyr = dy + r * cols;
        T* dxr = dx + r * cols;
        const T mu = mean[r], rs = rstd[r];
        T a = T(0), b = T(0);
        for (int64_t c = 0; c < cols; ++c) {
            const T dyh = dyr[c] * gamma[c];
            const T xhat = (xr[c] - mu) * rs;
            a += dyh;
            b += dyh * xhat;
        }
        a /= T(cols);
        b /= T(cols);
        for (int64_t c = 0; c < cols; ++c) {
            const T dyh = dyr[c] * gamma[c];
            const T xhat = (xr[c] - mu) * rs;
            dxr[c] += rs * (dyh - a - xhat * b);
        }
    }
}

template <class T>
void group_norm(int64_t N, int64_t C, int64_t H, int64_t W, int64_t groups,
                const T* x, const T* gamma, const T* beta, T eps,
                T* y, T* mean, T* rstd) {
    const int64_t cg = C / groups;
    const int64_t hw = H * W;
#pragma omp parallel for schedule(static)
    for (int64_t ng = 0; ng < N * groups; ++ng) {
        const int64_t n = ng / groups;
        const int64_t g = ng % groups;
        const int64_t off = (n * C + g * cg) * hw;
        const T* xs = x + off;
        T mu = T(0);
        for (int64_t i = 0; i < cg * hw; ++i) mu += xs[i];
        mu /= T(cg * hw);
        T var = T(0);
        for (int64_t i = 0; i < cg * hw; ++i) {
            const T d = xs[i] - mu;
            var += d * d;
        }
        var /= T(cg * hw);
        const T rs = T(1) / std::sqrt(var + eps);
        mean[ng] = mu;
        rstd[ng] = rs;
        T* ys = y + off;
        for (int64_t cc = 0; cc < cg; ++cc) {
            const T ga = gamma[g * cg + cc], be = beta[g * cg + cc];
            for (int64_t i = 0; i < hw; ++i) {
                ys[cc * hw + i] = (xs[cc * hw + i] - mu) * rs * ga + be;
            }
        }
    }
}

template <class T>
void group_norm_backward(int64_t N, int64_t C, int64_t H, int64_t W, int64_t groups,
                         const T* x, const T* gamma, const T* mean, const T* rstd,
                         const T* dy, T* dx, T* dgamma, T* dbeta) {
    const int64_t cg = C / groups;
    const int64_t hw = H * W;
    const int64_t slab = cg * hw;
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < C; ++c) {
        const int64_t g = c / cg;
        T dg = T(0), db = T(0);
        for (int64_t n = 0; n < N; ++n) {
            const T mu = mean[n * groups + g], rs = rstd[n * groups + g];
            const T* xs = x + (n * C + c) * hw;
            const T* dys = dy + (n * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) {
                dg += dys[i] * (xs[i] - mu) * rs;
                db += dys[i];
            }
        }
        dgamma[c] += dg;
        dbeta[c] += db;
    }
#pragma omp parallel for schedule(static)
    for (int64_t ng = 0; ng < N * groups; ++ng) {
        const int64_t n = ng / groups;
        const int64_t g = ng % groups;
        const int64_t off = (n * C + g * cg) * hw;
        const T mu = mean[ng], rs = rstd[ng];
        const T* xs = x + off;
        const T* dys = dy + off;
        T* dxs = dx + off;
        T a = T(0), b = T(0);
        for (int64_t cc = 0; cc < cg; ++cc) {
            const T ga = gamma[g * cg + cc];
            for (int64_t i = 0; i < hw; ++i) {
                const T dyh = dys[cc * hw + i] * ga;
                a += dyh;
                b += dyh * (xs[cc * hw + i] - mu) * rs;
            }
        }
        a /= T(slab);
        b /= T(slab);
        for (int64_t cc = 0; cc < cg; ++cc) {
            const T ga = gamma[g * cg + cc];
            for (int64_t i = 0; i < hw; ++i) {
                const T dyh = dys[cc * hw + i] * ga;
                const T xhat = (xs[cc * hw + i] - mu) * rs;
                dxs[cc * hw + i] += rs * (dyh - a - xhat * b);
            }
        }
    }
}

template <class T>
void bilinear_resize(int64_t N, int64_t C, int64_t H, int64_t W,
                     int64_t Ho, int64_t Wo, const T* x, T* y) {
#pragma omp parallel for schedule(static)
    for (int64_t p = 0; p < N * C; ++p) {
        ref::bilinear_resize(1, 1, H, W, Ho, Wo, x + p * H * W, y + p * Ho * Wo);
    }
}

template <class T>
void bilinear_resize_backward(int64_t N, int64_t C, int64_t H, int64_t W,
                              int64_t Ho, int64_t Wo, const T* dy, T* dx) {
#pragma omp parallel for schedule(static)
    for (int64_t p = 0; p < N * C; ++p) {
        ref::bilinear_resize_backward(1, 1, H, W, Ho, Wo, dy + p * Ho * Wo, dx + p * H * W);
    }
}

template <class T>
void avgpool2x2(int64_t N, int64_t C, int64_t H, int64_t W, const T* x, T* y) {
#pragma omp parallel for schedule(static)
    for (int64_t p = 0; p < N * C; ++p) {
        ref::avgpool2x2(1, 1, H, W, x + p * H * W, y + p * (H / 2) * (W / 2));
    }
}

template <class T>
void avgpool2x2_backward(int64_t N, int64_t C, int64_t H, int64_t W, const T* dy, T* dx) {
#pragma omp parallel for schedule(static)
    for (int64_t p = 0; p < N * C; ++p) {
        ref::avgpool2x2_backward(1, 1, H, W, dy + p * (H / 2) * (W / 2), dx + p * H * W);
    }
}

template <class T>
void gather_rows(int64_t n, int64_t dim, const T* table, const int32_t* ids, T* y) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        const T* src = table + int64_t(ids[i]) * dim;
        std::copy(src, src + dim, y + i * dim);
    }
}

template <class T>
void scatter_add_rows(int64_t n, int64_t dim, const T* dy, const int32_t* ids, T* dtable) {
    // ids may repeat; columns are independent
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < dim; ++c) {
        for (int64_t i = 0; i < n; ++i) {
            dtable[int64_t(ids[i]) * dim + c] += dy[i * dim + c];
        }
    }
}

} // namespace par

// ------------------------------------------------------------- dispatch ----

#define VLPT_DISPATCH(fn, ...)                         \
    do {                                               \
        if (g_backend == Backend::serial)              \
            ref::fn(__VA_ARGS__);                      \
        else                                           \
            par::fn(__VA_ARGS__);                      \
    } while (0)

template <class T>
void gemm(bool ta, bool tb, int64_t M, int64_t N, int64_t K,
          const T* A, const T* B, T* C, bool accumulate) {
    VLPT_DISPATCH(gemm, ta, tb, M, N, K, A, B, C, accumulate);
}

template <class T>
void gemm_batched(bool ta, bool tb, int64_t batch, int64_t M, int64_t N, int64_t K,
                  const T* A, int64_t strideA, const T* B, int64_t strideB,
                  T* C, int64_t strideC, bool accumulate) {
    VLPT_DISPATCH(gemm_batched, ta, tb, batch, M, N, K, A, strideA, B, strideB, C, strideC,
                  accumulate);
}

template <class T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int kh, int kw, int stride, int pad,
            int64_t Ho, int64_t Wo, T* cols) {
    VLPT_DISPATCH(im2col, x, C, H, W, kh, kw, stride, pad, Ho, Wo, cols);
}

template <class T>
void col2im(const T* cols, int64_t C, int64_t H, int64_t W, int kh, int kw, int stride, int pad,
            int64_t Ho, int64_t Wo, T* x) {
    VLPT_DISPATCH(col2im, cols, C, H, W, kh, kw, stride, pad, Ho, Wo, x);
}

template <class T> void relu(int64_t n, const T* x, T* y) { VLPT_DISPATCH(relu, n, x, y); }
template <class T> void relu_backward(int64_t n, const T* x, const T* dy, T* dx) {
    VLPT_DISPATCH(relu_backward, n, x, dy, dx);
}
template <class T> void gelu(int64_t n, const T* x, T* y) { VLPT_DISPATCH(gelu, n, x, y); }
template <class T> void gelu_backward(int64_t n, const T* x, const T* dy, T* dx) {
    VLPT_DISPATCH(gelu_backward, n, x, dy, dx);
}

template <class T>
void softmax_rows(int64_t rows, int64_t cols, const T* x, T* y) {
    VLPT_DISPATCH(softmax_rows, rows, cols, x, y);
}

template <class T>
void softmax_rows_backward(int64_t rows, int64_t cols, const T* y, const T* dy, T* dx) {
    VLPT_DISPATCH(softmax_rows_backward, rows, cols, y, dy, dx);
}

template <class T>
void layer_norm(int64_t rows, int64_t cols, const T* x, const T* gamma, const T* beta,
                T eps, T* y, T* mean, T* rstd) {
    VLPT_DISPATCH(layer_norm, rows, cols, x, gamma, beta, eps, y, mean, rstd);
}

template <class T>
void layer_norm_backward(int64_t rows, int64_t cols, const T* x, const T* gamma,
                         const T* mean, const T* rstd, const T* dy,
                         T* dx, T* dgamma, T* dbeta) {
    VLPT_DISPATCH(layer_norm_backward, rows, cols, x, gamma, mean, rstd, dy, dx, dgamma, dbeta);
}

template <class T>
void group_norm(int64_t N, int64_t C, int64_t H, int64_t W, int64_t groups,
                const T* x, const T* gamma, const T* beta, T eps,
                T* y, T* mean, T* rstd) {
    VLPT_DISPATCH(group_norm, N, C, H, W, groups, x, gamma, beta, eps, y, mean, rstd);
}

template <class T>
void group_norm_backward(int64_t N, int64_t C, int64_t H, int64_t W, int64_t groups,
                         const T* x, const T* gamma, const T* mean, const T* rstd,
                         const T* dy, T* dx, T* dgamma, T* dbeta) {
    VLPT_DISPATCH(group_norm_backward, N, C, H, W, groups, x, gamma, mean, rstd, dy, dx, dgamma, dbeta);
}

template <class T>
void bilinear_resize(int64_t N, int64_t C, int64_t H, int64_t W,
                     int64_t Ho, int64_t Wo, const T* x, T* y) {
    VLPT_DISPATCH(bilinear_resize, N, C, H, W, Ho, Wo, x, y);
}

template <class T>
void bilinear_resize_backward(int64_t N, int64_t C, int64_t H, int64_t W,
                              int64_t Ho, int64_t Wo, const T* dy, T* dx) {
    VLPT_DISPATCH(bilinear_resize_backward, N, C, H, W, Ho, Wo, dy, dx);
}

template <class T>
void avgpool2x2(int64_t N, int64_t C, int64_t H, int64_t W, const T* x, T* y) {
    VLPT_DISPATCH(avgpool2x2, N, C, H, W, x, y);
}

template <class T>
void avgpool2x2_backward(int64_t N, int64_t C, int64_t H, int64_t W, const T* dy, T* dx) {
    VLPT_DISPATCH(avgpool2x2_backward, N, C, H, W, dy, dx);
}

template <class T>
void gather_rows(int64_t n, int64_t dim, const T* table, const int32_t* ids, T* y) {
    VLPT_DISPATCH(gather_rows, n, dim, table, ids, y);
}

template <class T>
void scatter_add_rows(int64_t n, int64_t dim, const T* dy, const int32_t* ids, T* dtable) {
    VLPT_DISPATCH(scatter_add_rows, n, dim, dy, ids, dtable);
}

#undef VLPT_DISPATCH

// explicit instantiations for float and double
#define VLPT_INSTANTIATE(T)                                                                        \
    template void gemm<T>(bool, bool, int64_t, int64_t, int64_t, const T*, const T*, T*, bool);    \
    template void gemm_batched<T>(bool, bool, int64_t, int64_t, int64_t, int64_t, const T*,        \
                                  int64_t, const T*, int64_t, T*, int64_t, bool);                  \
    template void im2col<T>(const T*, int64_t, int64_t, int64_t, int, int, int, int, int64_t,      \
                            int64_t, T*);                                                          \
    template void col2im<T>(const T*, int64_t, int64_t, int64_t, int, int, int, int, int64_t,      \
                            int64_t, T*);                                                          \
    template void relu<T>(int64_t, const T*, T*);                                                  \
    template void relu_backward<T>(int64_t, const T*, const T*, T*);                               \
    template void gelu<T>(int64_t, const T*, T*);                                                  \
    template void gelu_backward<T>(int64_t, const T*, const T*, T*);                               \
    template void softmax_rows<T>(int64_t, int64_t, const T*, T*);                                 \
    template void softmax_rows_backward<T>(int64_t, int64_t, const T*, const T*, T*);              \
    template void layer_norm<T>(int64_t, int64_t, const T*, const T*, const T*, T, T*, T*, T*);    \
    template void layer_norm_backward<T>(int64_t, int64_t, const T*, const T*, const T*,           \
                                         const T*, const T*, T*, T*, T*);                          \
    template void group_norm<T>(int64_t, int64_t, int64_t, int64_t, int64_t, const T*, const T*,   \
                                const T*, T, T*, T*, T*);                                          \
    template void group_norm_backward<T>(int64_t, int64_t, int64_t, int64_t, int64_t, const T*,    \
                                         const T*, const T*, const T*, const T*, T*, T*, T*);      \
    template void bilinear_resize<T>(int64_t, int64_t, int64_t, int64_t, int64_t, int64_t,         \
                                     const T*, T*);                                                \
    template void bilinear_resize_backward<T>(int64_t, int64_t, int64_t, int64_t, int64_t,         \
                                              int64_t, const T*, T*);                              \
    template void avgpool2x2<T>(int64_t, int64_t, int64_t, int64_t, const T*, T*);                 \
    template void avgpool2x2_backward<T>(int64_t, int64_t, int64_t, int64_t, const T*, T*);        \
    template void gather_rows<T>(int64_t, int64_t, const T*, const int32_t*, T*);                  \
    template void scatter_add_rows<T>(int64_t, int64_t, const T*, const int32_t*, T*);

VLPT_INSTANTIATE(float)
VLPT_INSTANTIATE(double)

#undef VLPT_INSTANTIATE

} // namespace vlpt::kern
