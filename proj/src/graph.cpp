#include "vlpt/graph.hpp"

#include <cmath>
#include <cstring>
#include <memory>

#include "vlpt/kernels.hpp"

namespace vlpt {

namespace {

template <class T>
int64_t last_dim(const TensorT<T>& t) {
    check(!t.shape.empty(), "op requires a non-scalar tensor");
    return t.shape.back();
}

} // namespace

template <class T>
int GraphT<T>::add_node(TensorT<T> value, bool needs_grad, std::function<void(GraphT&)> bwd) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backward = std::move(bwd);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

template <class T>
bool GraphT<T>::track(std::initializer_list<int> parents) const {
    if (!training_) return false;
    for (int p : parents) {
        if (p >= 0 && nodes_[static_cast<size_t>(p)].needs_grad) return true;
    }
    return false;
}

template <class T>
int GraphT<T>::input(TensorT<T> v) {
    return add_node(std::move(v), false, {});
}

template <class T>
int GraphT<T>::param(ParamT<T>& p) {
    if (!training_) return add_node(p.value, false, {});
    ParamT<T>* pp = &p;
    int id = static_cast<int>(nodes_.size());
    return add_node(p.value, true, [id, pp](GraphT& g) {
        const TensorT<T>& gr = g.grad(id);
        check(gr.shape == pp->grad.shape, "param grad shape mismatch: " + pp->name);
        T* dst = pp->grad.ptr();
        const T* src = gr.ptr();
        const int64_t n = gr.numel();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
    });
}

template <class T>
TensorT<T>& GraphT<T>::grad(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.data.empty()) n.grad = TensorT<T>(n.value.shape);
    return n.grad;
}

template <class T>
void GraphT<T>::backward(int loss_id) {
    check(training_, "backward on an evaluation graph");
    check(val(loss_id).numel() == 1, "backward requires a scalar loss");
    grad(loss_id).data[0] = T(1);
    for (int i = loss_id; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (!n.needs_grad || !n.backward || n.grad.data.empty()) continue;
        n.backward(*this);
    }
}

// -------------------------------------------------------------- basic ----

template <class T>
int GraphT<T>::add(int a, int b) {
    const TensorT<T>&A = val(a), &B = val(b);
    check(A.shape == B.shape, "add: shape mismatch " + A.shape_str() + " vs " + B.shape_str());
    TensorT<T> y(A.shape);
    const int64_t n = y.numel();
    const T *pa = A.ptr(), *pb = B.ptr();
    T* py = y.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i];

    if (!track({a, b})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, a, b](GraphT& g) {
        const T* gy = g.grad(id).ptr();
        const int64_t m = g.val(id).numel();
        for (int p : {a, b}) {
            if (!g.needs_grad(p)) continue;
            T* gp = g.grad(p).ptr();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < m; ++i) gp[i] += gy[i];
        }
    });
}

template <class T>
int GraphT<T>::sub(int a, int b) {
    return add(a, scale(b, T(-1)));
}

template <class T>
int GraphT<T>::mul(int a, int b) {
    const TensorT<T>&A = val(a), &B = val(b);
    check(A.shape == B.shape, "mul: shape mismatch");
    TensorT<T> y(A.shape);
    const int64_t n = y.numel();
    const T *pa = A.ptr(), *pb = B.ptr();
    T* py = y.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) py[i] = pa[i] * pb[i];

    if (!track({a, b})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, a, b](GraphT& g) {
        const T* gy = g.grad(id).ptr();
        const int64_t m = g.val(id).numel();
        if (g.needs_grad(a)) {
            T* ga = g.grad(a).ptr();
            const T* pb2 = g.val(b).ptr();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < m; ++i) ga[i] += gy[i] * pb2[i];
        }
        if (g.needs_grad(b)) {
            T* gb = g.grad(b).ptr();
            const T* pa2 = g.val(a).ptr();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < m; ++i) gb[i] += gy[i] * pa2[i];
        }
    });
}

template <class T>
int GraphT<T>::scale(int a, T c) {
    const TensorT<T>& A = val(a);
    TensorT<T> y(A.shape);
    const int64_t n = y.numel();
    const T* pa = A.ptr();
    T* py = y.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) py[i] = pa[i] * c;

    if (!track({a})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, a, c](GraphT& g) {
        const T* gy = g.grad(id).ptr();
        T* ga = g.grad(a).ptr();
        const int64_t m = g.val(id).numel();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < m; ++i) ga[i] += gy[i] * c;
    });
}

template <class T>
int GraphT<T>::add_bias(int x, int b) {
    const TensorT<T>&X = val(x), &B = val(b);
    const int64_t cols = B.numel();
    check(cols > 0 && X.numel() % cols == 0, "add_bias: bias does not divide input");
    const int64_t rows = X.numel() / cols;
    TensorT<T> y(X.shape);
    const T *px = X.ptr(), *pb = B.ptr();
    T* py = y.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t c = 0; c < cols; ++c) py[r * cols + c] = px[r * cols + c] + pb[c];
    }

    if (!track({x, b})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, x, b, rows, cols](GraphT& g) {
        const T* gy = g.grad(id).ptr();
        if (g.needs_grad(x)) {
            T* gx = g.grad(x).ptr();
            const int64_t m = rows * cols;
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < m; ++i) gx[i] += gy[i];
        }
        if (g.needs_grad(b)) {
            T* gb = g.grad(b).ptr();
#pragma omp parallel for schedule(static)
            for (int64_t c = 0; c < cols; ++c) {
                T s = T(0);
                for (int64_t r = 0; r < rows; ++r) s += gy[r * cols + c];
                gb[c] += s;
            }
        }
    });
}

// ------------------------------------------------------------- matmul ----

template <class T>
int GraphT<T>::matmul(int a, int b, bool tb) {
    const TensorT<T>&A = val(a), &B = val(b);
    check(A.ndim() == 2 && B.ndim() == 2, "matmul: expects 2-D");
    const int64_t M = A.dim(0), K = A.dim(1);
    const int64_t N = tb ? B.dim(0) : B.dim(1);
    check((tb ? B.dim(1) : B.dim(0)) == K, "matmul: inner dim mismatch");
    TensorT<T> y({M, N});
    kern::gemm<T>(false, tb, M, N, K, A.ptr(), B.ptr(), y.ptr(), false);

    if (!track({a, b})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, a, b, tb, M, N, K](GraphT& g) {
        const T* dy = g.grad(id).ptr();
        if (g.needs_grad(a)) {
            // dA[M,K] += dY * op(B)^T
            kern::gemm<T>(false, !tb, M, K, N, dy, g.val(b).ptr(), g.grad(a).ptr(), true);
        }
        if (g.needs_grad(b)) {
            if (!tb) // dB[K,N] += A^T * dY
                kern::gemm<T>(true, false, K, N, M, g.val(a).ptr(), dy, g.grad(b).ptr(), true);
            else // dB[N,K] += dY^T * A
                kern::gemm<T>(true, false, N, K, M, dy, g.val(a).ptr(), g.grad(b).ptr(), true);
        }
    });
}

template <class T>
int GraphT<T>::bmm(int a, int b, bool tb) {
    const TensorT<T>&A = val(a), &B = val(b);
    check(A.ndim() == 3 && B.ndim() == 3 && A.dim(0) == B.dim(0), "bmm: expects matching 3-D");
    const int64_t Bt = A.dim(0), M = A.dim(1), K = A.dim(2);
    const int64_t N = tb ? B.dim(1) : B.dim(2);
    check((tb ? B.dim(2) : B.dim(1)) == K, "bmm: inner dim mismatch");
    TensorT<T> y({Bt, M, N});
    const int64_t bs = tb ? N * K : K * N;
    kern::gemm_batched<T>(false, tb, Bt, M, N, K, A.ptr(), M * K, B.ptr(), bs, y.ptr(), M * N,
                          false);

    if (!track({a, b})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, a, b, tb, Bt, M, N, K, bs](GraphT& g) {
        const T* dy = g.grad(id).ptr();
        if (g.needs_grad(a)) {
            kern::gemm_batched<T>(false, !tb, Bt, M, K, N, dy, M * N, g.val(b).ptr(), bs,
                                  g.grad(a).ptr(), M * K, true);
        }
        if (g.needs_grad(b)) {
            if (!tb)
                kern::gemm_batched<T>(true, false, Bt, K, N, M, g.val(a).ptr(), M * K, dy, M * N,
                                      g.grad(b).ptr(), bs, true);
            else
                kern::gemm_batched<T>(true, false, Bt, N, K, M, dy, M * N, g.val(a).ptr(), M * K,
                                      g.grad(b).ptr(), bs, true);
        }
    });
}

template <class T>
int GraphT<T>::linear(int x, int W, int b) {
    int y = matmul(x, W, /*tb=*/true);
    return b >= 0 ? add_bias(y, b) : y;
}

// -------------------------------------------------------------- conv2d ----

template <class T>
int GraphT<T>::conv2d(int x, int w, int b, int stride, int pad) {
    const TensorT<T>&X = val(x), &Wt = val(w);
    check(X.ndim() == 4 && Wt.ndim() == 4, "conv2d: expects NCHW input and OIHW weight");
    const int64_t N = X.dim(0), Ci = X.dim(1), H = X.dim(2), Wd = X.dim(3);
    const int64_t Co = Wt.dim(0);
    check(Wt.dim(1) == Ci, "conv2d: channel mismatch");
    const int kh = static_cast<int>(Wt.dim(2)), kw = static_cast<int>(Wt.dim(3));
    const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    const int64_t Wo = (Wd + 2 * pad - kw) / stride + 1;
    check(Ho >= 1 && Wo >= 1, "conv2d: output collapses to zero");

    const int64_t crows = Ci * kh * kw;
    TensorT<T> y({N, Co, Ho, Wo});
    {
        TensorT<T> cols({crows, Ho * Wo});
        for (int64_t n = 0; n < N; ++n) {
            kern::im2col<T>(X.ptr() + n * Ci * H * Wd, Ci, H, Wd, kh, kw, stride, pad, Ho, Wo,
                            cols.ptr());
            kern::gemm<T>(false, false, Co, Ho * Wo, crows, Wt.ptr(), cols.ptr(),
                          y.ptr() + n * Co * Ho * Wo, false);
        }
        if (b >= 0) {
            const T* pb = val(b).ptr();
            T* py = y.ptr();
#pragma omp parallel for schedule(static)
            for (int64_t nc = 0; nc < N * Co; ++nc) {
                const T bias = pb[nc % Co];
                for (int64_t i = 0; i < Ho * Wo; ++i) py[nc * Ho * Wo + i] += bias;
            }
        }
    }

    if (!track({x, w, b})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    auto bwd = [id, x, w, b, stride, pad, N, Ci, H, Wd, Co, kh, kw, Ho, Wo, crows](GraphT& g) {
        const T* dy = g.grad(id).ptr();
        const TensorT<T>& Xv = g.val(x);
        const TensorT<T>& Wv = g.val(w);
        TensorT<T> cols({crows, Ho * Wo});
        if (g.needs_grad(w)) {
            T* dw = g.grad(w).ptr();
            for (int64_t n = 0; n < N; ++n) {
                kern::im2col<T>(Xv.ptr() + n * Ci * H * Wd, Ci, H, Wd, kh, kw, stride, pad, Ho, Wo,
                                cols.ptr());
                // dW[Co, crows] += dY_n[Co, HoWo] * cols^T
                kern::gemm<T>(false, true, Co, crows, Ho * Wo, dy + n * Co * Ho * Wo, cols.ptr(),
                              dw, true);
            }
        }
        if (b >= 0 && g.needs_grad(b)) {
            T* db = g.grad(b).ptr();
#pragma omp parallel for schedule(static)
            for (int64_t c = 0; c < Co; ++c) {
                T s = T(0);
                for (int64_t n = 0; n < N; ++n) {
                    const T* row = dy + (n * Co + c) * Ho * Wo;
                    for (int64_t i = 0; i < Ho * Wo; ++i) s += row[i];
                }
                db[c] += s;
            }
        }
        if (g.needs_grad(x)) {
            T* dx = g.grad(x).ptr();
            for (int64_t n = 0; n < N; ++n) {
                // dcols = W^T[crows, Co] * dY_n[Co, HoWo]
                kern::gemm<T>(true, false, crows, Ho * Wo, Co, Wv.ptr(), dy + n * Co * Ho * Wo,
                              cols.ptr(), false);
                kern::col2im<T>(cols.ptr(), Ci, H, Wd, kh, kw, stride, pad, Ho, Wo,
                                dx + n * Ci * H * Wd);
            }
        }
    };
    return add_node(std::move(y), true, std::move(bwd));
}

// -------------------------------------------------------- activations ----

template <class T>
int GraphT<T>::relu(int x) {
    const TensorT<T>& X = val(x);
    TensorT<T> y(X.shape);
    kern::relu<T>(X.numel(), X.ptr(), y.ptr());
    if (!track({x})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, x](GraphT& g) {
        const TensorT<T>& gy = g.grad(id);
        kern::relu_backward<T>(gy.numel(), g.val(x).ptr(), gy.ptr(), g.grad(x).ptr());
    });
}

template <class T>
int GraphT<T>::dropout(int x, T p) {
    if (!training_ || p <= T(0)) return x;
    check(p < T(1), "dropout: rate must be below 1");
    const TensorT<T>& X = val(x);
    const int64_t n = X.numel();
    // mask folds in the 1/(1-p) keep scale
    auto mask = std::make_shared<TensorT<T>>(X.shape);
    const T keep_scale = T(1) / (T(1) - p);
    for (int64_t i = 0; i < n; ++i) {
        mask->ptr()[i] = rng_.uniform() < double(p) ? T(0) : keep_scale;
    }
    TensorT<T> y(X.shape);
    const T* px = X.ptr();
    const T* pm = mask->ptr();
    T* py = y.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) py[i] = px[i] * pm[i];
    if (!track({x})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, x, mask](GraphT& g) {
        const T* gy = g.grad(id).ptr();
        T* gx = g.grad(x).ptr();
        const T* pm2 = mask->ptr();
        const int64_t m = g.val(id).numel();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < m; ++i) gx[i] += gy[i] * pm2[i];
    });
}

template <class T>
int GraphT<T>::gelu(int x) {
    const TensorT<T>& X = val(x);
    TensorT<T> y(X.shape);
    kern::gelu<T>(X.numel(), X.ptr(), y.ptr());
    if (!track({x})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, x](GraphT& g) {
        const TensorT<T>& gy = g.grad(id);
        kern::gelu_backward<T>(gy.numel(), g.val(x).ptr(), gy.ptr(), g.grad(x).ptr());
    });
}

// -------------------------------------------------------------- norms ----

template <class T>
int GraphT<T>::layer_norm(int x, int gamma, int beta, T eps) {
    const TensorT<T>& X = val(x);
    const int64_t cols = last_dim(X);
    const int64_t rows = X.numel() / cols;
    check(val(gamma).numel() == cols && val(beta).numel() == cols, "layer_norm: affine size");
    TensorT<T> y(X.shape);
    auto mean = std::make_shared<TensorT<T>>(std::vector<int64_t>{rows});
    auto rstd = std::make_shared<TensorT<T>>(std::vector<int64_t>{rows});
    kern::layer_norm<T>(rows, cols, X.ptr(), val(gamma).ptr(), val(beta).ptr(), eps, y.ptr(),
                        mean->ptr(), rstd->ptr());
    if (!track({x, gamma, beta})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, x, gamma, beta, rows, cols, mean, rstd](GraphT& g) {
        kern::layer_norm_backward<T>(rows, cols, g.val(x).ptr(), g.val(gamma).ptr(), mean->ptr(),
                                     rstd->ptr(), g.grad(id).ptr(), g.grad(x).ptr(),
                                     g.grad(gamma).ptr(), g.grad(beta).ptr());
    });
}

template <class T>
int GraphT<T>::group_norm(int x, int gamma, int beta, int64_t groups, T eps) {
    const TensorT<T>& X = val(x);
    check(X.ndim() == 4, "group_norm: expects NCHW");
    const int64_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
    check(C % groups == 0, "group_norm: groups must divide channels");
    TensorT<T> y(X.shape);
    auto mean = std::make_shared<TensorT<T>>(std::vector<int64_t>{N * groups});
    auto rstd = std::make_shared<TensorT<T>>(std::vector<int64_t>{N * groups});
    kern::group_norm<T>(N, C, H, W, groups, X.ptr(), val(gamma).ptr(), val(beta).ptr(), eps,
                        y.ptr(), mean->ptr(), rstd->ptr());
    if (!track({x, gamma, beta})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true,
                    [id, x, gamma, beta, N, C, H, W, groups, mean, rstd](GraphT& g) {
                        kern::group_norm_backward<T>(N, C, H, W, groups, g.val(x).ptr(),
                                                     g.val(gamma).ptr(), mean->ptr(), rstd->ptr(),
                                                     g.grad(id).ptr(), g.grad(x).ptr(),
                                                     g.grad(gamma).ptr(), g.grad(beta).ptr());
                    });
}

template <class T>
int GraphT<T>::softmax_last(int x) {
    const TensorT<T>& X = val(x);
    const int64_t cols = last_dim(X);
    const int64_t rows = X.numel() / cols;
    TensorT<T> y(X.shape);
    kern::softmax_rows<T>(rows, cols, X.ptr(), y.ptr());
    if (!track({x})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, x, rows, cols](GraphT& g) {
        kern::softmax_rows_backward<T>(rows, cols, g.val(id).ptr(), g.grad(id).ptr(),
                                       g.grad(x).ptr());
    });
}

// ---------------------------------------------------------- embedding ----

template <class T>
int GraphT<T>::embedding(int table, const std::vector<int32_t>& ids,
                         std::vector<int64_t> out_shape) {
    const TensorT<T>& Tb = val(table);
    check(Tb.ndim() == 2, "embedding: table must be 2-D");
    const int64_t D = Tb.dim(1), V = Tb.dim(0);
    check(!out_shape.empty() && out_shape.back() == D, "embedding: out shape must end in dim");
    check(TensorT<T>::numel_of(out_shape) == static_cast<int64_t>(ids.size()) * D,
          "embedding: id count mismatch");
    for (int32_t i : ids) check(i >= 0 && i < V, "embedding: id out of range");
    TensorT<T> y(out_shape);
    kern::gather_rows<T>(static_cast<int64_t>(ids.size()), D, Tb.ptr(), ids.data(), y.ptr());
    if (!track({table})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    auto ids_copy = std::make_shared<std::vector<int32_t>>(ids);
    return add_node(std::move(y), true, [id, table, D, ids_copy](GraphT& g) {
        kern::scatter_add_rows<T>(static_cast<int64_t>(ids_copy->size()), D, g.grad(id).ptr(),
                                  ids_copy->data(), g.grad(table).ptr());
    });
}

// --------------------------------------------------------- structural ----

template <class T>
int GraphT<T>::concat_dim1(int a, int b) {
    const TensorT<T>&A = val(a), &B = val(b);
    check(A.ndim() == 3 && B.ndim() == 3 && A.dim(0) == B.dim(0) && A.dim(2) == B.dim(2),
          "concat_dim1: incompatible shapes");
    const int64_t N = A.dim(0), La = A.dim(1), Lb = B.dim(1), D = A.dim(2);
    TensorT<T> y({N, La + Lb, D});
    const T *pa = A.ptr(), *pb = B.ptr();
    T* py = y.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < N; ++n) {
        std::memcpy(py + n * (La + Lb) * D, pa + n * La * D, sizeof(T) * La * D);
        std::memcpy(py + (n * (La + Lb) + La) * D, pb + n * Lb * D, sizeof(T) * Lb * D);
    }
    if (!track({a, b})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, a, b, N, La, Lb, D](GraphT& g) {
        const T* gy = g.grad(id).ptr();
        if (g.needs_grad(a)) {
            T* ga = g.grad(a).ptr();
#pragma omp parallel for schedule(static)
            for (int64_t n = 0; n < N; ++n)
                for (int64_t i = 0; i < La * D; ++i) ga[n * La * D + i] += gy[n * (La + Lb) * D + i];
        }
        if (g.needs_grad(b)) {
            T* gb = g.grad(b).ptr();
#pragma omp parallel for schedule(static)
            for (int64_t n = 0; n < N; ++n)
                for (int64_t i = 0; i < Lb * D; ++i)
                    gb[n * Lb * D + i] += gy[(n * (La + Lb) + La) * D + i];
        }
    });
}

template <class T>
int GraphT<T>::slice_dim1(int x, int64_t start, int64_t len) {
    const TensorT<T>& X = val(x);
    check(X.ndim() == 3 && start >= 0 && start + len <= X.dim(1), "slice_dim1: out of range");
    const int64_t N = X.dim(0), L = X.dim(1), D = X.dim(2);
    TensorT<T> y({N, len, D});
    const T* px = X.ptr();
    T* py = y.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < N; ++n)
        std::memcpy(py + n * len * D, px + (n * L + start) * D, sizeof(T) * len * D);
    if (!track({x})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, x, N, L, D, start, len](GraphT& g) {
        const T* gy = g.grad(id).ptr();
        T* gx = g.grad(x).ptr();
#pragma omp parallel for schedule(static)
        for (int64_t n = 0; n < N; ++n)
            for (int64_t i = 0; i < len * D; ++i) gx[(n * L + start) * D + i] += gy[n * len * D + i];
    });
}

template <class T>
int GraphT<T>::concat_cols(int a, int b) {
    const TensorT<T>&A = val(a), &B = val(b);
    check(A.ndim() == 2 && B.ndim() == 2 && A.dim(0) == B.dim(0), "concat_cols: incompatible");
    const int64_t R = A.dim(0), Ca = A.dim(1), Cb = B.dim(1);
    TensorT<T> y({R, Ca + Cb});
    const T *pa = A.ptr(), *pb = B.ptr();
    T* py = y.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < R; ++r) {
        std::memcpy(py + r * (Ca + Cb), pa + r * Ca, sizeof(T) * Ca);
        std::memcpy(py + r * (Ca + Cb) + Ca, pb + r * Cb, sizeof(T) * Cb);
    }
    if (!track({a, b})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, a, b, R, Ca, Cb](GraphT& g) {
        const T* gy = g.grad(id).ptr();
        if (g.needs_grad(a)) {
            T* ga = g.grad(a).ptr();
#pragma omp parallel for schedule(static)
            for (int64_t r = 0; r < R; ++r)
                for (int64_t c = 0; c < Ca; ++c) ga[r * Ca + c] += gy[r * (Ca + Cb) + c];
        }
        if (g.needs_grad(b)) {
            T* gb = g.grad(b).ptr();
#pragma omp parallel for schedule(static)
            for (int64_t r = 0; r < R; ++r)
                for (int64_t c = 0; c < Cb; ++c) gb[r * Cb + c] += gy[r * (Ca + Cb) + Ca + c];
        }
    });
}

template <class T>
int GraphT<T>::concat_channels(const std::vector<int>& ids) {
    check(!ids.empty(), "concat_channels: no inputs");
    const TensorT<T>& first = val(ids[0]);
    check(first.ndim() == 4, "concat_channels: expects NCHW");
    const int64_t N = first.dim(0), H = first.dim(2), W = first.dim(3);
    int64_t Ctot = 0;
    for (int id : ids) {
        const TensorT<T>& t = val(id);
        check(t.ndim() == 4 && t.dim(0) == N && t.dim(2) == H && t.dim(3) == W,
              "concat_channels: incompatible shapes");
        Ctot += t.dim(1);
    }
    TensorT<T> y({N, Ctot, H, W});
    {
        T* py = y.ptr();
        int64_t coff = 0;
        for (int id : ids) {
            const TensorT<T>& t = val(id);
            const int64_t C = t.dim(1);
            const T* px = t.ptr();
#pragma omp parallel for schedule(static)
            for (int64_t n = 0; n < N; ++n) {
                std::memcpy(py + ((n * Ctot + coff) * H * W), px + n * C * H * W,
                            sizeof(T) * C * H * W);
            }
            coff += C;
        }
    }
    bool any = false;
    for (int id : ids) any = any || (training_ && nodes_[static_cast<size_t>(id)].needs_grad);
    if (!any || !training_) return add_node(std::move(y), false, {});
    int out = static_cast<int>(nodes_.size());
    auto idc = std::make_shared<std::vector<int>>(ids);
    return add_node(std::move(y), true, [out, idc, N, Ctot, H, W](GraphT& g) {
        const T* gy = g.grad(out).ptr();
        int64_t coff = 0;
        for (int id : *idc) {
            const int64_t C = g.val(id).dim(1);
            if (g.needs_grad(id)) {
                T* gx = g.grad(id).ptr();
#pragma omp parallel for schedule(static)
                for (int64_t n = 0; n < N; ++n) {
                    const T* src = gy + (n * Ctot + coff) * H * W;
                    T* dst = gx + n * C * H * W;
                    for (int64_t i = 0; i < C * H * W; ++i) dst[i] += src[i];
                }
            }
            coff += C;
        }
    });
}

template <class T>
int GraphT<T>::reshape(int x, std::vector<int64_t> shape) {
    const TensorT<T>& X = val(x);
    check(TensorT<T>::numel_of(shape) == X.numel(), "reshape: numel mismatch");
    TensorT<T> y(shape, X.data);
    if (!track({x})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, x](GraphT& g) {
        const T* gy = g.grad(id).ptr();
        T* gx = g.grad(x).ptr();
        const int64_t n = g.val(id).numel();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) gx[i] += gy[i];
    });
}

template <class T>
int GraphT<T>::transpose2d(int x) {
    const TensorT<T>& X = val(x);
    check(X.ndim() == 2, "transpose2d: expects 2-D");
    const int64_t R = X.dim(0), C = X.dim(1);
    TensorT<T> y({C, R});
    const T* px = X.ptr();
    T* py = y.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < C; ++c)
        for (int64_t r = 0; r < R; ++r) py[c * R + r] = px[r * C + c];
    if (!track({x})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, x, R, C](GraphT& g) {
        const T* gy = g.grad(id).ptr();
        T* gx = g.grad(x).ptr();
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < R; ++r)
            for (int64_t c = 0; c < C; ++c) gx[r * C + c] += gy[c * R + r];
    });
}

template <class T>
int GraphT<T>::split_heads(int x, int64_t H) {
    const TensorT<T>& X = val(x);
    check(X.ndim() == 3 && X.dim(2) % H == 0, "split_heads: bad head count");
    const int64_t N = X.dim(0), L = X.dim(1), D = X.dim(2), hd = D / H;
    TensorT<T> y({N * H, L, hd});
    const T* px = X.ptr();
    T* py = y.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t nh = 0; nh < N * H; ++nh) {
        const int64_t n = nh / H, h = nh % H;
        for (int64_t l = 0; l < L; ++l)
            std::memcpy(py + (nh * L + l) * hd, px + (n * L + l) * D + h * hd, sizeof(T) * hd);
    }
    if (!track({x})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, x, N, L, D, H, hd](GraphT& g) {
        const T* gy = g.grad(id).ptr();
        T* gx = g.grad(x).ptr();
#pragma omp parallel for schedule(static)
        for (int64_t nh = 0; nh < N * H; ++nh) {
            const int64_t n = nh / H, h = nh % H;
            for (int64_t l = 0; l < L; ++l)
                for (int64_t j = 0; j < hd; ++j)
                    gx[(n * L + l) * D + h * hd + j] += gy[(nh * L + l) * hd + j];
        }
    });
}

template <class T>
int GraphT<T>::merge_heads(int x, int64_t H) {
    const TensorT<T>& X = val(x);
    check(X.ndim() == 3 && X.dim(0) % H == 0, "merge_heads: bad head count");
    const int64_t N = X.dim(0) / H, L = X.dim(1), hd = X.dim(2), D = H * hd;
    TensorT<T> y({N, L, D});
    const T* px = X.ptr();
    T* py = y.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t nh = 0; nh < N * H; ++nh) {
        const int64_t n = nh / H, h = nh % H;
        for (int64_t l = 0; l < L; ++l)
            std::memcpy(py + (n * L + l) * D + h * hd, px + (nh * L + l) * hd, sizeof(T) * hd);
    }
    if (!track({x})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, x, N, L, H, hd](GraphT& g) {
        const T* gy = g.grad(id).ptr();
        T* gx = g.grad(x).ptr();
        const int64_t D = H * hd;
#pragma omp parallel for schedule(static)
        for (int64_t nh = 0; nh < N * H; ++nh) {
            const int64_t n = nh / H, h = nh % H;
            for (int64_t l = 0; l < L; ++l)
                for (int64_t j = 0; j < hd; ++j)
                    gx[(nh * L + l) * hd + j] += gy[(n * L + l) * D + h * hd + j];
        }
    });
}

template <class T>
int GraphT<T>::mean_dim1(int x) {
    const TensorT<T>& X = val(x);
    check(X.ndim() == 3, "mean_dim1: expects 3-D");
    const int64_t N = X.dim(0), L = X.dim(1), D = X.dim(2);
    TensorT<T> y({N, 1, D});
    const T* px = X.ptr();
    T* py = y.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t d = 0; d < D; ++d) {
            T s = T(0);
            for (int64_t l = 0; l < L; ++l) s += px[(n * L + l) * D + d];
            py[n * D + d] = s / T(L);
        }
    }
    if (!track({x})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, x, N, L, D](GraphT& g) {
        const T* gy = g.grad(id).ptr();
        T* gx = g.grad(x).ptr();
        const T inv = T(1) / T(L);
#pragma omp parallel for schedule(static)
        for (int64_t n = 0; n < N; ++n)
            for (int64_t l = 0; l < L; ++l)
                for (int64_t d = 0; d < D; ++d) gx[(n * L + l) * D + d] += gy[n * D + d] * inv;
    });
}

template <class T>
int GraphT<T>::flatten_grid(int x) {
    const TensorT<T>& X = val(x);
    check(X.ndim() == 4, "flatten_grid: expects NCHW");
    const int64_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
    TensorT<T> y({N, H * W, C});
    const T* px = X.ptr();
    T* py = y.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t i = 0; i < H * W; ++i) py[(n * H * W + i) * C + c] = px[(n * C + c) * H * W + i];
    if (!track({x})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, x, N, C, H, W](GraphT& g) {
        const T* gy = g.grad(id).ptr();
        T* gx = g.grad(x).ptr();
#pragma omp parallel for schedule(static)
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t i = 0; i < H * W; ++i)
                    gx[(n * C + c) * H * W + i] += gy[(n * H * W + i) * C + c];
    });
}

template <class T>
int GraphT<T>::bilinear_resize(int x, int64_t Ho, int64_t Wo) {
    const TensorT<T>& X = val(x);
    check(X.ndim() == 4, "bilinear_resize: expects NCHW");
    const int64_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
    TensorT<T> y({N, C, Ho, Wo});
    kern::bilinear_resize<T>(N, C, H, W, Ho, Wo, X.ptr(), y.ptr());
    if (!track({x})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, x, N, C, H, W, Ho, Wo](GraphT& g) {
        kern::bilinear_resize_backward<T>(N, C, H, W, Ho, Wo, g.grad(id).ptr(), g.grad(x).ptr());
    });
}

template <class T>
int GraphT<T>::avgpool2x2(int x) {
    const TensorT<T>& X = val(x);
    check(X.ndim() == 4 && X.dim(2) % 2 == 0 && X.dim(3) % 2 == 0, "avgpool2x2: odd extent");
    const int64_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
    TensorT<T> y({N, C, H / 2, W / 2});
    kern::avgpool2x2<T>(N, C, H, W, X.ptr(), y.ptr());
    if (!track({x})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, x, N, C, H, W](GraphT& g) {
        kern::avgpool2x2_backward<T>(N, C, H, W, g.grad(id).ptr(), g.grad(x).ptr());
    });
}

// ----------------------------------------------------------- reductions ----

template <class T>
int GraphT<T>::l2_normalize_rows(int x) {
    const TensorT<T>& X = val(x);
    const int64_t D = last_dim(X);
    const int64_t R = X.numel() / D;
    TensorT<T> y(X.shape);
    auto norms = std::make_shared<TensorT<T>>(std::vector<int64_t>{R});
    const T* px = X.ptr();
    T* py = y.ptr();
    T* pn = norms->ptr();
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < R; ++r) {
        T s = T(0);
        for (int64_t d = 0; d < D; ++d) s += px[r * D + d] * px[r * D + d];
        pn[r] = std::sqrt(s);
    }
    for (int64_t r = 0; r < R; ++r) check(pn[r] != T(0), "l2_normalize_rows: zero-norm row");
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < R; ++r) {
        const T inv = T(1) / pn[r];
        for (int64_t d = 0; d < D; ++d) py[r * D + d] = px[r * D + d] * inv;
    }
    if (!track({x})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, x, R, D, norms](GraphT& g) {
        const T* gy = g.grad(id).ptr();
        const T* py2 = g.val(id).ptr();
        const T* pn2 = norms->ptr();
        T* gx = g.grad(x).ptr();
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < R; ++r) {
            T dot = T(0);
            for (int64_t d = 0; d < D; ++d) dot += gy[r * D + d] * py2[r * D + d];
            const T inv = T(1) / pn2[r];
            for (int64_t d = 0; d < D; ++d)
                gx[r * D + d] += (gy[r * D + d] - py2[r * D + d] * dot) * inv;
        }
    });
}

template <class T>
int GraphT<T>::rowwise_dot(int a, int b) {
    const TensorT<T>&A = val(a), &B = val(b);
    check(A.shape == B.shape && A.ndim() == 2, "rowwise_dot: expects matching 2-D");
    const int64_t R = A.dim(0), D = A.dim(1);
    TensorT<T> y({R});
    const T *pa = A.ptr(), *pb = B.ptr();
    T* py = y.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < R; ++r) {
        T s = T(0);
        for (int64_t d = 0; d < D; ++d) s += pa[r * D + d] * pb[r * D + d];
        py[r] = s;
    }
    if (!track({a, b})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, a, b, R, D](GraphT& g) {
        const T* gy = g.grad(id).ptr();
        if (g.needs_grad(a)) {
            T* ga = g.grad(a).ptr();
            const T* pb2 = g.val(b).ptr();
#pragma omp parallel for schedule(static)
            for (int64_t r = 0; r < R; ++r)
                for (int64_t d = 0; d < D; ++d) ga[r * D + d] += gy[r] * pb2[r * D + d];
        }
        if (g.needs_grad(b)) {
            T* gb = g.grad(b).ptr();
            const T* pa2 = g.val(a).ptr();
#pragma omp parallel for schedule(static)
            for (int64_t r = 0; r < R; ++r)
                for (int64_t d = 0; d < D; ++d) gb[r * D + d] += gy[r] * pa2[r * D + d];
        }
    });
}

template <class T>
int GraphT<T>::gather_rows_nd(int x, const std::vector<int32_t>& rows) {
    const TensorT<T>& X = val(x);
    const int64_t D = last_dim(X);
    const int64_t R0 = X.numel() / D;
    for (int32_t r : rows) check(r >= 0 && r < R0, "gather_rows_nd: row out of range");
    const int64_t R = static_cast<int64_t>(rows.size());
    TensorT<T> y({R, D});
    kern::gather_rows<T>(R, D, X.ptr(), rows.data(), y.ptr());
    if (!track({x})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    auto rows_copy = std::make_shared<std::vector<int32_t>>(rows);
    return add_node(std::move(y), true, [id, x, D, rows_copy](GraphT& g) {
        kern::scatter_add_rows<T>(static_cast<int64_t>(rows_copy->size()), D, g.grad(id).ptr(),
                                  rows_copy->data(), g.grad(x).ptr());
    });
}

template <class T>
int GraphT<T>::ce_rows(int logits, const std::vector<int32_t>& targets, int32_t ignore_index) {
    const TensorT<T>& X = val(logits);
    check(X.ndim() == 2, "ce_rows: expects 2-D logits");
    const int64_t R = X.dim(0), C = X.dim(1);
    check(static_cast<int64_t>(targets.size()) == R, "ce_rows: target count mismatch");
    auto probs = std::make_shared<TensorT<T>>(std::vector<int64_t>{R, C});
    kern::softmax_rows<T>(R, C, X.ptr(), probs->ptr());
    TensorT<T> y({R});
    const T* px = X.ptr();
    T* py = y.ptr();
    for (int64_t r = 0; r < R; ++r) {
        const int32_t t = targets[r];
        if (t == ignore_index) {
            py[r] = T(0);
            continue;
        }
        check(t >= 0 && t < C, "ce_rows: target out of range");
        // stable: ce = log(sum exp(x - mx)) - (x_t - mx)
        const T* xr = px + r * C;
        T mx = xr[0];
        for (int64_t c = 1; c < C; ++c) mx = std::max(mx, xr[c]);
        T se = T(0);
        for (int64_t c = 0; c < C; ++c) se += std::exp(xr[c] - mx);
        py[r] = std::log(se) - (xr[t] - mx);
    }
    if (!track({logits})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    auto tg = std::make_shared<std::vector<int32_t>>(targets);
    return add_node(std::move(y), true, [id, logits, R, C, probs, tg, ignore_index](GraphT& g) {
        const T* gy = g.grad(id).ptr();
        T* gx = g.grad(logits).ptr();
        const T* pp = probs->ptr();
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < R; ++r) {
            const int32_t t = (*tg)[r];
            if (t == ignore_index) continue;
            const T gr = gy[r];
            for (int64_t c = 0; c < C; ++c) {
                gx[r * C + c] += gr * (pp[r * C + c] - (c == t ? T(1) : T(0)));
            }
        }
    });
}

template <class T>
int GraphT<T>::weighted_sum(int x, const std::vector<T>& w) {
    const TensorT<T>& X = val(x);
    check(static_cast<int64_t>(w.size()) == X.numel(), "weighted_sum: weight count mismatch");
    TensorT<T> y({std::vector<int64_t>{}});
    y.data.assign(1, T(0));
    T s = T(0);
    for (int64_t i = 0; i < X.numel(); ++i) s += w[static_cast<size_t>(i)] * X.ptr()[i];
    y.data[0] = s;
    if (!track({x})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    auto wc = std::make_shared<std::vector<T>>(w);
    return add_node(std::move(y), true, [id, x, wc](GraphT& g) {
        const T gs = g.grad(id).data[0];
        T* gx = g.grad(x).ptr();
        const int64_t n = g.val(x).numel();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) gx[i] += gs * (*wc)[static_cast<size_t>(i)];
    });
}

template <class T>
int GraphT<T>::sum_all(int x) {
    const TensorT<T>& X = val(x);
    TensorT<T> y({std::vector<int64_t>{}});
    T s = T(0);
    for (int64_t i = 0; i < X.numel(); ++i) s += X.ptr()[i];
    y.data.assign(1, s);
    if (!track({x})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, x](GraphT& g) {
        const T gs = g.grad(id).data[0];
        T* gx = g.grad(x).ptr();
        const int64_t n = g.val(x).numel();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) gx[i] += gs;
    });
}

template <class T>
int GraphT<T>::scale_by_exp(int x, int s) {
    const TensorT<T>& X = val(x);
    check(val(s).numel() == 1, "scale_by_exp: scale must be scalar");
    const T mult = std::exp(val(s).data[0]);
    TensorT<T> y(X.shape);
    const T* px = X.ptr();
    T* py = y.ptr();
    const int64_t n = X.numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) py[i] = px[i] * mult;
    if (!track({x, s})) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    return add_node(std::move(y), true, [id, x, s, mult](GraphT& g) {
        const T* gy = g.grad(id).ptr();
        const int64_t m = g.val(id).numel();
        if (g.needs_grad(x)) {
            T* gx = g.grad(x).ptr();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < m; ++i) gx[i] += gy[i] * mult;
        }
        if (g.needs_grad(s)) {
            // dL/ds = sum(gy * x * exp(s)) = sum(gy * y)
            const T* py2 = g.val(id).ptr();
            T acc = T(0);
            for (int64_t i = 0; i < m; ++i) acc += gy[i] * py2[i];
            g.grad(s).data[0] += acc;
        }
    });
}

template <class T>
int GraphT<T>::combine_scalars(const std::vector<int>& ids, const std::vector<T>& coef) {
    check(ids.size() == coef.size() && !ids.empty(), "combine_scalars: arity mismatch");
    T s = T(0);
    bool any = false;
    for (size_t i = 0; i < ids.size(); ++i) {
        check(val(ids[i]).numel() == 1, "combine_scalars: non-scalar input");
        s += coef[i] * val(ids[i]).data[0];
        if (ids[i] >= 0 && nodes_[static_cast<size_t>(ids[i])].needs_grad) any = true;
    }
    TensorT<T> y({std::vector<int64_t>{}});
    y.data.assign(1, s);
    if (!training_ || !any) return add_node(std::move(y), false, {});
    int id = static_cast<int>(nodes_.size());
    auto idc = std::make_shared<std::vector<int>>(ids);
    auto cc = std::make_shared<std::vector<T>>(coef);
    return add_node(std::move(y), true, [id, idc, cc](GraphT& g) {
        const T gs = g.grad(id).data[0];
        for (size_t i = 0; i < idc->size(); ++i) {
            if (g.needs_grad((*idc)[i])) g.grad((*idc)[i]).data[0] += gs * (*cc)[i];
        }
    });
}

template class GraphT<float>;
template class GraphT<double>;

} // namespace vlpt
