#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vlpt/rng.hpp"
#include "vlpt/tensor.hpp"

namespace vlpt {

/// A learnable tensor with its gradient accumulator and optimizer state.
template <class T>
struct ParamT {
    std::string name;
    TensorT<T> value;
    TensorT<T> grad;
    TensorT<T> m, v; // Adam moments, allocated by the optimizer on first use
    bool no_decay = false;

    ParamT() = default;
    ParamT(std::string n, std::vector<int64_t> shape, bool nd = false)
        : name(std::move(n)), value(shape), grad(shape), m(shape), v(shape), no_decay(nd) {}
};

using Param = ParamT<float>;

/// Reverse-mode tape. Each op appends a node holding its value and a closure
/// that scatters the node's gradient into its parents. Nodes are created in
/// topological order, so backward() is a single reverse sweep.
///
/// Gradients are allocated lazily; a node whose gradient was never touched is
/// skipped, which prunes constant subtrees. With `training = false` no
/// closures are recorded at all (probe / evaluation mode).
template <class T>
class GraphT {
public:
    /// `seed` drives stochastic ops (dropout); two graphs with equal seeds
    /// draw identical masks.
    explicit GraphT(bool training = true, uint64_t seed = 0)
        : training_(training), rng_(mix_seed(seed, 0xD201)) {}

    GraphT(const GraphT&) = delete;
    GraphT& operator=(const GraphT&) = delete;

    bool training() const { return training_; }
    int num_nodes() const { return static_cast<int>(nodes_.size()); }

    /// Constant leaf (no gradient).
    int input(TensorT<T> v);
    /// Leaf bound to a parameter; backward accumulates into p.grad.
    int param(ParamT<T>& p);

    TensorT<T>& val(int id) { return nodes_[static_cast<size_t>(id)].value; }
    const TensorT<T>& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }

    /// Gradient buffer of a node, allocated (zeroed) on first access.
    TensorT<T>& grad(int id);
    bool grad_allocated(int id) const { return !nodes_[static_cast<size_t>(id)].grad.data.empty(); }
    bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

    /// Reverse sweep from a scalar node (seeds d(loss)/d(loss) = 1).
    void backward(int loss_id);

    // ----------------------------------------------------------- ops ----
    int add(int a, int b);
    int sub(int a, int b);
    int mul(int a, int b);
    int scale(int a, T c);
    /// x + b broadcast over rows; b.numel() must divide x.numel().
    int add_bias(int x, int b);
    /// 2-D matmul. op(A) [M,K] x op(B) [K,N]; ta unsupported (unused here).
    int matmul(int a, int b, bool tb = false);
    /// Batched matmul over leading dim: [B,M,K] x [B,K,N] (tb: [B,N,K]).
    int bmm(int a, int b, bool tb = false);
    /// x [R,Cin] * W^T with W [Cout,Cin], plus optional bias (pass -1 for none).
    int linear(int x, int W, int b);
    /// x [N,Ci,H,W], w [Co,Ci,kh,kw], optional bias [Co] (-1 for none).
    int conv2d(int x, int w, int b, int stride, int pad);
    int relu(int x);
    int gelu(int x);
    /// Inverted dropout drawn from the graph seed; identity on evaluation
    /// graphs or when p <= 0.
    int dropout(int x, T p);
    /// Normalize over the last dim; gamma/beta are [last].
    int layer_norm(int x, int gamma, int beta, T eps);
    /// x [N,C,H,W]; gamma/beta [C].
    int group_norm(int x, int gamma, int beta, int64_t groups, T eps);
    /// Softmax over the last dim.
    int softmax_last(int x);
    /// Gather rows of `table` [V,D] by id; output shape out_shape (ends in D).
    int embedding(int table, const std::vector<int32_t>& ids, std::vector<int64_t> out_shape);
    /// Concatenate [N,La,D] and [N,Lb,D] along dim 1.
    int concat_dim1(int a, int b);
    int slice_dim1(int x, int64_t start, int64_t len);
    /// Concatenate 2-D [R,Ca] and [R,Cb] along columns.
    int concat_cols(int a, int b);
    /// Concatenate NCHW tensors along the channel dim (same N, H, W).
    int concat_channels(const std::vector<int>& ids);
    int reshape(int x, std::vector<int64_t> shape);
    int transpose2d(int x);
    /// [N,L,D] -> [N*H, L, D/H]
    int split_heads(int x, int64_t H);
    /// [N*H, L, hd] -> [N, L, H*hd]
    int merge_heads(int x, int64_t H);
    /// [N,L,D] -> [N,1,D] mean over dim 1
    int mean_dim1(int x);
    /// [N,C,H,W] -> [N, H*W, C]
    int flatten_grid(int x);
    int bilinear_resize(int x, int64_t Ho, int64_t Wo);
    int avgpool2x2(int x);
    /// Rows scaled to unit L2 norm; throws on an (exactly) zero row.
    int l2_normalize_rows(int x);
    /// [R,D] x [R,D] -> [R]
    int rowwise_dot(int a, int b);
    /// Treat x as [R0, last]; gather the given flat rows -> [R, last].
    int gather_rows_nd(int x, const std::vector<int32_t>& rows);
    /// Per-row cross entropy with integer targets; rows with target ==
    /// ignore_index produce 0 and no gradient. logits [R,C] -> [R].
    int ce_rows(int logits, const std::vector<int32_t>& targets, int32_t ignore_index);
    /// sum_r w[r] * x[r] -> scalar
    int weighted_sum(int x, const std::vector<T>& w);
    int sum_all(int x);
    /// y = x * exp(s), s a scalar node (learnable logit scale).
    int scale_by_exp(int x, int s);
    /// sum_i coef[i] * scalar_node[i] -> scalar
    int combine_scalars(const std::vector<int>& ids, const std::vector<T>& coef);

private:
    struct Node {
        TensorT<T> value;
        TensorT<T> grad;
        std::function<void(GraphT&)> backward;
        bool needs_grad = false;
    };

    int add_node(TensorT<T> value, bool needs_grad, std::function<void(GraphT&)> bwd);
    bool track(std::initializer_list<int> parents) const;

    std::vector<Node> nodes_;
    bool training_;
    Rng rng_;
};

using Graph = GraphT<float>;
using GraphD = GraphT<double>;

} // namespace vlpt
