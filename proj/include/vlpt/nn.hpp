#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "vlpt/graph.hpp"
#include "vlpt/rng.hpp"

namespace vlpt {

enum class Init { zeros, ones, trunc_normal, he_normal };

template <class T>
struct ParamInfoT {
    ParamT<T> p;
    Init init = Init::zeros;
    double sigma = 0.0;
};

/// Owns all learnable tensors of a model in a stable creation order. The
/// order defines both initialization and checkpoint layout.
template <class T>
class ParamStoreT {
public:
    ParamT<T>& create(const std::string& name, std::vector<int64_t> shape, Init init,
                      double sigma = 0.0, bool no_decay = false) {
        check(!by_name_.count(name), "param store: duplicate name " + name);
        auto info = std::make_unique<ParamInfoT<T>>();
        info->p = ParamT<T>(name, std::move(shape), no_decay);
        info->init = init;
        info->sigma = sigma;
        ParamT<T>& ref = info->p;
        by_name_.emplace(name, info.get());
        params_.push_back(std::move(info));
        return ref;
    }

    ParamT<T>* find(const std::string& name) const {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : &it->second->p;
    }

    std::vector<ParamT<T>*> all() const {
        std::vector<ParamT<T>*> out;
        out.reserve(params_.size());
        for (const auto& info : params_) out.push_back(&info->p);
        return out;
    }

    int64_t total_size() const {
        int64_t n = 0;
        for (const auto& info : params_) n += info->p.value.numel();
        return n;
    }

    void zero_grads() {
        for (const auto& info : params_) info->p.grad.fill(T(0));
    }

    /// Deterministic initialization: one stream, params in creation order.
    void init_params(uint64_t seed) {
        Rng rng(mix_seed(seed, 0x1A17));
        for (const auto& info : params_) {
            switch (info->init) {
                case Init::zeros: info->p.value.fill(T(0)); break;
                case Init::ones: info->p.value.fill(T(1)); break;
                case Init::trunc_normal:
                case Init::he_normal:
                    for (auto& v : info->p.value.data) {
                        v = static_cast<T>(rng.truncated_normal(info->sigma));
                    }
                    break;
            }
        }
    }

private:
    std::vector<std::unique_ptr<ParamInfoT<T>>> params_;
    std::unordered_map<std::string, ParamInfoT<T>*> by_name_;
};

// ------------------------------------------------------------- layers ----

template <class T>
struct LinearT {
    ParamT<T>* W = nullptr;
    ParamT<T>* b = nullptr;

    LinearT() = default;
    LinearT(ParamStoreT<T>& ps, const std::string& name, int64_t in, int64_t out,
            bool bias = true) {
        W = &ps.create(name + ".weight", {out, in}, Init::trunc_normal, 0.02);
        if (bias) b = &ps.create(name + ".bias", {out}, Init::zeros, 0.0, true);
    }

    int forward(GraphT<T>& g, int x) const {
        const auto shape = g.val(x).shape;
        const int64_t in = shape.back();
        int h = x;
        if (shape.size() != 2) {
            h = g.reshape(x, {g.val(x).numel() / in, in});
        }
        int y = g.linear(h, g.param(*W), b ? g.param(*b) : -1);
        if (shape.size() != 2) {
            auto out_shape = shape;
            out_shape.back() = W->value.dim(0);
            y = g.reshape(y, out_shape);
        }
        return y;
    }
};

template <class T>
struct LayerNormT {
    ParamT<T>* gamma = nullptr;
    ParamT<T>* beta = nullptr;

    LayerNormT() = default;
    LayerNormT(ParamStoreT<T>& ps, const std::string& name, int64_t dim) {
        gamma = &ps.create(name + ".gamma", {dim}, Init::ones, 0.0, true);
        beta = &ps.create(name + ".beta", {dim}, Init::zeros, 0.0, true);
    }

    int forward(GraphT<T>& g, int x) const {
        return g.layer_norm(x, g.param(*gamma), g.param(*beta), T(1e-5));
    }
};

template <class T>
struct Conv2dT {
    ParamT<T>* W = nullptr;
    ParamT<T>* b = nullptr;
    int stride = 1, pad = 0;

    Conv2dT() = default;
    Conv2dT(ParamStoreT<T>& ps, const std::string& name, int64_t in, int64_t out, int k,
            int stride_, int pad_, bool bias = true)
        : stride(stride_), pad(pad_) {
        const double sigma = std::sqrt(2.0 / double(in * k * k));
        W = &ps.create(name + ".weight", {out, in, k, k}, Init::he_normal, sigma);
        if (bias) b = &ps.create(name + ".bias", {out}, Init::zeros, 0.0, true);
    }

    int forward(GraphT<T>& g, int x) const {
        return g.conv2d(x, g.param(*W), b ? g.param(*b) : -1, stride, pad);
    }
};

template <class T>
struct GroupNormT {
    ParamT<T>* gamma = nullptr;
    ParamT<T>* beta = nullptr;
    int64_t groups = 1;

    GroupNormT() = default;
    GroupNormT(ParamStoreT<T>& ps, const std::string& name, int64_t channels, int64_t groups_) {
        groups = groups_;
        while (channels % groups != 0) --groups; // clamp to a divisor
        gamma = &ps.create(name + ".gamma", {channels}, Init::ones, 0.0, true);
        beta = &ps.create(name + ".beta", {channels}, Init::zeros, 0.0, true);
    }

    int forward(GraphT<T>& g, int x) const {
        return g.group_norm(x, g.param(*gamma), g.param(*beta), groups, T(1e-5));
    }
};

template <class T>
struct EmbeddingT {
    ParamT<T>* table = nullptr;

    EmbeddingT() = default;
    EmbeddingT(ParamStoreT<T>& ps, const std::string& name, int64_t vocab, int64_t dim) {
        table = &ps.create(name + ".table", {vocab, dim}, Init::trunc_normal, 0.02);
    }

    int forward(GraphT<T>& g, const std::vector<int32_t>& ids,
                std::vector<int64_t> out_shape) const {
        return g.embedding(g.param(*table), ids, std::move(out_shape));
    }
};

/// Additive key mask for attention: 0 where live, -1e30 where padded.
/// Shaped [N*heads, Lq, Lk] for direct addition onto attention logits.
template <class T>
int key_mask_node(GraphT<T>& g, const std::vector<uint8_t>& live, int64_t N, int64_t heads,
                  int64_t Lq, int64_t Lk) {
    check(static_cast<int64_t>(live.size()) == N * Lk, "key_mask_node: mask size mismatch");
    TensorT<T> m({N * heads, Lq, Lk});
    for (int64_t n = 0; n < N; ++n) {
        for (int64_t h = 0; h < heads; ++h) {
            for (int64_t q = 0; q < Lq; ++q) {
                T* row = m.ptr() + ((n * heads + h) * Lq + q) * Lk;
                for (int64_t k = 0; k < Lk; ++k) {
                    row[k] = live[static_cast<size_t>(n * Lk + k)] ? T(0) : T(-1e30);
                }
            }
        }
    }
    return g.input(std::move(m));
}

template <class T>
struct MultiHeadAttentionT {
    LinearT<T> wq, wk, wv, wo;
    int64_t heads = 1;
    int64_t head_dim = 1;
    T attn_dropout = T(0);

    MultiHeadAttentionT() = default;
    MultiHeadAttentionT(ParamStoreT<T>& ps, const std::string& name, int64_t dim, int64_t heads_,
                        double dropout = 0.0)
        : wq(ps, name + ".q", dim, dim),
          wk(ps, name + ".k", dim, dim),
          wv(ps, name + ".v", dim, dim),
          wo(ps, name + ".out", dim, dim),
          heads(heads_),
          head_dim(dim / heads_),
          attn_dropout(static_cast<T>(dropout)) {
        check(dim % heads_ == 0, "attention: dim must divide by head count");
    }

    struct Out {
        int out;  // [N, Lq, D]
        int attn; // [N*heads, Lq, Lk] softmax weights
    };

    /// x_q provides queries; x_kv provides keys and values (pass x_q for
    /// self-attention). `mask` is an additive logit mask node or -1.
    Out forward(GraphT<T>& g, int x_q, int x_kv, int mask) const {
        int q = g.split_heads(wq.forward(g, x_q), heads);
        int k = g.split_heads(wk.forward(g, x_kv), heads);
        int v = g.split_heads(wv.forward(g, x_kv), heads);
        int logits = g.scale(g.bmm(q, k, /*tb=*/true), T(1.0 / std::sqrt(double(head_dim))));
        if (mask >= 0) logits = g.add(logits, mask);
        int attn = g.softmax_last(logits);
        int ctx = g.merge_heads(g.bmm(g.dropout(attn, attn_dropout), v), heads);
        return {wo.forward(g, ctx), attn};
    }
};

template <class T>
struct FeedForwardT {
    LinearT<T> fc1, fc2;

    FeedForwardT() = default;
    FeedForwardT(ParamStoreT<T>& ps, const std::string& name, int64_t dim, int64_t hidden)
        : fc1(ps, name + ".fc1", dim, hidden), fc2(ps, name + ".fc2", hidden, dim) {}

    int forward(GraphT<T>& g, int x) const { return fc2.forward(g, g.gelu(fc1.forward(g, x))); }
};

/// Pre-LN self-attention block with optional FFN, residuals after each
/// sub-layer.
template <class T>
struct EncoderBlockT {
    LayerNormT<T> ln1;
    MultiHeadAttentionT<T> attn;
    bool has_ffn = true;
    LayerNormT<T> ln2;
    FeedForwardT<T> ffn;
    T dropout = T(0);

    EncoderBlockT() = default;
    EncoderBlockT(ParamStoreT<T>& ps, const std::string& name, int64_t dim, int64_t heads,
                  int64_t ffn_hidden, bool with_ffn, double dropout_ = 0.0)
        : ln1(ps, name + ".ln1", dim), attn(ps, name + ".attn", dim, heads, dropout_),
          has_ffn(with_ffn), dropout(static_cast<T>(dropout_)) {
        if (with_ffn) {
            ln2 = LayerNormT<T>(ps, name + ".ln2", dim);
            ffn = FeedForwardT<T>(ps, name + ".ffn", dim, ffn_hidden);
        }
    }

    struct Out {
        int out;
        int attn;
    };

    Out forward(GraphT<T>& g, int x, int mask) const {
        int n1 = ln1.forward(g, x);
        auto a = attn.forward(g, n1, n1, mask);
        int h = g.add(x, g.dropout(a.out, dropout));
        if (has_ffn) h = g.add(h, g.dropout(ffn.forward(g, ln2.forward(g, h)), dropout));
        return {h, a.attn};
    }
};

/// Pre-LN decoder block: self-attention over the query stream, cross
/// attention into a memory sequence, FFN; residuals after each sub-layer.
template <class T>
struct DecoderBlockT {
    LayerNormT<T> ln1;
    MultiHeadAttentionT<T> self_attn;
    LayerNormT<T> ln2;
    MultiHeadAttentionT<T> cross_attn;
    LayerNormT<T> ln3;
    FeedForwardT<T> ffn;
    T dropout = T(0);

    DecoderBlockT() = default;
    DecoderBlockT(ParamStoreT<T>& ps, const std::string& name, int64_t dim, int64_t heads,
                  int64_t ffn_hidden, double dropout_ = 0.0)
        : ln1(ps, name + ".ln1", dim),
          self_attn(ps, name + ".self", dim, heads, dropout_),
          ln2(ps, name + ".ln2", dim),
          cross_attn(ps, name + ".cross", dim, heads, dropout_),
          ln3(ps, name + ".ln3", dim),
          ffn(ps, name + ".ffn", dim, ffn_hidden),
          dropout(static_cast<T>(dropout_)) {}

    struct Out {
        int out;
        int self_attn_w;
        int cross_attn_w;
    };

    Out forward(GraphT<T>& g, int x, int memory, int self_mask) const {
        int n1 = ln1.forward(g, x);
        auto s = self_attn.forward(g, n1, n1, self_mask);
        int h = g.add(x, g.dropout(s.out, dropout));
        auto c = cross_attn.forward(g, ln2.forward(g, h), memory, -1);
        h = g.add(h, g.dropout(c.out, dropout));
        h = g.add(h, g.dropout(ffn.forward(g, ln3.forward(g, h)), dropout));
        return {h, s.attn, c.attn};
    }
};

} // namespace vlpt
