#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vlpt/nn.hpp"

namespace vlpt {

struct ModelConfig {
    int64_t embed_dim = 384;
    int64_t heads = 6;
    int64_t text_blocks = 3;
    int64_t cross_blocks = 4;
    int64_t ffn_ratio = 4;
    bool text_ffn = true; // full transformer blocks in the text encoder
    bool final_ln = true; // stack-final LayerNorm in text/cross encoders
    int64_t seq_len = 30; // K: word-piece budget after [CLS]
    int64_t vocab_size = 512;
    int64_t image_size = 512; // square canvas; output grid is size/16
    int64_t stem_width = 16;
    std::array<int64_t, 4> stage_widths = {32, 64, 128, 256};
    int64_t convs_per_stage = 2;
    bool residual = false; // residual skips inside backbone stages
    int64_t fpn_channels = 256;
    int64_t gn_groups = 8;
    double temp_init = 0.07; // initial contrastive temperature
    double dropout = 0.0;    // attention + sub-layer output dropout

    int64_t grid_side() const { return image_size / 16; }
    int64_t visual_tokens() const { return grid_side() * grid_side(); }
    void validate() const;
};

template <class T>
struct ConvBlockT {
    Conv2dT<T> conv;
    GroupNormT<T> norm;

    ConvBlockT() = default;
    ConvBlockT(ParamStoreT<T>& ps, const std::string& name, int64_t in, int64_t out, int k,
               int stride, int pad, int64_t gn_groups)
        : conv(ps, name + ".conv", in, out, k, stride, pad),
          norm(ps, name + ".norm", out, gn_groups) {}

    int forward(GraphT<T>& g, int x) const { return g.relu(norm.forward(g, conv.forward(g, x))); }
};

/// Staged conv backbone -> lateral FPN with top-down fusion -> strided 1x1
/// reduction -> attention pooling over the fused grid.
template <class T>
struct ImageEncoderT {
    struct Stage {
        ConvBlockT<T> down;
        std::vector<ConvBlockT<T>> convs;
    };

    const ModelConfig* cfg = nullptr;
    ConvBlockT<T> stem;
    std::array<Stage, 4> stages;
    std::array<Conv2dT<T>, 4> lateral;
    Conv2dT<T> reduce;
    MultiHeadAttentionT<T> pool;
    ParamT<T>* pool_pos = nullptr;

    ImageEncoderT() = default;
    ImageEncoderT(ParamStoreT<T>& ps, const ModelConfig& c);

    struct Out {
        std::array<int, 4> c;    // C2..C5 at strides 4/8/16/32
        std::array<int, 4> p;    // P2..P5 after top-down fusion
        int fpn_concat;          // stride-8 concatenation before reduction
        int fused;               // F_c: [N, D, gh, gw] at stride 16
        int cls;                 // [N, D]
        int grid;                // [N, S, D]
        int vis_seq;             // [N, S+1, D]: cls + grid tokens
        int64_t gh, gw;
        int pool_attn;           // pooling attention weights
    };
    Out forward(GraphT<T>& g, int images) const;
};

template <class T>
struct TextEncoderT {
    const ModelConfig* cfg = nullptr;
    EmbeddingT<T> tok;
    ParamT<T>* pos = nullptr;
    std::vector<EncoderBlockT<T>> blocks;
    LayerNormT<T> final_ln;

    TextEncoderT() = default;
    TextEncoderT(ParamStoreT<T>& ps, const ModelConfig& c);

    struct Out {
        int cls;    // [N, D]
        int tokens; // [N, K+1, D]
        std::vector<int> attn;
    };
    /// ids/live are row-major [N, K+1].
    Out forward(GraphT<T>& g, const std::vector<int32_t>& ids, const std::vector<uint8_t>& live,
                int64_t N) const;
};

template <class T>
struct CrossEncoderT {
    const ModelConfig* cfg = nullptr;
    std::vector<DecoderBlockT<T>> blocks;
    LayerNormT<T> final_ln;
    ParamT<T>* mlm_bias = nullptr;

    CrossEncoderT() = default;
    CrossEncoderT(ParamStoreT<T>& ps, const ModelConfig& c);

    struct Out {
        int states;     // [N, K+1, D]
        int mlm_logits; // [N, K+1, V]
        std::vector<int> self_attn;  // per block, [N*H, K+1, K+1]
        std::vector<int> cross_attn; // per block, [N*H, K+1, S+1]
    };
    /// `mlm_table` is the text token embedding matrix (weight-tied head).
    Out forward(GraphT<T>& g, int text_tokens, int vis_seq, const std::vector<uint8_t>& live,
                int64_t N, ParamT<T>& mlm_table) const;
};

template <class T>
struct ModelT {
    ModelConfig cfg;
    ParamStoreT<T> store;
    ImageEncoderT<T> image;
    TextEncoderT<T> text;
    CrossEncoderT<T> cross;
    ParamT<T>* temp_log_scale = nullptr; // logit multiplier is exp(this)

    explicit ModelT(ModelConfig c);
    void init_params(uint64_t seed);

    typename ImageEncoderT<T>::Out encode_image(GraphT<T>& g, int images) const {
        return image.forward(g, images);
    }
    typename TextEncoderT<T>::Out encode_text(GraphT<T>& g, const std::vector<int32_t>& ids,
                                              const std::vector<uint8_t>& live, int64_t N) const {
        return text.forward(g, ids, live, N);
    }
    typename CrossEncoderT<T>::Out encode_cross(GraphT<T>& g, int text_tokens, int vis_seq,
                                                const std::vector<uint8_t>& live, int64_t N) const {
        return cross.forward(g, text_tokens, vis_seq, live, N, *text.tok.table);
    }
};

using Model = ModelT<float>;
using ModelD = ModelT<double>;

} // namespace vlpt
