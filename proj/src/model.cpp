#include "vlpt/model.hpp"

#include <cmath>

namespace vlpt {

void ModelConfig::validate() const {
    check(embed_dim >= 1 && heads >= 1 && embed_dim % heads == 0,
          "model config: embed_dim must be divisible by heads");
    check(text_blocks >= 1 && cross_blocks >= 1, "model config: need at least one block per stack");
    check(ffn_ratio >= 1, "model config: ffn_ratio must be >= 1");
    check(seq_len >= 1, "model config: seq_len must be >= 1");
    check(vocab_size >= 5, "model config: vocab must hold the 4 specials plus content tokens");
    check(image_size >= 32 && image_size % 32 == 0,
          "model config: image_size must be a positive multiple of 32");
    check(stem_width >= 1 && fpn_channels >= 1, "model config: channel widths must be positive");
    for (int64_t w : stage_widths) check(w >= 1, "model config: stage widths must be positive");
    check(convs_per_stage >= 1, "model config: convs_per_stage must be >= 1");
    check(temp_init > 0.0, "model config: temperature must be positive");
    check(dropout >= 0.0 && dropout < 1.0, "model config: dropout must lie in [0, 1)");
}

// --------------------------------------------------------- image encoder ----

template <class T>
ImageEncoderT<T>::ImageEncoderT(ParamStoreT<T>& ps, const ModelConfig& c) : cfg(&c) {
    stem = ConvBlockT<T>(ps, "image.stem", 3, c.stem_width, 3, 2, 1, c.gn_groups);
    int64_t prev = c.stem_width;
    for (int s = 0; s < 4; ++s) {
        const int64_t w = c.stage_widths[static_cast<size_t>(s)];
        const std::string base = "image.stage" + std::to_string(s);
        stages[static_cast<size_t>(s)].down =
            ConvBlockT<T>(ps, base + ".down", prev, w, 3, 2, 1, c.gn_groups);
        for (int64_t j = 1; j < c.convs_per_stage; ++j) {
            stages[static_cast<size_t>(s)].convs.emplace_back(
                ps, base + ".conv" + std::to_string(j), w, w, 3, 1, 1, c.gn_groups);
        }
        prev = w;
    }
    for (int i = 0; i < 4; ++i) {
        lateral[static_cast<size_t>(i)] =
            Conv2dT<T>(ps, "image.lateral" + std::to_string(i),
                       c.stage_widths[static_cast<size_t>(i)], c.fpn_channels, 1, 1, 0);
    }
    reduce = Conv2dT<T>(ps, "image.reduce", 4 * c.fpn_channels, c.embed_dim, 1, 2, 0);
    pool = MultiHeadAttentionT<T>(ps, "image.pool", c.embed_dim, c.heads, c.dropout);
    pool_pos = &ps.create("image.pool_pos", {c.visual_tokens() + 1, c.embed_dim},
                          Init::trunc_normal, 0.02);
}

template <class T>
typename ImageEncoderT<T>::Out ImageEncoderT<T>::forward(GraphT<T>& g, int images) const {
    const TensorT<T>& im = g.val(images);
    check(im.ndim() == 4 && im.dim(1) == 3, "image encoder: expects [N,3,H,W]");
    check(im.dim(2) % 32 == 0 && im.dim(3) % 32 == 0,
          "image encoder: input sides must be divisible by 32");
    const int64_t N = im.dim(0);

    Out out{};
    int x = stem.forward(g, images);
    for (int s = 0; s < 4; ++s) {
        const Stage& st = stages[static_cast<size_t>(s)];
        x = st.down.forward(g, x);
        for (const auto& cb : st.convs) {
            const int y = cb.forward(g, x);
            x = cfg->residual ? g.add(x, y) : y;
        }
        out.c[static_cast<size_t>(s)] = x;
    }

    std::array<int, 4> lat{};
    for (int i = 0; i < 4; ++i) {
        lat[static_cast<size_t>(i)] =
            lateral[static_cast<size_t>(i)].forward(g, out.c[static_cast<size_t>(i)]);
    }
    out.p[3] = lat[3];
    for (int i = 2; i >= 0; --i) {
        const TensorT<T>& lo = g.val(lat[static_cast<size_t>(i)]);
        const int up = g.bilinear_resize(out.p[static_cast<size_t>(i + 1)], lo.dim(2), lo.dim(3));
        out.p[static_cast<size_t>(i)] = g.add(lat[static_cast<size_t>(i)], up);
    }

    const TensorT<T>& p3v = g.val(out.p[1]);
    const int64_t h8 = p3v.dim(2), w8 = p3v.dim(3);
    const int ds_p2 = g.avgpool2x2(out.p[0]);
    const int us_p4 = g.bilinear_resize(out.p[2], h8, w8);
    const int us_p5 = g.bilinear_resize(out.p[3], h8, w8);
    out.fpn_concat = g.concat_channels({ds_p2, out.p[1], us_p4, us_p5});
    out.fused = reduce.forward(g, out.fpn_concat);

    const TensorT<T>& fv = g.val(out.fused);
    out.gh = fv.dim(2);
    out.gw = fv.dim(3);
    const int64_t S = out.gh * out.gw;
    check(static_cast<int64_t>(pool_pos->value.dim(0)) == S + 1,
          "image encoder: input size does not match the configured grid");

    int tokens = g.flatten_grid(out.fused);          // [N, S, D]
    int pooled = g.mean_dim1(tokens);                // [N, 1, D]
    int seq = g.concat_dim1(pooled, tokens);         // [N, S+1, D]
    seq = g.add_bias(seq, g.param(*pool_pos));
    auto att = pool.forward(g, seq, seq, -1);
    out.pool_attn = att.attn;
    out.vis_seq = att.out;
    out.cls = g.reshape(g.slice_dim1(att.out, 0, 1), {N, cfg->embed_dim});
    out.grid = g.slice_dim1(att.out, 1, S);
    return out;
}

// ---------------------------------------------------------- text encoder ----

template <class T>
TextEncoderT<T>::TextEncoderT(ParamStoreT<T>& ps, const ModelConfig& c) : cfg(&c) {
    tok = EmbeddingT<T>(ps, "text.tok", c.vocab_size, c.embed_dim);
    pos = &ps.create("text.pos", {c.seq_len + 1, c.embed_dim}, Init::trunc_normal, 0.02);
    for (int64_t b = 0; b < c.text_blocks; ++b) {
        blocks.emplace_back(ps, "text.block" + std::to_string(b), c.embed_dim, c.heads,
                            c.embed_dim * c.ffn_ratio, c.text_ffn, c.dropout);
    }
    if (c.final_ln) final_ln = LayerNormT<T>(ps, "text.final_ln", c.embed_dim);
}

template <class T>
typename TextEncoderT<T>::Out TextEncoderT<T>::forward(GraphT<T>& g,
                                                       const std::vector<int32_t>& ids,
                                                       const std::vector<uint8_t>& live,
                                                       int64_t N) const {
    const int64_t L = cfg->seq_len + 1;
    check(static_cast<int64_t>(ids.size()) == N * L, "text encoder: id count mismatch");
    check(ids.size() == live.size(), "text encoder: mask size mismatch");
    for (int32_t id : ids) {
        check(id >= 0 && id < cfg->vocab_size, "text encoder: token id out of vocab range");
    }

    Out out{};
    int x = tok.forward(g, ids, {N, L, cfg->embed_dim});
    x = g.add_bias(x, g.param(*pos));
    const int mask = key_mask_node<T>(g, live, N, cfg->heads, L, L);
    for (const auto& blk : blocks) {
        auto r = blk.forward(g, x, mask);
        x = r.out;
        out.attn.push_back(r.attn);
    }
    if (cfg->final_ln) x = final_ln.forward(g, x);
    out.tokens = x;
    out.cls = g.reshape(g.slice_dim1(x, 0, 1), {N, cfg->embed_dim});
    return out;
}

// --------------------------------------------------------- cross encoder ----

template <class T>
CrossEncoderT<T>::CrossEncoderT(ParamStoreT<T>& ps, const ModelConfig& c) : cfg(&c) {
    for (int64_t b = 0; b < c.cross_blocks; ++b) {
        blocks.emplace_back(ps, "cross.block" + std::to_string(b), c.embed_dim, c.heads,
                            c.embed_dim * c.ffn_ratio, c.dropout);
    }
    final_ln = LayerNormT<T>(ps, "cross.final_ln", c.embed_dim);
    mlm_bias = &ps.create("cross.mlm_bias", {c.vocab_size}, Init::zeros, 0.0, true);
}

template <class T>
typename CrossEncoderT<T>::Out CrossEncoderT<T>::forward(GraphT<T>& g, int text_tokens,
                                                         int vis_seq,
                                                         const std::vector<uint8_t>& live,
                                                         int64_t N, ParamT<T>& mlm_table) const {
    const int64_t L = cfg->seq_len + 1;
    const TensorT<T>& tt = g.val(text_tokens);
    const TensorT<T>& vs = g.val(vis_seq);
    check(tt.ndim() == 3 && tt.dim(2) == cfg->embed_dim, "cross encoder: bad text input");
    check(vs.ndim() == 3 && vs.dim(2) == cfg->embed_dim, "cross encoder: bad visual input");
    check(tt.dim(0) == N && vs.dim(0) == N, "cross encoder: batch mismatch");

    Out out{};
    const int self_mask = key_mask_node<T>(g, live, N, cfg->heads, L, L);
    int x = text_tokens;
    for (const auto& blk : blocks) {
        auto r = blk.forward(g, x, vis_seq, self_mask);
        x = r.out;
        out.self_attn.push_back(r.self_attn_w);
        out.cross_attn.push_back(r.cross_attn_w);
    }
    out.states = x;

    int h = final_ln.forward(g, x);
    h = g.reshape(h, {N * L, cfg->embed_dim});
    int logits = g.matmul(h, g.param(mlm_table), /*tb=*/true);
    logits = g.add_bias(logits, g.param(*mlm_bias));
    out.mlm_logits = g.reshape(logits, {N, L, cfg->vocab_size});
    return out;
}

// ------------------------------------------------------------------ model ----

template <class T>
ModelT<T>::ModelT(ModelConfig c) : cfg(c) {
    cfg.validate();
    image = ImageEncoderT<T>(store, cfg);
    text = TextEncoderT<T>(store, cfg);
    cross = CrossEncoderT<T>(store, cfg);
    temp_log_scale = &store.create("temperature.log_scale", {}, Init::zeros, 0.0, true);
}

template <class T>
void ModelT<T>::init_params(uint64_t seed) {
    store.init_params(seed);
    temp_log_scale->value.data[0] = static_cast<T>(std::log(1.0 / cfg.temp_init));
}

template struct ImageEncoderT<float>;
template struct ImageEncoderT<double>;
template struct TextEncoderT<float>;
template struct TextEncoderT<double>;
template struct CrossEncoderT<float>;
template struct CrossEncoderT<double>;
template struct ModelT<float>;
template struct ModelT<double>;

} // namespace vlpt
