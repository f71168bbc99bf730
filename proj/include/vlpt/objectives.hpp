#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "vlpt/graph.hpp"

namespace vlpt {

struct ObjectiveConfig {
    double lambda_i2t = 0.5;
    double lambda_t2i = 0.5;
    int64_t wip_negatives = 63; // L
    double logit_scale_cap = 100.0;
    int32_t mlm_ignore = -1;
    bool wip_positive_contextual = true; // contextual token states vs table rows
    bool itc_on = true;
    bool wip_on = true;
    bool mlm_on = true;

    void validate() const {
        check(lambda_i2t >= 0.0 && lambda_t2i >= 0.0, "objectives: lambdas must be >= 0");
        check(wip_negatives >= 0, "objectives: negative count must be >= 0");
        check(logit_scale_cap > 0.0, "objectives: logit scale cap must be positive");
        check(itc_on || wip_on || mlm_on, "objectives: all objectives disabled");
    }
};

/// Scalar summary of one training step. `temperature` is the effective tau
/// (inverse of the logit scale).
struct LossBundle {
    double i2t = 0.0;
    double t2i = 0.0;
    double itc = 0.0;
    double wip = 0.0;
    double mlm = 0.0;
    double total = 0.0;
    double temperature = 0.0;
};

struct ItcNodes {
    int i2t = -1;
    int t2i = -1;
    int itc = -1;
};

/// Symmetric in-batch contrastive loss over paired [CLS] embeddings.
/// Rows are L2-normalized, similarities scaled by exp(temp_node), and each
/// direction reduced as the mean row cross-entropy against the diagonal.
template <class T>
ItcNodes itc_loss(GraphT<T>& g, int img_cls, int txt_cls, int temp_node, T lambda_i2t,
                  T lambda_t2i) {
    const TensorT<T>&I = g.val(img_cls), &Tx = g.val(txt_cls);
    check(I.ndim() == 2 && I.shape == Tx.shape, "itc: embeddings must be matching [N,d]");
    const int64_t N = I.dim(0);
    check(N >= 1, "itc: empty batch");

    int in = g.l2_normalize_rows(img_cls);
    int tn = g.l2_normalize_rows(txt_cls);
    int scaled = g.scale_by_exp(g.matmul(in, tn, /*tb=*/true), temp_node);

    std::vector<int32_t> diag(static_cast<size_t>(N));
    std::iota(diag.begin(), diag.end(), 0);
    const std::vector<T> w(static_cast<size_t>(N), T(1) / T(N));

    ItcNodes out;
    out.i2t = g.weighted_sum(g.ce_rows(scaled, diag, -1), w);
    out.t2i = g.weighted_sum(g.ce_rows(g.transpose2d(scaled), diag, -1), w);
    out.itc = g.combine_scalars({out.i2t, out.t2i}, {lambda_i2t, lambda_t2i});
    return out;
}

/// Top-L most cosine-similar vocabulary ids for each queried token id,
/// excluding the special ids and every id in `exclude_ids` (the image's own
/// token set). Ties break toward the smaller id. Lists are shorter than L
/// when the eligible pool runs out.
template <class T>
std::vector<std::vector<int32_t>> mine_hard_negatives(const TensorT<T>& table,
                                                      const std::vector<int32_t>& query_ids,
                                                      const std::vector<int32_t>& exclude_ids,
                                                      int64_t L, int32_t num_special = 4) {
    check(table.ndim() == 2, "miner: table must be [V,d]");
    const int64_t V = table.dim(0), D = table.dim(1);
    std::vector<uint8_t> excluded(static_cast<size_t>(V), 0);
    for (int32_t s = 0; s < num_special; ++s) excluded[static_cast<size_t>(s)] = 1;
    for (int32_t e : exclude_ids) {
        check(e >= 0 && e < V, "miner: exclude id out of range");
        excluded[static_cast<size_t>(e)] = 1;
    }

    std::vector<double> norms(static_cast<size_t>(V));
    for (int64_t v = 0; v < V; ++v) {
        double s = 0.0;
        for (int64_t d = 0; d < D; ++d) {
            const double x = double(table.ptr()[v * D + d]);
            s += x * x;
        }
        norms[static_cast<size_t>(v)] = std::sqrt(s);
    }

    std::vector<std::vector<int32_t>> out;
    out.reserve(query_ids.size());
    std::vector<std::pair<double, int32_t>> scored;
    for (int32_t q : query_ids) {
        check(q >= 0 && q < V, "miner: query id out of range");
        scored.clear();
        for (int64_t v = 0; v < V; ++v) {
            if (excluded[static_cast<size_t>(v)]) continue;
            double dot = 0.0;
            for (int64_t d = 0; d < D; ++d) {
                dot += double(table.ptr()[q * D + d]) * double(table.ptr()[v * D + d]);
            }
            const double denom = std::max(norms[static_cast<size_t>(q)] * norms[static_cast<size_t>(v)], 1e-12);
            scored.emplace_back(dot / denom, static_cast<int32_t>(v));
        }
        std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        const size_t take = std::min<size_t>(scored.size(), static_cast<size_t>(L));
        std::vector<int32_t> ids(take);
        for (size_t i = 0; i < take; ++i) ids[i] = scored[i].second;
        out.push_back(std::move(ids));
    }
    return out;
}

/// One positive token occurrence in a batch, with its mined negatives.
struct WipToken {
    int32_t sample = 0;    // batch row of the owning image
    int32_t flat_row = 0;  // row into [N*(K+1), d] contextual states
    int32_t token_id = 0;  // vocabulary id (table-row mode and bookkeeping)
    std::vector<int32_t> negative_ids;
};

/// Per-token contrastive loss: each rendered sub-word token against its
/// mined negatives, scored against the image [CLS] embedding. Sums over a
/// sample's tokens and averages over the batch.
template <class T>
int wip_loss(GraphT<T>& g, int img_cls, int text_tokens, int table_node,
             const std::vector<WipToken>& tokens, int temp_node, int64_t batch_size,
             bool contextual_positives) {
    check(batch_size >= 1, "wip: empty batch");
    if (tokens.empty()) {
        TensorT<T> zero({std::vector<int64_t>{}});
        zero.data.assign(1, T(0));
        return g.input(std::move(zero));
    }
    const int64_t R = static_cast<int64_t>(tokens.size());
    int64_t Lmax = 0;
    for (const auto& t : tokens) Lmax = std::max<int64_t>(Lmax, static_cast<int64_t>(t.negative_ids.size()));

    int img_n = g.l2_normalize_rows(img_cls);
    std::vector<int32_t> sample_rows(tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i) sample_rows[i] = tokens[i].sample;
    int img_rows = g.gather_rows_nd(img_n, sample_rows); // [R, d]

    int pos_vecs;
    if (contextual_positives) {
        std::vector<int32_t> rows(tokens.size());
        for (size_t i = 0; i < tokens.size(); ++i) rows[i] = tokens[i].flat_row;
        pos_vecs = g.gather_rows_nd(text_tokens, rows);
    } else {
        std::vector<int32_t> ids(tokens.size());
        for (size_t i = 0; i < tokens.size(); ++i) ids[i] = tokens[i].token_id;
        pos_vecs = g.gather_rows_nd(table_node, ids);
    }
    int pos_n = g.l2_normalize_rows(pos_vecs);
    int pos_sims = g.reshape(g.rowwise_dot(img_rows, pos_n), {R, 1});

    int logits;
    TensorT<T> pad_mask({R, 1 + Lmax});
    if (Lmax > 0) {
        const int64_t D = g.val(img_rows).dim(1);
        std::vector<int32_t> flat_negs(static_cast<size_t>(R * Lmax), 0);
        for (int64_t r = 0; r < R; ++r) {
            const auto& negs = tokens[static_cast<size_t>(r)].negative_ids;
            for (int64_t l = 0; l < Lmax; ++l) {
                const bool valid = l < static_cast<int64_t>(negs.size());
                flat_negs[static_cast<size_t>(r * Lmax + l)] = valid ? negs[static_cast<size_t>(l)] : 0;
                pad_mask.ptr()[r * (1 + Lmax) + 1 + l] = valid ? T(0) : T(-1e30);
            }
        }
        int neg_vecs = g.l2_normalize_rows(g.gather_rows_nd(table_node, flat_negs));
        int neg_mat = g.reshape(neg_vecs, {R, Lmax, D});
        int img_col = g.reshape(img_rows, {R, D, 1});
        int neg_sims = g.reshape(g.bmm(neg_mat, img_col), {R, Lmax});
        logits = g.concat_cols(pos_sims, neg_sims);
    } else {
        logits = pos_sims;
    }
    int scaled = g.scale_by_exp(logits, temp_node);
    if (Lmax > 0) scaled = g.add(scaled, g.input(std::move(pad_mask)));

    const std::vector<int32_t> targets(static_cast<size_t>(R), 0);
    const std::vector<T> w(static_cast<size_t>(R), T(1) / T(batch_size));
    return g.weighted_sum(g.ce_rows(scaled, targets, -1), w);
}

/// Mean cross-entropy over the labeled (masked) positions only; zero when
/// nothing is masked in the batch.
template <class T>
int mlm_loss(GraphT<T>& g, int mlm_logits, const std::vector<int32_t>& labels, int32_t ignore) {
    const TensorT<T>& lg = g.val(mlm_logits);
    const int64_t V = lg.shape.back();
    const int64_t R = lg.numel() / V;
    check(static_cast<int64_t>(labels.size()) == R, "mlm: label count mismatch");
    int64_t masked = 0;
    for (int32_t l : labels) masked += (l != ignore) ? 1 : 0;
    if (masked == 0) {
        TensorT<T> zero({std::vector<int64_t>{}});
        zero.data.assign(1, T(0));
        return g.input(std::move(zero));
    }
    int flat = g.reshape(mlm_logits, {R, V});
    std::vector<T> w(static_cast<size_t>(R), T(0));
    for (int64_t r = 0; r < R; ++r) {
        if (labels[static_cast<size_t>(r)] != ignore) w[static_cast<size_t>(r)] = T(1) / T(masked);
    }
    return g.weighted_sum(g.ce_rows(flat, labels, ignore), w);
}

/// total = itc + wip + mlm, unweighted. Non-finite components are an error.
inline LossBundle make_bundle(double i2t, double t2i, double itc, double wip, double mlm,
                              double logit_scale) {
    LossBundle b;
    b.i2t = i2t;
    b.t2i = t2i;
    b.itc = itc;
    b.wip = wip;
    b.mlm = mlm;
    b.total = itc + wip + mlm;
    b.temperature = 1.0 / logit_scale;
    for (double v : {b.i2t, b.t2i, b.itc, b.wip, b.mlm, b.total}) {
        check(std::isfinite(v), "loss bundle: non-finite component");
    }
    return b;
}

/// Projects the learnable log scale so exp(s) never exceeds the cap, holding
/// the bound exactly in the working precision.
template <class T>
void clamp_temperature(ParamT<T>& temp_log_scale, double cap) {
    T& s = temp_log_scale.value.data[0];
    const T lim = static_cast<T>(std::log(cap));
    if (s > lim) s = lim;
    while (std::exp(double(s)) > cap) {
        s = std::nextafter(s, T(-1e30));
    }
}

} // namespace vlpt
