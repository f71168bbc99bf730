#include "vlpt/probe.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "vlpt/kernels.hpp"
#include "vlpt/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace vlpt {

namespace {

std::vector<double> normalized_rows(const Tensor& t) {
    const int64_t R = t.dim(0), D = t.dim(1);
    std::vector<double> out(static_cast<size_t>(R * D));
    for (int64_t r = 0; r < R; ++r) {
        double s = 0.0;
        for (int64_t d = 0; d < D; ++d) s += double(t.ptr()[r * D + d]) * double(t.ptr()[r * D + d]);
        const double inv = 1.0 / std::max(std::sqrt(s), 1e-12);
        for (int64_t d = 0; d < D; ++d) out[static_cast<size_t>(r * D + d)] = double(t.ptr()[r * D + d]) * inv;
    }
    return out;
}

struct EncodedBatch {
    Tensor img_cls;
    Tensor txt_cls;
};

EncodedBatch encode_clean_batch(const Model& model, const DatasetReader& reader,
                                const std::vector<int64_t>& idx, const Vocab& vocab) {
    Graph g(false);
    const int img = g.input(reader.image_batch(idx));
    const auto vis = model.encode_image(g, img);
    std::vector<int32_t> ids;
    std::vector<uint8_t> live;
    for (int64_t i : idx) {
        TokenSequence seq = assemble(reader.record(i).text, vocab,
                                     static_cast<int>(model.cfg.seq_len));
        ids.insert(ids.end(), seq.ids.begin(), seq.ids.end());
        live.insert(live.end(), seq.attention_mask.begin(), seq.attention_mask.end());
    }
    const auto txt = model.encode_text(g, ids, live, static_cast<int64_t>(idx.size()));
    return {g.val(vis.cls), g.val(txt.cls)};
}

} // namespace

std::vector<AttnMap> attention_map(const Model& model, const Vocab& vocab,
                                   const SampleRecord& rec, const Tensor& image, int block,
                                   int head) {
    check(block >= 1 && block <= static_cast<int>(model.cfg.cross_blocks),
          "attention_map: block index out of range");
    check(head >= 1 && head <= static_cast<int>(model.cfg.heads),
          "attention_map: head index out of range");
    check(image.ndim() == 3, "attention_map: expects one [3,H,W] image");

    Graph g(false);
    Tensor batch({1, image.dim(0), image.dim(1), image.dim(2)}, image.data);
    const auto vis = model.encode_image(g, g.input(std::move(batch)));
    TokenSequence seq = assemble(rec.text, vocab, static_cast<int>(model.cfg.seq_len));
    const auto txt = model.encode_text(g, seq.ids, seq.attention_mask, 1);
    const auto crossed = model.encode_cross(g, txt.tokens, vis.vis_seq, seq.attention_mask, 1);

    const Tensor& attn = g.val(crossed.cross_attn[static_cast<size_t>(block - 1)]);
    const int64_t Lq = attn.dim(1), Lk = attn.dim(2);
    const int64_t S = vis.gh * vis.gw;
    check(Lk == S + 1, "attention_map: unexpected key count");

    std::vector<AttnMap> maps;
    for (int pos = 1; pos < static_cast<int>(Lq); ++pos) {
        if (!seq.attention_mask[static_cast<size_t>(pos)]) break;
        AttnMap m;
        m.sample_id = rec.id;
        m.token_index = pos;
        m.token = vocab.token(seq.ids[static_cast<size_t>(pos)]);
        m.block = block;
        m.head = head;
        m.gh = vis.gh;
        m.gw = vis.gw;
        for (size_t w = 0; w < seq.word_spans.size(); ++w) {
            if (pos >= seq.word_spans[w].first && pos < seq.word_spans[w].second) {
                m.word_index = static_cast<int>(w);
            }
        }
        const float* row = attn.ptr() + ((static_cast<int64_t>(head - 1) * Lq) + pos) * Lk;
        m.full_row_sum = 0.0;
        for (int64_t k = 0; k < Lk; ++k) m.full_row_sum += double(row[k]);
        m.map.resize(static_cast<size_t>(S));
        for (int64_t k = 0; k < S; ++k) m.map[static_cast<size_t>(k)] = double(row[1 + k]);
        maps.push_back(std::move(m));
    }
    return maps;
}

double localization_score(const AttnMap& map, const Quad& box, int64_t canvas_h,
                          int64_t canvas_w) {
    check(box.area() > 0.0, "localization_score: degenerate zero-area box");
    double total = 0.0;
    for (double v : map.map) total += v;
    check(total > 0.0, "localization_score: empty attention map");

    const double sh = double(canvas_h) / double(map.gh);
    const double sw = double(canvas_w) / double(map.gw);
    const double per_pixel_div = sh * sw;

    double in_mass = 0.0;
    int64_t in_count = 0;
    for (int64_t y = 0; y < canvas_h; ++y) {
        for (int64_t x = 0; x < canvas_w; ++x) {
            if (!box.contains(double(x) + 0.5, double(y) + 0.5)) continue;
            const int64_t cy = std::min<int64_t>(map.gh - 1, static_cast<int64_t>(double(y) / sh));
            const int64_t cx = std::min<int64_t>(map.gw - 1, static_cast<int64_t>(double(x) / sw));
            in_mass += map.map[static_cast<size_t>(cy * map.gw + cx)] / total / per_pixel_div;
            ++in_count;
        }
    }
    check(in_count > 0, "localization_score: box contains no pixel centers");
    const double area_frac = double(in_count) / double(canvas_h * canvas_w);
    return in_mass / area_frac;
}

RetrievalResult retrieval_eval(const Model& model, const DatasetReader& reader, const Vocab& vocab,
                               int64_t batch_size, uint64_t seed, int64_t max_batches) {
    check(batch_size >= 2, "retrieval_eval: batch size must be >= 2");
    check(reader.size() >= batch_size, "retrieval_eval: split smaller than one batch");
    auto batches = plan_epoch(reader.size(), batch_size, mix_seed(seed, 0x9E7), 0);
    if (static_cast<int64_t>(batches.size()) > max_batches) {
        batches.resize(static_cast<size_t>(max_batches));
    }

    int64_t hits_i2t = 0, hits_t2i = 0, rows = 0;
    for (const auto& idx : batches) {
        const EncodedBatch enc = encode_clean_batch(model, reader, idx, vocab);
        const int64_t N = enc.img_cls.dim(0), D = enc.img_cls.dim(1);
        const auto in = normalized_rows(enc.img_cls);
        const auto tn = normalized_rows(enc.txt_cls);
        for (int64_t i = 0; i < N; ++i) {
            double diag = 0.0;
            for (int64_t d = 0; d < D; ++d) {
                diag += in[static_cast<size_t>(i * D + d)] * tn[static_cast<size_t>(i * D + d)];
            }
            bool best_i2t = true, best_t2i = true;
            for (int64_t j = 0; j < N; ++j) {
                if (j == i) continue;
                double sij = 0.0, sji = 0.0;
                for (int64_t d = 0; d < D; ++d) {
                    sij += in[static_cast<size_t>(i * D + d)] * tn[static_cast<size_t>(j * D + d)];
                    sji += in[static_cast<size_t>(j * D + d)] * tn[static_cast<size_t>(i * D + d)];
                }
                if (sij >= diag) best_i2t = false; // ties do not count as a hit
                if (sji >= diag) best_t2i = false;
            }
            hits_i2t += best_i2t ? 1 : 0;
            hits_t2i += best_t2i ? 1 : 0;
            ++rows;
        }
    }
    RetrievalResult r;
    r.batches = static_cast<int64_t>(batches.size());
    r.i2t_top1 = rows ? double(hits_i2t) / double(rows) : 0.0;
    r.t2i_top1 = rows ? double(hits_t2i) / double(rows) : 0.0;
    return r;
}

std::optional<double> mlm_accuracy(const Model& model, const DatasetReader& reader,
                                   const Vocab& vocab, uint64_t mask_seed, int64_t batch_size,
                                   int64_t max_batches) {
    check(reader.size() >= 1, "mlm_accuracy: empty split");
    auto batches = plan_epoch(reader.size(), std::min(batch_size, reader.size()),
                              mix_seed(mask_seed, 0x31F), 0);
    if (static_cast<int64_t>(batches.size()) > max_batches) {
        batches.resize(static_cast<size_t>(max_batches));
    }

    int64_t hits = 0, count = 0;
    const int64_t L = model.cfg.seq_len + 1;
    for (const auto& idx : batches) {
        Graph g(false);
        const auto vis = model.encode_image(g, g.input(reader.image_batch(idx)));
        std::vector<int32_t> ids;
        std::vector<uint8_t> live;
        std::vector<int32_t> labels;
        for (int64_t i : idx) {
            const SampleRecord& rec = reader.record(i);
            TokenSequence seq = assemble(rec.text, vocab, static_cast<int>(model.cfg.seq_len));
            MaskedSequence m = mask_tokens(seq, vocab, mix_seed(mask_seed, rec.id));
            ids.insert(ids.end(), m.input_ids.begin(), m.input_ids.end());
            live.insert(live.end(), seq.attention_mask.begin(), seq.attention_mask.end());
            labels.insert(labels.end(), m.labels.begin(), m.labels.end());
        }
        const int64_t N = static_cast<int64_t>(idx.size());
        const auto txt = model.encode_text(g, ids, live, N);
        const auto crossed = model.encode_cross(g, txt.tokens, vis.vis_seq, live, N);
        const Tensor& logits = g.val(crossed.mlm_logits);
        const int64_t V = logits.dim(2);
        for (int64_t r = 0; r < N * L; ++r) {
            if (labels[static_cast<size_t>(r)] < 0) continue;
            const float* row = logits.ptr() + r * V;
            int64_t best = 0;
            for (int64_t v = 1; v < V; ++v) {
                if (row[v] > row[best]) best = v;
            }
            hits += (best == labels[static_cast<size_t>(r)]) ? 1 : 0;
            ++count;
        }
    }
    if (count == 0) return std::nullopt;
    return double(hits) / double(count);
}

std::vector<std::pair<std::string, double>> nn_words(const Model& model, const Vocab& vocab,
                                                     const std::string& query, int64_t k) {
    if (k <= 0) return {};
    const std::vector<int32_t> pieces = tokenize(query, vocab);
    check(!(pieces.size() == 1 && pieces[0] == Vocab::kUnk),
          "nn_words: query tokenizes to [UNK] only");

    const Tensor& table = model.text.tok.table->value;
    const int64_t D = table.dim(1);
    std::vector<double> q(static_cast<size_t>(D), 0.0);
    for (int32_t p : pieces) {
        for (int64_t d = 0; d < D; ++d) q[static_cast<size_t>(d)] += double(table.ptr()[p * D + d]);
    }
    double qn = 0.0;
    for (double v : q) qn += v * v;
    qn = std::max(std::sqrt(qn), 1e-12);

    std::string lowered = query;
    for (auto& c : lowered) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));

    std::vector<std::pair<double, int32_t>> scored;
    for (int32_t v = Vocab::kNumSpecial; v < vocab.size(); ++v) {
        const std::string& tok = vocab.token(v);
        if (tok.rfind("##", 0) == 0) continue; // continuation pieces are not words
        if (tok == lowered) continue;
        double dot = 0.0, n = 0.0;
        for (int64_t d = 0; d < D; ++d) {
            dot += q[static_cast<size_t>(d)] * double(table.ptr()[v * D + d]);
            n += double(table.ptr()[v * D + d]) * double(table.ptr()[v * D + d]);
        }
        scored.emplace_back(dot / (qn * std::max(std::sqrt(n), 1e-12)), v);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::vector<std::pair<std::string, double>> out;
    for (size_t i = 0; i < scored.size() && static_cast<int64_t>(i) < k; ++i) {
        out.emplace_back(vocab.token(scored[i].second), scored[i].first);
    }
    return out;
}

std::string ProbeReport::to_json() const {
    json j;
    j["retrieval"]["i2t_top1"] = retrieval.i2t_top1;
    j["retrieval"]["t2i_top1"] = retrieval.t2i_top1;
    j["retrieval"]["batches"] = retrieval.batches;
    if (mlm_acc) {
        j["mlm_accuracy"] = *mlm_acc;
    } else {
        j["mlm_accuracy"] = nullptr;
    }
    j["localization"]["mean_ratio"] = mean_localization;
    j["localization"]["pairs"] = localization_pairs;
    json tables = json::object();
    for (const auto& [query, rows] : nn_tables) {
        json list = json::array();
        for (const auto& [word, sim] : rows) list.push_back({{"word", word}, {"sim", sim}});
        tables[query] = list;
    }
    j["nn_tables"] = tables;
    return j.dump(2);
}

namespace {

std::string sanitize_token(const std::string& t) {
    std::string out;
    for (char c : t) {
        if (std::isalnum(static_cast<unsigned char>(c))) out += c;
    }
    return out.empty() ? "tok" : out;
}

void write_overlay(const std::string& path, const Tensor& image, const AttnMap& m) {
    const int64_t H = image.dim(1), W = image.dim(2);
    Tensor up({1, 1, H, W});
    Tensor grid({1, 1, m.gh, m.gw});
    double mx = 0.0;
    for (double v : m.map) mx = std::max(mx, v);
    if (mx <= 0.0) mx = 1.0;
    for (int64_t i = 0; i < m.gh * m.gw; ++i) {
        grid.ptr()[i] = static_cast<float>(m.map[static_cast<size_t>(i)] / mx);
    }
    kern::bilinear_resize<float>(1, 1, m.gh, m.gw, H, W, grid.ptr(), up.ptr());

    ImageU8 out(static_cast<int>(H), static_cast<int>(W), 3);
    for (int64_t y = 0; y < H; ++y) {
        for (int64_t x = 0; x < W; ++x) {
            const float a = 0.6f * up.ptr()[y * W + x];
            for (int c = 0; c < 3; ++c) {
                const float base = image.ptr()[(c * H + y) * W + x];
                const float heat = c == 0 ? 1.0f : 0.1f;
                const float v = (1.0f - a) * base + a * heat;
                out.at(static_cast<int>(y), static_cast<int>(x), c) =
                    static_cast<uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
            }
        }
    }
    write_png(path, out);
}

} // namespace

ProbeReport run_probe(const Model& model, const Vocab& vocab, const DatasetReader& val,
                      const ProbeConfig& cfg, const std::string& out_dir) {
    check(val.size() >= 1, "run_probe: validation split is empty");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    check(!ec, "run_probe: cannot create " + out_dir);

    ProbeReport report;
    if (val.size() >= 2) {
        const int64_t vb = std::min<int64_t>(cfg.batch_size, val.size());
        report.retrieval = retrieval_eval(model, val, vocab, vb, cfg.seed, cfg.max_batches);
        report.mlm_acc = mlm_accuracy(model, val, vocab, cfg.seed, vb, cfg.max_batches);
    }

    double loc_sum = 0.0;
    int64_t loc_n = 0;
    const int64_t ns = std::min<int64_t>(cfg.loc_samples, val.size());
    int64_t overlays_written = 0;
    for (int64_t i = 0; i < ns; ++i) {
        const SampleRecord& rec = val.record(i);
        if (rec.text.empty()) continue;
        const Tensor image = val.image(i);
        const auto maps = attention_map(model, vocab, rec, image, cfg.block, cfg.head);
        for (const auto& m : maps) {
            if (m.word_index < 0 || m.word_index >= static_cast<int>(rec.boxes.size())) continue;
            const Quad& box = rec.boxes[static_cast<size_t>(m.word_index)];
            if (box.area() <= 0.0) continue;
            loc_sum += localization_score(m, box, image.dim(1), image.dim(2));
            ++loc_n;
            if (cfg.write_overlays && overlays_written < 24) {
                std::string name = std::to_string(rec.id) + "_" + sanitize_token(m.token) + "_" +
                                   std::to_string(cfg.block) + "_" + std::to_string(cfg.head);
                std::string path = (fs::path(out_dir) / (name + ".png")).string();
                if (fs::exists(path)) {
                    path = (fs::path(out_dir) /
                            (name + "_" + std::to_string(m.token_index) + ".png"))
                               .string();
                }
                write_overlay(path, image, m);
                ++overlays_written;
            }
        }
    }
    report.mean_localization = loc_n ? loc_sum / double(loc_n) : 0.0;
    report.localization_pairs = loc_n;

    for (const auto& q : cfg.nn_queries) {
        try {
            report.nn_tables.emplace_back(q, nn_words(model, vocab, q, cfg.nn_k));
        } catch (const std::exception&) {
            // queries outside the vocab alphabet are skipped
        }
    }

    std::ofstream f(fs::path(out_dir) / "probe_report.json", std::ios::binary);
    f << report.to_json() << "\n";
    check(f.good(), "run_probe: cannot write probe_report.json");
    return report;
}

} // namespace vlpt
