#include "vlpt/trainer.hpp"

#include <json.hpp>
#include <omp.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "vlpt/hash.hpp"
#include "vlpt/probe.hpp"
#include "vlpt/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace vlpt {

void TrainConfig::validate() const {
    check(batch_size >= 2, "train config: batch_size must be >= 2 for in-batch negatives");
    check(total_steps >= 0, "train config: total_steps must be >= 0");
    check(warmup_steps >= 0 && (total_steps == 0 || warmup_steps < total_steps),
          "train config: warmup must be smaller than total steps");
    check(peak_lr > 0.0, "train config: peak_lr must be positive");
    check(weight_decay >= 0.0, "train config: weight_decay must be >= 0");
    check(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
          "train config: betas must lie in [0, 1)");
    check(adam_eps > 0.0, "train config: adam_eps must be positive");
    check(val_interval >= 1 && checkpoint_interval >= 1, "train config: intervals must be >= 1");
}

double lr_at(int64_t step, const TrainConfig& cfg) {
    check(step >= 0 && step <= cfg.total_steps, "lr_at: step out of range");
    if (cfg.total_steps == 0) return 0.0;
    if (step <= cfg.warmup_steps) {
        if (cfg.warmup_steps == 0) return cfg.peak_lr;
        return cfg.peak_lr * double(step) / double(cfg.warmup_steps);
    }
    return cfg.peak_lr * double(cfg.total_steps - step) / double(cfg.total_steps - cfg.warmup_steps);
}

// -------------------------------------------------------------- optimizer ----

AdamW::AdamW(std::vector<Param*> params, const TrainConfig& cfg)
    : params_(std::move(params)), cfg_(cfg) {
    for (Param* p : params_) {
        if (p->m.data.empty()) p->m = Tensor(p->value.shape);
        if (p->v.data.empty()) p->v = Tensor(p->value.shape);
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));

    if (cfg_.grad_clip > 0.0) {
        double sq = 0.0;
        for (Param* p : params_) {
            for (float g : p->grad.data) sq += double(g) * double(g);
        }
        const double norm = std::sqrt(sq);
        if (norm > cfg_.grad_clip) {
            const float scale = static_cast<float>(cfg_.grad_clip / norm);
            for (Param* p : params_) {
                for (float& g : p->grad.data) g *= scale;
            }
        }
    }

    for (Param* p : params_) {
        const double wd = p->no_decay ? 0.0 : cfg_.weight_decay;
        float* w = p->value.ptr();
        float* gr = p->grad.ptr();
        float* m = p->m.ptr();
        float* v = p->v.ptr();
        const int64_t n = p->value.numel();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) {
            const double g = double(gr[i]);
            const double mi = cfg_.beta1 * double(m[i]) + (1.0 - cfg_.beta1) * g;
            const double vi = cfg_.beta2 * double(v[i]) + (1.0 - cfg_.beta2) * g * g;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            const double upd = mhat / (std::sqrt(vhat) + cfg_.adam_eps) + wd * double(w[i]);
            w[i] = static_cast<float>(double(w[i]) - lr * upd);
        }
    }
}

// ------------------------------------------------------------------ batch ----

TrainBatch make_batch(const DatasetReader& reader, const std::vector<int64_t>& idx,
                      const Vocab& vocab, int64_t K, uint64_t mask_seed,
                      const MaskPolicy& policy) {
    TrainBatch b;
    b.n = static_cast<int64_t>(idx.size());
    b.images = reader.image_batch(idx);
    for (size_t k = 0; k < idx.size(); ++k) {
        const SampleRecord& rec = reader.record(idx[k]);
        TokenSequence seq = assemble(rec.text, vocab, static_cast<int>(K));
        MaskedSequence masked = mask_tokens(seq, vocab, mix_seed(mask_seed, rec.id), policy);
        b.clean_ids.insert(b.clean_ids.end(), seq.ids.begin(), seq.ids.end());
        b.live.insert(b.live.end(), seq.attention_mask.begin(), seq.attention_mask.end());
        b.masked_ids.insert(b.masked_ids.end(), masked.input_ids.begin(), masked.input_ids.end());
        b.labels.insert(b.labels.end(), masked.labels.begin(), masked.labels.end());
        b.sample_ids.push_back(rec.id);
        b.seqs.push_back(std::move(seq));
    }
    return b;
}

// ------------------------------------------------------------------- step ----

namespace {

std::vector<WipToken> collect_wip_tokens(const TrainBatch& batch, const Model& model,
                                         int64_t L) {
    const int64_t Lrow = model.cfg.seq_len + 1;
    std::vector<WipToken> out;
    for (int64_t n = 0; n < batch.n; ++n) {
        std::vector<int32_t> present;
        std::set<int32_t> seen;
        for (int64_t pos = 1; pos < Lrow; ++pos) {
            const int32_t id = batch.clean_ids[static_cast<size_t>(n * Lrow + pos)];
            if (!batch.live[static_cast<size_t>(n * Lrow + pos)]) continue;
            if (id < Vocab::kNumSpecial) continue; // [UNK] carries no word identity
            if (seen.insert(id).second) present.push_back(id);
        }
        if (present.empty()) continue;
        // one mining query per distinct id; reuse across repeated occurrences
        const auto mined =
            mine_hard_negatives(model.text.tok.table->value, present, present, L);
        for (int64_t pos = 1; pos < Lrow; ++pos) {
            const int32_t id = batch.clean_ids[static_cast<size_t>(n * Lrow + pos)];
            if (!batch.live[static_cast<size_t>(n * Lrow + pos)]) continue;
            if (id < Vocab::kNumSpecial) continue;
            WipToken t;
            t.sample = static_cast<int32_t>(n);
            t.flat_row = static_cast<int32_t>(n * Lrow + pos);
            t.token_id = id;
            for (size_t q = 0; q < present.size(); ++q) {
                if (present[q] == id) {
                    t.negative_ids = mined[q];
                    break;
                }
            }
            out.push_back(std::move(t));
        }
    }
    return out;
}

} // namespace

LossBundle train_step(Model& model, const TrainBatch& batch, const ObjectiveConfig& obj,
                      AdamW& opt, double lr, double logit_cap, uint64_t graph_seed) {
    obj.validate();
    check(batch.n >= 2, "train_step: batch size must be >= 2");

    model.store.zero_grads();
    Graph g(true, graph_seed);
    const int img_node = g.input(batch.images);
    const auto vis = model.encode_image(g, img_node);
    const int temp_node = g.param(*model.temp_log_scale);

    int itc_node = -1, i2t_node = -1, t2i_node = -1, wip_node = -1, mlm_node = -1;

    if (obj.itc_on || obj.wip_on) {
        const auto txt = model.encode_text(g, batch.clean_ids, batch.live, batch.n);
        if (obj.itc_on) {
            const auto nodes = itc_loss<float>(g, vis.cls, txt.cls, temp_node,
                                               static_cast<float>(obj.lambda_i2t),
                                               static_cast<float>(obj.lambda_t2i));
            itc_node = nodes.itc;
            i2t_node = nodes.i2t;
            t2i_node = nodes.t2i;
        }
        if (obj.wip_on) {
            const auto toks = collect_wip_tokens(batch, model, obj.wip_negatives);
            wip_node = wip_loss<float>(g, vis.cls, txt.tokens, g.param(*model.text.tok.table),
                                       toks, temp_node, batch.n, obj.wip_positive_contextual);
        }
    }
    if (obj.mlm_on) {
        const auto masked_txt = model.encode_text(g, batch.masked_ids, batch.live, batch.n);
        const auto crossed = model.encode_cross(g, masked_txt.tokens, vis.vis_seq, batch.live,
                                                batch.n);
        mlm_node = mlm_loss<float>(g, crossed.mlm_logits, batch.labels, obj.mlm_ignore);
    }

    std::vector<int> parts;
    std::vector<float> coef;
    for (int node : {itc_node, wip_node, mlm_node}) {
        if (node >= 0) {
            parts.push_back(node);
            coef.push_back(1.0f);
        }
    }
    const int total_node = g.combine_scalars(parts, coef);

    const auto scalar = [&](int node) { return node >= 0 ? double(g.val(node).data[0]) : 0.0; };
    LossBundle bundle;
    try {
        bundle = make_bundle(scalar(i2t_node), scalar(t2i_node), scalar(itc_node),
                             scalar(wip_node), scalar(mlm_node),
                             std::exp(double(model.temp_log_scale->value.data[0])));
    } catch (const std::exception&) {
        throw std::runtime_error(
            "train_step: non-finite loss (i2t=" + std::to_string(scalar(i2t_node)) +
            " t2i=" + std::to_string(scalar(t2i_node)) + " wip=" + std::to_string(scalar(wip_node)) +
            " mlm=" + std::to_string(scalar(mlm_node)) + "); step aborted");
    }

    g.backward(total_node);
    opt.step(lr);
    clamp_temperature(*model.temp_log_scale, logit_cap);
    return bundle;
}

// ------------------------------------------------------------- train loop ----

TrainResult train(Model& model, const TrainConfig& cfg, const ObjectiveConfig& obj,
                  const DatasetReader& train_reader, const DatasetReader& val_reader,
                  const Vocab& vocab, const std::string& out_dir, const std::string& config_hash,
                  const std::string& vocab_hash, AdamW& opt, int64_t start_step) {
    cfg.validate();
    obj.validate();
    if (cfg.threads > 0) omp_set_num_threads(cfg.threads);
    check(train_reader.size() >= cfg.batch_size,
          "train: training split smaller than one batch");

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    check(!ec, "train: cannot create output directory " + out_dir);
    std::ofstream metrics(fs::path(out_dir) / "metrics.jsonl",
                          start_step > 0 ? std::ios::app : std::ios::trunc);
    check(metrics.good(), "train: cannot open metrics.jsonl");

    const int64_t batches_per_epoch = train_reader.size() / cfg.batch_size;
    TrainResult result;

    if (cfg.total_steps == 0) {
        save_checkpoint(model, 0, (fs::path(out_dir) / "final").string(), config_hash, vocab_hash);
        result.final_checkpoint = (fs::path(out_dir) / "final").string();
        return result;
    }

    std::vector<std::vector<int64_t>> epoch;
    int64_t epoch_idx = -1;

    const auto t0 = std::chrono::steady_clock::now();
    for (int64_t step = start_step + 1; step <= cfg.total_steps; ++step) {
        const int64_t b = (step - 1) % batches_per_epoch;
        const int64_t e = (step - 1) / batches_per_epoch;
        if (e != epoch_idx) {
            epoch = plan_epoch(train_reader.size(), cfg.batch_size, cfg.seed, e);
            epoch_idx = e;
        }
        const TrainBatch batch = make_batch(train_reader, epoch[static_cast<size_t>(b)], vocab,
                                            model.cfg.seq_len, mix_seed(cfg.seed, 0xABCD + step));
        const double lr = lr_at(step, cfg);

        StepRecord rec;
        rec.step = step;
        rec.lr = lr;
        rec.loss = train_step(model, batch, obj, opt, lr, obj.logit_scale_cap,
                              mix_seed(cfg.seed, 0x6AF0u + static_cast<uint64_t>(step)));
        rec.wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count();

        if (step % cfg.val_interval == 0 && val_reader.size() >= 2) {
            const int64_t vb = std::min<int64_t>(cfg.batch_size, val_reader.size());
            const auto r = retrieval_eval(model, val_reader, vocab, vb, cfg.seed, cfg.val_batches);
            rec.val_retrieval_i2t = r.i2t_top1;
            rec.val_retrieval_t2i = r.t2i_top1;
            rec.val_mlm_accuracy =
                mlm_accuracy(model, val_reader, vocab, cfg.seed, vb, cfg.val_batches);
        }

        json line;
        line["step"] = rec.step;
        line["i2t"] = rec.loss.i2t;
        line["t2i"] = rec.loss.t2i;
        line["itc"] = rec.loss.itc;
        line["wip"] = rec.loss.wip;
        line["mlm"] = rec.loss.mlm;
        line["total"] = rec.loss.total;
        line["lr"] = rec.lr;
        line["temperature"] = rec.loss.temperature;
        line["wall_ms"] = rec.wall_ms;
        if (rec.val_mlm_accuracy) line["val_mlm_accuracy"] = *rec.val_mlm_accuracy;
        if (rec.val_retrieval_i2t) line["val_retrieval_i2t"] = *rec.val_retrieval_i2t;
        if (rec.val_retrieval_t2i) line["val_retrieval_t2i"] = *rec.val_retrieval_t2i;
        metrics << line.dump() << "\n";
        metrics.flush();

        if (step % cfg.checkpoint_interval == 0 && step != cfg.total_steps) {
            save_checkpoint(model, step, (fs::path(out_dir) / ("step_" + std::to_string(step))).string(),
                            config_hash, vocab_hash);
        }
        result.history.push_back(std::move(rec));
    }

    result.final_checkpoint = (fs::path(out_dir) / "final").string();
    save_checkpoint(model, cfg.total_steps, result.final_checkpoint, config_hash, vocab_hash);
    return result;
}

// ------------------------------------------------------------ checkpoints ----

namespace {

struct TensorRef {
    std::string name;
    const Tensor* t;
};

std::vector<TensorRef> checkpoint_tensors(const Model& model) {
    std::vector<TensorRef> out;
    for (const Param* p : model.store.all()) {
        out.push_back({"param/" + p->name, &p->value});
    }
    for (const Param* p : model.store.all()) {
        out.push_back({"adam_m/" + p->name, &p->m});
        out.push_back({"adam_v/" + p->name, &p->v});
    }
    return out;
}

json shape_json(const Tensor& t) {
    json j = json::array();
    for (int64_t d : t.shape) j.push_back(d);
    return j;
}

void write_tensor_dir(const std::string& dir, const std::vector<TensorRef>& tensors,
                      const json& extra) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    check(!ec, "checkpoint: cannot create " + dir);

    json manifest = extra;
    json table = json::array();
    int64_t offset = 0;
    for (const auto& ref : tensors) {
        json item;
        item["name"] = ref.name;
        item["shape"] = shape_json(*ref.t);
        item["dtype"] = "f32";
        item["offset"] = offset;
        offset += ref.t->numel() * static_cast<int64_t>(sizeof(float));
        table.push_back(item);
    }
    manifest["tensors"] = table;
    manifest["total_bytes"] = offset;

    std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::binary);
    mf << manifest.dump(2) << "\n";
    check(mf.good(), "checkpoint: manifest write failed");

    std::ofstream wf(fs::path(dir) / "weights.bin", std::ios::binary);
    for (const auto& ref : tensors) {
        wf.write(reinterpret_cast<const char*>(ref.t->ptr()),
                 static_cast<std::streamsize>(ref.t->numel() * sizeof(float)));
    }
    check(wf.good(), "checkpoint: weights write failed");
}

json read_manifest(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.json", std::ios::binary);
    check(mf.good(), "checkpoint: missing manifest.json in " + dir);
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string("checkpoint: corrupt manifest: ") + e.what());
    }
    return manifest;
}

void read_tensor_dir(const std::string& dir, const json& manifest,
                     const std::vector<std::pair<std::string, Tensor*>>& dst) {
    std::ifstream wf(fs::path(dir) / "weights.bin", std::ios::binary | std::ios::ate);
    check(wf.good(), "checkpoint: missing weights.bin in " + dir);
    const int64_t file_size = static_cast<int64_t>(wf.tellg());
    check(file_size == manifest.at("total_bytes").get<int64_t>(),
          "checkpoint: weights.bin truncated or oversized");

    std::unordered_map<std::string, std::pair<int64_t, std::vector<int64_t>>> table;
    for (const auto& item : manifest.at("tensors")) {
        std::vector<int64_t> shape;
        for (const auto& d : item.at("shape")) shape.push_back(d.get<int64_t>());
        table[item.at("name").get<std::string>()] = {item.at("offset").get<int64_t>(), shape};
    }
    for (const auto& [name, tensor] : dst) {
        auto it = table.find(name);
        check(it != table.end(), "checkpoint: tensor missing: " + name);
        check(it->second.second == tensor->shape,
              "checkpoint: shape mismatch for " + name);
        const int64_t bytes = tensor->numel() * static_cast<int64_t>(sizeof(float));
        check(it->second.first + bytes <= file_size, "checkpoint: offset out of range for " + name);
        wf.seekg(it->second.first);
        wf.read(reinterpret_cast<char*>(tensor->ptr()), bytes);
        check(wf.good(), "checkpoint: short read for " + name);
    }
}

} // namespace

void save_checkpoint(const Model& model, int64_t step, const std::string& dir,
                     const std::string& config_hash, const std::string& vocab_hash) {
    json extra;
    extra["step"] = step;
    extra["config_hash"] = config_hash;
    extra["vocab_hash"] = vocab_hash;
    extra["kind"] = "checkpoint";
    write_tensor_dir(dir, checkpoint_tensors(model), extra);
}

CheckpointInfo read_checkpoint_info(const std::string& dir) {
    const json manifest = read_manifest(dir);
    CheckpointInfo info;
    info.step = manifest.at("step").get<int64_t>();
    info.config_hash = manifest.at("config_hash").get<std::string>();
    info.vocab_hash = manifest.at("vocab_hash").get<std::string>();
    return info;
}

std::vector<int64_t> checkpoint_tensor_shape(const std::string& dir, const std::string& name) {
    const json manifest = read_manifest(dir);
    for (const auto& item : manifest.at("tensors")) {
        if (item.at("name").get<std::string>() != name) continue;
        std::vector<int64_t> shape;
        for (const auto& d : item.at("shape")) shape.push_back(d.get<int64_t>());
        return shape;
    }
    throw std::runtime_error("checkpoint: tensor not found: " + name);
}

CheckpointInfo load_checkpoint(Model& model, const std::string& dir,
                               const std::string& expect_config_hash, bool force) {
    const json manifest = read_manifest(dir);
    CheckpointInfo info;
    info.step = manifest.at("step").get<int64_t>();
    info.config_hash = manifest.at("config_hash").get<std::string>();
    info.vocab_hash = manifest.at("vocab_hash").get<std::string>();
    if (!force && !expect_config_hash.empty()) {
        check(info.config_hash == expect_config_hash,
              "checkpoint: config hash mismatch (" + info.config_hash + " vs expected " +
                  expect_config_hash + "); pass force to override");
    }

    std::vector<std::pair<std::string, Tensor*>> dst;
    for (Param* p : model.store.all()) {
        if (p->m.data.empty()) p->m = Tensor(p->value.shape);
        if (p->v.data.empty()) p->v = Tensor(p->value.shape);
        dst.emplace_back("param/" + p->name, &p->value);
        dst.emplace_back("adam_m/" + p->name, &p->m);
        dst.emplace_back("adam_v/" + p->name, &p->v);
    }
    read_tensor_dir(dir, manifest, dst);
    return info;
}

void export_backbone(const Model& model, const std::string& dir, bool include_pool) {
    std::vector<TensorRef> tensors;
    for (const Param* p : model.store.all()) {
        if (p->name.rfind("image.", 0) != 0) continue;
        const bool pool_tensor =
            p->name.rfind("image.pool", 0) == 0; // attention pool weights + positions
        if (pool_tensor && !include_pool) continue;
        tensors.push_back({"param/" + p->name, &p->value});
    }
    json extra;
    extra["kind"] = "backbone";
    extra["include_pool"] = include_pool;
    write_tensor_dir(dir, tensors, extra);
}

void import_backbone(Model& model, const std::string& dir) {
    const json manifest = read_manifest(dir);
    std::set<std::string> names;
    for (const auto& item : manifest.at("tensors")) {
        names.insert(item.at("name").get<std::string>());
    }
    std::vector<std::pair<std::string, Tensor*>> dst;
    for (Param* p : model.store.all()) {
        const std::string key = "param/" + p->name;
        if (names.count(key)) dst.emplace_back(key, &p->value);
    }
    check(!dst.empty(), "import_backbone: no matching tensors in " + dir);
    read_tensor_dir(dir, manifest, dst);
}

} // namespace vlpt
