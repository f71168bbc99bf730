#include "vlpt/config.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "vlpt/hash.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace vlpt {

namespace {

void expect_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    check(j.is_object(), "config: section '" + where + "' must be an object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        check(allowed.count(key) != 0, "config: unknown key '" + key + "' in section " + where);
    }
}

template <class T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void get_bg(const json& j, const char* key, Background& out) {
    if (!j.contains(key)) return;
    const std::string s = j.at(key).get<std::string>();
    if (s == "solid") {
        out = Background::solid;
    } else if (s == "noise") {
        out = Background::noise;
    } else if (s == "gradient") {
        out = Background::gradient;
    } else {
        throw std::runtime_error("config: background must be solid|noise|gradient, got " + s);
    }
}

const char* bg_str(Background b) {
    switch (b) {
        case Background::solid: return "solid";
        case Background::noise: return "noise";
        case Background::gradient: return "gradient";
    }
    return "solid";
}

void parse_datagen(const json& j, CliConfig::DatagenSection& d) {
    expect_keys(j,
                {"canvas_h", "canvas_w", "font_scale_min", "font_scale_max", "rotation_range_deg",
                 "background", "color_jitter", "word_pool", "words_min", "words_max",
                 "val_fraction"},
                "datagen");
    get_if(j, "canvas_h", d.sample.canvas_h);
    get_if(j, "canvas_w", d.sample.canvas_w);
    get_if(j, "font_scale_min", d.sample.font_scale_min);
    get_if(j, "font_scale_max", d.sample.font_scale_max);
    get_if(j, "rotation_range_deg", d.sample.rotation_range_deg);
    get_bg(j, "background", d.sample.background);
    get_if(j, "color_jitter", d.sample.color_jitter);
    get_if(j, "word_pool", d.word_pool);
    get_if(j, "words_min", d.words_min);
    get_if(j, "words_max", d.words_max);
    get_if(j, "val_fraction", d.val_fraction);
}

void parse_tokenizer(const json& j, CliConfig::TokenizerSection& t) {
    expect_keys(j, {"vocab_size", "mask_prob", "mask_frac", "random_frac"}, "tokenizer");
    get_if(j, "vocab_size", t.vocab_size);
    get_if(j, "mask_prob", t.masking.select_prob);
    get_if(j, "mask_frac", t.masking.mask_frac);
    get_if(j, "random_frac", t.masking.random_frac);
}

void parse_model(const json& j, ModelConfig& m) {
    expect_keys(j,
                {"embed_dim", "heads", "text_blocks", "cross_blocks", "ffn_ratio", "text_ffn",
                 "final_ln", "seq_len", "image_size", "stem_width", "stage_widths",
                 "convs_per_stage", "residual", "fpn_channels", "gn_groups", "temp_init", "dropout"},
                "model");
    get_if(j, "embed_dim", m.embed_dim);
    get_if(j, "heads", m.heads);
    get_if(j, "text_blocks", m.text_blocks);
    get_if(j, "cross_blocks", m.cross_blocks);
    get_if(j, "ffn_ratio", m.ffn_ratio);
    get_if(j, "text_ffn", m.text_ffn);
    get_if(j, "final_ln", m.final_ln);
    get_if(j, "seq_len", m.seq_len);
    get_if(j, "image_size", m.image_size);
    get_if(j, "stem_width", m.stem_width);
    if (j.contains("stage_widths")) {
        const auto& arr = j.at("stage_widths");
        check(arr.is_array() && arr.size() == 4, "config: stage_widths must have 4 entries");
        for (size_t i = 0; i < 4; ++i) m.stage_widths[i] = arr[i].get<int64_t>();
    }
    get_if(j, "convs_per_stage", m.convs_per_stage);
    get_if(j, "residual", m.residual);
    get_if(j, "fpn_channels", m.fpn_channels);
    get_if(j, "gn_groups", m.gn_groups);
    get_if(j, "temp_init", m.temp_init);
    get_if(j, "dropout", m.dropout);
}

void parse_switch(const json& j, const char* key, bool& out) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (v.is_boolean()) {
        out = v.get<bool>();
        return;
    }
    const std::string s = v.get<std::string>();
    if (s == "on") {
        out = true;
    } else if (s == "off") {
        out = false;
    } else {
        throw std::runtime_error(std::string("config: ") + key + " must be on|off");
    }
}

void parse_objectives(const json& j, ObjectiveConfig& o) {
    expect_keys(j,
                {"lambda_i2t", "lambda_t2i", "wip_negatives", "logit_scale_cap", "mlm_ignore",
                 "wip_positive", "itc", "wip", "mlm"},
                "objectives");
    get_if(j, "lambda_i2t", o.lambda_i2t);
    get_if(j, "lambda_t2i", o.lambda_t2i);
    get_if(j, "wip_negatives", o.wip_negatives);
    get_if(j, "logit_scale_cap", o.logit_scale_cap);
    get_if(j, "mlm_ignore", o.mlm_ignore);
    if (j.contains("wip_positive")) {
        const std::string s = j.at("wip_positive").get<std::string>();
        if (s == "contextual") {
            o.wip_positive_contextual = true;
        } else if (s == "table") {
            o.wip_positive_contextual = false;
        } else {
            throw std::runtime_error("config: wip_positive must be contextual|table");
        }
    }
    parse_switch(j, "itc", o.itc_on);
    parse_switch(j, "wip", o.wip_on);
    parse_switch(j, "mlm", o.mlm_on);
}

void parse_train(const json& j, TrainConfig& t) {
    expect_keys(j,
                {"batch_size", "total_steps", "warmup_steps", "peak_lr", "weight_decay", "beta1",
                 "beta2", "adam_eps", "grad_clip", "seed", "val_interval", "checkpoint_interval",
                 "val_batches", "threads", "mixed_precision", "grad_checkpointing"},
                "train");
    get_if(j, "batch_size", t.batch_size);
    get_if(j, "total_steps", t.total_steps);
    get_if(j, "warmup_steps", t.warmup_steps);
    get_if(j, "peak_lr", t.peak_lr);
    get_if(j, "weight_decay", t.weight_decay);
    get_if(j, "beta1", t.beta1);
    get_if(j, "beta2", t.beta2);
    get_if(j, "adam_eps", t.adam_eps);
    get_if(j, "grad_clip", t.grad_clip);
    get_if(j, "seed", t.seed);
    get_if(j, "val_interval", t.val_interval);
    get_if(j, "checkpoint_interval", t.checkpoint_interval);
    get_if(j, "val_batches", t.val_batches);
    get_if(j, "threads", t.threads);
    get_if(j, "mixed_precision", t.mixed_precision);
    get_if(j, "grad_checkpointing", t.grad_checkpointing);
    check(!t.mixed_precision && !t.grad_checkpointing,
          "config: mixed_precision and grad_checkpointing are reserved flags (not implemented)");
}

void parse_probe(const json& j, ProbeConfig& p) {
    expect_keys(j,
                {"block", "head", "batch_size", "seed", "max_batches", "loc_samples", "nn_queries",
                 "nn_k", "write_overlays"},
                "probe");
    get_if(j, "block", p.block);
    get_if(j, "head", p.head);
    get_if(j, "batch_size", p.batch_size);
    get_if(j, "seed", p.seed);
    get_if(j, "max_batches", p.max_batches);
    get_if(j, "loc_samples", p.loc_samples);
    if (j.contains("nn_queries")) {
        p.nn_queries.clear();
        for (const auto& q : j.at("nn_queries")) p.nn_queries.push_back(q.get<std::string>());
    }
    get_if(j, "nn_k", p.nn_k);
    get_if(j, "write_overlays", p.write_overlays);
}

} // namespace

CliConfig CliConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string("config: invalid JSON: ") + e.what());
    }
    expect_keys(j, {"datagen", "tokenizer", "model", "objectives", "train", "probe"}, "root");

    CliConfig cfg;
    if (j.contains("datagen")) parse_datagen(j.at("datagen"), cfg.datagen);
    if (j.contains("tokenizer")) parse_tokenizer(j.at("tokenizer"), cfg.tokenizer);
    if (j.contains("model")) parse_model(j.at("model"), cfg.model);
    if (j.contains("objectives")) parse_objectives(j.at("objectives"), cfg.objectives);
    if (j.contains("train")) parse_train(j.at("train"), cfg.train);
    if (j.contains("probe")) parse_probe(j.at("probe"), cfg.probe);
    return cfg;
}

CliConfig CliConfig::from_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

void CliConfig::apply_override(const std::string& dotted_key, const std::string& value) {
    json root = json::parse(to_json());
    const auto dot = dotted_key.find('.');
    check(dot != std::string::npos && dot > 0 && dot + 1 < dotted_key.size(),
          "config: override key must look like section.key, got " + dotted_key);
    const std::string section = dotted_key.substr(0, dot);
    const std::string key = dotted_key.substr(dot + 1);
    check(root.contains(section), "config: unknown section in override: " + section);

    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::exception&) {
        parsed = value; // bare word: treat as string
    }
    root[section][key] = parsed;
    *this = from_json_text(root.dump());
}

std::string CliConfig::to_json() const {
    json j;
    j["datagen"] = {{"canvas_h", datagen.sample.canvas_h},
                    {"canvas_w", datagen.sample.canvas_w},
                    {"font_scale_min", datagen.sample.font_scale_min},
                    {"font_scale_max", datagen.sample.font_scale_max},
                    {"rotation_range_deg", datagen.sample.rotation_range_deg},
                    {"background", bg_str(datagen.sample.background)},
                    {"color_jitter", datagen.sample.color_jitter},
                    {"word_pool", datagen.word_pool},
                    {"words_min", datagen.words_min},
                    {"words_max", datagen.words_max},
                    {"val_fraction", datagen.val_fraction}};
    j["tokenizer"] = {{"vocab_size", tokenizer.vocab_size},
                      {"mask_prob", tokenizer.masking.select_prob},
                      {"mask_frac", tokenizer.masking.mask_frac},
                      {"random_frac", tokenizer.masking.random_frac}};
    j["model"] = {{"embed_dim", model.embed_dim},
                  {"heads", model.heads},
                  {"text_blocks", model.text_blocks},
                  {"cross_blocks", model.cross_blocks},
                  {"ffn_ratio", model.ffn_ratio},
                  {"text_ffn", model.text_ffn},
                  {"final_ln", model.final_ln},
                  {"seq_len", model.seq_len},
                  {"image_size", model.image_size},
                  {"stem_width", model.stem_width},
                  {"stage_widths",
                   {model.stage_widths[0], model.stage_widths[1], model.stage_widths[2],
                    model.stage_widths[3]}},
                  {"convs_per_stage", model.convs_per_stage},
                  {"residual", model.residual},
                  {"fpn_channels", model.fpn_channels},
                  {"gn_groups", model.gn_groups},
                  {"temp_init", model.temp_init},
                  {"dropout", model.dropout}};
    j["objectives"] = {{"lambda_i2t", objectives.lambda_i2t},
                       {"lambda_t2i", objectives.lambda_t2i},
                       {"wip_negatives", objectives.wip_negatives},
                       {"logit_scale_cap", objectives.logit_scale_cap},
                       {"mlm_ignore", objectives.mlm_ignore},
                       {"wip_positive",
                        objectives.wip_positive_contextual ? "contextual" : "table"},
                       {"itc", objectives.itc_on},
                       {"wip", objectives.wip_on},
                       {"mlm", objectives.mlm_on}};
    j["train"] = {{"batch_size", train.batch_size},
                  {"total_steps", train.total_steps},
                  {"warmup_steps", train.warmup_steps},
                  {"peak_lr", train.peak_lr},
                  {"weight_decay", train.weight_decay},
                  {"beta1", train.beta1},
                  {"beta2", train.beta2},
                  {"adam_eps", train.adam_eps},
                  {"grad_clip", train.grad_clip},
                  {"seed", train.seed},
                  {"val_interval", train.val_interval},
                  {"checkpoint_interval", train.checkpoint_interval},
                  {"val_batches", train.val_batches},
                  {"threads", train.threads},
                  {"mixed_precision", train.mixed_precision},
                  {"grad_checkpointing", train.grad_checkpointing}};
    json queries = json::array();
    for (const auto& q : probe.nn_queries) queries.push_back(q);
    j["probe"] = {{"block", probe.block},
                  {"head", probe.head},
                  {"batch_size", probe.batch_size},
                  {"seed", probe.seed},
                  {"max_batches", probe.max_batches},
                  {"loc_samples", probe.loc_samples},
                  {"nn_queries", queries},
                  {"nn_k", probe.nn_k},
                  {"write_overlays", probe.write_overlays}};
    return j.dump(2);
}

std::string CliConfig::hash() const { return hash_hex(fnv1a64(to_json())); }

GenConfig CliConfig::gen_config() const {
    GenConfig g;
    g.sample = datagen.sample;
    g.words_min = datagen.words_min;
    g.words_max = datagen.words_max;
    g.val_fraction = datagen.val_fraction;
    g.word_pool = load_word_pool(datagen.word_pool);
    return g;
}

void write_effective_config(const CliConfig& cfg, const std::string& out_dir) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    check(!ec, "config: cannot create " + out_dir);
    std::ofstream f(fs::path(out_dir) / "effective_config.json", std::ios::binary);
    f << cfg.to_json() << "\n";
    check(f.good(), "config: cannot write effective_config.json");
}

} // namespace vlpt
