#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "vlpt/config.hpp"
#include "vlpt/hash.hpp"
#include "vlpt/probe.hpp"
#include "vlpt/trainer.hpp"

namespace fs = std::filesystem;
using namespace vlpt;

namespace {

struct CommonArgs {
    std::string config_file;
    std::vector<std::string> sets;
};

CliConfig resolve_config(const CommonArgs& args) {
    CliConfig cfg = args.config_file.empty() ? CliConfig{} : CliConfig::from_file(args.config_file);
    for (const auto& s : args.sets) {
        const auto eq = s.find('=');
        check(eq != std::string::npos, "--set expects section.key=value, got " + s);
        cfg.apply_override(s.substr(0, eq), s.substr(eq + 1));
    }
    return cfg;
}

std::optional<uint64_t> env_seed() {
    const char* v = std::getenv("VLPT_SEED");
    if (!v || !*v) return std::nullopt;
    return std::strtoull(v, nullptr, 10);
}

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_file, "JSON config file");
    cmd->add_option("--set", args.sets, "Override a config field: section.key=value");
}

CliConfig config_near_checkpoint(const std::string& ckpt, const CommonArgs& args) {
    if (!args.config_file.empty()) return resolve_config(args);
    for (const fs::path& p :
         {fs::path(ckpt) / "effective_config.json", fs::path(ckpt).parent_path() / "effective_config.json"}) {
        if (fs::exists(p)) {
            CommonArgs a = args;
            a.config_file = p.string();
            return resolve_config(a);
        }
    }
    throw std::runtime_error("no effective_config.json found near " + ckpt +
                             "; pass --config explicitly");
}

Vocab load_vocab_checked(const std::string& path) {
    Vocab v = load_vocab(path);
    check(v.size() >= Vocab::min_size(), "vocab file too small: " + path);
    return v;
}

int cmd_gen_data(const CommonArgs& common, const std::string& out, int64_t n,
                 std::optional<uint64_t> seed) {
    CliConfig cfg = resolve_config(common);
    const uint64_t s = seed ? *seed : env_seed().value_or(cfg.train.seed);
    const GenConfig gen = cfg.gen_config();
    const ShardManifest m = generate_dataset(gen, n, s, out);
    write_effective_config(cfg, out);
    std::cout << "wrote " << m.records.size() << " samples to " << out << "\n"
              << "  train: " << m.train_count() << "  val: " << m.val_count << "\n"
              << "  seed: " << s << "  config_hash: " << m.config_hash << "\n"
              << "  manifest: " << (fs::path(out) / "manifest.jsonl").string() << " ("
              << file_hash_hex((fs::path(out) / "manifest.jsonl").string()) << ")\n";
    return 0;
}

int cmd_build_vocab(const CommonArgs& common, const std::string& corpus, int64_t size,
                    const std::string& out) {
    CliConfig cfg = resolve_config(common);
    const int64_t target = size > 0 ? size : cfg.tokenizer.vocab_size;
    const auto words = read_corpus(corpus);
    const Vocab v = build_vocab(words, static_cast<int32_t>(target));
    save_vocab(v, out);
    const fs::path dir = fs::path(out).parent_path();
    write_effective_config(cfg, dir.empty() ? "." : dir.string());
    std::cout << "vocab of " << v.size() << " tokens written to " << out << " ("
              << file_hash_hex(out) << ")\n";
    return 0;
}

int cmd_pretrain(const CommonArgs& common, const std::string& data, const std::string& vocab_path,
                 const std::string& out, const std::string& resume, bool force,
                 std::optional<int64_t> steps, std::optional<uint64_t> seed,
                 const std::vector<std::pair<std::string, std::string>>& switches) {
    CliConfig cfg = resolve_config(common);
    for (const auto& [key, val] : switches) cfg.apply_override(key, val);
    if (steps) cfg.apply_override("train.total_steps", std::to_string(*steps));
    if (seed) {
        cfg.apply_override("train.seed", std::to_string(*seed));
    } else if (!common.config_file.empty()) {
        // keep the file's seed
    } else if (auto es = env_seed()) {
        cfg.apply_override("train.seed", std::to_string(*es));
    }

    const Vocab vocab = load_vocab_checked(vocab_path);
    const std::string vocab_hash = file_hash_hex(vocab_path);
    const ShardManifest manifest = load_manifest(data);
    DatasetReader train_reader(manifest, DatasetReader::Split::train);
    DatasetReader val_reader(manifest, DatasetReader::Split::val);
    check(train_reader.size() >= 1, "pretrain: dataset has no training samples");
    {
        const Tensor probe_img = train_reader.image(0);
        check(probe_img.dim(1) == cfg.model.image_size && probe_img.dim(2) == cfg.model.image_size,
              "pretrain: model.image_size must match the dataset canvas (square)");
    }

    ModelConfig mc = cfg.model;
    mc.vocab_size = vocab.size();
    Model model(mc);
    model.init_params(cfg.train.seed);
    AdamW opt(model.store.all(), cfg.train);

    int64_t start_step = 0;
    if (!resume.empty()) {
        const CheckpointInfo info = load_checkpoint(model, resume, cfg.hash(), force);
        check(force || info.vocab_hash == vocab_hash,
              "pretrain: vocab hash mismatch on resume; pass --force to override");
        start_step = info.step;
        opt.set_steps_done(start_step);
        std::cout << "resumed from " << resume << " at step " << start_step << "\n";
    }

    write_effective_config(cfg, out);
    const TrainResult result = train(model, cfg.train, cfg.objectives, train_reader, val_reader,
                                     vocab, out, cfg.hash(), vocab_hash, opt, start_step);
    write_effective_config(cfg, result.final_checkpoint);

    if (!result.history.empty()) {
        const auto& last = result.history.back();
        std::cout << "finished step " << last.step << ": total=" << last.loss.total
                  << " itc=" << last.loss.itc << " wip=" << last.loss.wip
                  << " mlm=" << last.loss.mlm << " tau=" << last.loss.temperature << "\n";
    }
    std::cout << "final checkpoint: " << result.final_checkpoint << "\n";
    return 0;
}

int cmd_probe(const CommonArgs& common, const std::string& ckpt, const std::string& data,
              const std::string& vocab_path, std::string out, std::optional<int> block,
              std::optional<int> head, const std::string& nn_query, int64_t nn_k) {
    CliConfig cfg = config_near_checkpoint(ckpt, common);
    if (block) cfg.probe.block = *block;
    if (head) cfg.probe.head = *head;

    const Vocab vocab = load_vocab_checked(vocab_path);
    ModelConfig mc = cfg.model;
    mc.vocab_size = vocab.size();
    Model model(mc);
    // tensor-shape agreement is what matters here; the probe section of the
    // config may legitimately differ from the training run
    load_checkpoint(model, ckpt, "", false);

    if (!nn_query.empty()) {
        const auto rows = nn_words(model, vocab, nn_query, nn_k);
        std::cout << "nearest neighbors of \"" << nn_query << "\":\n";
        for (const auto& [w, sim] : rows) {
            std::cout << "  " << w << "  (" << sim << ")\n";
        }
        if (data.empty()) return 0;
    }
    check(!data.empty(), "probe: --data is required unless only --nn is used");

    const ShardManifest manifest = load_manifest(data);
    DatasetReader val(manifest, DatasetReader::Split::val);
    check(val.size() >= 1, "probe: dataset has no validation split");
    if (out.empty()) out = (fs::path(ckpt) / "probe").string();

    const ProbeReport report = run_probe(model, vocab, val, cfg.probe, out);
    write_effective_config(cfg, out);
    std::cout << "probe report written to " << (fs::path(out) / "probe_report.json").string()
              << "\n"
              << "  retrieval_i2t: " << report.retrieval.i2t_top1
              << "  retrieval_t2i: " << report.retrieval.t2i_top1 << "\n"
              << "  mlm_accuracy: "
              << (report.mlm_acc ? std::to_string(*report.mlm_acc) : std::string("absent")) << "\n"
              << "  localization: " << report.mean_localization << " over "
              << report.localization_pairs << " pairs\n";
    return 0;
}

int cmd_export(const CommonArgs& common, const std::string& ckpt, const std::string& out,
               bool include_pool) {
    CliConfig cfg = config_near_checkpoint(ckpt, common);
    ModelConfig mc = cfg.model;
    mc.vocab_size = checkpoint_tensor_shape(ckpt, "param/text.tok.table")[0];
    Model model(mc);
    load_checkpoint(model, ckpt, "", false);
    export_backbone(model, out, include_pool);
    write_effective_config(cfg, out);
    std::cout << "backbone written to " << out << " ("
              << file_hash_hex((fs::path(out) / "weights.bin").string()) << ")\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"scene-text vision-language pre-training toolkit"};
    app.require_subcommand(1);

    CommonArgs gen_common, vocab_common, train_common, probe_common, export_common;

    auto* gen = app.add_subcommand("gen-data", "Render a synthetic image-text dataset");
    std::string gen_out;
    int64_t gen_n = 2000;
    std::optional<uint64_t> gen_seed;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--n", gen_n, "Number of samples");
    gen->add_option("--seed", gen_seed, "Generator seed (default: VLPT_SEED or train.seed)");
    add_common(gen, gen_common);

    auto* bv = app.add_subcommand("build-vocab", "Train a sub-word vocabulary from a corpus");
    std::string bv_corpus, bv_out = "vocab.txt";
    int64_t bv_size = 0;
    bv->add_option("--corpus", bv_corpus, "Word list, one word per line")->required();
    bv->add_option("--size", bv_size, "Target vocabulary size");
    bv->add_option("--out", bv_out, "Output vocab file");
    add_common(bv, vocab_common);

    auto* tr = app.add_subcommand("pretrain", "Run the pre-training loop");
    std::string tr_data, tr_vocab, tr_out, tr_resume;
    bool tr_force = false;
    std::optional<int64_t> tr_steps;
    std::optional<uint64_t> tr_seed;
    std::string sw_itc, sw_wip, sw_mlm;
    tr->add_option("--data", tr_data, "Dataset directory")->required();
    tr->add_option("--vocab", tr_vocab, "Vocab file")->required();
    tr->add_option("--out", tr_out, "Run output directory")->required();
    tr->add_option("--resume", tr_resume, "Checkpoint directory to resume from");
    tr->add_flag("--force", tr_force, "Ignore config/vocab hash mismatches on resume");
    tr->add_option("--steps", tr_steps, "Override train.total_steps");
    tr->add_option("--seed", tr_seed, "Override train.seed");
    tr->add_option("--itc", sw_itc, "Toggle the contrastive objective: on|off");
    tr->add_option("--wip", sw_wip, "Toggle the word-in-image objective: on|off");
    tr->add_option("--mlm", sw_mlm, "Toggle the masked-prediction objective: on|off");
    add_common(tr, train_common);

    auto* pr = app.add_subcommand("probe", "Evaluate a frozen checkpoint");
    std::string pr_ckpt, pr_data, pr_vocab, pr_out, pr_nn;
    std::optional<int> pr_block, pr_head;
    int64_t pr_k = 5;
    pr->add_option("--ckpt", pr_ckpt, "Checkpoint directory")->required();
    pr->add_option("--data", pr_data, "Dataset directory");
    pr->add_option("--vocab", pr_vocab, "Vocab file")->required();
    pr->add_option("--out", pr_out, "Report directory (default <ckpt>/probe)");
    pr->add_option("--block", pr_block, "Cross-encoder block to visualize (1-indexed)");
    pr->add_option("--head", pr_head, "Attention head to visualize (1-indexed)");
    pr->add_option("--nn", pr_nn, "Print nearest vocabulary words for this query");
    pr->add_option("--k", pr_k, "Neighbor count for --nn");
    add_common(pr, probe_common);

    auto* ex = app.add_subcommand("export", "Export backbone + FPN weights");
    std::string ex_ckpt, ex_out;
    bool ex_pool = false;
    ex->add_option("--ckpt", ex_ckpt, "Checkpoint directory")->required();
    ex->add_option("--out", ex_out, "Output directory")->required();
    ex->add_flag("--include-pool", ex_pool, "Also export the attention-pooling weights");
    add_common(ex, export_common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(gen_common, gen_out, gen_n, gen_seed);
        if (bv->parsed()) return cmd_build_vocab(vocab_common, bv_corpus, bv_size, bv_out);
        if (tr->parsed()) {
            std::vector<std::pair<std::string, std::string>> switches;
            if (!sw_itc.empty()) switches.emplace_back("objectives.itc", sw_itc);
            if (!sw_wip.empty()) switches.emplace_back("objectives.wip", sw_wip);
            if (!sw_mlm.empty()) switches.emplace_back("objectives.mlm", sw_mlm);
            return cmd_pretrain(train_common, tr_data, tr_vocab, tr_out, tr_resume, tr_force,
                                tr_steps, tr_seed, switches);
        }
        if (pr->parsed()) {
            return cmd_probe(probe_common, pr_ckpt, pr_data, pr_vocab, pr_out, pr_block, pr_head,
                             pr_nn, pr_k);
        }
        if (ex->parsed()) return cmd_export(export_common, ex_ckpt, ex_out, ex_pool);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
