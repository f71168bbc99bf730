#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vlpt/datagen.hpp"
#include "vlpt/model.hpp"
#include "vlpt/tokenizer.hpp"

namespace vlpt {

struct ProbeConfig {
    int block = 2; // 1-indexed cross-encoder block to visualize
    int head = 1;  // 1-indexed head
    int64_t batch_size = 64;
    uint64_t seed = 17;
    int64_t max_batches = 50;
    int64_t loc_samples = 100;
    std::vector<std::string> nn_queries = {"vote", "right", "river", "north", "sale"};
    int64_t nn_k = 5;
    bool write_overlays = true;
};

/// Cross-attention mass over the visual grid for one text token, visual
/// [CLS] column dropped (entries then sum to <= 1).
struct AttnMap {
    int64_t sample_id = 0;
    int token_index = 0; // position in the token sequence
    std::string token;
    int word_index = -1; // which rendered word the token belongs to
    int block = 0;       // 1-indexed
    int head = 0;
    int64_t gh = 0, gw = 0;
    std::vector<double> map; // gh*gw
    double full_row_sum = 0.0; // including the [CLS] share; ~1 by softmax
};

/// Maps for every live word-piece token of one sample.
std::vector<AttnMap> attention_map(const Model& model, const Vocab& vocab,
                                   const SampleRecord& rec, const Tensor& image, int block,
                                   int head);

/// Attention concentration inside a ground-truth box, measured against the
/// area-uniform baseline: 1.0 means indistinguishable from uniform. The map
/// is renormalized over grid cells; mass is integrated in pixel units.
double localization_score(const AttnMap& map, const Quad& box, int64_t canvas_h, int64_t canvas_w);

struct RetrievalResult {
    double i2t_top1 = 0.0;
    double t2i_top1 = 0.0;
    int64_t batches = 0;
};

/// Strict-argmax in-batch retrieval accuracy over held-out batches.
RetrievalResult retrieval_eval(const Model& model, const DatasetReader& reader, const Vocab& vocab,
                               int64_t batch_size, uint64_t seed, int64_t max_batches);

/// Masked-token top-1 accuracy with probe-seeded masking; absent when no
/// position was masked.
std::optional<double> mlm_accuracy(const Model& model, const DatasetReader& reader,
                                   const Vocab& vocab, uint64_t mask_seed, int64_t batch_size,
                                   int64_t max_batches);

/// Nearest vocabulary words by cosine over token-embedding rows. Multi-piece
/// queries use the mean of their piece embeddings. Candidates are whole-word
/// (non-continuation) vocab entries, the query itself and specials excluded.
std::vector<std::pair<std::string, double>> nn_words(const Model& model, const Vocab& vocab,
                                                     const std::string& query, int64_t k);

struct ProbeReport {
    RetrievalResult retrieval;
    std::optional<double> mlm_acc;
    double mean_localization = 0.0;
    int64_t localization_pairs = 0;
    std::vector<std::pair<std::string, std::vector<std::pair<std::string, double>>>> nn_tables;

    std::string to_json() const;
};

/// Runs every diagnostic on the validation split and writes
/// probe_report.json plus attention overlays under out_dir.
ProbeReport run_probe(const Model& model, const Vocab& vocab, const DatasetReader& val,
                      const ProbeConfig& cfg, const std::string& out_dir);

} // namespace vlpt
