#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vlpt/datagen.hpp"
#include "vlpt/model.hpp"
#include "vlpt/objectives.hpp"
#include "vlpt/tokenizer.hpp"

namespace vlpt {

struct TrainConfig {
    int64_t batch_size = 64;
    int64_t total_steps = 3000;
    int64_t warmup_steps = 200;
    double peak_lr = 1e-4;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 0.0; // 0 disables clipping
    uint64_t seed = 42;
    int64_t val_interval = 250;
    int64_t checkpoint_interval = 1000;
    int64_t val_batches = 8;
    int threads = 0;               // 0 keeps the OpenMP default
    bool mixed_precision = false;  // reserved; not implemented at this scale
    bool grad_checkpointing = false; // reserved

    void validate() const;
};

/// Piecewise-linear schedule: 0 -> peak over [0, warmup], peak -> 0 over
/// [warmup, total].
double lr_at(int64_t step, const TrainConfig& cfg);

/// Decoupled weight-decay Adam over a parameter store. Decay skips params
/// flagged no_decay (biases, norm gains, the temperature).
class AdamW {
public:
    AdamW(std::vector<Param*> params, const TrainConfig& cfg);

    void step(double lr);
    int64_t steps_done() const { return t_; }
    void set_steps_done(int64_t t) { t_ = t; }

private:
    std::vector<Param*> params_;
    const TrainConfig cfg_;
    int64_t t_ = 0;
};

/// One assembled training batch: images plus clean and masked token views.
struct TrainBatch {
    Tensor images;
    std::vector<int32_t> clean_ids; // [N * (K+1)]
    std::vector<uint8_t> live;
    std::vector<int32_t> masked_ids;
    std::vector<int32_t> labels;
    std::vector<TokenSequence> seqs;
    std::vector<int64_t> sample_ids;
    int64_t n = 0;
};

TrainBatch make_batch(const DatasetReader& reader, const std::vector<int64_t>& idx,
                      const Vocab& vocab, int64_t K, uint64_t mask_seed,
                      const MaskPolicy& policy = {});

/// Forward all three objectives on one batch, backprop the total, apply one
/// AdamW step and re-clamp the temperature. Throws (without stepping) if any
/// loss component is non-finite.
LossBundle train_step(Model& model, const TrainBatch& batch, const ObjectiveConfig& obj,
                      AdamW& opt, double lr, double logit_cap, uint64_t graph_seed = 0);

struct StepRecord {
    int64_t step = 0;
    LossBundle loss;
    double lr = 0.0;
    double wall_ms = 0.0;
    std::optional<double> val_mlm_accuracy;
    std::optional<double> val_retrieval_i2t;
    std::optional<double> val_retrieval_t2i;
};

struct TrainResult {
    std::vector<StepRecord> history;
    std::string final_checkpoint;
};

/// Full pre-training loop with periodic validation, periodic checkpoints and
/// an append-only metrics.jsonl. Resumes from `start_step` (exclusive).
TrainResult train(Model& model, const TrainConfig& cfg, const ObjectiveConfig& obj,
                  const DatasetReader& train_reader, const DatasetReader& val_reader,
                  const Vocab& vocab, const std::string& out_dir, const std::string& config_hash,
                  const std::string& vocab_hash, AdamW& opt, int64_t start_step = 0);

// ---------------------------------------------------------- checkpoints ----

/// Directory layout: manifest.json (tensor table + step/config/vocab hashes)
/// and weights.bin (raw little-endian float32, concatenated in table order).
void save_checkpoint(const Model& model, int64_t step, const std::string& dir,
                     const std::string& config_hash, const std::string& vocab_hash);

struct CheckpointInfo {
    int64_t step = 0;
    std::string config_hash;
    std::string vocab_hash;
};

/// Loads values (params + Adam moments) into a model of identical shape.
/// Refuses a config-hash mismatch unless `force`.
CheckpointInfo load_checkpoint(Model& model, const std::string& dir,
                               const std::string& expect_config_hash, bool force);

CheckpointInfo read_checkpoint_info(const std::string& dir);

/// Shape of a named tensor as stored in a checkpoint manifest.
std::vector<int64_t> checkpoint_tensor_shape(const std::string& dir, const std::string& name);

/// Writes only backbone + FPN tensors (optionally the attention pool) in the
/// checkpoint format, for transfer into detector backbones.
void export_backbone(const Model& model, const std::string& dir, bool include_pool);

/// Loads an exported backbone into a fresh model's image encoder.
void import_backbone(Model& model, const std::string& dir);

} // namespace vlpt
