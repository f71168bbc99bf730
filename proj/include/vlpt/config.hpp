#pragma once

#include <string>
#include <vector>

#include "vlpt/datagen.hpp"
#include "vlpt/model.hpp"
#include "vlpt/objectives.hpp"
#include "vlpt/probe.hpp"
#include "vlpt/tokenizer.hpp"
#include "vlpt/trainer.hpp"

namespace vlpt {

/// Whole-tool configuration: one JSON document with one section per module.
/// Parsing is strict (unknown keys are an error) and the canonical dump is
/// echoed into every output directory for provenance.
struct CliConfig {
    struct DatagenSection {
        SampleSpec sample;
        std::string word_pool = "data/words.txt";
        int words_min = 3;
        int words_max = 7;
        double val_fraction = 0.1;
    } datagen;

    struct TokenizerSection {
        int64_t vocab_size = 512;
        MaskPolicy masking;
    } tokenizer;

    ModelConfig model;
    ObjectiveConfig objectives;
    TrainConfig train;
    ProbeConfig probe;

    /// Parse a JSON document; missing sections/keys keep their defaults,
    /// unknown keys are rejected.
    static CliConfig from_json_text(const std::string& text);
    static CliConfig from_file(const std::string& path);

    /// Apply `section.key=value` overrides (value parsed as a JSON literal,
    /// bare words treated as strings).
    void apply_override(const std::string& dotted_key, const std::string& value);

    std::string to_json() const; // canonical (sorted keys, 2-space indent)
    std::string hash() const;    // fnv-1a of the canonical dump

    /// Resolve the datagen section into a ready GenConfig (loads the pool).
    GenConfig gen_config() const;
};

void write_effective_config(const CliConfig& cfg, const std::string& out_dir);

} // namespace vlpt
