#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vlpt/rng.hpp"

namespace vlpt {

/// Sub-word vocabulary. Ids are dense; the first four are fixed special
/// tokens. Continuation pieces carry the "##" prefix. Every glyph the text
/// renderer can draw is guaranteed to be present both as an initial and a
/// continuation piece, so tokenization of in-alphabet words never fails.
struct Vocab {
    static constexpr int32_t kPad = 0;
    static constexpr int32_t kUnk = 1;
    static constexpr int32_t kCls = 2;
    static constexpr int32_t kMask = 3;
    static constexpr int32_t kNumSpecial = 4;

    std::vector<std::string> tokens;
    std::unordered_map<std::string, int32_t> token_to_id;

    int32_t size() const { return static_cast<int32_t>(tokens.size()); }
    int32_t id_of(const std::string& t) const {
        auto it = token_to_id.find(t);
        return it == token_to_id.end() ? -1 : it->second;
    }
    bool is_special(int32_t id) const { return id >= 0 && id < kNumSpecial; }
    const std::string& token(int32_t id) const { return tokens.at(static_cast<size_t>(id)); }

    /// Characters the renderer + tokenizer agree on (text is lowercased).
    static const std::string& glyphs();
    /// 4 specials + initial and continuation pieces for every glyph.
    static int32_t min_size();
};

/// Token ids for one text sample: [CLS] at 0, word pieces, then [PAD] up to a
/// fixed length of K+1. word_spans[i] = [begin, end) positions of word i.
struct TokenSequence {
    std::vector<int32_t> ids;
    std::vector<uint8_t> attention_mask;
    std::vector<std::pair<int, int>> word_spans;
    int seq_len() const { return static_cast<int>(ids.size()); }
};

/// A TokenSequence after masking: input ids with replacements applied,
/// original ids as labels at masked positions, ignore_label elsewhere.
struct MaskedSequence {
    std::vector<int32_t> input_ids;
    std::vector<int32_t> labels;
    std::vector<int> mask_positions;
};

struct MaskPolicy {
    double select_prob = 0.15;
    double mask_frac = 0.8;   // of selected: replaced by [MASK]
    double random_frac = 0.1; // of selected: replaced by a random non-special id
    int32_t ignore_label = -1;
};

/// Frequency-driven pair-merge vocabulary construction emitting WordPiece
/// style tokens. Deterministic: ties on pair frequency break on the smaller
/// (left, right) token strings.
Vocab build_vocab(const std::vector<std::pair<std::string, int64_t>>& corpus, int32_t target_size);

/// Greedy longest-match-first segmentation. Words with out-of-alphabet
/// characters (or any unmatched position) collapse to a single [UNK].
std::vector<int32_t> tokenize(const std::string& word, const Vocab& vocab);

/// Inverse of tokenize for non-[UNK] output: strip "##", concatenate.
std::string detokenize(const std::vector<int32_t>& pieces, const Vocab& vocab);

/// [CLS] + whole words in order while the K-piece budget lasts, then [PAD].
/// Never splits a word across the truncation boundary.
TokenSequence assemble(const std::vector<std::string>& words, const Vocab& vocab, int K);

/// BERT-style masking, deterministic in `seed`.
MaskedSequence mask_tokens(const TokenSequence& seq, const Vocab& vocab, uint64_t seed,
                           const MaskPolicy& policy = {});

void save_vocab(const Vocab& vocab, const std::string& path);
Vocab load_vocab(const std::string& path);

/// Count word frequencies from a word-per-line text file (lowercased).
std::vector<std::pair<std::string, int64_t>> read_corpus(const std::string& path);

} // namespace vlpt
