#include "vlpt/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

#include "vlpt/tensor.hpp"

namespace vlpt {

namespace {

const char* kSpecialNames[4] = {"[PAD]", "[UNK]", "[CLS]", "[MASK]"};

std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

bool in_alphabet(const std::string& w) {
    return std::all_of(w.begin(), w.end(),
                       [](char c) { return Vocab::glyphs().find(c) != std::string::npos; });
}

} // namespace

const std::string& Vocab::glyphs() {
    static const std::string g = "abcdefghijklmnopqrstuvwxyz0123456789";
    return g;
}

int32_t Vocab::min_size() {
    return kNumSpecial + 2 * static_cast<int32_t>(glyphs().size());
}

Vocab build_vocab(const std::vector<std::pair<std::string, int64_t>>& corpus,
                  int32_t target_size) {
    check(!corpus.empty(), "build_vocab: empty corpus");
    check(target_size >= Vocab::min_size(),
          "build_vocab: target size below glyph floor of " + std::to_string(Vocab::min_size()));

    Vocab v;
    auto push = [&v](const std::string& t) {
        v.token_to_id.emplace(t, static_cast<int32_t>(v.tokens.size()));
        v.tokens.push_back(t);
    };
    for (const char* s : kSpecialNames) push(s);
    for (char c : Vocab::glyphs()) push(std::string(1, c));
    for (char c : Vocab::glyphs()) push(std::string("##") + c);

    // words as symbol sequences: first piece bare, the rest ## continuations
    struct Entry {
        std::vector<std::string> symbols;
        int64_t freq;
    };
    std::vector<Entry> words;
    for (const auto& [raw, freq] : corpus) {
        const std::string w = lower(raw);
        if (w.empty() || freq <= 0 || !in_alphabet(w)) continue;
        Entry e;
        e.freq = freq;
        for (size_t i = 0; i < w.size(); ++i) {
            e.symbols.push_back(i == 0 ? std::string(1, w[i]) : std::string("##") + w[i]);
        }
        words.push_back(std::move(e));
    }
    check(!words.empty(), "build_vocab: no usable words in corpus");

    while (v.size() < target_size) {
        // ordered map makes the max scan deterministic under frequency ties
        std::map<std::pair<std::string, std::string>, int64_t> pairs;
        for (const auto& e : words) {
            for (size_t i = 0; i + 1 < e.symbols.size(); ++i) {
                pairs[{e.symbols[i], e.symbols[i + 1]}] += e.freq;
            }
        }
        if (pairs.empty()) break;
        std::pair<std::string, std::string> best;
        int64_t best_freq = -1;
        for (const auto& [p, f] : pairs) {
            if (f > best_freq) {
                best = p;
                best_freq = f;
            }
        }
        const std::string merged = best.first + best.second.substr(2);
        if (v.token_to_id.count(merged)) {
            // already present (can happen after prior merges); drop the pair by
            // applying the merge without growing the vocab
        } else {
            push(merged);
        }
        for (auto& e : words) {
            std::vector<std::string> out;
            out.reserve(e.symbols.size());
            for (size_t i = 0; i < e.symbols.size(); ++i) {
                if (i + 1 < e.symbols.size() && e.symbols[i] == best.first &&
                    e.symbols[i + 1] == best.second) {
                    out.push_back(merged);
                    ++i;
                } else {
                    out.push_back(e.symbols[i]);
                }
            }
            e.symbols = std::move(out);
        }
        bool any_pair = false;
        for (const auto& e : words) {
            if (e.symbols.size() > 1) {
                any_pair = true;
                break;
            }
        }
        if (!any_pair) break;
    }
    return v;
}

std::vector<int32_t> tokenize(const std::string& word, const Vocab& vocab) {
    check(!word.empty(), "tokenize: empty word");
    const std::string w = lower(word);
    std::vector<int32_t> out;
    size_t pos = 0;
    while (pos < w.size()) {
        const std::string prefix = pos == 0 ? "" : "##";
        int32_t found = -1;
        size_t found_len = 0;
        for (size_t len = w.size() - pos; len >= 1; --len) {
            const int32_t id = vocab.id_of(prefix + w.substr(pos, len));
            if (id >= 0 && !vocab.is_special(id)) {
                found = id;
                found_len = len;
                break;
            }
        }
        if (found < 0) return {Vocab::kUnk};
        out.push_back(found);
        pos += found_len;
    }
    return out;
}

std::string detokenize(const std::vector<int32_t>& pieces, const Vocab& vocab) {
    std::string out;
    for (int32_t id : pieces) {
        const std::string& t = vocab.token(id);
        out += t.rfind("##", 0) == 0 ? t.substr(2) : t;
    }
    return out;
}

TokenSequence assemble(const std::vector<std::string>& words, const Vocab& vocab, int K) {
    check(K >= 1, "assemble: K must be >= 1");
    TokenSequence seq;
    seq.ids.assign(static_cast<size_t>(K) + 1, Vocab::kPad);
    seq.attention_mask.assign(static_cast<size_t>(K) + 1, 0);
    seq.ids[0] = Vocab::kCls;
    seq.attention_mask[0] = 1;

    int cursor = 1;
    for (const auto& w : words) {
        const std::vector<int32_t> pieces = tokenize(w, vocab);
        if (cursor + static_cast<int>(pieces.size()) > K + 1) break;
        seq.word_spans.emplace_back(cursor, cursor + static_cast<int>(pieces.size()));
        for (int32_t p : pieces) {
            seq.ids[static_cast<size_t>(cursor)] = p;
            seq.attention_mask[static_cast<size_t>(cursor)] = 1;
            ++cursor;
        }
    }
    return seq;
}

MaskedSequence mask_tokens(const TokenSequence& seq, const Vocab& vocab, uint64_t seed,
                           const MaskPolicy& policy) {
    MaskedSequence out;
    out.input_ids = seq.ids;
    out.labels.assign(seq.ids.size(), policy.ignore_label);
    Rng rng(mix_seed(seed, 0xA75C));
    for (size_t i = 1; i < seq.ids.size(); ++i) {
        if (!seq.attention_mask[i]) continue; // [PAD]
        if (rng.uniform() >= policy.select_prob) continue;
        out.labels[i] = seq.ids[i];
        out.mask_positions.push_back(static_cast<int>(i));
        const double r = rng.uniform();
        if (r < policy.mask_frac) {
            out.input_ids[i] = Vocab::kMask;
        } else if (r < policy.mask_frac + policy.random_frac) {
            out.input_ids[i] = static_cast<int32_t>(
                rng.range_int(Vocab::kNumSpecial, vocab.size() - 1));
        } // else: unchanged
    }
    return out;
}

void save_vocab(const Vocab& vocab, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "save_vocab: cannot open " + path);
    for (const auto& t : vocab.tokens) f << t << "\n";
    check(f.good(), "save_vocab: write failed for " + path);
}

Vocab load_vocab(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "load_vocab: cannot open " + path);
    Vocab v;
    std::string line;
    while (std::getline(f, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (line.empty()) continue;
        check(!v.token_to_id.count(line), "load_vocab: duplicate token " + line);
        v.token_to_id.emplace(line, static_cast<int32_t>(v.tokens.size()));
        v.tokens.push_back(line);
    }
    check(v.size() >= Vocab::kNumSpecial, "load_vocab: file too short");
    for (int i = 0; i < Vocab::kNumSpecial; ++i) {
        check(v.tokens[static_cast<size_t>(i)] == kSpecialNames[i],
              "load_vocab: line " + std::to_string(i) + " must be " + kSpecialNames[i]);
    }
    return v;
}

std::vector<std::pair<std::string, int64_t>> read_corpus(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "read_corpus: cannot open " + path);
    std::map<std::string, int64_t> freq;
    std::vector<std::string> order;
    std::string line;
    while (std::getline(f, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (line.empty()) continue;
        const std::string w = lower(line);
        if (!freq.count(w)) order.push_back(w);
        freq[w] += 1;
    }
    std::vector<std::pair<std::string, int64_t>> out;
    out.reserve(order.size());
    for (const auto& w : order) out.emplace_back(w, freq[w]);
    return out;
}

} // namespace vlpt
