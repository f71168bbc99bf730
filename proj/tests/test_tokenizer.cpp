#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include "vlpt/rng.hpp"
#include "vlpt/tokenizer.hpp"

using namespace vlpt;

namespace {

Vocab make_vocab(const std::vector<std::string>& extra) {
    Vocab v;
    auto push = [&v](const std::string& t) {
        v.token_to_id.emplace(t, static_cast<int32_t>(v.tokens.size()));
        v.tokens.push_back(t);
    };
    push("[PAD]");
    push("[UNK]");
    push("[CLS]");
    push("[MASK]");
    for (char c : Vocab::glyphs()) push(std::string(1, c));
    for (char c : Vocab::glyphs()) push(std::string("##") + c);
    for (const auto& t : extra) {
        if (v.id_of(t) < 0) push(t);
    }
    return v;
}

// independently written greedy longest-match reference
std::vector<std::string> greedy_oracle(const std::string& w, const Vocab& v) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < w.size()) {
        size_t best = 0;
        for (size_t len = 1; i + len <= w.size(); ++len) {
            const std::string cand = (i ? "##" : "") + w.substr(i, len);
            const int32_t id = v.id_of(cand);
            if (id >= 0 && !v.is_special(id)) best = len;
        }
        if (best == 0) return {"[UNK]"};
        out.push_back((i ? "##" : "") + w.substr(i, best));
        i += best;
    }
    return out;
}

std::string random_word(Rng& rng, int min_len, int max_len) {
    const auto& g = Vocab::glyphs();
    const int len = static_cast<int>(rng.range_int(min_len, max_len));
    std::string w;
    for (int i = 0; i < len; ++i) w += g[static_cast<size_t>(rng.below(g.size()))];
    return w;
}

} // namespace

TEST_CASE("whole-word match wins over pieces") {
    Vocab v = make_vocab({"lo", "##st", "lost"});
    CHECK(tokenize("lost", v) == std::vector<int32_t>{v.id_of("lost")});
}

TEST_CASE("greedy split when the whole word is absent") {
    Vocab v = make_vocab({"lo", "##st"});
    CHECK(tokenize("lost", v) == std::vector<int32_t>{v.id_of("lo"), v.id_of("##st")});
}

TEST_CASE("out-of-alphabet characters collapse to [UNK]") {
    Vocab v = make_vocab({});
    CHECK(tokenize("caf\xc3\xa9", v) == std::vector<int32_t>{Vocab::kUnk});
    CHECK(tokenize("a-b", v) == std::vector<int32_t>{Vocab::kUnk});
}

TEST_CASE("tokenize matches brute-force greedy oracle on random vocab and words") {
    Rng rng(31);
    std::vector<std::pair<std::string, int64_t>> corpus;
    for (int i = 0; i < 60; ++i) corpus.emplace_back(random_word(rng, 2, 8), rng.range_int(1, 50));
    Vocab v = build_vocab(corpus, Vocab::min_size() + 64);
    for (int i = 0; i < 300; ++i) {
        const std::string w = random_word(rng, 1, 12);
        const auto got = tokenize(w, v);
        const auto want = greedy_oracle(w, v);
        REQUIRE(got.size() == want.size());
        for (size_t j = 0; j < got.size(); ++j) CHECK(v.token(got[j]) == want[j]);
    }
}

TEST_CASE("round trip reproduces any in-alphabet word") {
    Rng rng(77);
    Vocab v = build_vocab({{"these", 5}, {"words", 4}, {"seed", 3}, {"the", 9}},
                          Vocab::min_size() + 16);
    for (int i = 0; i < 200; ++i) {
        const std::string w = random_word(rng, 1, 10);
        const auto pieces = tokenize(w, v);
        REQUIRE(pieces != std::vector<int32_t>{Vocab::kUnk});
        CHECK(detokenize(pieces, v) == w);
    }
}

TEST_CASE("frequent whole words survive merging as single tokens") {
    std::vector<std::pair<std::string, int64_t>> corpus = {{"lost", 100}, {"lose", 100}};
    Vocab v = build_vocab(corpus, 512);
    CHECK(v.id_of("lost") >= 0);
    CHECK(v.id_of("lose") >= 0);
}

TEST_CASE("tiny corpus keeps glyphs and specials") {
    Vocab v = build_vocab({{"a", 1}}, Vocab::min_size());
    CHECK(v.id_of("a") >= 0);
    CHECK(v.tokens[0] == "[PAD]");
    CHECK(v.tokens[1] == "[UNK]");
    CHECK(v.tokens[2] == "[CLS]");
    CHECK(v.tokens[3] == "[MASK]");
    CHECK(v.size() == Vocab::min_size());
}

TEST_CASE("build_vocab rejects empty corpus and tiny targets") {
    CHECK_THROWS(build_vocab({}, 512));
    CHECK_THROWS(build_vocab({{"a", 1}}, Vocab::min_size() - 1));
}

TEST_CASE("build_vocab is deterministic") {
    std::vector<std::pair<std::string, int64_t>> corpus = {
        {"alpha", 10}, {"beta", 10}, {"gamma", 7}, {"alphabet", 3}};
    Vocab a = build_vocab(corpus, 128);
    Vocab b = build_vocab(corpus, 128);
    CHECK(a.tokens == b.tokens);
}

TEST_CASE("vocab file round trip and id stability") {
    Vocab v = build_vocab({{"stone", 4}, {"store", 6}}, 100);
    const std::string path = "vocab_test_tmp.txt";
    save_vocab(v, path);
    Vocab w = load_vocab(path);
    CHECK(v.tokens == w.tokens);
    std::remove(path.c_str());
}

TEST_CASE("assemble pads to K+1 and keeps words whole") {
    Vocab v = make_vocab({"lost", "last"});
    SUBCASE("empty word list") {
        TokenSequence s = assemble({}, v, 8);
        CHECK(s.ids.size() == 9);
        CHECK(s.ids[0] == Vocab::kCls);
        for (size_t i = 1; i < s.ids.size(); ++i) CHECK(s.ids[i] == Vocab::kPad);
        CHECK(s.word_spans.empty());
    }
    SUBCASE("all words fit, order preserved") {
        TokenSequence s = assemble({"lost", "last"}, v, 8);
        CHECK(s.ids[1] == v.id_of("lost"));
        CHECK(s.ids[2] == v.id_of("last"));
        REQUIRE(s.word_spans.size() == 2);
        CHECK(s.word_spans[0] == std::pair<int, int>{1, 2});
        CHECK(s.word_spans[1] == std::pair<int, int>{2, 3});
    }
    SUBCASE("overflow drops whole words only") {
        Rng rng(5);
        Vocab rv = build_vocab({{"stones", 5}, {"rock", 5}}, 96);
        for (int trial = 0; trial < 100; ++trial) {
            std::vector<std::string> words;
            const int n = static_cast<int>(rng.range_int(1, 10));
            for (int i = 0; i < n; ++i) words.push_back(random_word(rng, 1, 7));
            const int K = static_cast<int>(rng.range_int(1, 12));
            TokenSequence s = assemble(words, rv, K);
            CHECK(s.ids.size() == static_cast<size_t>(K + 1));
            // every retained word's pieces are contiguous and complete
            for (size_t wi = 0; wi < s.word_spans.size(); ++wi) {
                auto [b, e] = s.word_spans[wi];
                std::vector<int32_t> pieces(s.ids.begin() + b, s.ids.begin() + e);
                CHECK(pieces == tokenize(words[wi], rv));
            }
            // spans partition the live non-special range
            int expect = 1;
            for (auto [b, e] : s.word_spans) {
                CHECK(b == expect);
                expect = e;
            }
            for (int i = expect; i <= K; ++i) CHECK(s.ids[static_cast<size_t>(i)] == Vocab::kPad);
        }
    }
}

TEST_CASE("masking respects exclusions and zero probability") {
    Vocab v = make_vocab({"lost", "vote", "sale"});
    TokenSequence s = assemble({"lost", "vote", "sale"}, v, 10);

    SUBCASE("probability zero leaves input unchanged") {
        MaskPolicy p;
        p.select_prob = 0.0;
        MaskedSequence m = mask_tokens(s, v, 7, p);
        CHECK(m.input_ids == s.ids);
        CHECK(m.mask_positions.empty());
        for (auto l : m.labels) CHECK(l == p.ignore_label);
    }
    SUBCASE("[CLS] and [PAD] never masked") {
        MaskPolicy p;
        p.select_prob = 1.0;
        for (uint64_t seed = 0; seed < 200; ++seed) {
            MaskedSequence m = mask_tokens(s, v, seed, p);
            for (int pos : m.mask_positions) {
                CHECK(pos >= 1);
                CHECK(s.attention_mask[static_cast<size_t>(pos)] == 1);
            }
        }
    }
    SUBCASE("deterministic given seed") {
        MaskedSequence a = mask_tokens(s, v, 123);
        MaskedSequence b = mask_tokens(s, v, 123);
        CHECK(a.input_ids == b.input_ids);
        CHECK(a.labels == b.labels);
    }
    SUBCASE("labels set exactly at mask positions") {
        MaskPolicy p;
        p.select_prob = 0.5;
        MaskedSequence m = mask_tokens(s, v, 99, p);
        std::set<int> mp(m.mask_positions.begin(), m.mask_positions.end());
        for (size_t i = 0; i < m.labels.size(); ++i) {
            if (mp.count(static_cast<int>(i))) {
                CHECK(m.labels[i] == s.ids[i]);
            } else {
                CHECK(m.labels[i] == p.ignore_label);
            }
        }
    }
}

TEST_CASE("masking statistics approach the configured rates") {
    Vocab v = build_vocab({{"alpha", 3}, {"number", 2}}, 128);
    // one long synthetic sequence batch: many short sequences
    int64_t maskable = 0, selected = 0, masked = 0, randomed = 0, unchanged = 0;
    Rng wr(17);
    uint64_t seed = 0;
    while (maskable < 120000) {
        std::vector<std::string> words;
        for (int i = 0; i < 6; ++i) words.push_back(random_word(wr, 2, 6));
        TokenSequence s = assemble(words, v, 30);
        for (auto m : s.attention_mask) maskable += (m ? 1 : 0);
        maskable -= 1; // [CLS] not maskable
        MaskedSequence m = mask_tokens(s, v, seed++);
        for (int pos : m.mask_positions) {
            ++selected;
            if (m.input_ids[static_cast<size_t>(pos)] == Vocab::kMask) {
                ++masked;
            } else if (m.input_ids[static_cast<size_t>(pos)] == s.ids[static_cast<size_t>(pos)]) {
                ++unchanged;
            } else {
                ++randomed;
            }
        }
    }
    const double sel = double(selected) / double(maskable);
    CHECK(sel == doctest::Approx(0.15).epsilon(0.07));
    CHECK(double(masked) / double(selected) == doctest::Approx(0.80).epsilon(0.025));
    CHECK(double(randomed) / double(selected) == doctest::Approx(0.10).epsilon(0.20));
    CHECK(double(unchanged) / double(selected) == doctest::Approx(0.10).epsilon(0.20));
}
