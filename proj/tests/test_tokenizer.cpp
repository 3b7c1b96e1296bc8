#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "modmoe/rng.hpp"
#include "modmoe/tokenizer.hpp"

using modmoe::Rng;
using modmoe::Tokenizer;

namespace {

// Brute-force trainer: recount every pair from scratch each round, pick the
// highest count with the lexicographically smallest (bytes_a, bytes_b) tie
// break, apply it strictly left to right. Quadratic and only for cross-checks.
struct NaiveBpe {
    std::vector<std::string> bytes;  // per symbol id, specials empty
    std::vector<std::pair<int, int>> merges;
    std::vector<std::vector<int>> docs;

    explicit NaiveBpe(const std::vector<std::string>& texts) {
        bytes.assign(259, {});
        for (int b = 0; b < 256; ++b) bytes[static_cast<size_t>(3 + b)] = std::string(1, static_cast<char>(b));
        for (const auto& t : texts) {
            std::vector<int> d;
            for (const unsigned char c : t) d.push_back(3 + c);
            docs.push_back(std::move(d));
        }
    }

    bool merge_once() {
        std::map<std::pair<int, int>, long> counts;
        for (const auto& d : docs)
            for (size_t i = 0; i + 1 < d.size(); ++i) ++counts[{d[i], d[i + 1]}];
        if (counts.empty()) return false;
        std::pair<int, int> best{};
        long best_count = -1;
        for (const auto& [p, c] : counts) {
            if (c < best_count) continue;
            if (c > best_count) {
                best = p;
                best_count = c;
                continue;
            }
            const auto key = std::tuple(bytes[static_cast<size_t>(p.first)], bytes[static_cast<size_t>(p.second)], p);
            const auto cur = std::tuple(bytes[static_cast<size_t>(best.first)], bytes[static_cast<size_t>(best.second)], best);
            if (key < cur) best = p;
        }
        const int id = static_cast<int>(bytes.size());
        bytes.push_back(bytes[static_cast<size_t>(best.first)] + bytes[static_cast<size_t>(best.second)]);
        merges.push_back(best);
        for (auto& d : docs) {
            std::vector<int> out;
            out.reserve(d.size());
            for (size_t i = 0; i < d.size();) {
                if (i + 1 < d.size() && d[i] == best.first && d[i + 1] == best.second) {
                    out.push_back(id);
                    i += 2;
                } else {
                    out.push_back(d[i]);
                    ++i;
                }
            }
            d = std::move(out);
        }
        return true;
    }
};

std::string random_text(Rng& rng, int len) {
    static const std::string alphabet = "ababcdde  \nxyz";
    std::string s;
    for (int i = 0; i < len; ++i) s += alphabet[static_cast<size_t>(rng.below(alphabet.size()))];
    return s;
}

}  // namespace

TEST_CASE("first merge on a tiny corpus is the most frequent pair") {
    auto tok = Tokenizer::train({"abab ab"}, 260);
    REQUIRE(tok.num_merges() == 1);
    CHECK(tok.token_bytes(259) == "ab");
}

TEST_CASE("vocab 259 performs zero merges") {
    auto tok = Tokenizer::train({"abab ab"}, 259);
    CHECK(tok.num_merges() == 0);
    CHECK(tok.vocab_size() == 259);
}

TEST_CASE("training twice gives identical merges") {
    std::vector<std::string> texts{"the cat sat on the mat", "der Hund lief im Park", "def f(x):\n    return x"};
    auto t1 = Tokenizer::train(texts, 300);
    auto t2 = Tokenizer::train(texts, 300);
    CHECK(t1.merges() == t2.merges());
}

TEST_CASE("incremental trainer matches the brute-force oracle") {
    Rng rng(2024);
    for (int round = 0; round < 6; ++round) {
        std::vector<std::string> texts;
        const int ndocs = 2 + static_cast<int>(rng.below(3));
        for (int d = 0; d < ndocs; ++d) texts.push_back(random_text(rng, 40 + static_cast<int>(rng.below(120))));
        NaiveBpe naive(texts);
        int target = 0;
        while (target < 40 && naive.merge_once()) ++target;
        REQUIRE(target > 5);
        auto tok = Tokenizer::train(texts, 259 + target);
        REQUIRE(tok.num_merges() == target);
        for (int m = 0; m < target; ++m) {
            CAPTURE(round);
            CAPTURE(m);
            CHECK(tok.merges()[static_cast<size_t>(m)].first == naive.merges[static_cast<size_t>(m)].first);
            CHECK(tok.merges()[static_cast<size_t>(m)].second == naive.merges[static_cast<size_t>(m)].second);
        }
    }
}

TEST_CASE("encode applies merges like the oracle's left-to-right pass") {
    Rng rng(77);
    std::vector<std::string> texts;
    for (int d = 0; d < 3; ++d) texts.push_back(random_text(rng, 150));
    NaiveBpe naive(texts);
    int target = 0;
    while (target < 25 && naive.merge_once()) ++target;
    auto tok = Tokenizer::train(texts, 259 + target);
    for (size_t d = 0; d < texts.size(); ++d) {
        const auto got = tok.encode(texts[d]);
        std::vector<int32_t> want(naive.docs[d].begin(), naive.docs[d].end());
        CHECK(got == want);
    }
}

TEST_CASE("encode basics") {
    auto tok = Tokenizer::train({"abab ab"}, 260);
    CHECK(tok.encode("").empty());
    CHECK(tok.encode("abab").size() == 2);
    const std::string text = "caba bab";
    CHECK(tok.decode(tok.encode(text)) == text);
}

TEST_CASE("round-trip on varied byte content") {
    std::vector<std::string> texts{"mixed corpus for merges: the the the, une une, der der",
                                   "print('hello')\nprint('hello')"};
    auto tok = Tokenizer::train(texts, 300);
    const std::string samples[] = {
        "",
        "plain ascii",
        "accents: déjà vu, straße, œuvre",
        "cjk: 统计学习, かな",
        "emoji: 🚀🔥",
        std::string("embedded\0byte", 13),
        "tabs\tand\r\nnewlines",
    };
    for (const auto& s : samples) CHECK(tok.decode(tok.encode(s)) == s);
}

TEST_CASE("compression is monotone in merge count on the training corpus") {
    std::vector<std::string> texts{"the quick brown fox jumps over the lazy dog; the dog sleeps",
                                   "le renard brun saute par dessus le chien paresseux"};
    auto tok = Tokenizer::train(texts, 320);
    size_t prev = SIZE_MAX;
    for (int k = 0; k <= tok.num_merges(); k += 5) {
        auto t = tok.truncated(k);
        size_t total = 0;
        for (const auto& s : texts) total += t.encode(s).size();
        CHECK(total <= prev);
        prev = total;
    }
}

TEST_CASE("specials decode to their literal strings") {
    auto tok = Tokenizer::train({"abab"}, 259);
    const std::vector<int32_t> ids{Tokenizer::kBos, Tokenizer::kUnk, Tokenizer::kEos};
    CHECK(tok.decode(ids) == "<s><unk></s>");
}

TEST_CASE("decode rejects out-of-range ids") {
    auto tok = Tokenizer::train({"abab"}, 260);
    const std::vector<int32_t> bad{tok.vocab_size()};
    CHECK_THROWS_WITH(tok.decode(bad), doctest::Contains(std::to_string(tok.vocab_size()).c_str()));
    const std::vector<int32_t> neg{-1};
    CHECK_THROWS(tok.decode(neg));
}

TEST_CASE("too-small corpus reports achievable vocab size") {
    CHECK_THROWS_WITH(Tokenizer::train({"ab"}, 300), doctest::Contains("achievable vocab size is 260"));
}

TEST_CASE("save and load round-trips encodings") {
    Rng rng(31);
    std::vector<std::string> texts;
    for (int d = 0; d < 4; ++d) texts.push_back(random_text(rng, 200));
    texts.push_back("unicode déjà straße 统计");
    auto tok = Tokenizer::train(texts, 400);
    const auto path = std::filesystem::temp_directory_path() / "modmoe_tok_test.json";
    tok.save(path);
    auto back = Tokenizer::load(path);
    CHECK(back.vocab_size() == tok.vocab_size());
    CHECK(back.merges() == tok.merges());
    for (const auto& t : texts) CHECK(back.encode(t) == tok.encode(t));
    std::filesystem::remove(path);
}
