#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "modmoe/tokenizer.hpp"

namespace modmoe {

enum class Lang : int { en = 0, fr = 1, de = 2, py = 3 };
inline constexpr int kNumLangs = 4;
inline constexpr std::array<Lang, 4> kAllLangs{Lang::en, Lang::fr, Lang::de, Lang::py};

const char* lang_name(Lang l);
std::optional<Lang> parse_lang(std::string_view s);

struct Document {
    std::string text;
    Lang lang;
};

// JSON Lines, one {"text": ..., "lang": ...} object per line
std::vector<Document> load_corpus(const std::filesystem::path& path);
void save_corpus(const std::filesystem::path& path, const std::vector<Document>& docs);

// Truncates every language to the smallest language's token count. Documents
// are shuffled per language by the seed, then kept in that order until the
// first one that would cross the cap. Output is grouped in class order.
std::vector<Document> balance_corpus(const std::vector<Document>& docs, const Tokenizer& tok, uint64_t seed);

struct CorpusStats {
    std::array<int64_t, kNumLangs> documents{};
    std::array<int64_t, kNumLangs> tokens{};
};
CorpusStats corpus_stats(const std::vector<Document>& docs, const Tokenizer& tok);
void write_stats_csv(const std::filesystem::path& path, const CorpusStats& stats);

struct SplitResult {
    std::vector<Document> train;
    std::vector<Document> val;
};
// held-out fraction selected per language after a seed shuffle
SplitResult split_validation(const std::vector<Document>& docs, double fraction, uint64_t seed);

struct Batch {
    std::vector<int32_t> tokens;  // rows * context_len, row-major
    std::vector<uint8_t> mask;    // 1 where the token is real, 0 on padding
    std::vector<Lang> labels;     // one per row
    int rows = 0;
    int context_len = 0;
};

enum class BatchMode { per_language, mixed };

// One epoch of packed batches. per_language emits each language's batches as
// a contiguous block in class order; mixed interleaves single-language batches
// in seed-shuffled rounds so the stream stays balanced.
std::vector<Batch> make_batches(const std::vector<Document>& docs, const Tokenizer& tok, int context_len, int batch_size,
                                BatchMode mode, uint64_t seed);

// Cycles epochs forever, reshuffling document order each epoch from the seed.
class BatchStream {
public:
    BatchStream(std::vector<Document> docs, const Tokenizer& tok, int context_len, int batch_size, BatchMode mode,
                uint64_t seed);

    const Batch& next();
    size_t batches_per_epoch() const { return epoch_batches_.size(); }
    int64_t epoch() const { return epoch_; }

private:
    void load_epoch();

    std::vector<Document> docs_;
    const Tokenizer* tok_;
    int context_len_, batch_size_;
    BatchMode mode_;
    uint64_t seed_;
    int64_t epoch_ = -1;
    size_t cursor_ = 0;
    std::vector<Batch> epoch_batches_;
};

}  // namespace modmoe
