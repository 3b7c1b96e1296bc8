#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace modmoe {

// Byte-level BPE. Ids 0..2 are the special tokens, 3..258 the raw bytes,
// 259+ the merges in training order.
class Tokenizer {
public:
    static constexpr int32_t kUnk = 0;
    static constexpr int32_t kBos = 1;
    static constexpr int32_t kEos = 2;
    static constexpr int kNumSpecial = 3;
    static constexpr int kBaseVocab = kNumSpecial + 256;

    Tokenizer() = default;

    // Merges until the vocabulary reaches vocab_size. The procedure is fully
    // deterministic (highest count, then lexicographically smallest byte pair),
    // so the seed only participates in provenance records.
    static Tokenizer train(const std::vector<std::string>& texts, int vocab_size, uint64_t seed = 0);

    std::vector<int32_t> encode(std::string_view text) const;
    std::string decode(std::span<const int32_t> ids) const;

    int vocab_size() const { return kBaseVocab + static_cast<int>(merges_.size()); }
    int num_merges() const { return static_cast<int>(merges_.size()); }
    const std::vector<std::pair<int32_t, int32_t>>& merges() const { return merges_; }

    // tokenizer restricted to the first k merges
    Tokenizer truncated(int k) const;

    void save(const std::filesystem::path& path) const;
    static Tokenizer load(const std::filesystem::path& path);

    // byte string a non-special id expands to
    const std::string& token_bytes(int32_t id) const;

private:
    void rebuild_tables();

    std::vector<std::pair<int32_t, int32_t>> merges_;
    std::vector<std::string> bytes_;                  // indexed by id; empty strings for specials
    std::unordered_map<uint64_t, int32_t> rank_;      // packed pair -> merged id
};

}  // namespace modmoe
