#include "modmoe/corpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <stdexcept>

#include "modmoe/io.hpp"
#include "modmoe/rng.hpp"

namespace modmoe {

namespace {

bool is_blank(const std::string& s) {
    for (const char c : s)
        if (c != ' ' && c != '\t' && c != '\r' && c != '\n' && c != '\f' && c != '\v') return false;
    return true;
}

std::vector<std::vector<size_t>> indices_by_lang(const std::vector<Document>& docs) {
    std::vector<std::vector<size_t>> by_lang(kNumLangs);
    for (size_t i = 0; i < docs.size(); ++i) by_lang[static_cast<size_t>(docs[i].lang)].push_back(i);
    return by_lang;
}

}  // namespace

const char* lang_name(Lang l) {
    switch (l) {
        case Lang::en: return "en";
        case Lang::fr: return "fr";
        case Lang::de: return "de";
        case Lang::py: return "py";
    }
    return "?";
}

std::optional<Lang> parse_lang(std::string_view s) {
    if (s == "en") return Lang::en;
    if (s == "fr") return Lang::fr;
    if (s == "de") return Lang::de;
    if (s == "py") return Lang::py;
    return std::nullopt;
}

std::vector<Document> load_corpus(const std::filesystem::path& path) {
    const std::string data = read_file(path);
    std::vector<Document> docs;
    size_t start = 0;
    int line_no = 0;
    while (start < data.size()) {
        size_t end = data.find('\n', start);
        if (end == std::string::npos) end = data.size();
        std::string line = data.substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (is_blank(line)) {
            if (start >= data.size()) break;  // trailing newline
            throw std::runtime_error("malformed line " + std::to_string(line_no) + ": blank line");
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception&) {
            throw std::runtime_error("malformed line " + std::to_string(line_no) + ": not a JSON object");
        }
        if (!j.is_object() || j.size() != 2 || !j.contains("text") || !j.contains("lang") || !j["text"].is_string() ||
            !j["lang"].is_string())
            throw std::runtime_error("malformed line " + std::to_string(line_no) +
                                     ": expected exactly the keys \"text\" and \"lang\"");
        const std::string lang_str = j["lang"].get<std::string>();
        const auto lang = parse_lang(lang_str);
        if (!lang) throw std::runtime_error("unknown language '" + lang_str + "' at line " + std::to_string(line_no));
        std::string text = j["text"].get<std::string>();
        if (is_blank(text)) throw std::runtime_error("empty text at line " + std::to_string(line_no));
        docs.push_back(Document{std::move(text), *lang});
    }
    return docs;
}

void save_corpus(const std::filesystem::path& path, const std::vector<Document>& docs) {
    std::string out;
    for (const auto& d : docs) {
        nlohmann::json j;
        j["text"] = d.text;
        j["lang"] = lang_name(d.lang);
        out += j.dump();
        out += '\n';
    }
    write_file(path, out);
}

std::vector<Document> balance_corpus(const std::vector<Document>& docs, const Tokenizer& tok, uint64_t seed) {
    auto by_lang = indices_by_lang(docs);
    std::string missing;
    for (const Lang l : kAllLangs) {
        if (by_lang[static_cast<size_t>(l)].empty()) {
            if (!missing.empty()) missing += ", ";
            missing += lang_name(l);
        }
    }
    if (!missing.empty()) throw std::runtime_error("missing language: " + missing);

    std::vector<int64_t> doc_tokens(docs.size());
    for (size_t i = 0; i < docs.size(); ++i) doc_tokens[i] = static_cast<int64_t>(tok.encode(docs[i].text).size());

    Rng rng(seed);
    int64_t cap = -1;
    for (const Lang l : kAllLangs) {
        auto& idxs = by_lang[static_cast<size_t>(l)];
        rng.fork(std::string("balance-") + lang_name(l)).shuffle(idxs);
        int64_t total = 0;
        for (const size_t i : idxs) total += doc_tokens[i];
        cap = cap < 0 ? total : std::min(cap, total);
    }

    std::vector<Document> out;
    out.reserve(docs.size());
    for (const Lang l : kAllLangs) {
        int64_t running = 0;
        for (const size_t i : by_lang[static_cast<size_t>(l)]) {
            if (running + doc_tokens[i] > cap) break;
            running += doc_tokens[i];
            out.push_back(docs[i]);
        }
    }
    return out;
}

CorpusStats corpus_stats(const std::vector<Document>& docs, const Tokenizer& tok) {
    CorpusStats stats;
    for (const auto& d : docs) {
        stats.documents[static_cast<size_t>(d.lang)] += 1;
        stats.tokens[static_cast<size_t>(d.lang)] += static_cast<int64_t>(tok.encode(d.text).size());
    }
    return stats;
}

void write_stats_csv(const std::filesystem::path& path, const CorpusStats& stats) {
    std::vector<std::vector<std::string>> rows;
    for (const Lang l : kAllLangs) {
        const auto i = static_cast<size_t>(l);
        rows.push_back({lang_name(l), std::to_string(stats.documents[i]), std::to_string(stats.tokens[i])});
    }
    write_csv(path, {"lang", "documents", "tokens"}, rows);
}

SplitResult split_validation(const std::vector<Document>& docs, double fraction, uint64_t seed) {
    if (fraction < 0.0 || fraction >= 1.0)
        throw std::runtime_error("validation fraction " + std::to_string(fraction) + " outside [0, 1)");
    auto by_lang = indices_by_lang(docs);
    Rng rng(seed);
    std::vector<uint8_t> is_val(docs.size(), 0);
    for (const Lang l : kAllLangs) {
        auto& idxs = by_lang[static_cast<size_t>(l)];
        if (idxs.empty()) continue;
        rng.fork(std::string("val-split-") + lang_name(l)).shuffle(idxs);
        size_t n_val = static_cast<size_t>(static_cast<double>(idxs.size()) * fraction);
        if (fraction > 0.0 && n_val == 0) n_val = 1;
        for (size_t i = 0; i < n_val; ++i) is_val[idxs[i]] = 1;
    }
    SplitResult out;
    for (size_t i = 0; i < docs.size(); ++i) (is_val[i] ? out.val : out.train).push_back(docs[i]);
    return out;
}

namespace {

// tokenized docs of one language, concatenated with </s> separators and cut
// into context_len chunks; the last chunk is padded and masked
std::vector<std::vector<int32_t>> pack_chunks(const std::vector<std::vector<int32_t>>& seqs,
                                              const std::vector<size_t>& order, int context_len,
                                              std::vector<int>* pad_counts) {
    std::vector<std::vector<int32_t>> chunks;
    std::vector<int32_t> cur;
    cur.reserve(static_cast<size_t>(context_len));
    for (const size_t i : order) {
        for (const int32_t t : seqs[i]) {
            cur.push_back(t);
            if (static_cast<int>(cur.size()) == context_len) {
                chunks.push_back(std::move(cur));
                cur = {};
            }
        }
        cur.push_back(Tokenizer::kEos);
        if (static_cast<int>(cur.size()) == context_len) {
            chunks.push_back(std::move(cur));
            cur = {};
        }
    }
    if (!cur.empty()) {
        const int pad = context_len - static_cast<int>(cur.size());
        cur.resize(static_cast<size_t>(context_len), Tokenizer::kUnk);
        pad_counts->push_back(pad);
        chunks.push_back(std::move(cur));
    }
    return chunks;
}

Batch assemble(const std::vector<std::vector<int32_t>>& chunks, size_t begin, size_t count, Lang lang, int context_len,
               int last_chunk_pad, size_t total_chunks) {
    Batch b;
    b.rows = static_cast<int>(count);
    b.context_len = context_len;
    b.tokens.reserve(count * static_cast<size_t>(context_len));
    b.mask.assign(count * static_cast<size_t>(context_len), 1);
    for (size_t r = 0; r < count; ++r) {
        const auto& c = chunks[begin + r];
        b.tokens.insert(b.tokens.end(), c.begin(), c.end());
        b.labels.push_back(lang);
        if (begin + r == total_chunks - 1 && last_chunk_pad > 0)
            std::fill(b.mask.end() - last_chunk_pad, b.mask.end(), static_cast<uint8_t>(0));
    }
    return b;
}

}  // namespace

std::vector<Batch> make_batches(const std::vector<Document>& docs, const Tokenizer& tok, int context_len, int batch_size,
                                BatchMode mode, uint64_t seed) {
    if (context_len < 2) throw std::runtime_error("context_len must be at least 2, got " + std::to_string(context_len));
    if (batch_size < 1) throw std::runtime_error("batch_size must be at least 1, got " + std::to_string(batch_size));

    auto by_lang = indices_by_lang(docs);
    std::vector<std::vector<int32_t>> tokenized(docs.size());
    for (size_t i = 0; i < docs.size(); ++i) tokenized[i] = tok.encode(docs[i].text);

    Rng rng(seed);
    std::array<std::vector<std::vector<int32_t>>, kNumLangs> chunks;
    std::array<int, kNumLangs> last_pad{};
    int64_t total_tokens = 0;
    for (const Lang l : kAllLangs) {
        const auto li = static_cast<size_t>(l);
        auto order = by_lang[li];
        rng.fork(std::string("batch-order-") + lang_name(l)).shuffle(order);
        std::vector<int> pads;
        chunks[li] = pack_chunks(tokenized, order, context_len, &pads);
        last_pad[li] = pads.empty() ? 0 : pads.back();
        for (const size_t i : by_lang[li]) total_tokens += static_cast<int64_t>(tokenized[i].size());
    }
    if (total_tokens + static_cast<int64_t>(docs.size()) < context_len)
        throw std::runtime_error("tokenized corpus (" + std::to_string(total_tokens) +
                                 " tokens) is shorter than one context window of " + std::to_string(context_len));

    std::vector<Batch> out;
    if (mode == BatchMode::per_language) {
        for (const Lang l : kAllLangs) {
            const auto li = static_cast<size_t>(l);
            const size_t n = chunks[li].size();
            for (size_t begin = 0; begin < n; begin += static_cast<size_t>(batch_size)) {
                const size_t count = std::min(static_cast<size_t>(batch_size), n - begin);
                out.push_back(assemble(chunks[li], begin, count, l, context_len, last_pad[li], n));
            }
        }
        return out;
    }

    // mixed: rounds over a per-round language permutation, one batch per
    // language with chunks remaining
    std::array<size_t, kNumLangs> cursor{};
    auto mixer = rng.fork("mixed-rounds");
    bool any = true;
    while (any) {
        any = false;
        std::array<int, kNumLangs> perm{0, 1, 2, 3};
        mixer.shuffle(perm);
        for (const int li : perm) {
            const size_t n = chunks[static_cast<size_t>(li)].size();
            if (cursor[static_cast<size_t>(li)] >= n) continue;
            const size_t begin = cursor[static_cast<size_t>(li)];
            const size_t count = std::min(static_cast<size_t>(batch_size), n - begin);
            out.push_back(assemble(chunks[static_cast<size_t>(li)], begin, count, static_cast<Lang>(li), context_len,
                                   last_pad[static_cast<size_t>(li)], n));
            cursor[static_cast<size_t>(li)] += count;
            any = true;
        }
    }
    return out;
}

BatchStream::BatchStream(std::vector<Document> docs, const Tokenizer& tok, int context_len, int batch_size, BatchMode mode,
                         uint64_t seed)
    : docs_(std::move(docs)), tok_(&tok), context_len_(context_len), batch_size_(batch_size), mode_(mode), seed_(seed) {
    load_epoch();
}

void BatchStream::load_epoch() {
    ++epoch_;
    cursor_ = 0;
    epoch_batches_ = make_batches(docs_, *tok_, context_len_, batch_size_, mode_,
                                  fnv1a("epoch-" + std::to_string(epoch_), seed_));
    if (epoch_batches_.empty()) throw std::runtime_error("batch stream produced an empty epoch");
}

const Batch& BatchStream::next() {
    if (cursor_ >= epoch_batches_.size()) load_epoch();
    return epoch_batches_[cursor_++];
}

}  // namespace modmoe
