#include "modmoe/tokenizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <queue>
#include <stdexcept>

#include "modmoe/io.hpp"

namespace modmoe {

namespace {

constexpr uint64_t pack(int32_t a, int32_t b) { return (static_cast<uint64_t>(a) << 32) | static_cast<uint32_t>(b); }

const char* kSpecialNames[3] = {"<unk>", "<s>", "</s>"};

std::string escape_bytes(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (const unsigned char c : s) {
        if (c == '\\') {
            out += "\\\\";
        } else if (c >= 0x20 && c <= 0x7e) {
            out += static_cast<char>(c);
        } else {
            char buf[8];
            std::snprintf(buf, sizeof(buf), "\\x%02x", c);
            out += buf;
        }
    }
    return out;
}

std::string unescape_bytes(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (size_t i = 0; i < s.size();) {
        if (s[i] != '\\') {
            out += s[i++];
            continue;
        }
        if (i + 1 < s.size() && s[i + 1] == '\\') {
            out += '\\';
            i += 2;
        } else if (i + 3 < s.size() && s[i + 1] == 'x') {
            const auto hex = [](char c) -> int {
                if (c >= '0' && c <= '9') return c - '0';
                if (c >= 'a' && c <= 'f') return c - 'a' + 10;
                if (c >= 'A' && c <= 'F') return c - 'A' + 10;
                return -1;
            };
            const int hi = hex(s[i + 2]), lo = hex(s[i + 3]);
            if (hi < 0 || lo < 0) throw std::runtime_error("tokenizer file: bad byte escape in '" + s + "'");
            out += static_cast<char>(hi * 16 + lo);
            i += 4;
        } else {
            throw std::runtime_error("tokenizer file: bad escape in '" + s + "'");
        }
    }
    return out;
}

}  // namespace

void Tokenizer::rebuild_tables() {
    bytes_.assign(static_cast<size_t>(kBaseVocab) + merges_.size(), {});
    for (int b = 0; b < 256; ++b) bytes_[static_cast<size_t>(kNumSpecial + b)] = std::string(1, static_cast<char>(b));
    rank_.clear();
    rank_.reserve(merges_.size() * 2);
    for (size_t m = 0; m < merges_.size(); ++m) {
        const auto [a, b] = merges_[m];
        const int32_t id = static_cast<int32_t>(kBaseVocab + m);
        if (a < kNumSpecial || b < kNumSpecial || a >= id || b >= id)
            throw std::runtime_error("tokenizer: merge " + std::to_string(m) + " references invalid symbols");
        bytes_[static_cast<size_t>(id)] = bytes_[static_cast<size_t>(a)] + bytes_[static_cast<size_t>(b)];
        if (!rank_.emplace(pack(a, b), id).second)
            throw std::runtime_error("tokenizer: duplicate merge pair at rank " + std::to_string(m));
    }
}

Tokenizer Tokenizer::train(const std::vector<std::string>& texts, int vocab_size, uint64_t /*seed*/) {
    if (vocab_size < kBaseVocab)
        throw std::runtime_error("vocab size " + std::to_string(vocab_size) + " below minimum " + std::to_string(kBaseVocab));
    const int target_merges = vocab_size - kBaseVocab;

    Tokenizer tok;
    tok.merges_.reserve(static_cast<size_t>(target_merges));
    tok.rebuild_tables();
    if (target_merges == 0) return tok;

    // flatten the corpus into one symbol array; docs are separated by list
    // breaks so no pair spans two documents
    size_t total = 0;
    for (const auto& t : texts) total += t.size();
    std::vector<int32_t> sym(total);
    std::vector<int64_t> nxt(total), prv(total);
    std::vector<size_t> doc_end(texts.size());
    {
        size_t p = 0;
        for (size_t d = 0; d < texts.size(); ++d) {
            const size_t start = p;
            for (const unsigned char c : texts[d]) {
                sym[p] = kNumSpecial + c;
                prv[p] = static_cast<int64_t>(p) - 1;
                nxt[p] = static_cast<int64_t>(p) + 1;
                ++p;
            }
            if (p > start) {
                prv[start] = -1;
                nxt[p - 1] = -1;
            }
            doc_end[d] = p;
        }
    }

    std::unordered_map<uint64_t, int64_t> counts;
    std::unordered_map<uint64_t, std::vector<size_t>> occ;
    counts.reserve(1 << 16);
    occ.reserve(1 << 16);
    {
        size_t p = 0;
        for (size_t d = 0; d < texts.size(); ++d) {
            const size_t end = doc_end[d];
            for (; p + 1 < end; ++p) {
                const uint64_t k = pack(sym[p], sym[p + 1]);
                ++counts[k];
                occ[k].push_back(p);
            }
            p = end;
        }
    }

    struct Cand {
        int64_t count;
        int32_t a, b;
    };
    const auto& bytes = tok.bytes_;
    // max-heap: highest count first, then lexicographically smallest byte pair
    const auto worse = [&bytes](const Cand& x, const Cand& y) {
        if (x.count != y.count) return x.count < y.count;
        const auto& xa = bytes[static_cast<size_t>(x.a)];
        const auto& ya = bytes[static_cast<size_t>(y.a)];
        if (xa != ya) return xa > ya;
        const auto& xb = bytes[static_cast<size_t>(x.b)];
        const auto& yb = bytes[static_cast<size_t>(y.b)];
        if (xb != yb) return xb > yb;
        return std::pair(x.a, x.b) > std::pair(y.a, y.b);
    };
    std::priority_queue<Cand, std::vector<Cand>, decltype(worse)> heap(worse);
    for (const auto& [k, c] : counts)
        heap.push({c, static_cast<int32_t>(k >> 32), static_cast<int32_t>(k & 0xffffffffu)});

    std::vector<uint64_t> touched;
    while (static_cast<int>(tok.merges_.size()) < target_merges) {
        Cand best{};
        bool found = false;
        while (!heap.empty()) {
            best = heap.top();
            heap.pop();
            auto it = counts.find(pack(best.a, best.b));
            const int64_t now = it == counts.end() ? 0 : it->second;
            if (now == best.count && now > 0) {
                found = true;
                break;
            }
            if (now > 0) heap.push({now, best.a, best.b});  // stale entry, reinsert at true count
        }
        if (!found)
            throw std::runtime_error("corpus too small for vocab size " + std::to_string(vocab_size) +
                                     "; achievable vocab size is " +
                                     std::to_string(kBaseVocab + static_cast<int>(tok.merges_.size())));

        const int32_t a = best.a, b = best.b;
        const uint64_t bk = pack(a, b);
        const int32_t s = static_cast<int32_t>(kBaseVocab + tok.merges_.size());
        tok.merges_.emplace_back(a, b);
        tok.bytes_.push_back(bytes[static_cast<size_t>(a)] + bytes[static_cast<size_t>(b)]);
        tok.rank_.emplace(bk, s);

        touched.clear();
        // move the list out: appends below may rehash occ
        std::vector<size_t> positions;
        if (auto it = occ.find(bk); it != occ.end()) {
            positions = std::move(it->second);
            occ.erase(it);
        }
        // canonical left-to-right order; appended entries arrive unordered
        std::sort(positions.begin(), positions.end());
        positions.erase(std::unique(positions.begin(), positions.end()), positions.end());
        const auto bump = [&](uint64_t k, int64_t delta, size_t pos, bool record_pos) {
            auto& c = counts[k];
            c += delta;
            if (record_pos) occ[k].push_back(pos);
            touched.push_back(k);
        };
        for (const size_t p : positions) {
            if (sym[p] != a) continue;
            const int64_t q = nxt[p];
            if (q < 0 || sym[static_cast<size_t>(q)] != b) continue;
            const int64_t left = prv[p];
            const int64_t right = nxt[static_cast<size_t>(q)];
            bump(bk, -1, 0, false);
            if (left >= 0) {
                bump(pack(sym[static_cast<size_t>(left)], a), -1, 0, false);
                bump(pack(sym[static_cast<size_t>(left)], s), +1, static_cast<size_t>(left), true);
            }
            if (right >= 0) {
                bump(pack(b, sym[static_cast<size_t>(right)]), -1, 0, false);
                bump(pack(s, sym[static_cast<size_t>(right)]), +1, p, true);
            }
            sym[p] = s;
            sym[static_cast<size_t>(q)] = -1;
            nxt[p] = right;
            if (right >= 0) prv[static_cast<size_t>(right)] = static_cast<int64_t>(p);
        }
        counts.erase(bk);
        std::sort(touched.begin(), touched.end());
        touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
        for (const uint64_t k : touched) {
            if (k == bk) continue;
            auto it = counts.find(k);
            if (it == counts.end()) continue;
            if (it->second <= 0) {
                counts.erase(it);
                occ.erase(k);
                continue;
            }
            heap.push({it->second, static_cast<int32_t>(k >> 32), static_cast<int32_t>(k & 0xffffffffu)});
        }
    }
    return tok;
}

std::vector<int32_t> Tokenizer::encode(std::string_view text) const {
    std::vector<int32_t> sym;
    sym.reserve(text.size());
    for (const char ch : text) sym.push_back(kNumSpecial + static_cast<unsigned char>(ch));
    if (sym.empty() || rank_.empty()) return sym;

    const size_t n = sym.size();
    std::vector<int64_t> nxt(n), prv(n);
    for (size_t i = 0; i < n; ++i) {
        prv[i] = static_cast<int64_t>(i) - 1;
        nxt[i] = i + 1 < n ? static_cast<int64_t>(i) + 1 : -1;
    }

    struct Item {
        int32_t id;  // merged symbol, doubles as the rank
        size_t pos;
    };
    const auto later = [](const Item& x, const Item& y) {
        if (x.id != y.id) return x.id > y.id;
        return x.pos > y.pos;
    };
    std::priority_queue<Item, std::vector<Item>, decltype(later)> heap(later);
    const auto push_pair = [&](size_t p) {
        const int64_t q = nxt[p];
        if (q < 0) return;
        auto it = rank_.find(pack(sym[p], sym[static_cast<size_t>(q)]));
        if (it != rank_.end()) heap.push({it->second, p});
    };
    for (size_t i = 0; i + 1 < n; ++i) push_pair(i);

    while (!heap.empty()) {
        const auto [id, p] = heap.top();
        heap.pop();
        const int64_t q = nxt[p];
        if (q < 0 || sym[p] < 0) continue;
        auto it = rank_.find(pack(sym[p], sym[static_cast<size_t>(q)]));
        if (it == rank_.end() || it->second != id) continue;  // stale
        sym[p] = id;
        sym[static_cast<size_t>(q)] = -1;
        nxt[p] = nxt[static_cast<size_t>(q)];
        if (nxt[p] >= 0) prv[static_cast<size_t>(nxt[p])] = static_cast<int64_t>(p);
        if (prv[p] >= 0) push_pair(static_cast<size_t>(prv[p]));
        push_pair(p);
    }

    std::vector<int32_t> out;
    out.reserve(n);
    for (int64_t p = 0; p >= 0; p = nxt[static_cast<size_t>(p)]) out.push_back(sym[static_cast<size_t>(p)]);
    return out;
}

std::string Tokenizer::decode(std::span<const int32_t> ids) const {
    std::string out;
    for (const int32_t id : ids) {
        if (id < 0 || id >= vocab_size())
            throw std::runtime_error("decode: id " + std::to_string(id) + " outside vocabulary of size " +
                                     std::to_string(vocab_size()));
        if (id < kNumSpecial)
            out += kSpecialNames[id];
        else
            out += bytes_[static_cast<size_t>(id)];
    }
    return out;
}

const std::string& Tokenizer::token_bytes(int32_t id) const {
    if (id < kNumSpecial || id >= vocab_size())
        throw std::runtime_error("token_bytes: id " + std::to_string(id) + " has no byte expansion");
    return bytes_[static_cast<size_t>(id)];
}

Tokenizer Tokenizer::truncated(int k) const {
    if (k < 0 || k > num_merges())
        throw std::runtime_error("truncated: " + std::to_string(k) + " merges requested, have " +
                                 std::to_string(num_merges()));
    Tokenizer tok;
    tok.merges_.assign(merges_.begin(), merges_.begin() + k);
    tok.rebuild_tables();
    return tok;
}

void Tokenizer::save(const std::filesystem::path& path) const {
    nlohmann::json j;
    j["version"] = 1;
    j["vocab_size"] = vocab_size();
    j["special_tokens"] = {kSpecialNames[0], kSpecialNames[1], kSpecialNames[2]};
    auto& arr = j["merges"] = nlohmann::json::array();
    for (const auto& [a, b] : merges_)
        arr.push_back({escape_bytes(bytes_[static_cast<size_t>(a)]), escape_bytes(bytes_[static_cast<size_t>(b)])});
    write_file(path, j.dump(1) + "\n");
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("tokenizer file " + path.string() + ": " + e.what());
    }
    if (!j.contains("version") || j["version"] != 1)
        throw std::runtime_error("tokenizer file " + path.string() + ": unsupported version");

    Tokenizer tok;
    tok.rebuild_tables();
    // map byte strings back to symbol ids as the vocabulary grows; when two
    // symbols share a byte string the earliest id wins
    std::unordered_map<std::string, int32_t> by_bytes;
    by_bytes.reserve(256 + j["merges"].size());
    for (int b = 0; b < 256; ++b) by_bytes.emplace(std::string(1, static_cast<char>(b)), kNumSpecial + b);
    for (const auto& m : j["merges"]) {
        if (!m.is_array() || m.size() != 2)
            throw std::runtime_error("tokenizer file " + path.string() + ": malformed merge entry");
        const std::string sa = unescape_bytes(m[0].get<std::string>());
        const std::string sb = unescape_bytes(m[1].get<std::string>());
        const auto ia = by_bytes.find(sa);
        const auto ib = by_bytes.find(sb);
        if (ia == by_bytes.end() || ib == by_bytes.end())
            throw std::runtime_error("tokenizer file " + path.string() + ": merge references unknown symbol '" +
                                     escape_bytes(ia == by_bytes.end() ? sa : sb) + "'");
        const int32_t id = static_cast<int32_t>(kBaseVocab + tok.merges_.size());
        tok.merges_.emplace_back(ia->second, ib->second);
        tok.bytes_.push_back(sa + sb);
        tok.rank_.emplace(pack(ia->second, ib->second), id);
        by_bytes.emplace(sa + sb, id);  // no overwrite, earliest id wins
    }
    if (j.contains("vocab_size") && j["vocab_size"].get<int>() != tok.vocab_size())
        throw std::runtime_error("tokenizer file " + path.string() + ": vocab_size disagrees with merge count");
    return tok;
}

}  // namespace modmoe
