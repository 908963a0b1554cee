#include "ofa/vocab.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace ofa {

namespace {

bool is_ws(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

// Byte <-> code point bijection over a printable alphabet, so token strings
// never contain whitespace or control bytes and the vocab file stays line-based.
// Printable latin-1 bytes map to themselves; the rest shift to 256+k.
struct ByteAlphabet {
    std::array<int, 256> byte_to_cp{};
    std::unordered_map<int, uint8_t> cp_to_byte;

    ByteAlphabet() {
        auto printable = [](int b) {
            return (b >= 33 && b <= 126) || (b >= 161 && b <= 172) || (b >= 174 && b <= 255);
        };
        int n = 0;
        for (int b = 0; b < 256; ++b) {
            const int cp = printable(b) ? b : 256 + n++;
            byte_to_cp[static_cast<size_t>(b)] = cp;
            cp_to_byte[cp] = static_cast<uint8_t>(b);
        }
    }
};

const ByteAlphabet& alphabet() {
    static const ByteAlphabet a;
    return a;
}

void append_utf8(std::string& out, int cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

// Split a UTF-8 string into per-code-point substrings.
std::vector<std::string> utf8_symbols(const std::string& s) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < s.size()) {
        const auto c = static_cast<unsigned char>(s[i]);
        size_t len = 1;
        if (c >= 0xF0)
            len = 4;
        else if (c >= 0xE0)
            len = 3;
        else if (c >= 0xC0)
            len = 2;
        out.push_back(s.substr(i, len));
        i += len;
    }
    return out;
}

int utf8_to_cp(const std::string& sym) {
    const auto c0 = static_cast<unsigned char>(sym[0]);
    if (c0 < 0x80) return c0;
    if (c0 < 0xE0) return ((c0 & 0x1F) << 6) | (static_cast<unsigned char>(sym[1]) & 0x3F);
    return ((c0 & 0x0F) << 12) | ((static_cast<unsigned char>(sym[1]) & 0x3F) << 6) |
           (static_cast<unsigned char>(sym[2]) & 0x3F);
}

std::string map_bytes(const std::string& raw) {
    std::string out;
    out.reserve(raw.size() * 2);
    for (char ch : raw) append_utf8(out, alphabet().byte_to_cp[static_cast<uint8_t>(ch)]);
    return out;
}

std::string unmap_bytes(const std::string& mapped) {
    std::string out;
    for (const std::string& sym : utf8_symbols(mapped)) {
        auto it = alphabet().cp_to_byte.find(utf8_to_cp(sym));
        if (it == alphabet().cp_to_byte.end()) throw DataError("vocab: symbol outside byte alphabet");
        out.push_back(static_cast<char>(it->second));
    }
    return out;
}

std::string merge_key(const std::string& a, const std::string& b) { return a + '\x01' + b; }

// Pre-tokens: whitespace-split words, each word after the first carrying its
// leading space, already in the mapped alphabet.
std::vector<std::string> pretokenize(const std::string& normalized, bool lead_space) {
    std::vector<std::string> out;
    size_t i = 0;
    bool first = true;
    while (i < normalized.size()) {
        size_t j = normalized.find(' ', i);
        if (j == std::string::npos) j = normalized.size();
        std::string word = normalized.substr(i, j - i);
        if (!word.empty()) {
            if (!first || lead_space) word = " " + word;
            out.push_back(map_bytes(word));
            first = false;
        }
        i = j + 1;
    }
    return out;
}

}  // namespace

std::string normalize_ws(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    bool pending_space = false;
    for (char c : s) {
        if (is_ws(c)) {
            pending_space = !out.empty();
        } else {
            if (pending_space) out.push_back(' ');
            pending_space = false;
            out.push_back(c);
        }
    }
    return out;
}

UnifiedVocab UnifiedVocab::build(const std::string& corpus, int target_subwords, int num_loc_bins,
                                 int codebook_size) {
    if (target_subwords < 256) throw UsageError("build_vocab: target_subwords must be >= 256");
    if (num_loc_bins <= 0) throw UsageError("build_vocab: num_loc_bins must be positive");
    if (codebook_size <= 0) throw UsageError("build_vocab: codebook_size must be positive");
    const std::string normalized = normalize_ws(corpus);
    if (normalized.empty()) throw DataError("build_vocab: empty corpus");

    UnifiedVocab v;
    v.num_loc_bins_ = num_loc_bins;
    v.codebook_size_ = codebook_size;
    v.subwords_.reserve(static_cast<size_t>(target_subwords));
    for (int b = 0; b < 256; ++b) {
        std::string sym;
        append_utf8(sym, alphabet().byte_to_cp[static_cast<size_t>(b)]);
        v.subwords_.push_back(sym);
    }

    // Word frequency table; ordered map so iteration (and thus tie-breaking)
    // never depends on hash order.
    std::map<std::string, int64_t> word_count;
    for (const std::string& w : pretokenize(normalized, false)) ++word_count[w];
    std::vector<std::pair<std::vector<std::string>, int64_t>> words;
    words.reserve(word_count.size());
    for (const auto& [w, c] : word_count) words.emplace_back(utf8_symbols(w), c);

    std::unordered_map<std::string, bool> known;
    for (const auto& s : v.subwords_) known[s] = true;

    while (static_cast<int>(v.subwords_.size()) < target_subwords) {
        std::map<std::pair<std::string, std::string>, int64_t> pair_count;
        for (const auto& [syms, c] : words)
            for (size_t i = 0; i + 1 < syms.size(); ++i) pair_count[{syms[i], syms[i + 1]}] += c;
        // Highest count wins; ties go to the lexicographically smallest pair,
        // which is the first one met in sorted-map order.
        std::pair<std::string, std::string> best;
        int64_t best_count = 0;
        for (const auto& [p, c] : pair_count) {
            if (c > best_count) {
                best_count = c;
                best = p;
            }
        }
        if (best_count < 2) break;
        v.merges_.push_back(best);
        const std::string merged = best.first + best.second;
        if (!known[merged]) {
            known[merged] = true;
            v.subwords_.push_back(merged);
        }
        for (auto& [syms, c] : words) {
            std::vector<std::string> next;
            next.reserve(syms.size());
            size_t i = 0;
            while (i < syms.size()) {
                if (i + 1 < syms.size() && syms[i] == best.first && syms[i + 1] == best.second) {
                    next.push_back(merged);
                    i += 2;
                } else {
                    next.push_back(syms[i]);
                    ++i;
                }
            }
            syms = std::move(next);
        }
    }

    v.num_subwords_ = static_cast<int>(v.subwords_.size());
    v.rebuild_index();
    return v;
}

void UnifiedVocab::rebuild_index() {
    subword_to_id_.clear();
    for (size_t i = 0; i < subwords_.size(); ++i) {
        subword_to_id_.emplace(subwords_[i], kNumSpecials + static_cast<int>(i));
    }
    merge_rank_.clear();
    for (size_t r = 0; r < merges_.size(); ++r) {
        merge_rank_.emplace(merge_key(merges_[r].first, merges_[r].second), static_cast<int>(r));
    }
}

int UnifiedVocab::loc_id(int bin) const {
    if (bin < 0 || bin >= num_loc_bins_) throw DataError("loc bin " + std::to_string(bin) + " out of range");
    return loc_begin() + bin;
}

int UnifiedVocab::loc_bin(int id) const {
    if (!is_loc(id)) throw DecodeError("id " + std::to_string(id) + " is not a location token");
    return id - loc_begin();
}

int UnifiedVocab::code_id(int index) const {
    if (index < 0 || index >= codebook_size_)
        throw DataError("code index " + std::to_string(index) + " out of range");
    return code_begin() + index;
}

int UnifiedVocab::code_index(int id) const {
    if (!is_code(id)) throw DecodeError("id " + std::to_string(id) + " is not an image code");
    return id - code_begin();
}

std::vector<int> UnifiedVocab::encode_pretoken(const std::string& mapped) const {
    std::vector<std::string> syms = utf8_symbols(mapped);
    while (syms.size() > 1) {
        int best_rank = std::numeric_limits<int>::max();
        for (size_t i = 0; i + 1 < syms.size(); ++i) {
            auto it = merge_rank_.find(merge_key(syms[i], syms[i + 1]));
            if (it != merge_rank_.end() && it->second < best_rank) best_rank = it->second;
        }
        if (best_rank == std::numeric_limits<int>::max()) break;
        const auto& [a, b] = merges_[static_cast<size_t>(best_rank)];
        std::vector<std::string> next;
        next.reserve(syms.size());
        size_t i = 0;
        while (i < syms.size()) {
            if (i + 1 < syms.size() && syms[i] == a && syms[i + 1] == b) {
                next.push_back(a + b);
                i += 2;
            } else {
                next.push_back(syms[i]);
                ++i;
            }
        }
        syms = std::move(next);
    }
    std::vector<int> ids;
    ids.reserve(syms.size());
    for (const std::string& s : syms) {
        auto it = subword_to_id_.find(s);
        if (it == subword_to_id_.end()) throw DataError("encode: symbol missing from vocab");
        ids.push_back(it->second);
    }
    return ids;
}

std::vector<int> UnifiedVocab::encode(const std::string& s) const {
    std::vector<int> ids;
    for (const std::string& pt : pretokenize(normalize_ws(s), false)) {
        std::vector<int> part = encode_pretoken(pt);
        ids.insert(ids.end(), part.begin(), part.end());
    }
    return ids;
}

namespace {
// Parses "<loc_12>", "<code_3>", "<bos>" etc at position i; returns length or 0.
struct Marker {
    size_t len = 0;
    enum Kind { kNone, kLoc, kCode, kSpecial } kind = kNone;
    int value = 0;
};

Marker parse_marker(const std::string& s, size_t i) {
    static const std::pair<const char*, int> specials[] = {
        {"<bos>", UnifiedVocab::kBos}, {"<eos>", UnifiedVocab::kEos},
        {"<pad>", UnifiedVocab::kPad}, {"<mask>", UnifiedVocab::kMask}};
    for (const auto& [lit, id] : specials) {
        const size_t n = std::string(lit).size();
        if (s.compare(i, n, lit) == 0) return {n, Marker::kSpecial, id};
    }
    for (const auto& [prefix, kind] :
         {std::pair<const char*, Marker::Kind>{"<loc_", Marker::kLoc}, {"<code_", Marker::kCode}}) {
        const size_t plen = std::string(prefix).size();
        if (s.compare(i, plen, prefix) != 0) continue;
        size_t j = i + plen;
        int value = 0;
        bool any = false;
        while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) {
            value = value * 10 + (s[j] - '0');
            any = true;
            ++j;
        }
        if (any && j < s.size() && s[j] == '>') return {j + 1 - i, kind, value};
    }
    return {};
}
}  // namespace

std::vector<int> UnifiedVocab::encode_mixed(const std::string& s) const {
    std::vector<int> ids;
    std::string segment;
    bool continuing = false;
    auto flush = [&]() {
        const std::string norm = normalize_ws(segment);
        segment.clear();
        if (norm.empty()) return;
        for (const std::string& pt : pretokenize(norm, continuing)) {
            std::vector<int> part = encode_pretoken(pt);
            ids.insert(ids.end(), part.begin(), part.end());
        }
        continuing = true;
    };
    size_t i = 0;
    while (i < s.size()) {
        if (s[i] == '<') {
            const Marker m = parse_marker(s, i);
            if (m.kind != Marker::kNone) {
                flush();
                switch (m.kind) {
                    case Marker::kLoc: ids.push_back(loc_id(m.value)); break;
                    case Marker::kCode: ids.push_back(code_id(m.value)); break;
                    default: ids.push_back(m.value); break;
                }
                continuing = true;
                i += m.len;
                continue;
            }
        }
        segment.push_back(s[i++]);
    }
    flush();
    return ids;
}

std::string UnifiedVocab::decode(std::span<const int> ids) const {
    std::string mapped;
    std::string out;
    auto flush = [&]() {
        if (mapped.empty()) return;
        out += unmap_bytes(mapped);
        mapped.clear();
    };
    auto literal = [&](const std::string& lit) {
        flush();
        if (!out.empty() && out.back() != ' ') out += ' ';
        out += lit;
    };
    for (int id : ids) {
        if (id < 0 || id >= size()) throw DecodeError("decode: id " + std::to_string(id) + " out of range");
        if (is_special(id)) continue;
        if (is_subword(id)) {
            mapped += subwords_[static_cast<size_t>(id - kNumSpecials)];
        } else if (is_loc(id)) {
            literal("<loc_" + std::to_string(loc_bin(id)) + ">");
        } else {
            literal("<code_" + std::to_string(code_index(id)) + ">");
        }
    }
    flush();
    // A leading space survives when the first token carried one; trim it.
    if (!out.empty() && out.front() == ' ') out.erase(out.begin());
    return out;
}

void UnifiedVocab::save(const std::string& vocab_path, const std::string& merges_path) const {
    std::ofstream vf(vocab_path, std::ios::binary);
    if (!vf) throw DataError("cannot write " + vocab_path);
    vf << "#ofa-vocab v1 subwords=" << num_subwords_ << " loc=" << num_loc_bins_
       << " code=" << codebook_size_ << "\n";
    vf << "<bos>\t0\n<eos>\t1\n<pad>\t2\n<mask>\t3\n";
    for (int i = 0; i < num_subwords_; ++i)
        vf << subwords_[static_cast<size_t>(i)] << '\t' << kNumSpecials + i << '\n';
    for (int b = 0; b < num_loc_bins_; ++b) vf << "<loc_" << b << ">\t" << loc_begin() + b << '\n';
    for (int c = 0; c < codebook_size_; ++c) vf << "<code_" << c << ">\t" << code_begin() + c << '\n';
    if (!vf) throw DataError("write failed: " + vocab_path);

    std::ofstream mf(merges_path, std::ios::binary);
    if (!mf) throw DataError("cannot write " + merges_path);
    for (const auto& [a, b] : merges_) mf << a << ' ' << b << '\n';
    if (!mf) throw DataError("write failed: " + merges_path);
}

UnifiedVocab UnifiedVocab::load(const std::string& vocab_path, const std::string& merges_path) {
    std::ifstream vf(vocab_path, std::ios::binary);
    if (!vf) throw DataError("cannot read " + vocab_path);
    std::string header;
    std::getline(vf, header);
    int subwords = -1, loc = -1, code = -1;
    if (std::sscanf(header.c_str(), "#ofa-vocab v1 subwords=%d loc=%d code=%d", &subwords, &loc,
                    &code) != 3) {
        throw DataError("bad vocab header in " + vocab_path);
    }
    UnifiedVocab v;
    v.num_subwords_ = subwords;
    v.num_loc_bins_ = loc;
    v.codebook_size_ = code;
    std::string line;
    int expected = 0;
    while (std::getline(vf, line)) {
        if (line.empty()) continue;
        const size_t tab = line.find('\t');
        if (tab == std::string::npos) throw DataError("bad vocab line: " + line);
        const std::string tok = line.substr(0, tab);
        const int id = std::stoi(line.substr(tab + 1));
        if (id != expected) throw DataError("non-contiguous id " + std::to_string(id) + " in vocab");
        if (id >= kNumSpecials && id < kNumSpecials + subwords) v.subwords_.push_back(tok);
        ++expected;
    }
    if (expected != v.size()) throw DataError("vocab entry count does not match header");

    std::ifstream mf(merges_path, std::ios::binary);
    if (!mf) throw DataError("cannot read " + merges_path);
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        const size_t sp = line.find(' ');
        if (sp == std::string::npos) throw DataError("bad merges line: " + line);
        v.merges_.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    v.rebuild_index();
    return v;
}

bool UnifiedVocab::operator==(const UnifiedVocab& o) const {
    return subwords_ == o.subwords_ && merges_ == o.merges_ && num_subwords_ == o.num_subwords_ &&
           num_loc_bins_ == o.num_loc_bins_ && codebook_size_ == o.codebook_size_;
}

}  // namespace ofa
