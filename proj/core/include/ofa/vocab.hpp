#pragma once

#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ofa/error.hpp"

namespace ofa {

// Collapse whitespace runs to single spaces and trim the ends.
std::string normalize_ws(const std::string& s);

// Single id space over [specials | subwords | loc bins | image codes].
//
// Subwords come from byte-level BPE learned on a corpus: the 256 byte symbols
// are always present (so any input is encodable without an UNK), and merges
// are learned greedily by pair frequency with lexicographic tie-breaking.
// The vocabulary is immutable after construction.
class UnifiedVocab {
public:
    static constexpr int kBos = 0;
    static constexpr int kEos = 1;
    static constexpr int kPad = 2;
    static constexpr int kMask = 3;
    static constexpr int kNumSpecials = 4;

    static UnifiedVocab build(const std::string& corpus, int target_subwords, int num_loc_bins,
                              int codebook_size);
    static UnifiedVocab load(const std::string& vocab_path, const std::string& merges_path);
    void save(const std::string& vocab_path, const std::string& merges_path) const;

    int size() const { return kNumSpecials + num_subwords_ + num_loc_bins_ + codebook_size_; }
    int num_subwords() const { return num_subwords_; }
    int num_loc_bins() const { return num_loc_bins_; }
    int codebook_size() const { return codebook_size_; }

    int subword_begin() const { return kNumSpecials; }
    int loc_begin() const { return kNumSpecials + num_subwords_; }
    int code_begin() const { return loc_begin() + num_loc_bins_; }

    bool is_special(int id) const { return id >= 0 && id < kNumSpecials; }
    bool is_subword(int id) const { return id >= subword_begin() && id < loc_begin(); }
    bool is_loc(int id) const { return id >= loc_begin() && id < code_begin(); }
    bool is_code(int id) const { return id >= code_begin() && id < size(); }

    int loc_id(int bin) const;
    int loc_bin(int id) const;
    int code_id(int index) const;
    int code_index(int id) const;

    // Byte-level BPE of the whitespace-normalized string; subword ids only.
    std::vector<int> encode(const std::string& s) const;
    // encode() plus recognition of "<loc_i>", "<code_i>" and special literals,
    // which map to their ids directly (instruction strings embed region tokens).
    std::vector<int> encode_mixed(const std::string& s) const;
    // Inverse of encode on subword sequences; specials are stripped; loc/code
    // ids render as "<loc_i>"/"<code_i>" literals so they are never lost in logs.
    std::string decode(std::span<const int> ids) const;

    const std::vector<std::string>& subwords() const { return subwords_; }
    const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

    bool operator==(const UnifiedVocab& o) const;

private:
    UnifiedVocab() = default;
    void rebuild_index();
    std::vector<int> encode_pretoken(const std::string& mapped) const;

    std::vector<std::string> subwords_;  // mapped-alphabet strings, 256 byte symbols first
    std::vector<std::pair<std::string, std::string>> merges_;
    int num_subwords_ = 0;
    int num_loc_bins_ = 0;
    int codebook_size_ = 0;

    std::unordered_map<std::string, int> subword_to_id_;
    std::unordered_map<std::string, int> merge_rank_;  // "a\x01b" -> rank
};

}  // namespace ofa
