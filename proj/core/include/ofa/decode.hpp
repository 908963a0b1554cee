#pragma once

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ofa/coord.hpp"
#include "ofa/model.hpp"
#include "ofa/tasks.hpp"
#include "ofa/vocab.hpp"

namespace ofa {

// Anything that can score next tokens given the generated prefix (BOS excluded).
struct SeqScorer {
    virtual ~SeqScorer() = default;
    virtual int vocab_size() const = 0;
    virtual int eos_id() const = 0;
    virtual std::vector<double> step_logits(std::span<const int> generated) = 0;
};

// Scorer over a Model: encodes the sample once, then decodes [BOS | generated].
class ModelScorer : public SeqScorer {
public:
    ModelScorer(Model& model, const InstructionSample& sample);
    int vocab_size() const override { return model_.config().vocab_size; }
    int eos_id() const override { return UnifiedVocab::kEos; }
    std::vector<double> step_logits(std::span<const int> generated) override;

private:
    Model& model_;
    Tensor enc_;
};

// Prefix tree over tokenized candidate labels; every root-to-terminal path is
// one label's token sequence followed by an EOS edge.
class LabelTrie {
public:
    struct Node {
        std::map<int, int> children;  // token id -> node index
        int label_index = -1;         // set on the node reached via the EOS edge
    };

    static LabelTrie build(const std::vector<std::string>& labels, const UnifiedVocab& v);
    // Tests drive this directly with toy vocabularies.
    static LabelTrie from_sequences(std::vector<std::vector<int>> token_seqs,
                                    std::vector<std::string> names, int eos_id);

    int root() const { return 0; }
    const Node& node(int i) const { return nodes_[static_cast<size_t>(i)]; }
    int child(int node, int token) const;
    std::vector<int> allowed_next(int node) const;
    // Node reached by consuming `prefix` from the root; DecodeError if invalid.
    int walk(std::span<const int> prefix) const;
    bool is_label_end(int node) const { return child(node, eos_id_) >= 0; }
    int label_at(std::span<const int> tokens_with_eos) const;

    int num_labels() const { return static_cast<int>(labels_.size()); }
    const std::string& label(int idx) const { return labels_[static_cast<size_t>(idx)]; }
    int max_depth() const { return max_depth_; }
    int eos_id() const { return eos_id_; }

private:
    std::vector<Node> nodes_{Node{}};
    std::vector<std::string> labels_;
    int eos_id_ = UnifiedVocab::kEos;
    int max_depth_ = 0;
};

// Copy of `logits` with every token outside allowed_next(walk(prefix)) forced
// to -1e9 (finite stand-in for -inf so float32 softmax stays well-defined).
std::vector<double> constrained_logits(std::span<const double> logits, const LabelTrie& trie,
                                       std::span<const int> prefix);
std::vector<double> constrained_logits_at(std::span<const double> logits, const LabelTrie& trie,
                                          int node);

struct BeamParams {
    int beam_size = 6;
    double length_penalty = 0.7;
    int max_len = 16;
    int min_len = 1;
};

struct Hypothesis {
    std::vector<int> tokens;  // includes the final EOS when finished
    double logp = 0.0;        // sum of step log-probabilities
    double score = 0.0;       // logp / len^length_penalty, len counting EOS
    bool truncated = false;   // no finished hypothesis within max_len
};

// Length-normalized beam search. Ties break toward the lexicographically
// smaller token sequence (lower id first, shorter first). With a trie every
// emitted sequence is a complete trie path; with allowed_range only ids in
// [first, second) are expandable. If nothing finishes within max_len the best
// unfinished hypothesis is returned with `truncated` set.
std::vector<Hypothesis> beam_search(SeqScorer& scorer, const BeamParams& params,
                                    const LabelTrie* trie = nullptr,
                                    std::optional<std::pair<int, int>> allowed_range = std::nullopt);

struct BoxResult {
    BBox box;
    std::array<int, 4> loc_tokens{};
    bool swapped = false;  // corners arrived inverted and were canonicalized
};

// Decode exactly 4 tokens with logits masked to the location range, then
// dequantize; masking makes malformed output impossible.
BoxResult generate_box(Model& model, const InstructionSample& sample, const UnifiedVocab& v,
                       const BeamParams& params);

struct ClassifyResult {
    std::string label;
    double logp = 0.0;
    std::vector<std::pair<std::string, double>> ranking;  // best first
};

// Trie-constrained beam over the label set, scored by summed log-probability
// (no length penalty, so wide beams match exhaustive per-label scoring).
ClassifyResult classify(Model& model, const InstructionSample& sample,
                        const std::vector<std::string>& labels, const UnifiedVocab& v,
                        const BeamParams& params);

}  // namespace ofa
