#include "ofa/decode.hpp"

#include <algorithm>
#include <cmath>

namespace ofa {

ModelScorer::ModelScorer(Model& model, const InstructionSample& sample) : model_(model) {
    NoGradGuard ng;
    enc_ = model_.encode(sample.source_ids, sample.patches ? sample.patches.get() : nullptr, {});
}

std::vector<double> ModelScorer::step_logits(std::span<const int> generated) {
    NoGradGuard ng;
    std::vector<int> prefix;
    prefix.reserve(generated.size() + 1);
    prefix.push_back(UnifiedVocab::kBos);
    prefix.insert(prefix.end(), generated.begin(), generated.end());
    const Tensor logits = model_.decode(enc_, prefix, {});
    const int vocab = logits.dim(1);
    const size_t last = (static_cast<size_t>(logits.dim(0)) - 1) * vocab;
    return {logits.data().begin() + static_cast<long>(last),
            logits.data().begin() + static_cast<long>(last + static_cast<size_t>(vocab))};
}

// ---- trie ---------------------------------------------------------------------

LabelTrie LabelTrie::build(const std::vector<std::string>& labels, const UnifiedVocab& v) {
    if (labels.empty()) throw UsageError("build_trie: empty label list");
    std::vector<std::vector<int>> seqs;
    std::vector<std::string> names;
    for (const std::string& label : labels) {
        std::vector<int> ids = v.encode(label);
        if (ids.empty()) throw DataError("build_trie: label '" + label + "' tokenizes to nothing");
        seqs.push_back(std::move(ids));
        names.push_back(label);
    }
    return from_sequences(std::move(seqs), std::move(names), UnifiedVocab::kEos);
}

LabelTrie LabelTrie::from_sequences(std::vector<std::vector<int>> token_seqs,
                                    std::vector<std::string> names, int eos_id) {
    if (token_seqs.empty()) throw UsageError("build_trie: empty label list");
    LabelTrie trie;
    trie.eos_id_ = eos_id;
    for (size_t s = 0; s < token_seqs.size(); ++s) {
        std::vector<int> seq = token_seqs[s];
        seq.push_back(eos_id);
        int cur = 0;
        for (int tok : seq) {
            auto [it, inserted] =
                trie.nodes_[static_cast<size_t>(cur)].children.try_emplace(tok, 0);
            if (inserted) {
                it->second = static_cast<int>(trie.nodes_.size());
                trie.nodes_.emplace_back();
            }
            cur = it->second;
        }
        trie.max_depth_ = std::max(trie.max_depth_, static_cast<int>(seq.size()));
        // Duplicate tokenizations deduplicate onto the first label.
        if (trie.nodes_[static_cast<size_t>(cur)].label_index < 0) {
            trie.nodes_[static_cast<size_t>(cur)].label_index = static_cast<int>(trie.labels_.size());
            trie.labels_.push_back(names.empty() ? std::to_string(s) : names[s]);
        }
    }
    return trie;
}

int LabelTrie::child(int node, int token) const {
    const auto& ch = nodes_[static_cast<size_t>(node)].children;
    auto it = ch.find(token);
    return it == ch.end() ? -1 : it->second;
}

std::vector<int> LabelTrie::allowed_next(int node) const {
    std::vector<int> out;
    out.reserve(nodes_[static_cast<size_t>(node)].children.size());
    for (const auto& [tok, child] : nodes_[static_cast<size_t>(node)].children) out.push_back(tok);
    return out;
}

int LabelTrie::walk(std::span<const int> prefix) const {
    int cur = 0;
    for (int tok : prefix) {
        cur = child(cur, tok);
        if (cur < 0) throw DecodeError("trie: prefix is not a valid path");
    }
    return cur;
}

int LabelTrie::label_at(std::span<const int> tokens_with_eos) const {
    const int node = walk(tokens_with_eos);
    const int idx = nodes_[static_cast<size_t>(node)].label_index;
    if (idx < 0) throw DecodeError("trie: token sequence does not end a label");
    return idx;
}

std::vector<double> constrained_logits_at(std::span<const double> logits, const LabelTrie& trie,
                                          int node) {
    std::vector<double> out(logits.size(), -1e9);
    for (const auto& [tok, child] : trie.node(node).children) {
        if (tok >= 0 && tok < static_cast<int>(logits.size())) out[static_cast<size_t>(tok)] = logits[static_cast<size_t>(tok)];
    }
    return out;
}

std::vector<double> constrained_logits(std::span<const double> logits, const LabelTrie& trie,
                                       std::span<const int> prefix) {
    return constrained_logits_at(logits, trie, trie.walk(prefix));
}

// ---- beam search ----------------------------------------------------------------

namespace {

struct Beam {
    std::vector<int> tokens;
    double logp = 0.0;
    int trie_node = 0;
};

double normalized_score(double logp, size_t len_with_eos, double penalty) {
    if (penalty == 0.0) return logp;
    return logp / std::pow(static_cast<double>(len_with_eos), penalty);
}

bool better_tokens(const std::vector<int>& a, const std::vector<int>& b) {
    return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

}  // namespace

std::vector<Hypothesis> beam_search(SeqScorer& scorer, const BeamParams& params,
                                    const LabelTrie* trie,
                                    std::optional<std::pair<int, int>> allowed_range) {
    if (params.beam_size < 1) throw UsageError("beam_search: beam_size must be >= 1");
    if (params.max_len < 1) throw UsageError("beam_search: max_len must be >= 1");
    const int vocab = scorer.vocab_size();
    const int eos = scorer.eos_id();

    std::vector<Beam> alive{Beam{}};
    std::vector<Hypothesis> finished;

    struct Cand {
        std::vector<int> tokens;
        double logp;
        int trie_node;
        bool is_eos;
    };

    for (int step = 0; step < params.max_len && !alive.empty(); ++step) {
        std::vector<Cand> cands;
        for (const Beam& h : alive) {
            std::vector<double> logits = scorer.step_logits(h.tokens);
            if (static_cast<int>(logits.size()) != vocab) {
                throw ShapeError("beam_search: scorer returned " + std::to_string(logits.size()) +
                                 " logits for vocab " + std::to_string(vocab));
            }
            std::vector<int> allowed;
            if (trie) {
                logits = constrained_logits_at(logits, *trie, h.trie_node);
                allowed = trie->allowed_next(h.trie_node);
            } else if (allowed_range) {
                for (int tok = 0; tok < vocab; ++tok)
                    if (tok < allowed_range->first || tok >= allowed_range->second) logits[static_cast<size_t>(tok)] = -1e9;
                for (int tok = allowed_range->first; tok < allowed_range->second; ++tok) allowed.push_back(tok);
            } else {
                allowed.resize(static_cast<size_t>(vocab));
                for (int tok = 0; tok < vocab; ++tok) allowed[static_cast<size_t>(tok)] = tok;
            }
            if (step < params.min_len) {
                logits[static_cast<size_t>(eos)] = -1e9;
                std::erase(allowed, eos);
            }
            const std::vector<double> lp = log_softmax_vec(logits);
            for (int tok : allowed) {
                Cand c;
                c.tokens = h.tokens;
                c.tokens.push_back(tok);
                c.logp = h.logp + lp[static_cast<size_t>(tok)];
                c.is_eos = tok == eos;
                c.trie_node = trie && !c.is_eos ? trie->child(h.trie_node, tok) : -1;
                cands.push_back(std::move(c));
            }
        }
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.logp != b.logp) return a.logp > b.logp;
            return better_tokens(a.tokens, b.tokens);
        });
        std::vector<Beam> next;
        for (Cand& c : cands) {
            if (c.is_eos) {
                Hypothesis hyp;
                hyp.logp = c.logp;
                hyp.score = normalized_score(c.logp, c.tokens.size(), params.length_penalty);
                hyp.tokens = std::move(c.tokens);
                finished.push_back(std::move(hyp));
            } else if (static_cast<int>(next.size()) < params.beam_size) {
                Beam b;
                b.tokens = std::move(c.tokens);
                b.logp = c.logp;
                b.trie_node = c.trie_node;
                next.push_back(std::move(b));
            }
        }
        alive = std::move(next);
    }

    auto by_score = [](const Hypothesis& a, const Hypothesis& b) {
        if (a.score != b.score) return a.score > b.score;
        return better_tokens(a.tokens, b.tokens);
    };
    if (!finished.empty()) {
        std::sort(finished.begin(), finished.end(), by_score);
        if (static_cast<int>(finished.size()) > params.beam_size)
            finished.resize(static_cast<size_t>(params.beam_size));
        return finished;
    }
    // Nothing finished within max_len: surface the best unfinished hypotheses.
    std::vector<Hypothesis> out;
    for (const Beam& h : alive) {
        Hypothesis hyp;
        hyp.tokens = h.tokens;
        hyp.logp = h.logp;
        hyp.score = normalized_score(h.logp, h.tokens.size(), params.length_penalty);
        hyp.truncated = true;
        out.push_back(std::move(hyp));
    }
    std::sort(out.begin(), out.end(), by_score);
    if (static_cast<int>(out.size()) > params.beam_size) out.resize(static_cast<size_t>(params.beam_size));
    return out;
}

BoxResult generate_box(Model& model, const InstructionSample& sample, const UnifiedVocab& v,
                       const BeamParams& params) {
    ModelScorer scorer(model, sample);
    BeamParams bp = params;
    bp.max_len = 4;
    bp.min_len = 4;
    bp.length_penalty = 0.0;
    const auto hyps =
        beam_search(scorer, bp, nullptr, std::make_pair(v.loc_begin(), v.code_begin()));
    if (hyps.empty() || hyps[0].tokens.size() != 4) {
        throw DecodeError("generate_box: no 4-token hypothesis produced");
    }
    BoxResult out;
    std::copy_n(hyps[0].tokens.begin(), 4, out.loc_tokens.begin());
    BBox b = tokens_to_box(out.loc_tokens, v);
    if (b.x1 > b.x2) {
        std::swap(b.x1, b.x2);
        out.swapped = true;
    }
    if (b.y1 > b.y2) {
        std::swap(b.y1, b.y2);
        out.swapped = true;
    }
    out.box = b;
    return out;
}

ClassifyResult classify(Model& model, const InstructionSample& sample,
                        const std::vector<std::string>& labels, const UnifiedVocab& v,
                        const BeamParams& params) {
    const LabelTrie trie = LabelTrie::build(labels, v);
    ModelScorer scorer(model, sample);
    BeamParams bp = params;
    // A beam at least as wide as the label set means no trie path is ever
    // pruned, so the result equals exhaustive per-label scoring.
    bp.beam_size = std::max(params.beam_size, trie.num_labels());
    bp.max_len = trie.max_depth();
    bp.min_len = 0;
    bp.length_penalty = 0.0;
    const auto hyps = beam_search(scorer, bp, &trie);
    if (hyps.empty() || hyps[0].truncated) throw DecodeError("classify: no label decoded");
    ClassifyResult out;
    out.label = trie.label(trie.label_at(hyps[0].tokens));
    out.logp = hyps[0].logp;
    for (const auto& h : hyps) {
        out.ranking.emplace_back(trie.label(trie.label_at(h.tokens)), h.logp);
    }
    return out;
}

}  // namespace ofa
