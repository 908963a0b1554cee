#include "ofa/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>

#include "ofa/vocab.hpp"

namespace ofa {

double iou(const BBox& a, const BBox& b) {
    a.validate();
    b.validate();
    const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    if (uni <= 0.0) return 0.0;
    return inter / uni;
}

double acc_at_05(const std::vector<BBox>& preds, const std::vector<BBox>& golds) {
    if (preds.size() != golds.size()) {
        throw UsageError("acc_at_05: " + std::to_string(preds.size()) + " predictions vs " +
                         std::to_string(golds.size()) + " golds");
    }
    if (preds.empty()) throw UsageError("acc_at_05: empty input, mean undefined");
    size_t hits = 0;
    for (size_t i = 0; i < preds.size(); ++i)
        if (iou(preds[i], golds[i]) >= 0.5) ++hits;
    return static_cast<double>(hits) / preds.size();
}

namespace {
std::string canon(const std::string& s) {
    std::string out = normalize_ws(s);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

std::vector<std::string> tokens_of(const std::string& s) {
    std::istringstream is(canon(s));
    std::vector<std::string> out;
    std::string t;
    while (is >> t) out.push_back(t);
    return out;
}
}  // namespace

bool exact_match(const std::string& pred, const std::string& gold) {
    return canon(pred) == canon(gold);
}

double closed_set_accuracy(const std::vector<std::string>& preds,
                           const std::vector<std::string>& golds) {
    if (preds.size() != golds.size()) {
        throw UsageError("closed_set_accuracy: size mismatch");
    }
    if (preds.empty()) throw UsageError("closed_set_accuracy: empty input");
    size_t hits = 0;
    for (size_t i = 0; i < preds.size(); ++i)
        if (exact_match(preds[i], golds[i])) ++hits;
    return static_cast<double>(hits) / preds.size();
}

double token_f1(const std::string& pred, const std::string& gold) {
    const auto p = tokens_of(pred);
    const auto g = tokens_of(gold);
    if (p.empty() && g.empty()) return 1.0;
    if (p.empty() || g.empty()) return 0.0;
    std::map<std::string, int> gold_count;
    for (const auto& t : g) ++gold_count[t];
    int overlap = 0;
    for (const auto& t : p) {
        auto it = gold_count.find(t);
        if (it != gold_count.end() && it->second > 0) {
            ++overlap;
            --it->second;
        }
    }
    if (overlap == 0) return 0.0;
    const double precision = static_cast<double>(overlap) / p.size();
    const double recall = static_cast<double>(overlap) / g.size();
    return 2.0 * precision * recall / (precision + recall);
}

}  // namespace ofa
