#pragma once

#include <string>
#include <vector>

#include "ofa/coord.hpp"

namespace ofa {

// Intersection over union; disjoint boxes score 0.
double iou(const BBox& a, const BBox& b);

// Fraction of aligned pairs with IoU >= 0.5; empty input is an error.
double acc_at_05(const std::vector<BBox>& preds, const std::vector<BBox>& golds);

// Case-insensitive, whitespace-normalized comparisons.
bool exact_match(const std::string& pred, const std::string& gold);
double closed_set_accuracy(const std::vector<std::string>& preds,
                           const std::vector<std::string>& golds);
// Bag-of-tokens F1 over whitespace tokens (multiset overlap).
double token_f1(const std::string& pred, const std::string& gold);

}  // namespace ofa
