// SPDX-License-Identifier: Apache-2.0
//
// Ranking metrics: AUC (rank statistic with tie handling), per-user
// grouped AUC, and clipped log loss. Labels are +1/-1 throughout.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "histrec/errors.hpp"

namespace histrec::metrics {

// Probability that a random positive outranks a random negative, ties
// counted half. Computed via the Mann-Whitney rank statistic; tied scores
// share their average rank. Returns 0.5 when only one class is present.
inline double auc(const std::vector<double>& scores, const std::vector<int8_t>& labels) {
  if (scores.size() != labels.size()) {
    throw DataError("auc: " + std::to_string(scores.size()) + " scores vs " +
                    std::to_string(labels.size()) + " labels");
  }
  const size_t n = scores.size();
  int64_t n_pos = 0;
  for (int8_t y : labels) n_pos += (y > 0);
  const int64_t n_neg = static_cast<int64_t>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) return 0.5;

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  // Sum of (average) ranks held by positives, 1-based.
  double pos_rank_sum = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (size_t k = i; k < j; ++k) {
      if (labels[order[k]] > 0) pos_rank_sum += avg_rank;
    }
    i = j;
  }
  const double np = static_cast<double>(n_pos);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

struct GroupedAucResult {
  double value = 0.5;
  int64_t users_counted = 0;
  int64_t users_skipped = 0;  // single-class users, excluded from the average
};

// AUC computed within each user and averaged with impression-count
// weights. Users whose impressions are all one class carry no ranking
// information and are skipped.
inline GroupedAucResult grouped_auc(const std::vector<double>& scores,
                                    const std::vector<int8_t>& labels,
                                    const std::vector<int32_t>& user_ids) {
  if (scores.size() != labels.size() || scores.size() != user_ids.size()) {
    throw DataError("grouped_auc: scores/labels/user_ids sizes differ");
  }
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return user_ids[a] < user_ids[b]; });

  GroupedAucResult out;
  double weighted_sum = 0.0;
  double weight_total = 0.0;
  size_t i = 0;
  std::vector<double> s;
  std::vector<int8_t> y;
  while (i < order.size()) {
    size_t j = i;
    while (j < order.size() && user_ids[order[j]] == user_ids[order[i]]) ++j;
    s.clear();
    y.clear();
    bool has_pos = false, has_neg = false;
    for (size_t k = i; k < j; ++k) {
      s.push_back(scores[order[k]]);
      y.push_back(labels[order[k]]);
      (labels[order[k]] > 0 ? has_pos : has_neg) = true;
    }
    if (has_pos && has_neg) {
      const double w = static_cast<double>(j - i);
      weighted_sum += w * auc(s, y);
      weight_total += w;
      ++out.users_counted;
    } else {
      ++out.users_skipped;
    }
    i = j;
  }
  if (weight_total > 0.0) out.value = weighted_sum / weight_total;
  return out;
}

// Mean negative log likelihood of +1/-1 labels under predicted positive
// probabilities, clipped away from 0 and 1 for stability.
inline double logloss(const std::vector<double>& probs, const std::vector<int8_t>& labels) {
  if (probs.size() != labels.size()) {
    throw DataError("logloss: " + std::to_string(probs.size()) + " probs vs " +
                    std::to_string(labels.size()) + " labels");
  }
  if (probs.empty()) return 0.0;
  constexpr double kEps = 1e-7;
  double total = 0.0;
  for (size_t i = 0; i < probs.size(); ++i) {
    const double p = std::min(1.0 - kEps, std::max(kEps, probs[i]));
    total += labels[i] > 0 ? -std::log(p) : -std::log(1.0 - p);
  }
  return total / static_cast<double>(probs.size());
}

}  // namespace histrec::metrics
