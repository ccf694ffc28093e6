#pragma once

// Brute-force re-ranking oracle for HitRate@K / NDCG@K on synthetic
// 101-candidate score vectors.

#include "promo/metrics.hpp"
#include "promo/scoring.hpp"

#include <cmath>
#include <map>
#include <numeric>
#include <random>

namespace testutil {

// Rank of the target: 1 + candidates scoring higher + tied candidates with a smaller id.
inline std::size_t oracle_rank(const std::vector<promo::ItemId>& items,
                               const std::vector<double>& scores, promo::ItemId target) {
  double ts = 0.0;
  for (std::size_t j = 0; j < items.size(); ++j) {
    if (items[j] == target) ts = scores[j];
  }
  std::size_t rank = 1;
  for (std::size_t j = 0; j < items.size(); ++j) {
    if (items[j] == target) continue;
    if (scores[j] > ts || (scores[j] == ts && items[j] < target)) ++rank;
  }
  return rank;
}

class TableScorer : public promo::Scorer {
 public:
  explicit TableScorer(std::map<promo::UserId, std::map<promo::ItemId, double>> table)
      : table_(std::move(table)) {}
  void score(promo::UserId user, std::span<const promo::ItemId>, std::span<const promo::ItemId> c,
             std::span<double> out) const override {
    const auto& row = table_.at(user);
    for (std::size_t j = 0; j < c.size(); ++j) out[j] = row.at(c[j]);
  }

 private:
  std::map<promo::UserId, std::map<promo::ItemId, double>> table_;
};

struct SyntheticEval {
  promo::DatasetSplit split;
  promo::EvalCandidates candidates;
  promo::ItemPartition partition;
  std::map<promo::UserId, std::map<promo::ItemId, double>> scores;
};

// n users, each with a 101-item candidate list drawn from 400 items. Every
// other list has scores rounded to one decimal so ties are common.
inline SyntheticEval synthetic_eval(int n, std::uint64_t seed) {
  using namespace promo;
  std::mt19937_64 g(seed);
  SyntheticEval s;
  const int items = 400;
  s.split.train.user_count = n;
  s.split.train.item_count = items;
  s.split.full_train_sequences.assign(n, {});
  s.split.user_sequences.assign(n, {});
  s.split.interacted.assign(n, {});
  s.split.max_seq_len = 50;
  s.partition.threshold = 1;
  s.partition.is_cold.resize(items);
  for (int i = 0; i < items; ++i) {
    s.partition.is_cold[i] = static_cast<std::uint8_t>(g() % 3 == 0);
    (s.partition.is_cold[i] ? s.partition.cold_items : s.partition.warm_items).push_back(i);
  }
  std::vector<ItemId> all(items);
  std::iota(all.begin(), all.end(), 0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (UserId user = 0; user < n; ++user) {
    std::shuffle(all.begin(), all.end(), g);
    CandidateList list;
    list.user = user;
    list.items.assign(all.begin(), all.begin() + 101);
    list.target = list.items[g() % 101];
    for (ItemId i : list.items) {
      double v = u(g);
      if (user % 2 == 1) v = std::round(v * 10.0) / 10.0;
      s.scores[user][i] = v;
    }
    s.split.test.interactions.push_back({user, list.target, 1, 0, 0.0, 0.0});
    s.candidates.lists.push_back(std::move(list));
  }
  s.split.test.user_count = n;
  s.split.test.item_count = items;
  return s;
}

// Largest absolute difference between library and oracle metrics, per list
// and aggregated per partition.
inline double metric_oracle_error(int n, std::uint64_t seed) {
  using namespace promo;
  SyntheticEval s = synthetic_eval(n, seed);
  double worst = 0.0;
  std::map<std::string, std::map<std::string, double>> sums;
  std::map<std::string, double> counts;
  for (const auto& list : s.candidates.lists) {
    std::vector<double> sc;
    for (ItemId i : list.items) sc.push_back(s.scores[list.user][i]);
    RankedList ranked = rank_candidates(list.user, list.target, list.items, sc);
    const std::size_t rank = oracle_rank(list.items, sc, list.target);
    worst = std::max(worst, std::abs(double(ranked.target_rank) - double(rank)));
    const std::string part = s.partition.cold(list.target) ? "cold" : "warm";
    for (const std::string& p : {part, std::string("all")}) {
      counts[p] += 1;
      for (int k : {5, 10}) {
        const double hr = rank <= static_cast<std::size_t>(k) ? 1.0 : 0.0;
        const double nd = rank <= static_cast<std::size_t>(k) ? 1.0 / std::log2(rank + 1.0) : 0.0;
        if (p == "all") {
          worst = std::max(worst, std::abs(hitrate_at_k(ranked, k) - hr));
          worst = std::max(worst, std::abs(ndcg_at_k(ranked, k) - nd));
        }
        sums[p]["H" + std::to_string(k)] += hr;
        sums[p]["N" + std::to_string(k)] += nd;
      }
    }
  }
  TableScorer scorer(s.scores);
  MetricsReport r = evaluate(scorer, s.split, s.candidates, &s.partition);
  for (const std::string p : {"cold", "warm", "all"}) {
    const PartitionMetrics& m = r.partition(p);
    worst = std::max(worst, std::abs(double(m.count) - counts[p]));
    for (int k : {5, 10}) {
      worst = std::max(worst, std::abs(m.hitrate.at(k) - sums[p]["H" + std::to_string(k)] / counts[p]));
      worst = std::max(worst, std::abs(m.ndcg.at(k) - sums[p]["N" + std::to_string(k)] / counts[p]));
    }
  }
  return worst;
}

}  // namespace testutil
