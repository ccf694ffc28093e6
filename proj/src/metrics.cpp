#include "promo/metrics.hpp"
#include "promo/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace promo {

RankedList rank_candidates(UserId user, ItemId target, std::span<const ItemId> candidates,
                           std::span<const double> scores) {
  if (candidates.size() != scores.size()) {
    throw std::invalid_argument("rank_candidates: candidate and score counts differ");
  }
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  for (double s : scores) {
    if (std::isnan(s)) throw std::invalid_argument("rank_candidates: NaN score");
  }
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return candidates[a] < candidates[b];
  });
  RankedList out;
  out.user = user;
  out.target = target;
  out.items.reserve(order.size());
  std::size_t hits = 0;
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    ItemId item = candidates[order[pos]];
    out.items.push_back(item);
    if (item == target) {
      ++hits;
      out.target_rank = pos + 1;
    }
  }
  if (hits != 1) {
    throw std::invalid_argument("rank_candidates: target must appear exactly once");
  }
  return out;
}

int hitrate_at_k(const RankedList& ranked, int k) {
  if (k < 1) throw std::invalid_argument("hitrate_at_k: k must be >= 1");
  return ranked.target_rank <= static_cast<std::size_t>(k) ? 1 : 0;
}

double ndcg_at_k(const RankedList& ranked, int k) {
  if (k < 1) throw std::invalid_argument("ndcg_at_k: k must be >= 1");
  if (ranked.target_rank > static_cast<std::size_t>(k)) return 0.0;
  return 1.0 / std::log2(static_cast<double>(ranked.target_rank) + 1.0);
}

const PartitionMetrics& MetricsReport::partition(const std::string& name) const {
  if (name == "cold") return cold;
  if (name == "warm") return warm;
  if (name == "all") return all;
  throw std::invalid_argument("unknown partition: " + name);
}

MetricsReport evaluate(const Scorer& scorer, const DatasetSplit& split,
                       const EvalCandidates& candidates, const ItemPartition* partition,
                       std::span<const int> ks) {
  if (ks.empty()) throw std::invalid_argument("evaluate: no cutoffs given");
  const bool for_test = candidates.stage == EvalStage::kTest;
  const InteractionLog& held_out = for_test ? split.test : split.validation;

  // Every held-out pair needs a candidate list built for this stage.
  std::map<UserId, const CandidateList*> by_user;
  for (const auto& list : candidates.lists) by_user[list.user] = &list;
  for (const auto& x : held_out.interactions) {
    auto it = by_user.find(x.user);
    if (it == by_user.end() || it->second->target != x.item) {
      throw std::invalid_argument("evaluate: no candidate list for user " +
                                  std::to_string(x.user) + " item " + std::to_string(x.item));
    }
  }

  MetricsReport report;
  report.ks.assign(ks.begin(), ks.end());
  for (PartitionMetrics* p : {&report.cold, &report.warm, &report.all}) {
    for (int k : ks) {
      p->hitrate[k] = 0.0;
      p->ndcg[k] = 0.0;
    }
  }
  std::vector<double> scores;
  for (const auto& list : candidates.lists) {
    scores.assign(list.items.size(), 0.0);
    auto context = split.context_sequence(list.user, for_test);
    scorer.score(list.user, context, list.items, scores);
    RankedList ranked = rank_candidates(list.user, list.target, list.items, scores);
    std::vector<PartitionMetrics*> targets{&report.all};
    if (partition) targets.push_back(partition->cold(list.target) ? &report.cold : &report.warm);
    for (PartitionMetrics* p : targets) {
      ++p->count;
      for (int k : ks) {
        p->hitrate[k] += hitrate_at_k(ranked, k);
        p->ndcg[k] += ndcg_at_k(ranked, k);
      }
    }
  }
  for (PartitionMetrics* p : {&report.cold, &report.warm, &report.all}) {
    if (p->count == 0) continue;
    for (int k : ks) {
      p->hitrate[k] /= static_cast<double>(p->count);
      p->ndcg[k] /= static_cast<double>(p->count);
    }
  }
  return report;
}

}  // namespace promo
