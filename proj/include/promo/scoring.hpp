#pragma once

#include "promo/data.hpp"

#include <map>
#include <span>
#include <string>
#include <vector>

namespace promo {

// Anything that can rank candidate items for a user given their history.
class Scorer {
 public:
  virtual ~Scorer() = default;
  // Writes one raw score per candidate; higher ranks first.
  virtual void score(UserId user, std::span<const ItemId> context,
                     std::span<const ItemId> candidates, std::span<double> out) const = 0;
};

struct PartitionMetrics {
  std::size_t count = 0;
  std::map<int, double> hitrate;  // keyed by K
  std::map<int, double> ndcg;
};

struct MetricsReport {
  std::string regime;
  std::string config_digest;
  std::vector<int> ks;
  PartitionMetrics cold;
  PartitionMetrics warm;
  PartitionMetrics all;

  const PartitionMetrics& partition(const std::string& name) const;
};

// Mean HitRate@K / NDCG@K over every candidate list, stratified by the target
// item's cold/warm status when a partition is given.
MetricsReport evaluate(const Scorer& scorer, const DatasetSplit& split,
                       const EvalCandidates& candidates, const ItemPartition* partition,
                       std::span<const int> ks = std::vector<int>{5, 10});

}  // namespace promo
