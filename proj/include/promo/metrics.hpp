#pragma once

#include "promo/data.hpp"

#include <span>
#include <vector>

namespace promo {

// Candidates ordered by descending score, ties broken by the smaller item id.
struct RankedList {
  UserId user = 0;
  ItemId target = 0;
  std::vector<ItemId> items;
  std::size_t target_rank = 0;  // 1-based position of target in items
};

RankedList rank_candidates(UserId user, ItemId target, std::span<const ItemId> candidates,
                           std::span<const double> scores);

// Single relevant item: 1 iff target_rank <= k.
int hitrate_at_k(const RankedList& ranked, int k);
// Single relevant item: 1 / log2(rank + 1) when rank <= k, else 0 (IDCG = 1).
double ndcg_at_k(const RankedList& ranked, int k);

}  // namespace promo
