#pragma once

#include "promo/backbone.hpp"
#include "promo/checkpoint.hpp"
#include "promo/data.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace promo {

class SimilarityError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// alpha * CR + beta * IR
double feedback_value(double stay_time, double interact_score, double alpha, double beta);

struct PinnacleList {
  ItemId item = 0;
  std::vector<UserId> positives;  // descending value
  std::vector<double> values;
  std::vector<UserId> negatives;
  bool is_pseudo = false;
  std::optional<ItemId> source_item;
};

struct PinnacleSelection {
  std::vector<UserId> users;
  std::vector<double> values;
  // False when the item has fewer than k positive users; users then holds all of them.
  bool sufficient = false;
};

// Top-k positive users of an item by feedback value. Ties go to the earlier
// timestamp, then the smaller user id. A user with several positives on the
// item counts once, with their best value.
PinnacleSelection select_pinnacle(ItemId item, const InteractionLog& train, int k, double alpha,
                                  double beta);

// k users drawn uniformly without replacement from those with no positive
// interaction on the item.
std::vector<UserId> select_prompt_negatives(ItemId item, const InteractionLog& train, int k,
                                            std::uint64_t seed);

double item_similarity(std::span<const double> a, std::span<const double> b);
double item_similarity(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b);

// Fills a cold item's positive list from the most similar warm item. The
// item's own positives (if any) come first. Negatives are left empty.
PinnacleList pseudo_pinnacle(ItemId cold_item, std::span<const ItemId> warm_items,
                             const FrozenBackbone& backbone, const InteractionLog& train, int k,
                             double alpha, double beta);
// Same, with item representations precomputed (row = item id).
PinnacleList pseudo_pinnacle(ItemId cold_item, std::span<const ItemId> warm_items,
                             const Eigen::MatrixXd& item_reprs, const InteractionLog& train,
                             int k, double alpha, double beta);

using LayerDims = std::vector<std::pair<int, int>>;  // (in, out) per layer

// in * out + out
std::int64_t prompt_layer_size(std::pair<int, int> dims);

struct PromptParamEmbedding {
  ItemId item = 0;
  LayerDims layer_dims;
  std::vector<Eigen::RowVectorXd> embeddings;  // one per layer
};

struct PersonalizedPromptNet {
  ItemId item = 0;
  std::vector<Eigen::MatrixXd> weights;  // out x in
  std::vector<Eigen::RowVectorXd> biases;
};

PersonalizedPromptNet materialize_prompt_net(const PromptParamEmbedding& emb);
PromptParamEmbedding flatten_prompt_net(const PersonalizedPromptNet& net);

// Uniform in +-1/sqrt(in) per layer.
PromptParamEmbedding init_prompt_embedding(ItemId item, const LayerDims& dims,
                                           std::uint64_t seed);

struct PromptStoreConfig {
  int k = 10;
  double alpha = 0.5;
  double beta = 0.5;
  LayerDims layer_dims{{64, 64}, {64, 32}};
};

struct PromptEntry {
  PinnacleList pinnacle;
  PromptParamEmbedding embedding;
};

struct PromptStore {
  PromptStoreConfig config;
  std::map<ItemId, PromptEntry> entries;  // cold items only

  bool contains(ItemId item) const { return entries.count(item) != 0; }
  const PromptEntry& at(ItemId item) const;

  Checkpoint to_checkpoint() const;
  static PromptStore from_checkpoint(const Checkpoint& ck);
};

PromptStore build_prompt_store(const ItemPartition& partition, const InteractionLog& train,
                               const FrozenBackbone& backbone, const PromptStoreConfig& config,
                               std::uint64_t seed);

}  // namespace promo
