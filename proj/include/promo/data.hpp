#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace promo {

using UserId = std::int32_t;
using ItemId = std::int32_t;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Interaction {
  UserId user = 0;
  ItemId item = 0;
  int label = 0;             // 1 = positive feedback
  std::int64_t timestamp = 0;
  double stay_time = 0.0;       // CR signal in [0,1]
  double interact_score = 0.0;  // IR signal in [0,1]

  bool operator==(const Interaction&) const = default;
};

// Interactions in ascending timestamp order; ties keep input order.
struct InteractionLog {
  std::vector<Interaction> interactions;
  std::int32_t user_count = 0;
  std::int32_t item_count = 0;
  // Original file ids, indexed by dense id. Empty for derived logs.
  std::vector<std::int64_t> raw_user_ids;
  std::vector<std::int64_t> raw_item_ids;

  std::size_t size() const { return interactions.size(); }
  bool empty() const { return interactions.empty(); }
  std::optional<ItemId> dense_item(std::int64_t raw) const;
};

enum class LogFormat { kMovielensTab, kGenericCsv };

LogFormat parse_log_format(const std::string& name);
std::string to_string(LogFormat format);

struct LoadOptions {
  // MovieLens ratings at or above this value become label 1.
  int positive_min_rating = 5;
};

InteractionLog load_interactions(const std::filesystem::path& path,
                                 LogFormat format,
                                 const LoadOptions& options = {});

// Per-item sparse feature ids (e.g. genres). Rows follow the log's dense item ids.
struct ItemFeatures {
  std::int32_t feature_count = 0;
  std::vector<std::string> feature_names;
  std::vector<std::vector<std::int32_t>> item_features;
};

// Reads MovieLens u.item ('|'-separated, 19 trailing genre flags) or a generic
// csv with header `item,features` where features are space-separated tokens.
ItemFeatures load_item_features(const std::filesystem::path& path,
                                const InteractionLog& log);

struct DatasetSplit {
  InteractionLog train;
  InteractionLog validation;
  InteractionLog test;
  // Training positives per user in time order, keeping the most recent max_seq_len.
  std::vector<std::vector<ItemId>> user_sequences;
  // Full training sequence before truncation, time order.
  std::vector<std::vector<ItemId>> full_train_sequences;
  // Every item each user interacted with in the source log, any label. Sorted.
  std::vector<std::vector<ItemId>> interacted;
  std::int32_t max_seq_len = 50;

  std::int32_t user_count() const { return train.user_count; }
  std::int32_t item_count() const { return train.item_count; }
  // Sequence used as context when ranking the validation (false) or test (true) item.
  std::vector<ItemId> context_sequence(UserId user, bool for_test) const;
};

DatasetSplit leave_one_out_split(const InteractionLog& log, std::int32_t max_seq_len);

struct ItemPartition {
  std::int32_t threshold = 0;
  std::vector<ItemId> cold_items;  // sorted
  std::vector<ItemId> warm_items;  // sorted
  std::vector<std::uint8_t> is_cold;  // indexed by item id
  std::vector<std::int32_t> train_positive_count;

  bool cold(ItemId item) const { return is_cold.at(item) != 0; }
  // cold count / warm count; infinity when there are no warm items.
  double cold_warm_ratio() const;
  double cold_fraction() const;
};

ItemPartition partition_items(const InteractionLog& train, std::int32_t threshold);

enum class EvalStage { kValidation, kTest };

struct CandidateList {
  UserId user = 0;
  ItemId target = 0;
  std::vector<ItemId> items;  // n negatives + target, deterministically shuffled
};

struct EvalCandidates {
  EvalStage stage = EvalStage::kTest;
  std::uint64_t seed = 0;
  std::int32_t negatives = 100;
  std::vector<CandidateList> lists;  // ordered by user id
};

// Negatives are drawn uniformly from items the user never interacted with.
EvalCandidates sample_eval_negatives(const DatasetSplit& split, std::int32_t n,
                                     std::uint64_t seed,
                                     EvalStage stage = EvalStage::kTest);

// One interaction per line: user,item,label,timestamp,stay_time,interact_score.
void write_log(const InteractionLog& log, const std::filesystem::path& path);
InteractionLog read_log(const std::filesystem::path& path);

std::vector<std::vector<UserId>> positive_users_by_item(const InteractionLog& train);

}  // namespace promo
