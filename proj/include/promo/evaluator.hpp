#pragma once

#include "promo/backbone.hpp"
#include "promo/config.hpp"
#include "promo/data.hpp"
#include "promo/metrics.hpp"
#include "promo/prompt_generator.hpp"
#include "promo/prompt_tuner.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace promo {

// ---- ablation regimes ----

enum class Regime { kPromo, kPromoI, kPromoF, kPromoIF, kPromoM, kPromoT, kPretrain, kFinetune };

std::string to_string(Regime r);
// Throws std::invalid_argument for an unknown name.
Regime parse_regime(const std::string& name);
// The prompt variant a regime tunes, or nothing for PRETRAIN / FINETUNE.
std::optional<PromptVariant> prompt_variant(Regime r);
const std::vector<Regime>& all_regimes();

// Everything a regime needs besides its own hyperparameters.
struct ExperimentData {
  InteractionLog log;
  ItemFeatures features;
  bool has_features = false;
  DatasetSplit split;
  ItemPartition partition;
};
// Loads the dataset named by the config and applies split and partition.
ExperimentData load_experiment(const RunConfig& config);

struct RegimeRun {
  MetricsReport report;
  std::optional<PromptState> prompts;     // prompt regimes
  std::optional<BackboneParams> tuned;    // FINETUNE
  std::vector<TuneEpoch> tune_history;
  std::vector<TrainEpoch> finetune_history;
  int best_epoch = 0;
  double seconds = 0.0;
};

// Runs one regime on top of a pretrained backbone and evaluates it on the test
// candidates. The backbone is never modified; FINETUNE trains a copy.
RegimeRun run_ablation(Regime regime, const RunConfig& config, const ExperimentData& data,
                       const FrozenBackbone& backbone, const PromptStore& store,
                       const EvalCandidates& test, std::uint64_t seed);

// ---- memory retention ----

// A model that scores pairs and keeps training on labelled pairs.
class RetentionRegime {
 public:
  virtual ~RetentionRegime() = default;
  virtual double probability(UserId user, ItemId item) const = 0;
  virtual void train(std::span<const LabeledPair> batch) = 0;
};

// Continues prompt tuning (backbone frozen). Contexts are every user's
// training history.
class PromptRetentionRegime : public RetentionRegime {
 public:
  PromptRetentionRegime(const FrozenBackbone& backbone, const PromptStore& store,
                        const DatasetSplit& split, const ItemPartition& partition,
                        PromptState state, const TuneConfig& config);
  PromptRetentionRegime(const PromptRetentionRegime&) = delete;
  PromptRetentionRegime& operator=(const PromptRetentionRegime&) = delete;
  double probability(UserId user, ItemId item) const override;
  void train(std::span<const LabeledPair> batch) override;
  const PromptState& state() const { return state_; }

 private:
  PromptState state_;
  Eigen::MatrixXd contexts_;
  PromptModel model_;
  Adam adam_;
  Eigen::MatrixXd items_;
};

// Continues training every backbone parameter on the pairs.
class FinetuneRetentionRegime : public RetentionRegime {
 public:
  FinetuneRetentionRegime(BackboneParams params, const DatasetSplit& split, AdamOptions adam);
  FinetuneRetentionRegime(const FinetuneRetentionRegime&) = delete;
  FinetuneRetentionRegime& operator=(const FinetuneRetentionRegime&) = delete;
  double probability(UserId user, ItemId item) const override;
  void train(std::span<const LabeledPair> batch) override;
  const BackboneParams& params() const { return params_; }

 private:
  void refresh() const;
  BackboneParams params_;
  const DatasetSplit& split_;
  Adam adam_;
  mutable bool stale_ = true;
  mutable Eigen::MatrixXd users_;
  mutable Eigen::MatrixXd items_;
};

struct RetentionPair {
  UserId user = 0;
  ItemId item = 0;
};

struct RetentionRecord {
  std::string regime;
  std::vector<RetentionPair> pairs;
  std::vector<std::uint8_t> correct_t0;
  std::vector<std::uint8_t> correct_t1;
  std::int32_t injected = 0;  // cumulative negatives so far
  double rate = 0.0;
};

// |correct at t0 and t1| / |correct at t0|; throws std::domain_error when
// nothing was correct at t0.
double retention_rate(std::span<const std::uint8_t> correct_t0,
                      std::span<const std::uint8_t> correct_t1);

// Up to n (user, cold item) training positives taken from the store's
// pinnacle lists, seeded.
std::vector<RetentionPair> sample_pinnacle_pairs(const PromptStore& store, const InteractionLog& train,
                                                 std::int32_t n, std::uint64_t seed);

struct RetentionOptions {
  std::vector<std::int32_t> schedule{100, 500, 1000};  // cumulative negatives
  std::int32_t batch_size = 100;                       // negatives per step
  double threshold = 0.5;
};

// Injects fresh negatives on the sampled items, each step paired 1:1 with
// replayed recent positives on the same items, and records correctness after
// every schedule point. Throws std::domain_error when no pair is correct at t0.
std::vector<RetentionRecord> memory_retention(RetentionRegime& regime, const std::string& label,
                                              std::span<const RetentionPair> pairs,
                                              const DatasetSplit& split,
                                              const RetentionOptions& options, std::uint64_t seed);

// ---- score-distribution diagnostic ----

struct Histogram {
  std::int32_t bins = 50;
  std::vector<std::int64_t> counts;
  std::int64_t total = 0;
  double density(std::size_t bin) const;
};
// Fixed-width bins over [0, 1]; 1.0 falls in the last bin.
Histogram make_histogram(std::span<const double> values, std::int32_t bins);
// Sum over bins of min(density_a, density_b), densities summing to 1.
double histogram_overlap(const Histogram& a, const Histogram& b);

struct ScoreHistograms {
  Histogram cold_pos, cold_neg, warm_neg;
  double overlap_cold_pos_warm_neg = 0.0;
  double overlap_cold_pos_cold_neg = 0.0;
};

struct ScoredPair {
  UserId user = 0;
  ItemId item = 0;
  bool for_test = true;  // which held-out context the user is scored with
};
struct HistogramSamples {
  std::vector<ScoredPair> cold_pos, cold_neg, warm_neg;
};
// Cold positives are held-out validation and test pairs on cold items;
// negatives pair the same users with items they never touched.
HistogramSamples sample_histogram_pairs(const DatasetSplit& split, const ItemPartition& partition,
                                        std::int32_t per_set, std::uint64_t seed);

using PairProbability = std::function<double(const ScoredPair&)>;
// σ-scores with each user's validation or test context precomputed. The
// params / model must outlive the returned function.
PairProbability backbone_pair_probability(const BackboneParams& params, const DatasetSplit& split);
PairProbability prompt_pair_probability(const PromptModel& model, const DatasetSplit& split);
ScoreHistograms score_histogram(const PairProbability& model, const HistogramSamples& samples,
                                std::int32_t bins);

// ---- reports ----

// `regime, partition, K, metric, value, n` lines after a `# digest` header.
std::string format_metrics(const MetricsReport& report);
std::vector<MetricsReport> parse_metrics(const std::string& text);
std::string metrics_json(std::span<const MetricsReport> reports);
bool same_report(const MetricsReport& a, const MetricsReport& b);

std::string format_histograms(const ScoreHistograms& h);
std::string format_retention(std::span<const RetentionRecord> records);

}  // namespace promo
