#pragma once

#include "promo/autograd.hpp"
#include "promo/backbone.hpp"
#include "promo/checkpoint.hpp"
#include "promo/data.hpp"
#include "promo/optimizer.hpp"
#include "promo/prompt_generator.hpp"
#include "promo/scoring.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace promo {

// What feeds the prompt network and fusion head.
//   kPromo          pinnacle users, per-item nets
//   kItemId         the item's own id embedding instead of pinnacle users
//   kFeature        mean of trainable item feature embeddings
//   kItemIdFeature  id embedding and feature embeddings together
//   kSharedNet      pinnacle users, one net shared by every cold item
//   kNoNet          pinnacle mean fused directly, no prompt net and no pfpe term
enum class PromptVariant { kPromo, kItemId, kFeature, kItemIdFeature, kSharedNet, kNoNet };

std::string to_string(PromptVariant v);
PromptVariant parse_prompt_variant(const std::string& name);
bool uses_prompt_net(PromptVariant v);
bool uses_features(PromptVariant v);

// ---- single-instance reference computations (no training state) ----

struct PromptForwardResult {
  Eigen::MatrixXd output;  // h_l per input row
  Eigen::MatrixXd layers;  // outputs of every layer, concatenated per row
};
// h_{n+1} = tanh(W h_n + b) applied to each row independently.
PromptForwardResult prompt_forward(const PersonalizedPromptNet& net, const Eigen::MatrixXd& inputs);

// softplus(-sum of pairwise L1 distances between rows)
double pfpe_loss(const Eigen::MatrixXd& h_pos, const Eigen::MatrixXd& h_neg);

double score_final(const Eigen::RowVectorXd& user, const Eigen::RowVectorXd& item);
double score_final_probability(const Eigen::RowVectorXd& user, const Eigen::RowVectorXd& item);

struct ScoredSample {
  double score = 0.0;  // probability-scale prediction
  bool is_cold = false;
  int label = 0;
};
// softplus(-sum over (cold positive, warm negative) pairs of the score gap);
// exactly 0 when either set is empty.
double pape_loss(std::span<const ScoredSample> batch);

double total_loss(double l_rec, double l_pfpe, double l_pape, double lambda1, double lambda2);

// ---- differentiable counterparts ----

struct PromptForwardVars {
  ad::Var output;
  ad::Var layers;
};
// layer_embeddings[n] is a 1 x (in*out + out) row reshaped into W (row-major) and b.
PromptForwardVars prompt_forward(std::span<const ad::Var> layer_embeddings, const LayerDims& dims,
                                 ad::Var inputs);
ad::Var pfpe_loss(ad::Var h_pos, ad::Var h_neg);
// probs: n x 1
ad::Var pape_loss(ad::Var probs, std::span<const std::uint8_t> is_cold, std::span<const int> labels);
ad::Var total_loss(ad::Var l_rec, ad::Var l_pfpe, ad::Var l_pape, double lambda1, double lambda2);

// e_final = h_i + W2 tanh(W1 [h_i, mean S_pos, e^{p_l}] + b1) + b2 and the
// user-side projection e_u = P h_u + p.
struct FusionHead {
  ad::Parameter w1, b1, w2, b2;
  ad::Parameter proj_w, proj_b;

  // W2 starts at zero and P at the identity, so an untuned head reproduces
  // the backbone's scores.
  static FusionHead init(int dim, int prompt_dim, int hidden, std::uint64_t seed);
  int dim() const { return static_cast<int>(proj_w.value.rows()); }
  int prompt_dim() const { return static_cast<int>(w1.value.cols()) - 2 * dim(); }
  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
};

// pos_embeddings: k x d; e_pl may be empty when the head has prompt_dim 0.
Eigen::RowVectorXd fuse_item(const Eigen::RowVectorXd& h_i, const Eigen::MatrixXd& pos_embeddings,
                             const Eigen::RowVectorXd& e_pl, const FusionHead& head);
Eigen::RowVectorXd project_user(const Eigen::RowVectorXd& h_u, const FusionHead& head);

struct FusionVars {
  ad::Var w1, b1, w2, b2;
};
FusionVars bind_fusion(ad::Tape& tape, FusionHead& head, bool trainable);
// Row-batched fusion. e_pl may be an invalid Var when the head has no prompt input.
ad::Var fuse_rows(ad::Var h_i, ad::Var pos_mean, ad::Var e_pl, const FusionVars& f);

// Everything the prompt stage trains; no backbone parameter lives here.
struct PromptState {
  PromptVariant variant = PromptVariant::kPromo;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  std::int64_t steps = 0;
  LayerDims layer_dims;
  std::vector<ItemId> items;          // cold items, table row order
  // Slot-major: slot * layers + layer, each 1 x (in*out + out). One slot per
  // cold item, or a single slot when the net is shared.
  std::vector<ad::Parameter> prompts;
  FusionHead fusion;
  ad::Parameter feature_emb;          // feature variants only
  std::vector<Eigen::MatrixXd> adam_m, adam_v;

  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
  // Prompt slot of an item, or -1 for an item without a prompt.
  int row_of(ItemId item) const;
  std::size_t slot_count() const { return layer_dims.empty() ? 0 : prompts.size() / layer_dims.size(); }
  ad::Parameter& prompt(int slot, std::size_t layer) {
    return prompts.at(static_cast<std::size_t>(slot) * layer_dims.size() + layer);
  }
  const ad::Parameter& prompt(int slot, std::size_t layer) const {
    return prompts.at(static_cast<std::size_t>(slot) * layer_dims.size() + layer);
  }
  PromptParamEmbedding embedding(ItemId item) const;
  std::string checksum() const;

  Checkpoint to_checkpoint() const;
  static PromptState from_checkpoint(const Checkpoint& ck);
};

struct ParameterRatio {
  std::int64_t backbone = 0;
  std::int64_t per_item_tunable = 0;  // one item's prompt params plus the shared head
  std::int64_t total_tunable = 0;     // all items together
  double per_item_ratio = 0.0;
  double aggregate_ratio = 0.0;
};
ParameterRatio parameter_ratio(const PromptState& state, const BackboneParams& backbone);

struct TuneConfig {
  PromptVariant variant = PromptVariant::kPromo;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  AdamOptions adam;
  std::int32_t batch_size = 256;
  std::int32_t max_epochs = 30;
  std::int32_t patience = 5;
  std::int64_t max_steps = 0;  // 0 = no cap
  std::int32_t negatives_per_positive = 1;
  std::int32_t fusion_hidden = 32;
  // Each prompt embedding row is only updated when its item is in the batch,
  // so it gets its own (larger) step size.
  double prompt_lr_scale = 1.0;
  std::int32_t eval_negatives = 100;
  const ItemFeatures* features = nullptr;
};

// Adam over state.parameters() with prompt embeddings at lr * prompt_lr_scale.
Adam make_prompt_optimizer(PromptState& state, const TuneConfig& config);

PromptState init_prompt_state(const FrozenBackbone& backbone, const PromptStore& store,
                              const TuneConfig& config, std::uint64_t seed);

struct TrainSample {
  UserId user = 0;
  ItemId item = 0;
  int label = 0;
  std::int32_t context = 0;  // row of the precomputed user-context matrix
};

struct BatchLosses {
  ad::Var total, rec, pfpe, pape;
};

// Binds a prompt state to a frozen backbone and store and builds per-batch graphs.
class PromptModel {
 public:
  // feedback: one row per user, the embedding a pinnacle user feeds into the
  // prompt path (see feedback_embeddings).
  PromptModel(const FrozenBackbone& backbone, const PromptStore& store,
              const ItemPartition& partition, PromptState& state, Eigen::MatrixXd feedback,
              const ItemFeatures* features = nullptr);

  // contexts: frozen backbone user representations, one row per context id.
  BatchLosses batch_loss(ad::Tape& tape, std::span<const TrainSample> batch,
                         const Eigen::MatrixXd& contexts);
  // One optimizer step; returns {total, rec, pfpe, pape}.
  std::array<double, 4> step(Adam& adam, std::span<const TrainSample> batch,
                             const Eigen::MatrixXd& contexts);

  // Final item representations for every catalogue item (warm rows are h_i).
  Eigen::MatrixXd final_items() const;
  Eigen::RowVectorXd final_user(const Eigen::RowVectorXd& h_u) const;

  const FrozenBackbone& backbone() const { return backbone_; }
  const ItemPartition& partition() const { return partition_; }
  PromptState& state() { return state_; }
  const PromptState& state() const { return state_; }
  const Eigen::MatrixXd& item_reprs() const { return item_reprs_; }

 private:
  ad::Var positive_inputs(ad::Tape& tape, ItemId item, bool trainable) const;
  ad::Var negative_inputs(ad::Tape& tape, ItemId item) const;

  const FrozenBackbone& backbone_;
  const PromptStore& store_;
  const ItemPartition& partition_;
  PromptState& state_;
  const ItemFeatures* features_;
  Eigen::MatrixXd item_reprs_;
  Eigen::MatrixXd feedback_;
};

// Scores with prompt-stage final representations. User contexts can be
// supplied precomputed (row = user) for one evaluation stage.
class PromptScorer : public Scorer {
 public:
  explicit PromptScorer(const PromptModel& model, const Eigen::MatrixXd* user_contexts = nullptr);
  void score(UserId user, std::span<const ItemId> context, std::span<const ItemId> candidates,
             std::span<double> out) const override;
  double probability(UserId user, std::span<const ItemId> context, ItemId item) const;

 private:
  const PromptModel& model_;
  const Eigen::MatrixXd* user_contexts_;
  Eigen::MatrixXd items_;
};

// Frozen h_u for every user's validation (for_test false) or test context.
Eigen::MatrixXd stage_user_contexts(const BackboneParams& params, const DatasetSplit& split,
                                    bool for_test);

// Frozen h_u over each user's training history: the feedback embedding of a
// pinnacle user.
Eigen::MatrixXd feedback_embeddings(const BackboneParams& params, const DatasetSplit& split);

// Training positives with their prefix contexts.
struct PromptTrainingData {
  std::vector<TrainSample> positives;
  Eigen::MatrixXd contexts;
  std::vector<std::vector<ItemId>> train_positive_sets;  // sorted, per user
};
PromptTrainingData prompt_training_data(const BackboneParams& params, const DatasetSplit& split);

struct TuneEpoch {
  int epoch = 0;
  double rec = 0.0, pfpe = 0.0, pape = 0.0, total = 0.0;
  double val_hitrate10 = 0.0;
};
std::string format_tune_log(const TuneEpoch& e);

struct TuneResult {
  PromptState state;
  std::vector<TuneEpoch> history;
  std::vector<double> step_losses;  // total loss per optimizer step
  int best_epoch = 0;
  double best_val_hitrate10 = 0.0;
};

// Optimizes the prompt state with the backbone frozen. Model selection uses
// cold-item validation HitRate@10; epoch 0 (the untuned head) is a candidate.
TuneResult tune(const FrozenBackbone& backbone, const PromptStore& store, const DatasetSplit& split,
                const ItemPartition& partition, const TuneConfig& config, std::uint64_t seed,
                const std::function<void(const TuneEpoch&)>& on_epoch = {});

}  // namespace promo
