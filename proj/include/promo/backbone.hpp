#pragma once

#include "promo/autograd.hpp"
#include "promo/checkpoint.hpp"
#include "promo/data.hpp"
#include "promo/optimizer.hpp"
#include "promo/scoring.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace promo {

inline constexpr ItemId kPaddingItem = -1;

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BackboneConfig {
  std::int32_t user_count = 0;
  std::int32_t item_count = 0;
  std::int32_t dim = 64;
  std::int32_t blocks = 2;
  std::int32_t ffn_dim = 64;
  std::int32_t max_seq_len = 50;
  double temperature = 1.0;
  double init_std = 0.1;  // embedding tables
};

struct AttentionBlock {
  ad::Parameter ln1_gamma, ln1_beta;
  ad::Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  ad::Parameter ln2_gamma, ln2_beta;
  ad::Parameter ff1_w, ff1_b, ff2_w, ff2_b;
};

// Embedding tables, causal self-attention encoder, the f_seq user head and the
// item tower. Weight matrices are stored out x in.
struct BackboneParams {
  BackboneConfig config;
  ad::Parameter user_emb, item_emb, pos_emb;
  std::vector<AttentionBlock> blocks;
  ad::Parameter final_gamma, final_beta;
  ad::Parameter seq_w1, seq_b1, seq_w2, seq_b2;
  ad::Parameter item_w1, item_b1, item_w2, item_b2;

  static BackboneParams init(const BackboneConfig& config, std::uint64_t seed);

  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
  std::int64_t parameter_count() const;
  bool all_finite() const;
  std::string checksum() const;

  Checkpoint to_checkpoint() const;
  static BackboneParams from_checkpoint(const Checkpoint& ck);
};

// Binds backbone parameters onto a tape, either as constants (frozen) or as
// differentiable parameters whose gradients accumulate in the params.
class BackboneGraph {
 public:
  BackboneGraph(ad::Tape& tape, const BackboneParams& params);
  BackboneGraph(ad::Tape& tape, BackboneParams& params, bool trainable);

  // Encoder output H^L for every position of a non-empty, unpadded sequence (n x d).
  ad::Var encode_sequence(std::span<const ItemId> sequence);
  // f_seq applied row-wise to context rows (n x d) for one user.
  ad::Var user_head(ad::Var context, UserId user);
  ad::Var item_tower(std::span<const ItemId> items);
  ad::Var user_embedding(std::span<const UserId> users);

  ad::Tape& tape() { return tape_; }
  const BackboneParams& params() const { return params_; }

 private:
  ad::Var bind(const ad::Parameter& p);
  ad::Var gather(const ad::Parameter& p, std::span<const std::int32_t> rows);

  ad::Tape& tape_;
  const BackboneParams& params_;
  bool trainable_ = false;
  std::unordered_map<const ad::Parameter*, ad::Var> bound_;
};

// h_u for a history whose leading entries may be kPaddingItem. An empty
// (or all-padding) history feeds a zero context row to f_seq.
Eigen::RowVectorXd encode_user(const BackboneParams& params, std::span<const ItemId> sequence,
                               UserId user);
// h_u after every prefix: row t is the representation before item t is seen,
// row 0 uses the empty context. Returns (n + 1) x d for a sequence of length n.
Eigen::MatrixXd encode_user_prefixes(const BackboneParams& params,
                                     std::span<const ItemId> sequence, UserId user);
Eigen::RowVectorXd encode_item(const BackboneParams& params, ItemId item);
Eigen::MatrixXd encode_all_items(const BackboneParams& params);

double predict_ctr(const Eigen::RowVectorXd& user_repr, const Eigen::RowVectorXd& item_repr,
                   double temperature);
double bce_loss(std::span<const double> predictions, std::span<const int> labels,
                double clamp = 1e-7);

class BackboneScorer : public Scorer {
 public:
  explicit BackboneScorer(const BackboneParams& params);
  void score(UserId user, std::span<const ItemId> context, std::span<const ItemId> candidates,
             std::span<double> out) const override;

 private:
  const BackboneParams& params_;
  Eigen::MatrixXd items_;
};

struct TrainEpoch {
  int epoch = 0;
  double first_batch_loss = 0.0;
  double mean_loss = 0.0;
  double last_batch_loss = 0.0;
  double val_hitrate10 = 0.0;
};

struct PretrainOptions {
  AdamOptions adam;
  std::int32_t batch_size = 256;   // scored positions per step
  std::int32_t max_epochs = 100;
  std::int32_t patience = 10;      // epochs without validation improvement; <= 0 disables
  std::int32_t eval_negatives = 100;
  // Early stopping validates on cold targets only when set (fine-tune regime).
  const ItemPartition* cold_only = nullptr;
  std::function<void(const TrainEpoch&)> on_epoch;
};

struct PretrainResult {
  BackboneParams params;
  std::vector<TrainEpoch> history;
  int best_epoch = 0;
  double best_val_hitrate10 = 0.0;
};

PretrainResult pretrain(const DatasetSplit& split, const BackboneConfig& config,
                        const PretrainOptions& options, std::uint64_t seed);

// Continues next-item BCE training from the given parameters (fine-tune regime).
PretrainResult continue_training(BackboneParams params, const DatasetSplit& split,
                                 const PretrainOptions& options, std::uint64_t seed);

// One BCE step over explicit (user, item, label) samples with each user's full
// training history as context. Returns the batch loss.
struct LabeledPair {
  UserId user = 0;
  ItemId item = 0;
  int label = 0;
};
double backbone_pair_step(BackboneParams& params, Adam& optimizer, const DatasetSplit& split,
                          std::span<const LabeledPair> batch);

class FrozenBackbone {
 public:
  const BackboneParams& params() const { return params_; }
  const std::string& checksum() const { return checksum_; }
  bool verify() const { return params_.checksum() == checksum_; }

  Checkpoint to_checkpoint() const;
  // Throws CheckpointError when the stored checksum does not match the weights.
  static FrozenBackbone from_checkpoint(const Checkpoint& ck);

  // Test hook for the freezing contract: direct mutable access.
  BackboneParams& mutable_params_for_testing() { return params_; }

 private:
  friend FrozenBackbone freeze(BackboneParams params);
  BackboneParams params_;
  std::string checksum_;
};

FrozenBackbone freeze(BackboneParams params);

}  // namespace promo
