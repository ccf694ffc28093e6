#include "promo/backbone.hpp"
#include "flush_denormals.hpp"

#include "promo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace promo {
namespace {

using ad::Matrix;
using ad::Parameter;
using ad::Var;

Matrix xavier(Eigen::Index out, Eigen::Index in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(out, in);
  for (Eigen::Index r = 0; r < out; ++r)
    for (Eigen::Index c = 0; c < in; ++c) m(r, c) = dist(rng);
  return m;
}

Matrix normal(Eigen::Index rows, Eigen::Index cols, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = dist(rng);
  return m;
}

Parameter zeros(const std::string& name, Eigen::Index cols) {
  return Parameter(name, Matrix::Zero(1, cols));
}

Parameter ones(const std::string& name, Eigen::Index cols) {
  return Parameter(name, Matrix::Ones(1, cols));
}

std::vector<ItemId> strip_padding(std::span<const ItemId> sequence, std::int32_t max_len) {
  std::size_t first = 0;
  while (first < sequence.size() && sequence[first] == kPaddingItem) ++first;
  std::vector<ItemId> out(sequence.begin() + static_cast<std::ptrdiff_t>(first), sequence.end());
  for (ItemId i : out) {
    if (i == kPaddingItem) throw std::invalid_argument("encode_user: padding after real items");
  }
  if (static_cast<std::int32_t>(out.size()) > max_len) {
    throw std::invalid_argument("encode_user: sequence longer than max_seq_len");
  }
  return out;
}

struct TrainingSequence {
  UserId user;
  std::vector<ItemId> inputs;
  std::vector<ItemId> targets;
};

std::vector<TrainingSequence> training_sequences(const DatasetSplit& split) {
  std::vector<TrainingSequence> out;
  const auto window = static_cast<std::size_t>(split.max_seq_len) + 1;
  for (UserId u = 0; u < split.user_count(); ++u) {
    const auto& full = split.full_train_sequences[u];
    if (full.size() < 2) continue;
    auto start = full.size() > window ? full.end() - static_cast<std::ptrdiff_t>(window)
                                      : full.begin();
    std::vector<ItemId> w(start, full.end());
    TrainingSequence s;
    s.user = u;
    s.inputs.assign(w.begin(), w.end() - 1);
    s.targets.assign(w.begin() + 1, w.end());
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::vector<ItemId>> train_positive_sets(const DatasetSplit& split) {
  std::vector<std::vector<ItemId>> out(split.user_count());
  for (UserId u = 0; u < split.user_count(); ++u) {
    out[u] = split.full_train_sequences[u];
    std::sort(out[u].begin(), out[u].end());
    out[u].erase(std::unique(out[u].begin(), out[u].end()), out[u].end());
  }
  return out;
}

ItemId sample_negative(const std::vector<ItemId>& positives, std::int32_t item_count,
                       std::mt19937_64& rng) {
  if (static_cast<std::int32_t>(positives.size()) >= item_count) {
    throw std::runtime_error("sample_negative: user interacted with every item");
  }
  std::uniform_int_distribution<ItemId> pick(0, item_count - 1);
  while (true) {
    ItemId c = pick(rng);
    if (!std::binary_search(positives.begin(), positives.end(), c)) return c;
  }
}

double validation_hitrate10(const BackboneParams& params, const DatasetSplit& split,
                            const EvalCandidates& candidates, const ItemPartition* cold_only) {
  BackboneScorer scorer(params);
  const std::vector<int> ks{10};
  MetricsReport report = evaluate(scorer, split, candidates, cold_only, ks);
  const PartitionMetrics& part = cold_only ? report.cold : report.all;
  return part.count == 0 ? 0.0 : part.hitrate.at(10);
}

PretrainResult train_loop(BackboneParams params, const DatasetSplit& split,
                          const PretrainOptions& options, std::uint64_t seed, bool eval_initial) {
  const FlushDenormals flush;
  if (options.batch_size < 1) throw std::invalid_argument("pretrain: batch_size must be >= 1");
  auto sequences = training_sequences(split);
  if (sequences.empty()) throw std::invalid_argument("pretrain: no user has two training positives");
  auto positives = train_positive_sets(split);
  std::mt19937_64 rng(seed ^ 0xB5AD4ECEDA1CE2A9ULL);

  EvalCandidates val = sample_eval_negatives(split, options.eval_negatives, seed,
                                             EvalStage::kValidation);

  PretrainResult result;
  result.params = params;
  result.best_val_hitrate10 = -1.0;
  if (eval_initial) {
    result.best_val_hitrate10 = validation_hitrate10(params, split, val, options.cold_only);
    result.best_epoch = 0;
  }

  Adam adam(params.parameters(), options.adam);
  const double inv_tau = 1.0 / params.config.temperature;
  int stale = 0;
  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= options.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    TrainEpoch log;
    log.epoch = epoch;
    double loss_sum = 0.0;
    int batches = 0;
    std::size_t cursor = 0;
    while (cursor < order.size()) {
      ad::Tape tape;
      BackboneGraph graph(tape, params, true);
      std::vector<Var> contexts;
      std::vector<ItemId> items;
      std::vector<double> labels;
      std::vector<ItemId> negatives;
      std::int32_t positions = 0;
      while (cursor < order.size() && positions < options.batch_size) {
        const TrainingSequence& s = sequences[order[cursor++]];
        Var h = graph.encode_sequence(s.inputs);
        Var c = graph.user_head(h, s.user);
        contexts.push_back(c);
        items.insert(items.end(), s.targets.begin(), s.targets.end());
        positions += static_cast<std::int32_t>(s.targets.size());
        for (std::size_t t = 0; t < s.targets.size(); ++t) {
          negatives.push_back(sample_negative(positives[s.user], split.item_count(), rng));
        }
      }
      labels.assign(items.size(), 1.0);
      labels.resize(items.size() * 2, 0.0);
      items.insert(items.end(), negatives.begin(), negatives.end());
      Var ctx = ad::vcat(contexts);
      Var both = ad::vcat(std::vector<Var>{ctx, ctx});
      Var item_repr = graph.item_tower(items);
      Var probs = ad::sigmoid(ad::scale(ad::row_dot(both, item_repr), inv_tau));
      Var loss = ad::bce(probs, labels);
      const double value = loss.scalar();
      if (!std::isfinite(value)) {
        throw DivergenceError("backbone training diverged at epoch " + std::to_string(epoch) +
                              " (non-finite loss)");
      }
      adam.zero_grad();
      tape.backward(loss);
      adam.step();
      if (batches == 0) log.first_batch_loss = value;
      log.last_batch_loss = value;
      loss_sum += value;
      ++batches;
    }
    log.mean_loss = loss_sum / batches;
    if (!params.all_finite()) {
      throw DivergenceError("backbone parameters became non-finite at epoch " +
                            std::to_string(epoch));
    }
    log.val_hitrate10 = validation_hitrate10(params, split, val, options.cold_only);
    result.history.push_back(log);
    if (options.on_epoch) options.on_epoch(log);
    if (log.val_hitrate10 > result.best_val_hitrate10) {
      result.best_val_hitrate10 = log.val_hitrate10;
      result.best_epoch = epoch;
      result.params = params;
      stale = 0;
    } else if (options.patience > 0 && ++stale >= options.patience) {
      break;
    }
  }
  return result;
}

}  // namespace

BackboneParams BackboneParams::init(const BackboneConfig& config, std::uint64_t seed) {
  if (config.user_count < 1 || config.item_count < 1) {
    throw std::invalid_argument("BackboneParams: user_count and item_count must be positive");
  }
  if (config.dim < 1 || config.blocks < 1 || config.ffn_dim < 1 || config.max_seq_len < 1) {
    throw std::invalid_argument("BackboneParams: dimensions must be positive");
  }
  if (!(config.temperature > 0.0)) throw std::invalid_argument("BackboneParams: temperature <= 0");
  std::mt19937_64 rng(seed);
  const Eigen::Index d = config.dim, f = config.ffn_dim;
  BackboneParams p;
  p.config = config;
  p.user_emb = Parameter("user_emb", normal(config.user_count, d, config.init_std, rng), true);
  p.item_emb = Parameter("item_emb", normal(config.item_count, d, config.init_std, rng), true);
  p.pos_emb = Parameter("pos_emb", normal(config.max_seq_len, d, config.init_std, rng), true);
  for (int b = 0; b < config.blocks; ++b) {
    const std::string pre = "block" + std::to_string(b) + ".";
    AttentionBlock blk;
    blk.ln1_gamma = ones(pre + "ln1_gamma", d);
    blk.ln1_beta = zeros(pre + "ln1_beta", d);
    blk.wq = Parameter(pre + "wq", xavier(d, d, rng));
    blk.bq = zeros(pre + "bq", d);
    blk.wk = Parameter(pre + "wk", xavier(d, d, rng));
    blk.bk = zeros(pre + "bk", d);
    blk.wv = Parameter(pre + "wv", xavier(d, d, rng));
    blk.bv = zeros(pre + "bv", d);
    blk.wo = Parameter(pre + "wo", xavier(d, d, rng));
    blk.bo = zeros(pre + "bo", d);
    blk.ln2_gamma = ones(pre + "ln2_gamma", d);
    blk.ln2_beta = zeros(pre + "ln2_beta", d);
    blk.ff1_w = Parameter(pre + "ff1_w", xavier(f, d, rng));
    blk.ff1_b = zeros(pre + "ff1_b", f);
    blk.ff2_w = Parameter(pre + "ff2_w", xavier(d, f, rng));
    blk.ff2_b = zeros(pre + "ff2_b", d);
    p.blocks.push_back(std::move(blk));
  }
  p.final_gamma = ones("final_gamma", d);
  p.final_beta = zeros("final_beta", d);
  p.seq_w1 = Parameter("seq_w1", xavier(d, 2 * d, rng));
  p.seq_b1 = zeros("seq_b1", d);
  p.seq_w2 = Parameter("seq_w2", xavier(d, d, rng));
  p.seq_b2 = zeros("seq_b2", d);
  p.item_w1 = Parameter("item_w1", xavier(d, d, rng));
  p.item_b1 = zeros("item_b1", d);
  p.item_w2 = Parameter("item_w2", xavier(d, d, rng));
  p.item_b2 = zeros("item_b2", d);
  return p;
}

std::vector<ad::Parameter*> BackboneParams::parameters() {
  std::vector<ad::Parameter*> out{&user_emb, &item_emb, &pos_emb};
  for (auto& b : blocks) {
    for (auto* q : {&b.ln1_gamma, &b.ln1_beta, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo,
                    &b.bo, &b.ln2_gamma, &b.ln2_beta, &b.ff1_w, &b.ff1_b, &b.ff2_w, &b.ff2_b}) {
      out.push_back(q);
    }
  }
  for (auto* q : {&final_gamma, &final_beta, &seq_w1, &seq_b1, &seq_w2, &seq_b2, &item_w1,
                  &item_b1, &item_w2, &item_b2}) {
    out.push_back(q);
  }
  return out;
}

std::vector<const ad::Parameter*> BackboneParams::parameters() const {
  auto mut = const_cast<BackboneParams*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::int64_t BackboneParams::parameter_count() const {
  std::int64_t n = 0;
  for (const auto* p : parameters()) n += p->size();
  return n;
}

bool BackboneParams::all_finite() const {
  for (const auto* p : parameters()) {
    if (!p->value.allFinite()) return false;
  }
  return true;
}

std::string BackboneParams::checksum() const {
  Digest digest;
  digest.add("user_count", static_cast<std::int64_t>(config.user_count));
  digest.add("item_count", static_cast<std::int64_t>(config.item_count));
  digest.add("dim", static_cast<std::int64_t>(config.dim));
  digest.add("blocks", static_cast<std::int64_t>(config.blocks));
  digest.add("ffn_dim", static_cast<std::int64_t>(config.ffn_dim));
  digest.add("max_seq_len", static_cast<std::int64_t>(config.max_seq_len));
  digest.add("temperature", config.temperature);
  for (const auto* p : parameters()) digest.add(p->name, p->value);
  return digest.hex();
}

Checkpoint BackboneParams::to_checkpoint() const {
  Checkpoint ck("backbone");
  ck.put("user_count", static_cast<std::int64_t>(config.user_count));
  ck.put("item_count", static_cast<std::int64_t>(config.item_count));
  ck.put("dim", static_cast<std::int64_t>(config.dim));
  ck.put("blocks", static_cast<std::int64_t>(config.blocks));
  ck.put("ffn_dim", static_cast<std::int64_t>(config.ffn_dim));
  ck.put("max_seq_len", static_cast<std::int64_t>(config.max_seq_len));
  ck.put("temperature", config.temperature);
  ck.put("init_std", config.init_std);
  for (const auto* p : parameters()) ck.put(p->name, p->value);
  return ck;
}

BackboneParams BackboneParams::from_checkpoint(const Checkpoint& ck) {
  if (ck.kind() != "backbone") throw CheckpointError("not a backbone checkpoint: " + ck.kind());
  BackboneConfig c;
  c.user_count = static_cast<std::int32_t>(ck.integer("user_count"));
  c.item_count = static_cast<std::int32_t>(ck.integer("item_count"));
  c.dim = static_cast<std::int32_t>(ck.integer("dim"));
  c.blocks = static_cast<std::int32_t>(ck.integer("blocks"));
  c.ffn_dim = static_cast<std::int32_t>(ck.integer("ffn_dim"));
  c.max_seq_len = static_cast<std::int32_t>(ck.integer("max_seq_len"));
  c.temperature = ck.real("temperature");
  c.init_std = ck.real("init_std");
  BackboneParams p = init(c, 0);
  for (auto* q : p.parameters()) {
    const auto& m = ck.matrix(q->name);
    if (m.rows() != q->value.rows() || m.cols() != q->value.cols()) {
      throw CheckpointError("backbone checkpoint: shape mismatch for " + q->name);
    }
    q->value = m;
  }
  return p;
}

BackboneGraph::BackboneGraph(ad::Tape& tape, const BackboneParams& params)
    : tape_(tape), params_(params), trainable_(false) {}

BackboneGraph::BackboneGraph(ad::Tape& tape, BackboneParams& params, bool trainable)
    : tape_(tape), params_(params), trainable_(trainable) {}

Var BackboneGraph::bind(const ad::Parameter& p) {
  auto it = bound_.find(&p);
  if (it != bound_.end()) return it->second;
  // The non-const constructor guarantees the underlying object is mutable.
  Var v = trainable_ ? tape_.param(const_cast<ad::Parameter&>(p)) : tape_.constant(p.value);
  bound_.emplace(&p, v);
  return v;
}

Var BackboneGraph::gather(const ad::Parameter& p, std::span<const std::int32_t> rows) {
  return trainable_ ? tape_.gather_rows(const_cast<ad::Parameter&>(p), rows)
                    : tape_.gather_rows(p.value, rows);
}

Var BackboneGraph::encode_sequence(std::span<const ItemId> sequence) {
  const auto n = static_cast<std::int32_t>(sequence.size());
  if (n == 0) throw std::invalid_argument("encode_sequence: empty sequence");
  if (n > params_.config.max_seq_len) {
    throw std::invalid_argument("encode_sequence: sequence longer than max_seq_len");
  }
  for (ItemId i : sequence) {
    if (i < 0 || i >= params_.config.item_count) {
      throw std::out_of_range("encode_sequence: item id " + std::to_string(i) + " out of range");
    }
  }
  std::vector<std::int32_t> positions(static_cast<std::size_t>(n));
  std::iota(positions.begin(), positions.end(), params_.config.max_seq_len - n);
  Var x = ad::add(gather(params_.item_emb, sequence), gather(params_.pos_emb, positions));
  for (const auto& b : params_.blocks) {
    Var a = ad::layer_norm(x, bind(b.ln1_gamma), bind(b.ln1_beta));
    Var q = ad::linear(a, bind(b.wq), bind(b.bq));
    Var k = ad::linear(a, bind(b.wk), bind(b.bk));
    Var v = ad::linear(a, bind(b.wv), bind(b.bv));
    Var o = ad::causal_attention(q, k, v);
    x = ad::add(x, ad::linear(o, bind(b.wo), bind(b.bo)));
    Var f = ad::layer_norm(x, bind(b.ln2_gamma), bind(b.ln2_beta));
    Var hidden = ad::relu(ad::linear(f, bind(b.ff1_w), bind(b.ff1_b)));
    x = ad::add(x, ad::linear(hidden, bind(b.ff2_w), bind(b.ff2_b)));
  }
  return ad::layer_norm(x, bind(params_.final_gamma), bind(params_.final_beta));
}

Var BackboneGraph::user_head(Var context, UserId user) {
  if (user < 0 || user >= params_.config.user_count) {
    throw std::out_of_range("user id " + std::to_string(user) + " out of range");
  }
  const std::int32_t id = user;
  Var e = gather(params_.user_emb, std::span<const std::int32_t>(&id, 1));
  Var joined = ad::hcat(std::vector<Var>{context, ad::repeat_row(e, context.rows())});
  Var z = ad::tanh(ad::linear(joined, bind(params_.seq_w1), bind(params_.seq_b1)));
  return ad::linear(z, bind(params_.seq_w2), bind(params_.seq_b2));
}

Var BackboneGraph::item_tower(std::span<const ItemId> items) {
  for (ItemId i : items) {
    if (i < 0 || i >= params_.config.item_count) {
      throw std::out_of_range("item id " + std::to_string(i) + " out of range");
    }
  }
  Var e = gather(params_.item_emb, items);
  Var z = ad::tanh(ad::linear(e, bind(params_.item_w1), bind(params_.item_b1)));
  return ad::add(e, ad::linear(z, bind(params_.item_w2), bind(params_.item_b2)));
}

Var BackboneGraph::user_embedding(std::span<const UserId> users) {
  return gather(params_.user_emb, users);
}

Eigen::RowVectorXd encode_user(const BackboneParams& params, std::span<const ItemId> sequence,
                               UserId user) {
  auto seq = strip_padding(sequence, params.config.max_seq_len);
  ad::Tape tape;
  BackboneGraph graph(tape, params);
  Var context = seq.empty() ? tape.constant(Matrix::Zero(1, params.config.dim))
                            : ad::slice_rows(graph.encode_sequence(seq),
                                             static_cast<Eigen::Index>(seq.size()) - 1, 1);
  return graph.user_head(context, user).value().row(0);
}

Eigen::MatrixXd encode_user_prefixes(const BackboneParams& params,
                                     std::span<const ItemId> sequence, UserId user) {
  ad::Tape tape;
  BackboneGraph graph(tape, params);
  Var zero = tape.constant(Matrix::Zero(1, params.config.dim));
  if (sequence.empty()) return graph.user_head(zero, user).value();
  Var h = graph.encode_sequence(sequence);
  Var ctx = ad::vcat(std::vector<Var>{zero, h});
  return graph.user_head(ctx, user).value();
}

Eigen::RowVectorXd encode_item(const BackboneParams& params, ItemId item) {
  ad::Tape tape;
  BackboneGraph graph(tape, params);
  const std::int32_t id = item;
  return graph.item_tower(std::span<const std::int32_t>(&id, 1)).value().row(0);
}

Eigen::MatrixXd encode_all_items(const BackboneParams& params) {
  std::vector<ItemId> all(static_cast<std::size_t>(params.config.item_count));
  std::iota(all.begin(), all.end(), 0);
  ad::Tape tape;
  BackboneGraph graph(tape, params);
  return graph.item_tower(all).value();
}

double predict_ctr(const Eigen::RowVectorXd& user_repr, const Eigen::RowVectorXd& item_repr,
                   double temperature) {
  if (user_repr.size() != item_repr.size()) {
    throw std::invalid_argument("predict_ctr: dimension mismatch");
  }
  if (!(temperature > 0.0)) throw std::invalid_argument("predict_ctr: temperature must be > 0");
  return ad::sigmoid(user_repr.dot(item_repr) / temperature);
}

double bce_loss(std::span<const double> predictions, std::span<const int> labels, double clamp) {
  if (predictions.size() != labels.size()) {
    throw std::invalid_argument("bce_loss: predictions and labels differ in length");
  }
  if (predictions.empty()) throw std::invalid_argument("bce_loss: empty batch");
  double total = 0.0;
  for (std::size_t k = 0; k < predictions.size(); ++k) {
    double p = std::clamp(predictions[k], clamp, 1.0 - clamp);
    total -= labels[k] * std::log(p) + (1 - labels[k]) * std::log(1.0 - p);
  }
  return total / static_cast<double>(predictions.size());
}

BackboneScorer::BackboneScorer(const BackboneParams& params)
    : params_(params), items_(encode_all_items(params)) {}

void BackboneScorer::score(UserId user, std::span<const ItemId> context,
                           std::span<const ItemId> candidates, std::span<double> out) const {
  Eigen::RowVectorXd h = encode_user(params_, context, user);
  const double inv_tau = 1.0 / params_.config.temperature;
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    out[j] = h.dot(items_.row(candidates[j])) * inv_tau;
  }
}

PretrainResult pretrain(const DatasetSplit& split, const BackboneConfig& config,
                        const PretrainOptions& options, std::uint64_t seed) {
  if (split.train.empty()) throw std::invalid_argument("pretrain: no training positives");
  BackboneConfig c = config;
  c.user_count = split.user_count();
  c.item_count = split.item_count();
  c.max_seq_len = split.max_seq_len;
  return train_loop(BackboneParams::init(c, seed), split, options, seed, false);
}

PretrainResult continue_training(BackboneParams params, const DatasetSplit& split,
                                 const PretrainOptions& options, std::uint64_t seed) {
  return train_loop(std::move(params), split, options, seed, true);
}

double backbone_pair_step(BackboneParams& params, Adam& optimizer, const DatasetSplit& split,
                          std::span<const LabeledPair> batch) {
  if (batch.empty()) throw std::invalid_argument("backbone_pair_step: empty batch");
  ad::Tape tape;
  BackboneGraph graph(tape, params, true);
  std::vector<Var> users;
  std::vector<ItemId> items;
  std::vector<double> labels;
  Var zero = tape.constant(Matrix::Zero(1, params.config.dim));
  std::unordered_map<UserId, Var> cache;
  for (const auto& s : batch) {
    auto it = cache.find(s.user);
    if (it == cache.end()) {
      auto seq = split.context_sequence(s.user, false);
      Var ctx = seq.empty() ? zero
                            : ad::slice_rows(graph.encode_sequence(seq),
                                             static_cast<Eigen::Index>(seq.size()) - 1, 1);
      it = cache.emplace(s.user, graph.user_head(ctx, s.user)).first;
    }
    users.push_back(it->second);
    items.push_back(s.item);
    labels.push_back(static_cast<double>(s.label));
  }
  Var u = ad::vcat(users);
  Var i = graph.item_tower(items);
  Var probs = ad::sigmoid(ad::scale(ad::row_dot(u, i), 1.0 / params.config.temperature));
  Var loss = ad::bce(probs, labels);
  optimizer.zero_grad();
  tape.backward(loss);
  optimizer.step();
  return loss.scalar();
}

FrozenBackbone freeze(BackboneParams params) {
  if (!params.all_finite()) throw std::invalid_argument("freeze: non-finite parameters");
  FrozenBackbone f;
  f.params_ = std::move(params);
  f.checksum_ = f.params_.checksum();
  return f;
}

Checkpoint FrozenBackbone::to_checkpoint() const {
  Checkpoint ck = params_.to_checkpoint();
  ck.put("freeze_checksum", checksum_);
  return ck;
}

FrozenBackbone FrozenBackbone::from_checkpoint(const Checkpoint& ck) {
  FrozenBackbone f = freeze(BackboneParams::from_checkpoint(ck));
  if (!ck.has("freeze_checksum") || ck.text("freeze_checksum") != f.checksum_) {
    throw CheckpointError("backbone checkpoint: freeze checksum mismatch");
  }
  return f;
}

}  // namespace promo
