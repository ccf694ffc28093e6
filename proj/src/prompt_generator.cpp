#include "promo/prompt_generator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <unordered_map>

namespace promo {
namespace {

struct Candidate {
  UserId user;
  double value;
  std::int64_t timestamp;
};

bool better(const Candidate& a, const Candidate& b) {
  if (a.value != b.value) return a.value > b.value;
  if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
  return a.user < b.user;
}

// Per-user best positive on one item, ordered best first.
std::vector<Candidate> rank_positive_users(std::span<const Interaction* const> positives,
                                           double alpha, double beta) {
  std::unordered_map<UserId, Candidate> best;
  for (const Interaction* x : positives) {
    Candidate c{x->user, feedback_value(x->stay_time, x->interact_score, alpha, beta),
                x->timestamp};
    auto it = best.find(x->user);
    if (it == best.end()) {
      best.emplace(x->user, c);
    } else if (better(c, it->second)) {
      it->second = c;
    }
  }
  std::vector<Candidate> out;
  out.reserve(best.size());
  for (const auto& [u, c] : best) out.push_back(c);
  std::sort(out.begin(), out.end(), better);
  return out;
}

std::vector<std::vector<const Interaction*>> positives_by_item(const InteractionLog& train) {
  std::vector<std::vector<const Interaction*>> out(static_cast<std::size_t>(train.item_count));
  for (const auto& x : train.interactions) {
    if (x.label == 1) out.at(static_cast<std::size_t>(x.item)).push_back(&x);
  }
  return out;
}

std::vector<UserId> sample_negatives(ItemId item, std::int32_t user_count,
                                     std::span<const Interaction* const> positives, int k,
                                     std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("select_prompt_negatives: k must be >= 1");
  std::vector<std::uint8_t> positive(static_cast<std::size_t>(user_count), 0);
  for (const Interaction* x : positives) positive[static_cast<std::size_t>(x->user)] = 1;
  std::vector<UserId> eligible;
  for (UserId u = 0; u < user_count; ++u) {
    if (!positive[static_cast<std::size_t>(u)]) eligible.push_back(u);
  }
  if (static_cast<int>(eligible.size()) < k) {
    throw std::invalid_argument("select_prompt_negatives: item " + std::to_string(item) +
                                " has only " + std::to_string(eligible.size()) +
                                " users without positive feedback, need " + std::to_string(k));
  }
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(item), 0x6e6567u};
  std::mt19937_64 rng(seq);
  for (int j = 0; j < k; ++j) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(j),
                                                    eligible.size() - 1);
    std::swap(eligible[static_cast<std::size_t>(j)], eligible[pick(rng)]);
  }
  eligible.resize(static_cast<std::size_t>(k));
  return eligible;
}

PinnacleList pseudo_from_index(ItemId cold_item, std::span<const ItemId> warm_items,
                               const Eigen::MatrixXd& item_reprs,
                               const std::vector<std::vector<const Interaction*>>& by_item,
                               int k, double alpha, double beta) {
  if (warm_items.empty()) throw std::invalid_argument("pseudo_pinnacle: warm item set is empty");
  if (k < 1) throw std::invalid_argument("pseudo_pinnacle: k must be >= 1");
  const Eigen::RowVectorXd target = item_reprs.row(cold_item);
  std::vector<std::pair<double, ItemId>> sims;
  sims.reserve(warm_items.size());
  for (ItemId w : warm_items) {
    sims.emplace_back(item_similarity(target, Eigen::RowVectorXd(item_reprs.row(w))), w);
  }
  std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });

  PinnacleList out;
  out.item = cold_item;
  out.is_pseudo = true;
  out.source_item = sims.front().second;
  auto own = rank_positive_users(by_item.at(static_cast<std::size_t>(cold_item)), alpha, beta);
  for (const auto& c : own) {
    if (static_cast<int>(out.positives.size()) == k) break;
    out.positives.push_back(c.user);
    out.values.push_back(c.value);
  }
  for (const auto& [sim, w] : sims) {
    if (static_cast<int>(out.positives.size()) == k) break;
    for (const auto& c : rank_positive_users(by_item.at(static_cast<std::size_t>(w)), alpha,
                                             beta)) {
      if (static_cast<int>(out.positives.size()) == k) break;
      if (std::find(out.positives.begin(), out.positives.end(), c.user) != out.positives.end()) {
        continue;
      }
      out.positives.push_back(c.user);
      out.values.push_back(c.value);
    }
  }
  if (static_cast<int>(out.positives.size()) < k) {
    throw std::invalid_argument("pseudo_pinnacle: warm items supply fewer than k positive users");
  }
  return out;
}

Eigen::MatrixXd id_row(const std::vector<std::int32_t>& ids) {
  Eigen::MatrixXd m(1, static_cast<Eigen::Index>(ids.size()));
  for (std::size_t j = 0; j < ids.size(); ++j) m(0, static_cast<Eigen::Index>(j)) = ids[j];
  return m;
}

std::vector<std::int32_t> ids_from(const Eigen::MatrixXd& m) {
  std::vector<std::int32_t> out(static_cast<std::size_t>(m.size()));
  for (Eigen::Index j = 0; j < m.size(); ++j) out[static_cast<std::size_t>(j)] =
      static_cast<std::int32_t>(m(j));
  return out;
}

}  // namespace

double feedback_value(double stay_time, double interact_score, double alpha, double beta) {
  return alpha * stay_time + beta * interact_score;
}

PinnacleSelection select_pinnacle(ItemId item, const InteractionLog& train, int k, double alpha,
                                  double beta) {
  if (k < 1) throw std::invalid_argument("select_pinnacle: k must be >= 1");
  std::vector<const Interaction*> positives;
  for (const auto& x : train.interactions) {
    if (x.item == item && x.label == 1) positives.push_back(&x);
  }
  auto ranked = rank_positive_users(positives, alpha, beta);
  PinnacleSelection out;
  out.sufficient = static_cast<int>(ranked.size()) >= k;
  for (const auto& c : ranked) {
    if (static_cast<int>(out.users.size()) == k) break;
    out.users.push_back(c.user);
    out.values.push_back(c.value);
  }
  return out;
}

std::vector<UserId> select_prompt_negatives(ItemId item, const InteractionLog& train, int k,
                                            std::uint64_t seed) {
  std::vector<const Interaction*> positives;
  for (const auto& x : train.interactions) {
    if (x.item == item && x.label == 1) positives.push_back(&x);
  }
  return sample_negatives(item, train.user_count, positives, k, seed);
}

double item_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("item_similarity: dimension mismatch");
  double dot = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    dot += a[j] * b[j];
    aa += a[j] * a[j];
    bb += b[j] * b[j];
  }
  const double denom = aa + bb - dot;
  if (denom == 0.0) throw SimilarityError("item_similarity: undefined for two zero vectors");
  return dot / denom;
}

double item_similarity(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
  return item_similarity(std::span<const double>(a.data(), static_cast<std::size_t>(a.size())),
                         std::span<const double>(b.data(), static_cast<std::size_t>(b.size())));
}

PinnacleList pseudo_pinnacle(ItemId cold_item, std::span<const ItemId> warm_items,
                             const FrozenBackbone& backbone, const InteractionLog& train, int k,
                             double alpha, double beta) {
  return pseudo_pinnacle(cold_item, warm_items, encode_all_items(backbone.params()), train, k,
                         alpha, beta);
}

PinnacleList pseudo_pinnacle(ItemId cold_item, std::span<const ItemId> warm_items,
                             const Eigen::MatrixXd& item_reprs, const InteractionLog& train,
                             int k, double alpha, double beta) {
  return pseudo_from_index(cold_item, warm_items, item_reprs, positives_by_item(train), k, alpha,
                           beta);
}

std::int64_t prompt_layer_size(std::pair<int, int> dims) {
  return static_cast<std::int64_t>(dims.first) * dims.second + dims.second;
}

PersonalizedPromptNet materialize_prompt_net(const PromptParamEmbedding& emb) {
  if (emb.embeddings.size() != emb.layer_dims.size()) {
    throw std::invalid_argument("materialize_prompt_net: " +
                                std::to_string(emb.embeddings.size()) + " embeddings for " +
                                std::to_string(emb.layer_dims.size()) + " layers");
  }
  PersonalizedPromptNet net;
  net.item = emb.item;
  for (std::size_t n = 0; n < emb.layer_dims.size(); ++n) {
    const auto [in, out] = emb.layer_dims[n];
    const auto& e = emb.embeddings[n];
    if (e.size() != prompt_layer_size(emb.layer_dims[n])) {
      throw std::invalid_argument("materialize_prompt_net: layer " + std::to_string(n) +
                                  " expects " + std::to_string(prompt_layer_size(emb.layer_dims[n])) +
                                  " values, got " + std::to_string(e.size()));
    }
    Eigen::MatrixXd w(out, in);
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c) w(r, c) = e(static_cast<Eigen::Index>(r) * in + c);
    net.weights.push_back(std::move(w));
    net.biases.push_back(e.tail(out));
  }
  return net;
}

PromptParamEmbedding flatten_prompt_net(const PersonalizedPromptNet& net) {
  if (net.weights.size() != net.biases.size()) {
    throw std::invalid_argument("flatten_prompt_net: weight and bias counts differ");
  }
  PromptParamEmbedding emb;
  emb.item = net.item;
  for (std::size_t n = 0; n < net.weights.size(); ++n) {
    const auto& w = net.weights[n];
    const auto& b = net.biases[n];
    if (b.size() != w.rows()) {
      throw std::invalid_argument("flatten_prompt_net: bias size mismatch in layer " +
                                  std::to_string(n));
    }
    const int in = static_cast<int>(w.cols()), out = static_cast<int>(w.rows());
    emb.layer_dims.emplace_back(in, out);
    Eigen::RowVectorXd e(prompt_layer_size({in, out}));
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c) e(static_cast<Eigen::Index>(r) * in + c) = w(r, c);
    e.tail(out) = b;
    emb.embeddings.push_back(std::move(e));
  }
  return emb;
}

PromptParamEmbedding init_prompt_embedding(ItemId item, const LayerDims& dims,
                                           std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(item), 0x656d62u};
  std::mt19937_64 rng(seq);
  PromptParamEmbedding emb;
  emb.item = item;
  emb.layer_dims = dims;
  for (const auto& d : dims) {
    if (d.first < 1 || d.second < 1) throw std::invalid_argument("prompt layer dims must be >= 1");
    const double bound = 1.0 / std::sqrt(static_cast<double>(d.first));
    std::uniform_real_distribution<double> u(-bound, bound);
    Eigen::RowVectorXd e(prompt_layer_size(d));
    for (Eigen::Index j = 0; j < e.size(); ++j) e(j) = u(rng);
    emb.embeddings.push_back(std::move(e));
  }
  return emb;
}

const PromptEntry& PromptStore::at(ItemId item) const {
  auto it = entries.find(item);
  if (it == entries.end()) {
    throw std::out_of_range("prompt store has no entry for item " + std::to_string(item));
  }
  return it->second;
}

PromptStore build_prompt_store(const ItemPartition& partition, const InteractionLog& train,
                               const FrozenBackbone& backbone, const PromptStoreConfig& config,
                               std::uint64_t seed) {
  if (config.k < 1) throw std::invalid_argument("build_prompt_store: k must be >= 1");
  if (config.layer_dims.empty()) throw std::invalid_argument("build_prompt_store: no prompt layers");
  for (std::size_t n = 1; n < config.layer_dims.size(); ++n) {
    if (config.layer_dims[n].first != config.layer_dims[n - 1].second) {
      throw std::invalid_argument("build_prompt_store: layer " + std::to_string(n) +
                                  " input does not match previous output");
    }
  }
  const auto by_item = positives_by_item(train);
  const Eigen::MatrixXd reprs = encode_all_items(backbone.params());
  PromptStore store;
  store.config = config;
  for (ItemId item : partition.cold_items) {
    const auto& own = by_item.at(static_cast<std::size_t>(item));
    PromptEntry entry;
    auto ranked = rank_positive_users(own, config.alpha, config.beta);
    if (static_cast<int>(ranked.size()) >= config.k) {
      entry.pinnacle.item = item;
      for (int j = 0; j < config.k; ++j) {
        entry.pinnacle.positives.push_back(ranked[static_cast<std::size_t>(j)].user);
        entry.pinnacle.values.push_back(ranked[static_cast<std::size_t>(j)].value);
      }
    } else {
      entry.pinnacle = pseudo_from_index(item, partition.warm_items, reprs, by_item, config.k,
                                         config.alpha, config.beta);
    }
    entry.pinnacle.negatives = sample_negatives(item, train.user_count, own, config.k, seed);
    entry.embedding = init_prompt_embedding(item, config.layer_dims, seed);
    store.entries.emplace(item, std::move(entry));
  }
  return store;
}

Checkpoint PromptStore::to_checkpoint() const {
  Checkpoint ck("prompt_store");
  ck.put("k", static_cast<std::int64_t>(config.k));
  ck.put("alpha", config.alpha);
  ck.put("beta", config.beta);
  Eigen::MatrixXd dims(static_cast<Eigen::Index>(config.layer_dims.size()), 2);
  for (std::size_t n = 0; n < config.layer_dims.size(); ++n) {
    dims(static_cast<Eigen::Index>(n), 0) = config.layer_dims[n].first;
    dims(static_cast<Eigen::Index>(n), 1) = config.layer_dims[n].second;
  }
  ck.put("layer_dims", dims);
  ck.put("activation", std::string("tanh"));
  std::vector<std::int32_t> items;
  for (const auto& [item, e] : entries) items.push_back(item);
  ck.put("items", id_row(items));
  for (const auto& [item, e] : entries) {
    const std::string pre = "item." + std::to_string(item) + ".";
    ck.put(pre + "pos", id_row(e.pinnacle.positives));
    Eigen::MatrixXd values(1, static_cast<Eigen::Index>(e.pinnacle.values.size()));
    for (std::size_t j = 0; j < e.pinnacle.values.size(); ++j) {
      values(0, static_cast<Eigen::Index>(j)) = e.pinnacle.values[j];
    }
    ck.put(pre + "values", values);
    ck.put(pre + "neg", id_row(e.pinnacle.negatives));
    ck.put(pre + "pseudo", static_cast<std::int64_t>(e.pinnacle.is_pseudo));
    ck.put(pre + "source", static_cast<std::int64_t>(e.pinnacle.source_item.value_or(-1)));
    for (std::size_t n = 0; n < e.embedding.embeddings.size(); ++n) {
      ck.put(pre + "emb" + std::to_string(n), Eigen::MatrixXd(e.embedding.embeddings[n]));
    }
  }
  return ck;
}

PromptStore PromptStore::from_checkpoint(const Checkpoint& ck) {
  if (ck.kind() != "prompt_store") throw CheckpointError("not a prompt store: " + ck.kind());
  if (ck.text("activation") != "tanh") {
    throw CheckpointError("prompt store activation " + ck.text("activation") + " unsupported");
  }
  PromptStore store;
  store.config.k = static_cast<int>(ck.integer("k"));
  store.config.alpha = ck.real("alpha");
  store.config.beta = ck.real("beta");
  const auto& dims = ck.matrix("layer_dims");
  store.config.layer_dims.clear();
  for (Eigen::Index n = 0; n < dims.rows(); ++n) {
    store.config.layer_dims.emplace_back(static_cast<int>(dims(n, 0)),
                                         static_cast<int>(dims(n, 1)));
  }
  for (ItemId item : ids_from(ck.matrix("items"))) {
    const std::string pre = "item." + std::to_string(item) + ".";
    PromptEntry e;
    e.pinnacle.item = item;
    e.pinnacle.positives = ids_from(ck.matrix(pre + "pos"));
    const auto& values = ck.matrix(pre + "values");
    e.pinnacle.values.assign(values.data(), values.data() + values.size());
    e.pinnacle.negatives = ids_from(ck.matrix(pre + "neg"));
    e.pinnacle.is_pseudo = ck.integer(pre + "pseudo") != 0;
    const auto source = ck.integer(pre + "source");
    if (source >= 0) e.pinnacle.source_item = static_cast<ItemId>(source);
    e.embedding.item = item;
    e.embedding.layer_dims = store.config.layer_dims;
    for (std::size_t n = 0; n < store.config.layer_dims.size(); ++n) {
      e.embedding.embeddings.push_back(ck.matrix(pre + "emb" + std::to_string(n)).row(0));
    }
    materialize_prompt_net(e.embedding);  // validates sizes
    store.entries.emplace(item, std::move(e));
  }
  return store;
}

}  // namespace promo
