#include "promo/prompt_tuner.hpp"
#include "flush_denormals.hpp"

#include "promo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace promo {
namespace {

using ad::Matrix;
using ad::Var;

Matrix xavier(Eigen::Index out, Eigen::Index in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(out, in);
  for (Eigen::Index r = 0; r < out; ++r)
    for (Eigen::Index c = 0; c < in; ++c) m(r, c) = dist(rng);
  return m;
}

void check_finite(const char* what, double v, std::int64_t step) {
  if (!std::isfinite(v)) {
    throw DivergenceError(std::string("prompt tuning diverged: ") + what +
                          " is non-finite at step " + std::to_string(step));
  }
}

Eigen::MatrixXd id_row(const std::vector<std::int32_t>& ids) {
  Eigen::MatrixXd m(1, static_cast<Eigen::Index>(ids.size()));
  for (std::size_t j = 0; j < ids.size(); ++j) m(0, static_cast<Eigen::Index>(j)) = ids[j];
  return m;
}

double cold_validation_hitrate(const PromptModel& model, const DatasetSplit& split,
                               const EvalCandidates& val, const Eigen::MatrixXd& val_users) {
  PromptScorer scorer(model, &val_users);
  const std::vector<int> ks{10};
  MetricsReport r = evaluate(scorer, split, val, &model.partition(), ks);
  return r.cold.count == 0 ? 0.0 : r.cold.hitrate.at(10);
}

std::string prompt_name(std::size_t slot, std::size_t layer) {
  return "prompt." + std::to_string(slot) + ".layer" + std::to_string(layer);
}

Matrix pack_layer(const std::vector<ad::Parameter>& prompts, std::size_t slots,
                  std::size_t layers, std::size_t n) {
  Matrix m(static_cast<Eigen::Index>(slots), prompts.at(n).value.cols());
  for (std::size_t r = 0; r < slots; ++r) {
    m.row(static_cast<Eigen::Index>(r)) = prompts[r * layers + n].value;
  }
  return m;
}

Matrix pack_moments(const std::vector<Matrix>& moments, std::size_t slots, std::size_t layers,
                    std::size_t n) {
  Matrix m(static_cast<Eigen::Index>(slots), moments.at(n).cols());
  for (std::size_t r = 0; r < slots; ++r) m.row(static_cast<Eigen::Index>(r)) = moments[r * layers + n];
  return m;
}

}  // namespace

std::string to_string(PromptVariant v) {
  switch (v) {
    case PromptVariant::kPromo: return "PROMO";
    case PromptVariant::kItemId: return "PROMO_I";
    case PromptVariant::kFeature: return "PROMO_F";
    case PromptVariant::kItemIdFeature: return "PROMO_IF";
    case PromptVariant::kSharedNet: return "PROMO_M";
    case PromptVariant::kNoNet: return "PROMO_T";
  }
  throw std::invalid_argument("unknown prompt variant");
}

PromptVariant parse_prompt_variant(const std::string& name) {
  for (auto v : {PromptVariant::kPromo, PromptVariant::kItemId, PromptVariant::kFeature,
                 PromptVariant::kItemIdFeature, PromptVariant::kSharedNet,
                 PromptVariant::kNoNet}) {
    if (to_string(v) == name) return v;
  }
  throw std::invalid_argument("unknown prompt variant: " + name);
}

bool uses_prompt_net(PromptVariant v) { return v != PromptVariant::kNoNet; }

bool uses_features(PromptVariant v) {
  return v == PromptVariant::kFeature || v == PromptVariant::kItemIdFeature;
}

// ---- reference computations ----

PromptForwardResult prompt_forward(const PersonalizedPromptNet& net, const Eigen::MatrixXd& inputs) {
  if (net.weights.empty()) throw std::invalid_argument("prompt_forward: empty network");
  if (inputs.cols() != net.weights.front().cols()) {
    throw std::invalid_argument("prompt_forward: input width " + std::to_string(inputs.cols()) +
                                " does not match layer 0 input " +
                                std::to_string(net.weights.front().cols()));
  }
  PromptForwardResult out;
  Eigen::MatrixXd h = inputs;
  std::vector<Eigen::MatrixXd> layers;
  Eigen::Index total = 0;
  for (std::size_t n = 0; n < net.weights.size(); ++n) {
    if (h.cols() != net.weights[n].cols()) {
      throw std::invalid_argument("prompt_forward: layer " + std::to_string(n) +
                                  " input width mismatch");
    }
    Eigen::MatrixXd z = h * net.weights[n].transpose();
    z.rowwise() += net.biases[n];
    h = z.array().tanh().matrix();
    layers.push_back(h);
    total += h.cols();
  }
  out.output = h;
  out.layers.resize(inputs.rows(), total);
  Eigen::Index c = 0;
  for (const auto& l : layers) {
    out.layers.middleCols(c, l.cols()) = l;
    c += l.cols();
  }
  return out;
}

double pfpe_loss(const Eigen::MatrixXd& h_pos, const Eigen::MatrixXd& h_neg) {
  ad::Tape t;
  return pfpe_loss(t.constant(h_pos), t.constant(h_neg)).scalar();
}

double score_final(const Eigen::RowVectorXd& user, const Eigen::RowVectorXd& item) {
  if (user.size() != item.size()) throw std::invalid_argument("score_final: dimension mismatch");
  return user.dot(item);
}

double score_final_probability(const Eigen::RowVectorXd& user, const Eigen::RowVectorXd& item) {
  return ad::sigmoid(score_final(user, item));
}

double pape_loss(std::span<const ScoredSample> batch) {
  double sum_pc = 0.0, sum_nw = 0.0;
  std::size_t n_pc = 0, n_nw = 0;
  for (const auto& s : batch) {
    if (!std::isfinite(s.score)) throw std::invalid_argument("pape_loss: non-finite score");
    if (s.is_cold && s.label == 1) {
      sum_pc += s.score;
      ++n_pc;
    } else if (!s.is_cold && s.label == 0) {
      sum_nw += s.score;
      ++n_nw;
    }
  }
  if (n_pc == 0 || n_nw == 0) return 0.0;
  const double delta = static_cast<double>(n_nw) * sum_pc - static_cast<double>(n_pc) * sum_nw;
  return ad::softplus_neg(delta);
}

double total_loss(double l_rec, double l_pfpe, double l_pape, double lambda1, double lambda2) {
  if (lambda1 < 0.0 || lambda2 < 0.0) throw std::invalid_argument("total_loss: negative lambda");
  return lambda1 * l_pfpe + lambda2 * l_pape + l_rec;
}

// ---- differentiable counterparts ----

PromptForwardVars prompt_forward(std::span<const Var> layer_embeddings, const LayerDims& dims,
                                 Var inputs) {
  if (layer_embeddings.size() != dims.size() || dims.empty()) {
    throw std::invalid_argument("prompt_forward: embedding count does not match layer count");
  }
  if (inputs.cols() != dims.front().first) {
    throw std::invalid_argument("prompt_forward: input width " + std::to_string(inputs.cols()) +
                                " does not match layer 0 input " +
                                std::to_string(dims.front().first));
  }
  Var h = inputs;
  std::vector<Var> layers;
  for (std::size_t n = 0; n < dims.size(); ++n) {
    const auto [in, out] = dims[n];
    Var e = layer_embeddings[n];
    if (e.rows() != 1 || e.cols() != prompt_layer_size(dims[n])) {
      throw std::invalid_argument("prompt_forward: layer " + std::to_string(n) + " expects " +
                                  std::to_string(prompt_layer_size(dims[n])) + " values");
    }
    Var w = ad::reshape(ad::slice_cols(e, 0, static_cast<Eigen::Index>(in) * out), out, in);
    Var b = ad::slice_cols(e, static_cast<Eigen::Index>(in) * out, out);
    h = ad::tanh(ad::linear(h, w, b));
    layers.push_back(h);
  }
  return {h, layers.size() == 1 ? layers.front() : ad::hcat(layers)};
}

Var pfpe_loss(Var h_pos, Var h_neg) {
  if (h_pos.rows() == 0 || h_neg.rows() == 0) throw std::invalid_argument("pfpe_loss: empty list");
  if (h_pos.cols() != h_neg.cols()) throw std::invalid_argument("pfpe_loss: width mismatch");
  return ad::softplus_neg(ad::pairwise_l1_sum(h_pos, h_neg));
}

Var pape_loss(Var probs, std::span<const std::uint8_t> is_cold, std::span<const int> labels) {
  const auto n = static_cast<std::size_t>(probs.rows());
  if (is_cold.size() != n || labels.size() != n || probs.cols() != 1) {
    throw std::invalid_argument("pape_loss: shape mismatch");
  }
  std::size_t n_pc = 0, n_nw = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (is_cold[j] && labels[j] == 1) ++n_pc;
    if (!is_cold[j] && labels[j] == 0) ++n_nw;
  }
  ad::Tape& t = *probs.tape();
  if (n_pc == 0 || n_nw == 0) return t.constant(Matrix::Zero(1, 1));
  // sum over pairs of (a - b) = n_nw * sum a - n_pc * sum b
  Matrix w = Matrix::Zero(static_cast<Eigen::Index>(n), 1);
  for (std::size_t j = 0; j < n; ++j) {
    if (is_cold[j] && labels[j] == 1) w(static_cast<Eigen::Index>(j)) = static_cast<double>(n_nw);
    if (!is_cold[j] && labels[j] == 0) w(static_cast<Eigen::Index>(j)) = -static_cast<double>(n_pc);
  }
  return ad::softplus_neg(ad::sum(ad::mul(probs, t.constant(std::move(w)))));
}

Var total_loss(Var l_rec, Var l_pfpe, Var l_pape, double lambda1, double lambda2) {
  if (lambda1 < 0.0 || lambda2 < 0.0) throw std::invalid_argument("total_loss: negative lambda");
  return ad::add(ad::add(ad::scale(l_pfpe, lambda1), ad::scale(l_pape, lambda2)), l_rec);
}

// ---- fusion head ----

FusionHead FusionHead::init(int dim, int prompt_dim, int hidden, std::uint64_t seed) {
  if (dim < 1 || prompt_dim < 0 || hidden < 1) throw std::invalid_argument("FusionHead: bad sizes");
  std::mt19937_64 rng(seed ^ 0x66757369ULL);
  FusionHead h;
  h.w1 = ad::Parameter("fusion.w1", xavier(hidden, 2 * dim + prompt_dim, rng));
  h.b1 = ad::Parameter("fusion.b1", Matrix::Zero(1, hidden));
  h.w2 = ad::Parameter("fusion.w2", Matrix::Zero(dim, hidden));
  h.b2 = ad::Parameter("fusion.b2", Matrix::Zero(1, dim));
  h.proj_w = ad::Parameter("user_proj.w", Matrix::Identity(dim, dim));
  h.proj_b = ad::Parameter("user_proj.b", Matrix::Zero(1, dim));
  return h;
}

std::vector<ad::Parameter*> FusionHead::parameters() {
  return {&w1, &b1, &w2, &b2, &proj_w, &proj_b};
}

std::vector<const ad::Parameter*> FusionHead::parameters() const {
  return {&w1, &b1, &w2, &b2, &proj_w, &proj_b};
}

FusionVars bind_fusion(ad::Tape& tape, FusionHead& head, bool trainable) {
  auto b = [&](ad::Parameter& p) { return trainable ? tape.param(p) : tape.constant(p.value); };
  return {b(head.w1), b(head.b1), b(head.w2), b(head.b2)};
}

Var fuse_rows(Var h_i, Var pos_mean, Var e_pl, const FusionVars& f) {
  std::vector<Var> parts{h_i, pos_mean};
  if (e_pl.valid()) parts.push_back(e_pl);
  Var x = ad::hcat(parts);
  if (x.cols() != f.w1.cols()) {
    throw std::invalid_argument("fuse: input width " + std::to_string(x.cols()) +
                                " does not match head input " + std::to_string(f.w1.cols()));
  }
  Var z = ad::tanh(ad::linear(x, f.w1, f.b1));
  return ad::add(h_i, ad::linear(z, f.w2, f.b2));
}

Eigen::RowVectorXd fuse_item(const Eigen::RowVectorXd& h_i, const Eigen::MatrixXd& pos_embeddings,
                             const Eigen::RowVectorXd& e_pl, const FusionHead& head) {
  if (pos_embeddings.rows() == 0) throw std::invalid_argument("fuse_item: empty positive list");
  if (h_i.size() != head.dim() || pos_embeddings.cols() != head.dim() ||
      e_pl.size() != head.prompt_dim()) {
    throw std::invalid_argument("fuse_item: dimension mismatch");
  }
  ad::Tape t;
  FusionVars f{t.constant(head.w1.value), t.constant(head.b1.value), t.constant(head.w2.value),
               t.constant(head.b2.value)};
  Var pm = ad::mean_rows(t.constant(pos_embeddings));
  Var ep = e_pl.size() > 0 ? t.constant(e_pl) : Var();
  return fuse_rows(t.constant(h_i), pm, ep, f).value().row(0);
}

Eigen::RowVectorXd project_user(const Eigen::RowVectorXd& h_u, const FusionHead& head) {
  if (h_u.size() != head.dim()) throw std::invalid_argument("project_user: dimension mismatch");
  return h_u * head.proj_w.value.transpose() + head.proj_b.value;
}

// ---- prompt state ----

std::vector<ad::Parameter*> PromptState::parameters() {
  std::vector<ad::Parameter*> out;
  for (auto& t : prompts) out.push_back(&t);
  for (auto* p : fusion.parameters()) out.push_back(p);
  if (feature_emb.value.size() > 0) out.push_back(&feature_emb);
  return out;
}

std::vector<const ad::Parameter*> PromptState::parameters() const {
  auto mut = const_cast<PromptState*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

int PromptState::row_of(ItemId item) const {
  auto it = std::lower_bound(items.begin(), items.end(), item);
  if (it == items.end() || *it != item) return -1;
  return variant == PromptVariant::kSharedNet ? 0 : static_cast<int>(it - items.begin());
}

PromptParamEmbedding PromptState::embedding(ItemId item) const {
  const int row = row_of(item);
  if (row < 0) throw std::out_of_range("no prompt embedding for item " + std::to_string(item));
  PromptParamEmbedding e;
  e.item = item;
  e.layer_dims = layer_dims;
  for (std::size_t n = 0; n < layer_dims.size(); ++n) e.embeddings.push_back(prompt(row, n).value);
  return e;
}

std::string PromptState::checksum() const {
  Digest d;
  d.add("variant", static_cast<std::int64_t>(variant));
  d.add("lambda1", lambda1);
  d.add("lambda2", lambda2);
  for (const auto* p : parameters()) d.add(p->name, p->value);
  return d.hex();
}

Checkpoint PromptState::to_checkpoint() const {
  Checkpoint ck("prompt_state");
  ck.put("variant", to_string(variant));
  ck.put("lambda1", lambda1);
  ck.put("lambda2", lambda2);
  ck.put("steps", steps);
  Eigen::MatrixXd dims(static_cast<Eigen::Index>(layer_dims.size()), 2);
  for (std::size_t n = 0; n < layer_dims.size(); ++n) {
    dims(static_cast<Eigen::Index>(n), 0) = layer_dims[n].first;
    dims(static_cast<Eigen::Index>(n), 1) = layer_dims[n].second;
  }
  ck.put("layer_dims", dims);
  ck.put("items", id_row(items));
  // Prompt slots are packed into one matrix per layer; everything else is
  // stored under its own name. Adam moments follow parameters() order.
  const std::size_t slots = slot_count(), layers = layer_dims.size();
  ck.put("slot_count", static_cast<std::int64_t>(slots));
  const auto params = parameters();
  ck.put("param_count", static_cast<std::int64_t>(params.size()));
  for (std::size_t n = 0; n < layers && slots > 0; ++n) {
    ck.put("param.prompt.layer" + std::to_string(n), pack_layer(prompts, slots, layers, n));
  }
  for (std::size_t k = slots * layers; k < params.size(); ++k) {
    ck.put("param." + params[k]->name, params[k]->value);
  }
  ck.put("adam_count", static_cast<std::int64_t>(adam_m.size()));
  if (!adam_m.empty()) {
    if (adam_m.size() != params.size() || adam_v.size() != params.size()) {
      throw CheckpointError("prompt state: optimizer moments do not match parameters");
    }
    for (std::size_t n = 0; n < layers && slots > 0; ++n) {
      ck.put("adam.m.prompt.layer" + std::to_string(n), pack_moments(adam_m, slots, layers, n));
      ck.put("adam.v.prompt.layer" + std::to_string(n), pack_moments(adam_v, slots, layers, n));
    }
    for (std::size_t k = slots * layers; k < params.size(); ++k) {
      ck.put("adam.m." + params[k]->name, adam_m[k]);
      ck.put("adam.v." + params[k]->name, adam_v[k]);
    }
  }
  ck.put("checksum", checksum());
  return ck;
}

PromptState PromptState::from_checkpoint(const Checkpoint& ck) {
  if (ck.kind() != "prompt_state") throw CheckpointError("not a prompt state: " + ck.kind());
  PromptState s;
  s.variant = parse_prompt_variant(ck.text("variant"));
  s.lambda1 = ck.real("lambda1");
  s.lambda2 = ck.real("lambda2");
  s.steps = ck.integer("steps");
  const auto& dims = ck.matrix("layer_dims");
  for (Eigen::Index n = 0; n < dims.rows(); ++n) {
    s.layer_dims.emplace_back(static_cast<int>(dims(n, 0)), static_cast<int>(dims(n, 1)));
  }
  const auto& items = ck.matrix("items");
  for (Eigen::Index j = 0; j < items.size(); ++j) s.items.push_back(static_cast<ItemId>(items(j)));
  const auto slots = static_cast<std::size_t>(ck.integer("slot_count"));
  const std::size_t layers = s.layer_dims.size();
  std::vector<Matrix> packed;
  for (std::size_t n = 0; n < layers && slots > 0; ++n) {
    packed.push_back(ck.matrix("param.prompt.layer" + std::to_string(n)));
    if (static_cast<std::size_t>(packed.back().rows()) != slots) {
      throw CheckpointError("prompt state: prompt layer " + std::to_string(n) + " row count");
    }
  }
  for (std::size_t r = 0; r < slots; ++r) {
    for (std::size_t n = 0; n < layers; ++n) {
      s.prompts.emplace_back(prompt_name(r, n), packed[n].row(static_cast<Eigen::Index>(r)), true);
    }
  }
  auto load = [&](const std::string& name, bool sparse = false) {
    return ad::Parameter(name, ck.matrix("param." + name), sparse);
  };
  s.fusion.w1 = load("fusion.w1");
  s.fusion.b1 = load("fusion.b1");
  s.fusion.w2 = load("fusion.w2");
  s.fusion.b2 = load("fusion.b2");
  s.fusion.proj_w = load("user_proj.w");
  s.fusion.proj_b = load("user_proj.b");
  if (ck.has("param.feature_emb")) s.feature_emb = load("feature_emb");
  if (static_cast<std::int64_t>(s.parameters().size()) != ck.integer("param_count")) {
    throw CheckpointError("prompt state: parameter count mismatch");
  }
  if (ck.integer("adam_count") > 0) {
    const auto params = s.parameters();
    std::vector<Matrix> pm, pv;
    for (std::size_t n = 0; n < layers && slots > 0; ++n) {
      pm.push_back(ck.matrix("adam.m.prompt.layer" + std::to_string(n)));
      pv.push_back(ck.matrix("adam.v.prompt.layer" + std::to_string(n)));
    }
    for (std::size_t r = 0; r < slots; ++r) {
      for (std::size_t n = 0; n < layers; ++n) {
        s.adam_m.push_back(pm[n].row(static_cast<Eigen::Index>(r)));
        s.adam_v.push_back(pv[n].row(static_cast<Eigen::Index>(r)));
      }
    }
    for (std::size_t k = slots * layers; k < params.size(); ++k) {
      s.adam_m.push_back(ck.matrix("adam.m." + params[k]->name));
      s.adam_v.push_back(ck.matrix("adam.v." + params[k]->name));
    }
  }
  if (s.checksum() != ck.text("checksum")) {
    throw CheckpointError("prompt state: checksum mismatch");
  }
  return s;
}

ParameterRatio parameter_ratio(const PromptState& state, const BackboneParams& backbone) {
  ParameterRatio r;
  r.backbone = backbone.parameter_count();
  std::int64_t shared = 0;
  for (const auto* p : state.fusion.parameters()) shared += p->size();
  if (state.feature_emb.value.size() > 0) shared += state.feature_emb.size();
  std::int64_t per_item = 0, tables = 0;
  for (std::size_t n = 0; n < state.layer_dims.size() && state.slot_count() > 0; ++n) {
    per_item += state.prompt(0, n).size();
  }
  for (const auto& t : state.prompts) tables += t.size();
  r.per_item_tunable = per_item + shared;
  r.total_tunable = tables + shared;
  r.per_item_ratio = static_cast<double>(r.per_item_tunable) / static_cast<double>(r.backbone);
  r.aggregate_ratio = static_cast<double>(r.total_tunable) / static_cast<double>(r.backbone);
  return r;
}

PromptState init_prompt_state(const FrozenBackbone& backbone, const PromptStore& store,
                              const TuneConfig& config, std::uint64_t seed) {
  const auto& bp = backbone.params();
  PromptState s;
  s.variant = config.variant;
  s.lambda1 = config.lambda1;
  s.lambda2 = config.lambda2;
  s.layer_dims = store.config.layer_dims;
  if (s.layer_dims.empty()) throw std::invalid_argument("prompt state: no prompt layers");
  if (s.layer_dims.front().first != bp.config.dim) {
    throw std::invalid_argument("prompt state: first prompt layer input must equal backbone dim " +
                                std::to_string(bp.config.dim));
  }
  for (const auto& [item, entry] : store.entries) s.items.push_back(item);
  const bool net = uses_prompt_net(config.variant);
  if (net) {
    const bool shared = config.variant == PromptVariant::kSharedNet;
    const std::size_t slots = shared ? 1 : s.items.size();
    PromptParamEmbedding shared_init;
    if (shared) shared_init = init_prompt_embedding(-1, s.layer_dims, seed);
    for (std::size_t r = 0; r < slots; ++r) {
      const auto& init = shared ? shared_init : store.at(s.items[r]).embedding;
      for (std::size_t n = 0; n < s.layer_dims.size(); ++n) {
        s.prompts.emplace_back(prompt_name(r, n), init.embeddings[n], true);
      }
    }
  }
  const int prompt_dim =
      net ? static_cast<int>(prompt_layer_size(s.layer_dims.back())) : 0;
  s.fusion = FusionHead::init(bp.config.dim, prompt_dim, config.fusion_hidden, seed);
  if (uses_features(config.variant)) {
    if (!config.features || config.features->feature_count < 1) {
      throw std::invalid_argument(to_string(config.variant) + " requires item features");
    }
    std::mt19937_64 rng(seed ^ 0x66656174ULL);
    std::normal_distribution<double> dist(0.0, bp.config.init_std);
    Matrix f(config.features->feature_count, bp.config.dim);
    for (Eigen::Index r = 0; r < f.rows(); ++r)
      for (Eigen::Index c = 0; c < f.cols(); ++c) f(r, c) = dist(rng);
    s.feature_emb = ad::Parameter("feature_emb", std::move(f));
  }
  return s;
}

// ---- model ----

PromptModel::PromptModel(const FrozenBackbone& backbone, const PromptStore& store,
                         const ItemPartition& partition, PromptState& state,
                         Eigen::MatrixXd feedback, const ItemFeatures* features)
    : backbone_(backbone),
      store_(store),
      partition_(partition),
      state_(state),
      features_(features),
      item_reprs_(encode_all_items(backbone.params())),
      feedback_(std::move(feedback)) {
  if (feedback_.rows() != backbone.params().config.user_count ||
      feedback_.cols() != backbone.params().config.dim) {
    throw std::invalid_argument("PromptModel: feedback embeddings must be users x dim");
  }
  if (uses_features(state.variant) && !features) {
    throw std::invalid_argument(to_string(state.variant) + " requires item features");
  }
  for (ItemId c : partition.cold_items) {
    if (!store.contains(c) || state.row_of(c) < 0) {
      throw std::invalid_argument("prompt store does not cover cold item " + std::to_string(c));
    }
  }
}

Var PromptModel::positive_inputs(ad::Tape& tape, ItemId item, bool trainable) const {
  const auto& bp = backbone_.params();
  auto features = [&]() {
    const auto& ids = features_->item_features.at(static_cast<std::size_t>(item));
    if (ids.empty()) return tape.constant(Matrix::Zero(1, bp.config.dim));
    return trainable ? tape.gather_rows(state_.feature_emb, ids)
                     : tape.gather_rows(state_.feature_emb.value, ids);
  };
  const std::int32_t id = item;
  switch (state_.variant) {
    case PromptVariant::kItemId:
      return tape.gather_rows(bp.item_emb.value, std::span<const std::int32_t>(&id, 1));
    case PromptVariant::kFeature:
      return features();
    case PromptVariant::kItemIdFeature:
      return ad::vcat(std::vector<Var>{
          tape.gather_rows(bp.item_emb.value, std::span<const std::int32_t>(&id, 1)),
          features()});
    default:
      return tape.gather_rows(feedback_, store_.at(item).pinnacle.positives);
  }
}

Var PromptModel::negative_inputs(ad::Tape& tape, ItemId item) const {
  return tape.gather_rows(feedback_, store_.at(item).pinnacle.negatives);
}

BatchLosses PromptModel::batch_loss(ad::Tape& tape, std::span<const TrainSample> batch,
                                    const Eigen::MatrixXd& contexts) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  FusionVars fusion = bind_fusion(tape, state_.fusion, true);
  const bool net = uses_prompt_net(state_.variant);

  // Distinct cold and warm items, in id order so the graph is deterministic.
  std::map<ItemId, std::int32_t> cold_slot, warm_slot;
  for (const auto& s : batch) {
    if (s.label != 0 && s.label != 1) throw std::invalid_argument("batch_loss: non-binary label");
    (partition_.cold(s.item) ? cold_slot : warm_slot).emplace(s.item, 0);
  }
  std::vector<Var> h_rows, means, e_pls, pfpe_terms;
  std::int32_t next = 0;
  for (auto& [item, slot] : cold_slot) {
    slot = next++;
    const std::int32_t id = item;
    h_rows.push_back(tape.gather_rows(item_reprs_, std::span<const std::int32_t>(&id, 1)));
    Var pos = positive_inputs(tape, item, true);
    means.push_back(ad::mean_rows(pos));
    if (net) {
      const std::int32_t row = state_.row_of(item);
      std::vector<Var> layers;
      const std::int32_t zero = 0;
      for (std::size_t n = 0; n < state_.layer_dims.size(); ++n) {
        layers.push_back(
            tape.gather_rows(state_.prompt(row, n), std::span<const std::int32_t>(&zero, 1)));
      }
      Var h_pos = prompt_forward(layers, state_.layer_dims, pos).output;
      Var h_neg = prompt_forward(layers, state_.layer_dims, negative_inputs(tape, item)).output;
      pfpe_terms.push_back(pfpe_loss(h_pos, h_neg));
      e_pls.push_back(layers.back());
    }
  }
  std::vector<Var> item_parts;
  if (!cold_slot.empty()) {
    item_parts.push_back(fuse_rows(ad::vcat(h_rows), ad::vcat(means),
                                   net ? ad::vcat(e_pls) : Var(), fusion));
  }
  if (!warm_slot.empty()) {
    std::vector<std::int32_t> ids;
    for (auto& [item, slot] : warm_slot) {
      slot = next++;
      ids.push_back(item);
    }
    item_parts.push_back(tape.gather_rows(item_reprs_, ids));
  }
  Var items_all = item_parts.size() == 1 ? item_parts.front() : ad::vcat(item_parts);

  std::vector<std::int32_t> item_idx, ctx_idx;
  std::vector<double> labels;
  std::vector<int> int_labels;
  std::vector<std::uint8_t> is_cold;
  for (const auto& s : batch) {
    const bool cold = partition_.cold(s.item);
    item_idx.push_back(cold ? cold_slot.at(s.item) : warm_slot.at(s.item));
    ctx_idx.push_back(s.context);
    labels.push_back(static_cast<double>(s.label));
    int_labels.push_back(s.label);
    is_cold.push_back(cold ? 1 : 0);
  }
  Var users = ad::linear(tape.gather_rows(contexts, ctx_idx), tape.param(state_.fusion.proj_w),
                         tape.param(state_.fusion.proj_b));
  Var probs = ad::sigmoid(ad::row_dot(users, ad::select_rows(items_all, item_idx)));

  BatchLosses out;
  out.rec = ad::bce(probs, labels);
  if (pfpe_terms.empty()) {
    out.pfpe = tape.constant(Matrix::Zero(1, 1));
  } else {
    out.pfpe = ad::scale(ad::sum(ad::vcat(pfpe_terms)),
                         1.0 / static_cast<double>(pfpe_terms.size()));
  }
  out.pape = pape_loss(probs, is_cold, int_labels);
  out.total = total_loss(out.rec, out.pfpe, out.pape, state_.lambda1, state_.lambda2);
  return out;
}

std::array<double, 4> PromptModel::step(Adam& adam, std::span<const TrainSample> batch,
                                        const Eigen::MatrixXd& contexts) {
  ad::Tape tape;
  BatchLosses l = batch_loss(tape, batch, contexts);
  const std::int64_t step = state_.steps + 1;
  check_finite("L_rec", l.rec.scalar(), step);
  check_finite("L_pfpe", l.pfpe.scalar(), step);
  check_finite("L_pape", l.pape.scalar(), step);
  check_finite("total loss", l.total.scalar(), step);
  adam.zero_grad();
  tape.backward(l.total);
  adam.step();
  state_.steps = step;
  return {l.total.scalar(), l.rec.scalar(), l.pfpe.scalar(), l.pape.scalar()};
}

Eigen::MatrixXd PromptModel::final_items() const {
  Eigen::MatrixXd out = item_reprs_;
  if (partition_.cold_items.empty()) return out;
  ad::Tape tape;
  FusionVars fusion = bind_fusion(tape, state_.fusion, false);
  const bool net = uses_prompt_net(state_.variant);
  std::vector<Var> h_rows, means, e_pls;
  for (ItemId item : partition_.cold_items) {
    const std::int32_t id = item;
    h_rows.push_back(tape.gather_rows(item_reprs_, std::span<const std::int32_t>(&id, 1)));
    means.push_back(ad::mean_rows(positive_inputs(tape, item, false)));
    if (net) {
      const std::int32_t row = state_.row_of(item);
      e_pls.push_back(tape.constant(state_.prompt(row, state_.layer_dims.size() - 1).value));
    }
  }
  Matrix fused = fuse_rows(ad::vcat(h_rows), ad::vcat(means), net ? ad::vcat(e_pls) : Var(),
                           fusion)
                     .value();
  for (std::size_t j = 0; j < partition_.cold_items.size(); ++j) {
    out.row(partition_.cold_items[j]) = fused.row(static_cast<Eigen::Index>(j));
  }
  return out;
}

Eigen::RowVectorXd PromptModel::final_user(const Eigen::RowVectorXd& h_u) const {
  return project_user(h_u, state_.fusion);
}

PromptScorer::PromptScorer(const PromptModel& model, const Eigen::MatrixXd* user_contexts)
    : model_(model), user_contexts_(user_contexts), items_(model.final_items()) {}

void PromptScorer::score(UserId user, std::span<const ItemId> context,
                         std::span<const ItemId> candidates, std::span<double> out) const {
  Eigen::RowVectorXd h = user_contexts_ ? Eigen::RowVectorXd(user_contexts_->row(user))
                                        : encode_user(model_.backbone().params(), context, user);
  Eigen::RowVectorXd u = model_.final_user(h);
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    out[j] = score_final(u, items_.row(candidates[j]));
  }
}

double PromptScorer::probability(UserId user, std::span<const ItemId> context, ItemId item) const {
  double s = 0.0;
  score(user, context, std::span<const ItemId>(&item, 1), std::span<double>(&s, 1));
  return ad::sigmoid(s);
}

Eigen::MatrixXd stage_user_contexts(const BackboneParams& params, const DatasetSplit& split,
                                    bool for_test) {
  Eigen::MatrixXd out(split.user_count(), params.config.dim);
  for (UserId u = 0; u < split.user_count(); ++u) {
    out.row(u) = encode_user(params, split.context_sequence(u, for_test), u);
  }
  return out;
}

Eigen::MatrixXd feedback_embeddings(const BackboneParams& params, const DatasetSplit& split) {
  return stage_user_contexts(params, split, false);
}

PromptTrainingData prompt_training_data(const BackboneParams& params, const DatasetSplit& split) {
  PromptTrainingData d;
  const std::size_t max_len = static_cast<std::size_t>(params.config.max_seq_len);
  std::vector<Eigen::RowVectorXd> rows;
  for (UserId u = 0; u < split.user_count(); ++u) {
    const auto& seq = split.full_train_sequences[u];
    if (seq.empty()) continue;
    // Row t of the prefix encoding is the context before item t.
    const std::size_t head = std::min(seq.size(), max_len);
    Eigen::MatrixXd prefixes = encode_user_prefixes(
        params, std::span<const ItemId>(seq.data(), head == seq.size() ? head - 1 : head), u);
    for (std::size_t t = 0; t < seq.size(); ++t) {
      Eigen::RowVectorXd ctx;
      if (t < static_cast<std::size_t>(prefixes.rows())) {
        ctx = prefixes.row(static_cast<Eigen::Index>(t));
      } else {
        ctx = encode_user(params, std::span<const ItemId>(seq.data() + (t - max_len), max_len), u);
      }
      d.positives.push_back({u, seq[t], 1, static_cast<std::int32_t>(rows.size())});
      rows.push_back(std::move(ctx));
    }
  }
  d.contexts.resize(static_cast<Eigen::Index>(rows.size()), params.config.dim);
  for (std::size_t r = 0; r < rows.size(); ++r) d.contexts.row(static_cast<Eigen::Index>(r)) = rows[r];
  d.train_positive_sets.resize(static_cast<std::size_t>(split.user_count()));
  for (UserId u = 0; u < split.user_count(); ++u) {
    auto& s = d.train_positive_sets[static_cast<std::size_t>(u)];
    s = split.full_train_sequences[u];
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
  }
  return d;
}

std::string format_tune_log(const TuneEpoch& e) {
  std::ostringstream os;
  os.precision(6);
  os << e.epoch << ", " << e.rec << ", " << e.pfpe << ", " << e.pape << ", " << e.total << ", "
     << e.val_hitrate10;
  return os.str();
}

Adam make_prompt_optimizer(PromptState& state, const TuneConfig& config) {
  Adam adam(state.parameters(), config.adam);
  // parameters() lists the prompt embeddings first.
  for (std::size_t j = 0; j < state.prompts.size(); ++j) {
    adam.set_learning_rate_scale(j, config.prompt_lr_scale);
  }
  return adam;
}

TuneResult tune(const FrozenBackbone& backbone, const PromptStore& store, const DatasetSplit& split,
                const ItemPartition& partition, const TuneConfig& config, std::uint64_t seed,
                const std::function<void(const TuneEpoch&)>& on_epoch) {
  const FlushDenormals flush;
  if (config.batch_size < 2) throw std::invalid_argument("tune: batch_size must be >= 2");
  if (config.negatives_per_positive < 1) {
    throw std::invalid_argument("tune: negatives_per_positive must be >= 1");
  }
  if (config.lambda1 < 0.0 || config.lambda2 < 0.0) throw std::invalid_argument("tune: lambda < 0");
  const std::string frozen = backbone.checksum();
  if (!backbone.verify()) throw CheckpointError("tune: backbone does not match its checksum");

  const auto& bp = backbone.params();
  PromptTrainingData data = prompt_training_data(bp, split);
  if (data.positives.empty()) throw std::invalid_argument("tune: no training positives");
  const Eigen::MatrixXd val_users = stage_user_contexts(bp, split, false);
  const EvalCandidates val =
      sample_eval_negatives(split, config.eval_negatives, seed, EvalStage::kValidation);

  TuneResult result;
  result.state = init_prompt_state(backbone, store, config, seed);
  PromptState state = result.state;
  // Validation contexts are the training histories, i.e. the feedback embeddings.
  PromptModel model(backbone, store, partition, state, val_users, config.features);
  Adam adam = make_prompt_optimizer(state, config);

  TuneEpoch initial;
  initial.val_hitrate10 = cold_validation_hitrate(model, split, val, val_users);
  result.best_val_hitrate10 = initial.val_hitrate10;
  result.best_epoch = 0;
  result.history.push_back(initial);
  if (on_epoch) on_epoch(initial);

  std::mt19937_64 rng(seed ^ 0x74756e65ULL);
  std::uniform_int_distribution<ItemId> pick(0, split.item_count() - 1);
  const std::size_t group = 1 + static_cast<std::size_t>(config.negatives_per_positive);
  const std::size_t per_batch =
      std::max<std::size_t>(1, static_cast<std::size_t>(config.batch_size) / group);
  std::vector<std::size_t> order(data.positives.size());
  std::iota(order.begin(), order.end(), 0);
  int stale = 0;
  bool capped = false;

  for (int epoch = 1; epoch <= config.max_epochs && !capped; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    TuneEpoch log;
    log.epoch = epoch;
    std::size_t batches = 0;
    std::vector<TrainSample> batch;
    for (std::size_t start = 0; start < order.size(); start += per_batch) {
      batch.clear();
      const std::size_t end = std::min(order.size(), start + per_batch);
      for (std::size_t j = start; j < end; ++j) {
        const TrainSample& p = data.positives[order[j]];
        batch.push_back(p);
        const auto& seen = data.train_positive_sets[static_cast<std::size_t>(p.user)];
        for (int n = 0; n < config.negatives_per_positive; ++n) {
          ItemId neg;
          do {
            neg = pick(rng);
          } while (std::binary_search(seen.begin(), seen.end(), neg));
          batch.push_back({p.user, neg, 0, p.context});
        }
      }
      auto l = model.step(adam, batch, data.contexts);
      result.step_losses.push_back(l[0]);
      log.total += l[0];
      log.rec += l[1];
      log.pfpe += l[2];
      log.pape += l[3];
      ++batches;
      if (config.max_steps > 0 && state.steps >= config.max_steps) {
        capped = true;
        break;
      }
    }
    const double nb = static_cast<double>(batches);
    log.total /= nb;
    log.rec /= nb;
    log.pfpe /= nb;
    log.pape /= nb;
    log.val_hitrate10 = cold_validation_hitrate(model, split, val, val_users);
    result.history.push_back(log);
    if (on_epoch) on_epoch(log);
    if (log.val_hitrate10 > result.best_val_hitrate10) {
      result.best_val_hitrate10 = log.val_hitrate10;
      result.best_epoch = epoch;
      result.state = state;
      result.state.adam_m = adam.first_moments();
      result.state.adam_v = adam.second_moments();
      stale = 0;
    } else if (config.patience > 0 && ++stale >= config.patience) {
      break;
    }
  }
  if (backbone.checksum() != frozen || !backbone.verify()) {
    throw std::logic_error("tune: backbone parameters changed during prompt tuning");
  }
  return result;
}

}  // namespace promo
