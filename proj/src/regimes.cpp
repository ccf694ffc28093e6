#include "promo/evaluator.hpp"

#include <chrono>
#include <stdexcept>

namespace promo {

std::string to_string(Regime r) {
  switch (r) {
    case Regime::kPretrain: return "PRETRAIN";
    case Regime::kFinetune: return "FINETUNE";
    default: return to_string(*prompt_variant(r));
  }
}

const std::vector<Regime>& all_regimes() {
  static const std::vector<Regime> all{Regime::kPromo,  Regime::kPromoI,   Regime::kPromoF,
                                       Regime::kPromoIF, Regime::kPromoM,  Regime::kPromoT,
                                       Regime::kPretrain, Regime::kFinetune};
  return all;
}

Regime parse_regime(const std::string& name) {
  for (Regime r : all_regimes()) {
    if (to_string(r) == name) return r;
  }
  throw std::invalid_argument("unknown regime '" + name + "'");
}

std::optional<PromptVariant> prompt_variant(Regime r) {
  switch (r) {
    case Regime::kPromo: return PromptVariant::kPromo;
    case Regime::kPromoI: return PromptVariant::kItemId;
    case Regime::kPromoF: return PromptVariant::kFeature;
    case Regime::kPromoIF: return PromptVariant::kItemIdFeature;
    case Regime::kPromoM: return PromptVariant::kSharedNet;
    case Regime::kPromoT: return PromptVariant::kNoNet;
    case Regime::kPretrain:
    case Regime::kFinetune: return std::nullopt;
  }
  throw std::invalid_argument("unknown regime");
}

ExperimentData load_experiment(const RunConfig& config) {
  ExperimentData d;
  LoadOptions lo;
  lo.positive_min_rating = config.positive_min_rating;
  d.log = load_interactions(config.data_path, config.data_format, lo);
  if (!config.item_features_path.empty()) {
    d.features = load_item_features(config.item_features_path, d.log);
    d.has_features = true;
  }
  d.split = leave_one_out_split(d.log, config.max_seq_len);
  d.partition = partition_items(d.split.train, config.cold_threshold);
  return d;
}

RegimeRun run_ablation(Regime regime, const RunConfig& config, const ExperimentData& data,
                       const FrozenBackbone& backbone, const PromptStore& store,
                       const EvalCandidates& test, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  RegimeRun run;
  const std::vector<int> ks = config.eval_ks;

  if (regime == Regime::kPretrain) {
    BackboneScorer scorer(backbone.params());
    run.report = evaluate(scorer, data.split, test, &data.partition, ks);
  } else if (regime == Regime::kFinetune) {
    PretrainOptions o = config.pretrain_options();
    o.adam.learning_rate = config.finetune_lr;
    o.max_epochs = config.finetune_max_epochs;
    o.patience = config.finetune_patience;
    o.cold_only = &data.partition;
    PretrainResult r = continue_training(backbone.params(), data.split, o, seed);
    run.finetune_history = r.history;
    run.best_epoch = r.best_epoch;
    BackboneScorer scorer(r.params);
    run.report = evaluate(scorer, data.split, test, &data.partition, ks);
    run.tuned = std::move(r.params);
  } else {
    TuneConfig tc = config.tune_config(*prompt_variant(regime));
    if (uses_features(tc.variant)) {
      if (!data.has_features) {
        throw std::invalid_argument(to_string(regime) + " needs data.item_features");
      }
      tc.features = &data.features;
    }
    TuneResult r = tune(backbone, store, data.split, data.partition, tc, seed);
    run.tune_history = r.history;
    run.best_epoch = r.best_epoch;
    PromptState state = r.state;
    PromptModel model(backbone, store, data.partition, state,
                      feedback_embeddings(backbone.params(), data.split), tc.features);
    const Eigen::MatrixXd users = stage_user_contexts(backbone.params(), data.split, true);
    PromptScorer scorer(model, &users);
    run.report = evaluate(scorer, data.split, test, &data.partition, ks);
    run.prompts = std::move(r.state);
  }
  run.report.regime = to_string(regime);
  run.report.config_digest = config.digest();
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

}  // namespace promo
