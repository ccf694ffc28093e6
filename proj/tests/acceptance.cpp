// Acceptance run: one PASS/FAIL line per criterion. Criteria 3, 4, 6, 7 and 8
// share the seed-1 pretrain/tune of the ablation matrix.

#include "cli_commands.hpp"
#include "gradcheck.hpp"
#include "metric_oracle.hpp"
#include "promo/checkpoint.hpp"
#include "promo/config.hpp"
#include "promo/evaluator.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

using namespace promo;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Pinned tolerances and budgets.
constexpr double kMetricTol = 1e-12;
constexpr double kMetricSeconds = 5.0;
constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 30.0;
constexpr int kGradInstances = 20;
constexpr double kRatioMax = 0.5;
constexpr double kColdFracMin = 0.70, kColdFracMax = 0.90;
constexpr double kPretrainSeconds = 600.0;
constexpr double kTuneSeconds = 300.0;
constexpr double kAblationSeconds = 2700.0;
constexpr double kRetentionSeconds = 600.0;
constexpr double kHistogramSeconds = 900.0;

double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(int criterion, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << (pass ? "PASS" : "FAIL") << " criterion " << criterion << ": " << detail << std::endl;
}

std::string num(double v, int precision = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(precision);
  s << v;
  return s.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// Manifest lines without timings, which legitimately differ between runs.
std::string manifest_without_timings(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::string line, out;
  while (std::getline(in, line)) {
    if (line.rfind("timing ", 0) != 0) out += line + "\n";
  }
  return out;
}

RunConfig default_config() {
  const fs::path conf = fs::path(PROMO_SOURCE_DIR) / "configs" / "ml100k.conf";
  RunConfig c = load_config(conf);
  set_config_value(c, "data.path", (fs::path(PROMO_DATA_DIR) / "ml-100k" / "u.data").string());
  set_config_value(c, "data.item_features", (fs::path(PROMO_DATA_DIR) / "ml-100k" / "u.item").string());
  validate(c);
  return c;
}

}  // namespace

int main() {
  std::cout << std::unitbuf;

  {  // 1
    const auto t0 = Clock::now();
    double worst = 0.0;
    for (std::uint64_t seed : {11u, 12u}) worst = std::max(worst, testutil::metric_oracle_error(200, seed));
    const double s = since(t0);
    report(1, worst <= kMetricTol && s < kMetricSeconds,
           "metric oracle max |diff| " + std::to_string(worst) + " (tol 1e-12) over 2x200 lists, " +
               num(s, 3) + " s (budget 5 s)");
  }

  {  // 2
    const auto t0 = Clock::now();
    testutil::GradCheck worst;
    for (int i = 0; i < kGradInstances; ++i) {
      const testutil::GradCheck g = testutil::gradcheck_instance(1000 + i);
      worst.forward = std::max(worst.forward, g.forward);
      worst.pfpe = std::max(worst.pfpe, g.pfpe);
      worst.pape = std::max(worst.pape, g.pape);
      worst.fusion = std::max(worst.fusion, g.fusion);
      worst.total = std::max(worst.total, g.total);
      worst.combination = std::max(worst.combination, g.combination);
    }
    const double s = since(t0);
    std::ostringstream d;
    d.precision(2);
    d << std::scientific << "worst rel err forward " << worst.forward << " pfpe " << worst.pfpe << " pape "
      << worst.pape << " fusion " << worst.fusion << " total " << worst.total << " combination "
      << worst.combination << " (tol 1e-4) over " << kGradInstances << " instances, " << std::fixed
      << s << " s (budget 30 s)";
    report(2, worst.worst() < kGradTol && s < kGradSeconds, d.str());
  }

  const RunConfig config = default_config();
  const ExperimentData data = load_experiment(config);

  {  // 5
    const auto& log = data.log;
    const double cold = static_cast<double>(data.partition.cold_items.size());
    const double frac = cold / static_cast<double>(log.item_count);
    const bool counts = log.user_count == 943 && log.item_count == 1682 && log.interactions.size() == 100000;
    report(5, counts && frac >= kColdFracMin && frac <= kColdFracMax,
           std::to_string(log.user_count) + " users, " + std::to_string(log.item_count) + " items, " +
               std::to_string(log.interactions.size()) + " ratings; cold threshold " +
               std::to_string(config.cold_threshold) + " gives cold:warm " +
               std::to_string(data.partition.cold_items.size()) + ":" +
               std::to_string(data.partition.warm_items.size()) + " (cold fraction " + num(frac, 3) +
               ", required [0.70, 0.90])");
  }

  // Ablation matrix. Seed 1's backbone, store, PROMO state and FINETUNE
  // weights are kept for criteria 3, 4, 7 and 8.
  const auto ablation_start = Clock::now();
  std::map<Regime, std::vector<std::pair<double, double>>> cold10;
  double max_pretrain = 0.0, max_tune = 0.0;
  bool frozen = true;
  std::string freeze_detail;
  std::optional<FrozenBackbone> bb1;
  std::optional<PromptStore> store1;
  std::optional<PromptState> promo1;
  std::optional<BackboneParams> finetune1;
  for (std::uint64_t seed : config.ablation_seeds) {
    RunConfig cs = config;
    cs.seed = seed;
    auto t0 = Clock::now();
    FrozenBackbone bb = freeze(pretrain(data.split, cs.backbone_config(), cs.pretrain_options(), seed).params);
    const double pre_s = since(t0);
    max_pretrain = std::max(max_pretrain, pre_s);
    const std::string before = bb.checksum();
    const PromptStore store = build_prompt_store(data.partition, data.split.train, bb, cs.prompt_store_config(), seed);
    const EvalCandidates test = sample_eval_negatives(data.split, cs.eval_negatives, seed, EvalStage::kTest);
    std::cout << "  seed " << seed << ": pretrain " << num(pre_s, 1) << " s" << std::endl;
    for (Regime r : all_regimes()) {
      RegimeRun run = run_ablation(r, cs, data, bb, store, test, seed);
      const std::string after = bb.params().checksum();
      if (after != before) {
        frozen = false;
        freeze_detail += " changed after " + to_string(r) + " seed " + std::to_string(seed) + ";";
      }
      if (r == Regime::kPromo) max_tune = std::max(max_tune, run.seconds);
      cold10[r].emplace_back(run.report.cold.hitrate.at(10), run.report.cold.ndcg.at(10));
      std::cout << "  seed " << seed << " " << to_string(r) << ": cold H@10 "
                << num(run.report.cold.hitrate.at(10)) << " N@10 " << num(run.report.cold.ndcg.at(10))
                << ", all H@10 " << num(run.report.all.hitrate.at(10)) << ", best epoch " << run.best_epoch
                << ", " << num(run.seconds, 1) << " s" << std::endl;
      if (seed == config.ablation_seeds.front()) {
        if (r == Regime::kPromo) promo1 = run.prompts;
        if (r == Regime::kFinetune) finetune1 = run.tuned;
      }
    }
    if (seed == config.ablation_seeds.front()) {
      bb1.emplace(std::move(bb));
      store1.emplace(store);
    }
  }
  const double ablation_s = since(ablation_start);

  {  // 3
    report(3, frozen,
           "backbone checksum " + std::string(frozen ? "bitwise identical" : "CHANGED") +
               " before and after every prompt-tuning run (" + std::to_string(config.ablation_seeds.size()) +
               " seeds x 6 prompt regimes, plus FINETUNE on a copy)" + freeze_detail);
  }

  {  // 4
    const ParameterRatio ratio = parameter_ratio(*promo1, bb1->params());
    report(4, ratio.per_item_ratio < kRatioMax,
           "tunable/backbone parameters per item " + std::to_string(ratio.per_item_tunable) + "/" +
               std::to_string(ratio.backbone) + " = " + num(ratio.per_item_ratio) +
               " (< 0.5); all items together " + std::to_string(ratio.total_tunable) + " = " +
               num(ratio.aggregate_ratio) + "x; reference figures 0.201, 0.276, 0.177, 0.256 (not asserted)");
  }

  {  // 6
    auto mean = [&](Regime r, bool ndcg) {
      double m = 0.0;
      for (const auto& x : cold10[r]) m += (ndcg ? x.second : x.first) / cold10[r].size();
      return m;
    };
    bool pass = true;
    std::ostringstream d;
    d << "cold H@10/N@10 per seed:";
    for (std::size_t s = 0; s < config.ablation_seeds.size(); ++s) {
      const auto p = cold10[Regime::kPromo][s], b = cold10[Regime::kPretrain][s];
      const bool beats = p.first > b.first && p.second > b.second;
      pass = pass && beats;
      d << " seed " << config.ablation_seeds[s] << " PROMO " << num(p.first) << "/" << num(p.second)
        << " vs PRETRAIN " << num(b.first) << "/" << num(b.second) << (beats ? " ok;" : " NOT above;");
    }
    d << " means: PROMO " << num(mean(Regime::kPromo, false)) << "/" << num(mean(Regime::kPromo, true));
    for (Regime r : {Regime::kPromoI, Regime::kPromoF, Regime::kPromoIF, Regime::kPromoM, Regime::kPromoT,
                     Regime::kPretrain, Regime::kFinetune}) {
      const bool variant = r != Regime::kPretrain && r != Regime::kFinetune;
      const bool beats = mean(Regime::kPromo, false) > mean(r, false) && mean(Regime::kPromo, true) > mean(r, true);
      if (variant) pass = pass && beats;
      d << ", " << to_string(r) << " " << num(mean(r, false)) << "/" << num(mean(r, true))
        << (variant ? (beats ? "" : " (not below PROMO)") : "");
    }
    const bool budget = max_pretrain < kPretrainSeconds && max_tune < kTuneSeconds && ablation_s < kAblationSeconds;
    d << "; runtime pretrain max " << num(max_pretrain, 1) << " s (600), PROMO tune max " << num(max_tune, 1)
      << " s (300), matrix " << num(ablation_s, 1) << " s (2700)";
    report(6, pass && budget, d.str());
  }

  {  // 7
    const auto t0 = Clock::now();
    const std::uint64_t seed = config.ablation_seeds.front();
    const auto pairs = sample_pinnacle_pairs(*store1, data.split.train, config.retention_pairs, seed);
    RetentionOptions ro;
    ro.schedule = config.retention_schedule;
    ro.batch_size = config.retention_batch_size;
    PromptRetentionRegime promo(*bb1, *store1, data.split, data.partition, *promo1,
                                config.tune_config(PromptVariant::kPromo));
    const auto pr = memory_retention(promo, "PROMO", pairs, data.split, ro, seed);
    AdamOptions fa;
    fa.learning_rate = config.finetune_lr;
    FinetuneRetentionRegime finetune(*finetune1, data.split, fa);
    const auto fr = memory_retention(finetune, "FINETUNE", pairs, data.split, ro, seed);
    const double s = since(t0);
    bool pass = pr.size() == fr.size() && !pr.empty() && s < kRetentionSeconds;
    std::ostringstream d;
    d << pairs.size() << " pinnacle pairs;";
    for (std::size_t j = 0; j < std::min(pr.size(), fr.size()); ++j) {
      pass = pass && pr[j].rate >= fr[j].rate;
      d << " @" << pr[j].injected << " PROMO " << num(pr[j].rate) << " vs FINETUNE " << num(fr[j].rate) << ";";
    }
    d << " " << num(s, 1) << " s (budget 600 s)";
    report(7, pass, d.str());
  }

  {  // 8
    const auto t0 = Clock::now();
    const std::uint64_t seed = config.ablation_seeds.front();
    RunConfig c0 = config;
    c0.lambda2 = 0.0;
    const PromptState promo0 =
        tune(*bb1, *store1, data.split, data.partition, c0.tune_config(PromptVariant::kPromo), seed).state;
    const HistogramSamples samples =
        sample_histogram_pairs(data.split, data.partition, config.histogram_samples, seed);
    const Eigen::MatrixXd feedback = feedback_embeddings(bb1->params(), data.split);
    auto overlap = [&](PromptState state) {
      PromptModel model(*bb1, *store1, data.partition, state, feedback);
      return score_histogram(prompt_pair_probability(model, data.split), samples, config.histogram_bins);
    };
    const ScoreHistograms with = overlap(*promo1), without = overlap(promo0);
    const double s = since(t0);
    report(8, with.overlap_cold_pos_warm_neg < without.overlap_cold_pos_warm_neg && s < kHistogramSeconds,
           "cold-positive vs warm-negative overlap " + num(with.overlap_cold_pos_warm_neg) + " with lambda2=1, " +
               num(without.overlap_cold_pos_warm_neg) + " with lambda2=0 (" +
               std::to_string(samples.cold_pos.size()) + "/" + std::to_string(samples.warm_neg.size()) +
               " samples, " + std::to_string(config.histogram_bins) + " bins); " + num(s, 1) +
               " s (budget 900 s)");
  }

  {  // 9
    const fs::path root = fs::temp_directory_path() / "promo_acceptance_repro";
    fs::remove_all(root);
    const fs::path conf = fs::path(PROMO_SOURCE_DIR) / "configs" / "ml100k.conf";
    std::ostringstream log;
    bool ok = true;
    for (const char* name : {"run1", "run2"}) {
      cli::CommonOptions common;
      common.config = conf;
      common.out = root / name;
      common.overrides = {"data.path=" + (fs::path(PROMO_DATA_DIR) / "ml-100k" / "u.data").string(),
                          "data.item_features=" + (fs::path(PROMO_DATA_DIR) / "ml-100k" / "u.item").string()};
      ok = ok && cli::cmd_pretrain(common, log) == cli::kOk;
      ok = ok && cli::cmd_tune(common, cli::TuneOptions{}, log) == cli::kOk;
      ok = ok && cli::cmd_evaluate(common, cli::EvaluateOptions{}, log) == cli::kOk;
    }
    std::vector<std::string> differ;
    int compared = 0;
    for (const char* f : {"backbone.ckpt", "prompt_store.ckpt", "prompts.ckpt", "metrics.txt", "metrics.json",
                          "histogram.txt", "pretrain_log.txt", "tune_log.txt", "config.txt"}) {
      ++compared;
      const std::string a = slurp(root / "run1" / f), b = slurp(root / "run2" / f);
      if (a.empty() || a != b) differ.push_back(f);
    }
    ++compared;
    if (manifest_without_timings(root / "run1" / "manifest.txt") !=
        manifest_without_timings(root / "run2" / "manifest.txt")) {
      differ.push_back("manifest.txt");
    }
    std::string detail = ok ? "" : "a CLI stage failed: " + log.str() + "; ";
    detail += std::to_string(compared - static_cast<int>(differ.size())) + "/" + std::to_string(compared) +
              " artifacts byte-identical across two pretrain+tune+evaluate runs (manifest compared without timings)";
    for (const auto& f : differ) detail += "; differs: " + f;
    report(9, ok && differ.empty(), detail);
    fs::remove_all(root);
  }

  std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " criteria FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
