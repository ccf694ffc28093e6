#include "cli_commands.hpp"

#include "promo/backbone.hpp"
#include "promo/checkpoint.hpp"
#include "promo/config.hpp"
#include "promo/evaluator.hpp"
#include "promo/prompt_generator.hpp"
#include "promo/prompt_tuner.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace promo::cli {
namespace {

struct Failure : std::runtime_error {
  Failure(int c, const std::string& m) : std::runtime_error(m), code(c) {}
  int code;
};

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

RunConfig resolve_config(const CommonOptions& common) {
  if (common.config.empty()) throw ConfigError("--config", "a config file is required");
  RunConfig c = load_config(common.config);
  for (const auto& kv : common.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError(kv, "override must be key=value");
    set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1), fs::current_path());
  }
  if (common.seed) c.seed = *common.seed;
  if (common.out) c.out_dir = *common.out;
  validate(c);
  if (!fs::is_regular_file(c.data_path)) {
    throw ConfigError("data.path", "cannot read dataset file " + c.data_path.string());
  }
  if (!c.item_features_path.empty() && !fs::is_regular_file(c.item_features_path)) {
    throw ConfigError("data.item_features",
                      "cannot read item feature file " + c.item_features_path.string());
  }
  fs::create_directories(c.out_dir);
  return c;
}

std::string write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  out.close();
  return sha256_hex(text);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

FrozenBackbone load_backbone(const fs::path& path) {
  if (!fs::is_regular_file(path)) {
    throw Failure(kInvalidInput, "backbone checkpoint not found: " + path.string());
  }
  try {
    return FrozenBackbone::from_checkpoint(Checkpoint::load(path));
  } catch (const std::exception& e) {
    throw Failure(kBadBackbone, "backbone checkpoint " + path.string() + " does not verify: " + e.what());
  }
}

// Inputs inside the output directory are recorded relative to it so run
// directories can be moved and compared.
std::string manifest_name(const fs::path& file, const fs::path& out_dir) {
  const fs::path abs = fs::absolute(file).lexically_normal();
  const fs::path rel = abs.lexically_relative(fs::absolute(out_dir).lexically_normal());
  if (!rel.empty() && *rel.begin() != "..") return rel.string();
  return abs.string();
}

Manifest start_manifest(const std::string& command, const RunConfig& c) {
  Manifest m;
  m.command = command;
  m.config_digest = c.digest();
  m.seed = c.seed;
  return m;
}

void add_report_metrics(Manifest& m, const MetricsReport& r, const std::string& prefix = "") {
  for (const char* part : {"cold", "warm", "all"}) {
    for (int k : r.ks) {
      const auto& p = r.partition(part);
      m.metrics.emplace_back(prefix + part + ".hitrate@" + std::to_string(k), fmt(p.hitrate.at(k)));
      m.metrics.emplace_back(prefix + part + ".ndcg@" + std::to_string(k), fmt(p.ndcg.at(k)));
    }
  }
}

std::string pretrain_log(const std::vector<TrainEpoch>& history) {
  std::string out = "epoch, mean_loss, val_H@10\n";
  for (const auto& e : history) {
    out += std::to_string(e.epoch) + ", " + fmt(e.mean_loss) + ", " + fmt(e.val_hitrate10) + "\n";
  }
  return out;
}

std::string tune_log(const std::vector<TuneEpoch>& history) {
  std::string out = "epoch, L_rec, L_pfpe, L_pape, total, val_H@10\n";
  for (const auto& e : history) out += format_tune_log(e) + "\n";
  return out;
}

const ItemFeatures* features_for(PromptVariant v, const ExperimentData& data) {
  if (!uses_features(v)) return nullptr;
  if (!data.has_features) {
    throw ConfigError("data.item_features", to_string(v) + " needs item features");
  }
  return &data.features;
}

PretrainResult run_pretrain(const RunConfig& c, const ExperimentData& data, std::uint64_t seed,
                            std::ostream& log) {
  PretrainOptions o = c.pretrain_options();
  o.on_epoch = [&](const TrainEpoch& e) {
    log << "pretrain epoch " << e.epoch << " loss " << e.mean_loss << " val_H@10 "
        << e.val_hitrate10 << "\n";
  };
  return pretrain(data.split, c.backbone_config(), o, seed);
}

TuneResult run_tune(const RunConfig& c, const ExperimentData& data, const FrozenBackbone& bb,
                    const PromptStore& store, PromptVariant v, std::ostream& log) {
  TuneConfig tc = c.tune_config(v);
  tc.features = features_for(v, data);
  return tune(bb, store, data.split, data.partition, tc, c.seed,
              [&](const TuneEpoch& e) { log << "tune " << format_tune_log(e) << "\n"; });
}

PretrainResult run_finetune(const RunConfig& c, const ExperimentData& data,
                            const FrozenBackbone& bb, std::uint64_t seed) {
  PretrainOptions o = c.pretrain_options();
  o.adam.learning_rate = c.finetune_lr;
  o.max_epochs = c.finetune_max_epochs;
  o.patience = c.finetune_patience;
  o.cold_only = &data.partition;
  return continue_training(bb.params(), data.split, o, seed);
}

template <typename F>
int guarded(std::ostream& log, F&& body) {
  try {
    return body();
  } catch (const Failure& e) {
    log << "error: " << e.what() << "\n";
    return e.code;
  } catch (const ConfigError& e) {
    log << "error: invalid configuration: " << e.what() << "\n";
    return kInvalidInput;
  } catch (const DataError& e) {
    log << "error: dataset: " << e.what() << "\n";
    return kInvalidInput;
  } catch (const DivergenceError& e) {
    log << "error: training diverged: " << e.what() << "\n";
    return kDiverged;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace

std::string Manifest::text() const {
  std::string out;
  out += std::string("tool_version ") + kToolVersion + "\n";
  out += "command " + command + "\n";
  out += "config_digest " + config_digest + "\n";
  out += "seed " + std::to_string(seed) + "\n";
  for (const auto& [name, sha] : artifacts) out += "artifact " + name + " " + sha + "\n";
  for (const auto& [name, value] : metrics) out += "metric " + name + " " + value + "\n";
  for (const auto& [name, secs] : timings) out += "timing " + name + " " + fmt(secs) + "\n";
  return out;
}

Manifest read_manifest(const fs::path& path) {
  Manifest m;
  std::istringstream in(read_text(path));
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key, a, b;
    ls >> key >> a;
    if (key == "command") {
      m.command = a;
    } else if (key == "config_digest") {
      m.config_digest = a;
    } else if (key == "seed") {
      m.seed = std::stoull(a);
    } else if (key == "artifact") {
      ls >> b;
      m.artifacts.emplace_back(a, b);
    } else if (key == "metric") {
      ls >> b;
      m.metrics.emplace_back(a, b);
    } else if (key == "timing") {
      ls >> b;
      m.timings.emplace_back(a, std::stod(b));
    }
  }
  return m;
}

std::vector<std::string> verify_manifest(const fs::path& path) {
  std::vector<std::string> problems;
  const Manifest m = read_manifest(path);
  for (const auto& [name, sha] : m.artifacts) {
    fs::path p(name);
    if (p.is_relative()) p = path.parent_path() / p;
    if (!fs::is_regular_file(p)) {
      problems.push_back(name + ": missing");
    } else if (sha256_file(p) != sha) {
      problems.push_back(name + ": checksum mismatch");
    }
  }
  return problems;
}

int cmd_pretrain(const CommonOptions& common, std::ostream& log) {
  return guarded(log, [&] {
    const RunConfig c = resolve_config(common);
    Manifest m = start_manifest("pretrain", c);
    auto t0 = Clock::now();
    const ExperimentData data = load_experiment(c);
    m.timings.emplace_back("load", since(t0));
    t0 = Clock::now();
    PretrainResult r = run_pretrain(c, data, c.seed, log);
    m.timings.emplace_back("pretrain", since(t0));
    const FrozenBackbone bb = freeze(std::move(r.params));
    m.artifacts.emplace_back("backbone.ckpt", bb.to_checkpoint().save(c.out_dir / "backbone.ckpt"));
    m.artifacts.emplace_back("pretrain_log.txt",
                             write_text(c.out_dir / "pretrain_log.txt", pretrain_log(r.history)));
    m.artifacts.emplace_back("config.txt", write_text(c.out_dir / "config.txt", c.canonical()));
    m.metrics.emplace_back("best_epoch", std::to_string(r.best_epoch));
    m.metrics.emplace_back("best_val_hitrate@10", fmt(r.best_val_hitrate10));
    m.metrics.emplace_back("backbone_parameters", std::to_string(bb.params().parameter_count()));
    m.metrics.emplace_back("backbone_checksum", bb.checksum());
    write_text(c.out_dir / "manifest.txt", m.text());
    log << "wrote " << (c.out_dir / "backbone.ckpt").string() << "\n";
    return kOk;
  });
}

int cmd_tune(const CommonOptions& common, const TuneOptions& options, std::ostream& log) {
  return guarded(log, [&] {
    const RunConfig c = resolve_config(common);
    PromptVariant v;
    try {
      v = parse_prompt_variant(options.variant);
    } catch (const std::exception& e) {
      throw ConfigError("--variant", e.what());
    }
    const fs::path bb_path = options.backbone.empty() ? c.out_dir / "backbone.ckpt" : options.backbone;
    Manifest m = start_manifest("tune", c);
    const FrozenBackbone bb = load_backbone(bb_path);
    auto t0 = Clock::now();
    const ExperimentData data = load_experiment(c);
    const PromptStore store = build_prompt_store(data.partition, data.split.train, bb,
                                                 c.prompt_store_config(), c.seed);
    m.timings.emplace_back("prompt_store", since(t0));
    t0 = Clock::now();
    TuneResult r = run_tune(c, data, bb, store, v, log);
    m.timings.emplace_back("tune", since(t0));
    if (!bb.verify()) throw std::logic_error("backbone changed during tuning");

    const ParameterRatio ratio = parameter_ratio(r.state, bb.params());
    m.artifacts.emplace_back(manifest_name(bb_path, c.out_dir), sha256_file(bb_path));
    m.artifacts.emplace_back("prompt_store.ckpt",
                             store.to_checkpoint().save(c.out_dir / "prompt_store.ckpt"));
    m.artifacts.emplace_back("prompts.ckpt", r.state.to_checkpoint().save(c.out_dir / "prompts.ckpt"));
    m.artifacts.emplace_back("tune_log.txt", write_text(c.out_dir / "tune_log.txt", tune_log(r.history)));
    m.metrics.emplace_back("variant", to_string(v));
    m.metrics.emplace_back("best_epoch", std::to_string(r.best_epoch));
    m.metrics.emplace_back("best_val_cold_hitrate@10", fmt(r.best_val_hitrate10));
    m.metrics.emplace_back("backbone_checksum", bb.checksum());
    m.metrics.emplace_back("prompt_state_checksum", r.state.checksum());
    m.metrics.emplace_back("tunable_parameters_per_item", std::to_string(ratio.per_item_tunable));
    m.metrics.emplace_back("tunable_parameters_total", std::to_string(ratio.total_tunable));
    m.metrics.emplace_back("parameter_ratio_per_item", fmt(ratio.per_item_ratio));
    m.metrics.emplace_back("parameter_ratio_aggregate", fmt(ratio.aggregate_ratio));
    write_text(c.out_dir / "manifest.txt", m.text());
    log << "wrote " << (c.out_dir / "prompts.ckpt").string() << "\n";
    return kOk;
  });
}

int cmd_evaluate(const CommonOptions& common, const EvaluateOptions& options, std::ostream& log) {
  return guarded(log, [&] {
    const RunConfig c = resolve_config(common);
    Regime regime;
    try {
      regime = parse_regime(options.regime);
    } catch (const std::exception& e) {
      throw Failure(kRegimeMismatch, e.what());
    }
    const fs::path bb_path = options.backbone.empty() ? c.out_dir / "backbone.ckpt" : options.backbone;
    Manifest m = start_manifest("evaluate", c);
    const FrozenBackbone bb = load_backbone(bb_path);
    m.artifacts.emplace_back(manifest_name(bb_path, c.out_dir), sha256_file(bb_path));
    const auto t0 = Clock::now();
    const ExperimentData data = load_experiment(c);
    const EvalCandidates test = sample_eval_negatives(data.split, c.eval_negatives, c.seed, EvalStage::kTest);
    const HistogramSamples samples =
        sample_histogram_pairs(data.split, data.partition, c.histogram_samples, c.seed);

    MetricsReport report;
    ScoreHistograms hist;
    if (auto v = prompt_variant(regime)) {
      const fs::path pr_path = options.prompts.empty() ? c.out_dir / "prompts.ckpt" : options.prompts;
      const fs::path store_path = pr_path.parent_path() / "prompt_store.ckpt";
      if (!fs::is_regular_file(pr_path) || !fs::is_regular_file(store_path)) {
        throw Failure(kRegimeMismatch, to_string(regime) + " needs a prompt state (" + pr_path.string() +
                                           ") and its prompt store (" + store_path.string() + ")");
      }
      PromptState state;
      PromptStore store;
      try {
        state = PromptState::from_checkpoint(Checkpoint::load(pr_path));
        store = PromptStore::from_checkpoint(Checkpoint::load(store_path));
      } catch (const std::exception& e) {
        throw Failure(kRegimeMismatch, std::string("prompt checkpoint does not load: ") + e.what());
      }
      if (state.variant != *v) {
        throw Failure(kRegimeMismatch, "prompt state was tuned as " + to_string(state.variant) +
                                           ", not " + to_string(regime));
      }
      std::optional<PromptModel> model;
      try {
        model.emplace(bb, store, data.partition, state,
                      feedback_embeddings(bb.params(), data.split), features_for(*v, data));
      } catch (const std::invalid_argument& e) {
        throw Failure(kRegimeMismatch, e.what());
      }
      const Eigen::MatrixXd users = stage_user_contexts(bb.params(), data.split, true);
      PromptScorer scorer(*model, &users);
      report = evaluate(scorer, data.split, test, &data.partition, c.eval_ks);
      hist = score_histogram(prompt_pair_probability(*model, data.split), samples, c.histogram_bins);
      m.artifacts.emplace_back(manifest_name(pr_path, c.out_dir), sha256_file(pr_path));
      m.artifacts.emplace_back(manifest_name(store_path, c.out_dir),
                               sha256_file(store_path));
      m.metrics.emplace_back("prompt_state_checksum", state.checksum());
    } else {
      BackboneScorer scorer(bb.params());
      report = evaluate(scorer, data.split, test, &data.partition, c.eval_ks);
      hist = score_histogram(backbone_pair_probability(bb.params(), data.split), samples,
                             c.histogram_bins);
    }
    report.regime = to_string(regime);
    report.config_digest = c.digest();
    m.timings.emplace_back("evaluate", since(t0));

    const std::string text = format_metrics(report);
    const auto parsed = parse_metrics(text);
    if (parsed.size() != 1 || !same_report(parsed.front(), report)) {
      throw std::logic_error("metrics report does not round-trip through its text form");
    }
    m.artifacts.emplace_back("metrics.txt", write_text(c.out_dir / "metrics.txt", text));
    m.artifacts.emplace_back("metrics.json",
                             write_text(c.out_dir / "metrics.json", metrics_json({&report, 1})));
    m.artifacts.emplace_back("histogram.txt",
                             write_text(c.out_dir / "histogram.txt", format_histograms(hist)));
    m.metrics.emplace_back("regime", report.regime);
    m.metrics.emplace_back("backbone_checksum", bb.checksum());
    add_report_metrics(m, report);
    m.metrics.emplace_back("overlap_cold_pos_warm_neg", fmt(hist.overlap_cold_pos_warm_neg));
    write_text(c.out_dir / "manifest.txt", m.text());
    log << text;
    return kOk;
  });
}

int cmd_ablate(const CommonOptions& common, const AblateOptions& options, std::ostream& log) {
  return guarded(log, [&] {
    const RunConfig c = resolve_config(common);
    std::vector<Regime> regimes;
    try {
      for (const auto& name : options.regimes) regimes.push_back(parse_regime(name));
    } catch (const std::exception& e) {
      throw ConfigError("--regimes", e.what());
    }
    if (regimes.empty()) regimes = all_regimes();
    const std::vector<std::uint64_t> seeds =
        common.seed ? std::vector<std::uint64_t>{*common.seed} : c.ablation_seeds;

    Manifest m = start_manifest("ablate", c);
    const ExperimentData data = load_experiment(c);
    std::string metrics_text;
    std::vector<MetricsReport> reports;
    std::map<std::string, std::vector<std::pair<double, double>>> cold10;  // regime -> (H, N) per seed
    for (std::uint64_t seed : seeds) {
      RunConfig cs = c;
      cs.seed = seed;
      auto t0 = Clock::now();
      const FrozenBackbone bb = freeze(run_pretrain(cs, data, seed, log).params);
      m.timings.emplace_back("pretrain.seed" + std::to_string(seed), since(t0));
      const std::string bb_name = "backbone_seed" + std::to_string(seed) + ".ckpt";
      m.artifacts.emplace_back(bb_name, bb.to_checkpoint().save(c.out_dir / bb_name));
      const PromptStore store =
          build_prompt_store(data.partition, data.split.train, bb, cs.prompt_store_config(), seed);
      const EvalCandidates test = sample_eval_negatives(data.split, c.eval_negatives, seed, EvalStage::kTest);
      for (Regime r : regimes) {
        if (auto v = prompt_variant(r)) features_for(*v, data);
        RegimeRun run = run_ablation(r, cs, data, bb, store, test, seed);
        if (!bb.verify()) throw std::logic_error("backbone changed during " + to_string(r));
        run.report.regime = to_string(r) + " seed=" + std::to_string(seed);
        const auto& cold = run.report.cold;
        log << run.report.regime << " cold H@10 " << cold.hitrate.at(10) << " N@10 "
            << cold.ndcg.at(10) << " best_epoch " << run.best_epoch << " (" << run.seconds << " s)\n";
        cold10[to_string(r)].emplace_back(cold.hitrate.at(10), cold.ndcg.at(10));
        m.timings.emplace_back(to_string(r) + ".seed" + std::to_string(seed), run.seconds);
        metrics_text += format_metrics(run.report);
        reports.push_back(std::move(run.report));
      }
    }
    std::string summary = "regime, metric";
    for (auto s : seeds) summary += ", seed" + std::to_string(s);
    summary += ", mean\n";
    for (Regime r : regimes) {
      const auto& xs = cold10[to_string(r)];
      for (int which = 0; which < 2; ++which) {
        summary += to_string(r) + (which == 0 ? ", cold_hitrate@10" : ", cold_ndcg@10");
        double mean = 0.0;
        for (const auto& x : xs) {
          const double v = which == 0 ? x.first : x.second;
          summary += ", " + fmt(v);
          mean += v / static_cast<double>(xs.size());
        }
        summary += ", " + fmt(mean) + "\n";
        m.metrics.emplace_back(to_string(r) + (which == 0 ? ".cold.hitrate@10.mean" : ".cold.ndcg@10.mean"),
                               fmt(mean));
      }
    }
    m.artifacts.emplace_back("metrics.txt", write_text(c.out_dir / "metrics.txt", metrics_text));
    m.artifacts.emplace_back("metrics.json", write_text(c.out_dir / "metrics.json", metrics_json(reports)));
    m.artifacts.emplace_back("ablation.txt", write_text(c.out_dir / "ablation.txt", summary));
    write_text(c.out_dir / "manifest.txt", m.text());
    log << summary;
    return kOk;
  });
}

int cmd_retention(const CommonOptions& common, const RetentionCliOptions& options,
                  std::ostream& log) {
  return guarded(log, [&] {
    const RunConfig c = resolve_config(common);
    Manifest m = start_manifest("retention", c);
    const ExperimentData data = load_experiment(c);
    fs::path bb_path = options.backbone.empty() ? c.out_dir / "backbone.ckpt" : options.backbone;
    auto t0 = Clock::now();
    FrozenBackbone bb;
    if (options.backbone.empty() && !fs::exists(bb_path)) {
      bb = freeze(run_pretrain(c, data, c.seed, log).params);
      bb.to_checkpoint().save(bb_path);
      m.timings.emplace_back("pretrain", since(t0));
    } else {
      bb = load_backbone(bb_path);
    }
    m.artifacts.emplace_back(manifest_name(bb_path, c.out_dir), sha256_file(bb_path));

    const PromptStore store =
        build_prompt_store(data.partition, data.split.train, bb, c.prompt_store_config(), c.seed);
    t0 = Clock::now();
    TuneResult tuned = run_tune(c, data, bb, store, PromptVariant::kPromo, log);
    m.timings.emplace_back("tune", since(t0));
    t0 = Clock::now();
    PretrainResult ft = run_finetune(c, data, bb, c.seed);
    m.timings.emplace_back("finetune", since(t0));

    const auto pairs = sample_pinnacle_pairs(store, data.split.train, c.retention_pairs, c.seed);
    RetentionOptions ro;
    ro.schedule = c.retention_schedule;
    ro.batch_size = c.retention_batch_size;
    t0 = Clock::now();
    PromptRetentionRegime promo(bb, store, data.split, data.partition, tuned.state,
                                c.tune_config(PromptVariant::kPromo));
    auto records = memory_retention(promo, "PROMO", pairs, data.split, ro, c.seed);
    AdamOptions fa;
    fa.learning_rate = c.finetune_lr;
    FinetuneRetentionRegime finetune(std::move(ft.params), data.split, fa);
    auto ft_records = memory_retention(finetune, "FINETUNE", pairs, data.split, ro, c.seed);
    m.timings.emplace_back("retention", since(t0));
    if (!bb.verify()) throw std::logic_error("backbone changed during the retention run");
    records.insert(records.end(), ft_records.begin(), ft_records.end());

    const std::string text = format_retention(records);
    m.artifacts.emplace_back("retention.txt", write_text(c.out_dir / "retention.txt", text));
    for (const auto& r : records) {
      m.metrics.emplace_back(r.regime + ".rate@" + std::to_string(r.injected), fmt(r.rate));
    }
    write_text(c.out_dir / "manifest.txt", m.text());
    log << text;
    return kOk;
  });
}

}  // namespace promo::cli
