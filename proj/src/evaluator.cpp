#include "promo/evaluator.hpp"
#include "flush_denormals.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace promo {
namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) {
    const auto b = f.find_first_not_of(' ');
    const auto e = f.find_last_not_of(" \r");
    out.push_back(b == std::string::npos ? "" : f.substr(b, e - b + 1));
  }
  return out;
}

}  // namespace

// ---- retention ----

PromptRetentionRegime::PromptRetentionRegime(const FrozenBackbone& backbone,
                                             const PromptStore& store, const DatasetSplit& split,
                                             const ItemPartition& partition, PromptState state,
                                             const TuneConfig& config)
    : state_(std::move(state)),
      contexts_(stage_user_contexts(backbone.params(), split, false)),
      model_(backbone, store, partition, state_, contexts_, config.features),
      adam_(make_prompt_optimizer(state_, config)) {
  if (!state_.adam_m.empty()) adam_.restore(state_.steps, state_.adam_m, state_.adam_v);
  items_ = model_.final_items();
}

double PromptRetentionRegime::probability(UserId user, ItemId item) const {
  return score_final_probability(model_.final_user(contexts_.row(user)), items_.row(item));
}

void PromptRetentionRegime::train(std::span<const LabeledPair> batch) {
  const FlushDenormals flush;
  std::vector<TrainSample> samples;
  samples.reserve(batch.size());
  for (const auto& p : batch) samples.push_back({p.user, p.item, p.label, p.user});
  model_.step(adam_, samples, contexts_);
  items_ = model_.final_items();
}

FinetuneRetentionRegime::FinetuneRetentionRegime(BackboneParams params, const DatasetSplit& split,
                                                 AdamOptions adam)
    : params_(std::move(params)), split_(split), adam_(params_.parameters(), adam) {}

void FinetuneRetentionRegime::refresh() const {
  if (!stale_) return;
  users_ = stage_user_contexts(params_, split_, false);
  items_ = encode_all_items(params_);
  stale_ = false;
}

double FinetuneRetentionRegime::probability(UserId user, ItemId item) const {
  refresh();
  return predict_ctr(users_.row(user), items_.row(item), params_.config.temperature);
}

void FinetuneRetentionRegime::train(std::span<const LabeledPair> batch) {
  const FlushDenormals flush;
  backbone_pair_step(params_, adam_, split_, batch);
  stale_ = true;
}

double retention_rate(std::span<const std::uint8_t> correct_t0,
                      std::span<const std::uint8_t> correct_t1) {
  if (correct_t0.size() != correct_t1.size()) {
    throw std::invalid_argument("retention_rate: flag vectors differ in length");
  }
  std::size_t before = 0, kept = 0;
  for (std::size_t j = 0; j < correct_t0.size(); ++j) {
    if (!correct_t0[j]) continue;
    ++before;
    if (correct_t1[j]) ++kept;
  }
  if (before == 0) throw std::domain_error("retention rate undefined: no pair is correct at t0");
  return static_cast<double>(kept) / static_cast<double>(before);
}

std::vector<RetentionPair> sample_pinnacle_pairs(const PromptStore& store, const InteractionLog& train,
                                                 std::int32_t n, std::uint64_t seed) {
  const auto positives = positive_users_by_item(train);
  std::vector<RetentionPair> pool;
  for (const auto& [item, entry] : store.entries) {
    const auto& own = positives.at(static_cast<std::size_t>(item));
    for (UserId u : entry.pinnacle.positives) {
      if (std::binary_search(own.begin(), own.end(), u)) pool.push_back({u, item});
    }
  }
  std::mt19937_64 rng(seed ^ 0x726574656eULL);
  std::shuffle(pool.begin(), pool.end(), rng);
  if (pool.size() > static_cast<std::size_t>(std::max(0, n))) pool.resize(static_cast<std::size_t>(n));
  std::sort(pool.begin(), pool.end(), [](const RetentionPair& a, const RetentionPair& b) {
    return a.item != b.item ? a.item < b.item : a.user < b.user;
  });
  return pool;
}

std::vector<RetentionRecord> memory_retention(RetentionRegime& regime, const std::string& label,
                                              std::span<const RetentionPair> pairs,
                                              const DatasetSplit& split,
                                              const RetentionOptions& options, std::uint64_t seed) {
  if (pairs.empty()) throw std::invalid_argument("memory_retention: no pinnacle pairs");
  if (options.batch_size < 1) throw std::invalid_argument("memory_retention: batch_size < 1");
  std::vector<RetentionPair> sample(pairs.begin(), pairs.end());

  auto flags = [&]() {
    std::vector<std::uint8_t> out(sample.size());
    for (std::size_t j = 0; j < sample.size(); ++j) {
      out[j] = regime.probability(sample[j].user, sample[j].item) > options.threshold ? 1 : 0;
    }
    return out;
  };
  const std::vector<std::uint8_t> t0 = flags();
  if (std::find(t0.begin(), t0.end(), 1) == t0.end()) {
    throw std::domain_error("memory_retention: no pinnacle pair is correct at t0 for " + label);
  }

  std::vector<ItemId> items;
  for (const auto& p : sample) items.push_back(p.item);
  std::sort(items.begin(), items.end());
  items.erase(std::unique(items.begin(), items.end()), items.end());

  // Replay pool: training positives on the sampled items, most recent first.
  std::vector<LabeledPair> replay;
  const auto& tr = split.train.interactions;
  for (auto it = tr.rbegin(); it != tr.rend(); ++it) {
    if (it->label == 1 && std::binary_search(items.begin(), items.end(), it->item)) {
      replay.push_back({it->user, it->item, 1});
    }
  }
  if (replay.empty()) throw std::invalid_argument("memory_retention: no positives to replay");

  std::mt19937_64 rng(seed ^ 0x696e6a656374ULL);
  std::uniform_int_distribution<std::size_t> pick_item(0, items.size() - 1);
  std::uniform_int_distribution<UserId> pick_user(0, split.user_count() - 1);
  std::set<std::pair<UserId, ItemId>> injected_pairs;
  auto fresh_negative = [&]() {
    for (int attempt = 0; attempt < 1000000; ++attempt) {
      const ItemId i = items[pick_item(rng)];
      const UserId u = pick_user(rng);
      const auto& seen = split.interacted.at(static_cast<std::size_t>(u));
      if (std::binary_search(seen.begin(), seen.end(), i)) continue;
      if (!injected_pairs.insert({u, i}).second) continue;
      return LabeledPair{u, i, 0};
    }
    throw std::runtime_error("memory_retention: ran out of fresh negatives");
  };

  std::vector<RetentionRecord> records;
  std::int32_t injected = 0;
  std::size_t replay_next = 0;
  for (std::int32_t target : options.schedule) {
    if (target < injected) throw std::invalid_argument("memory_retention: schedule must be cumulative");
    while (injected < target) {
      const std::int32_t n = std::min(options.batch_size, target - injected);
      std::vector<LabeledPair> batch;
      for (std::int32_t j = 0; j < n; ++j) {
        batch.push_back(fresh_negative());
        batch.push_back(replay[replay_next]);
        replay_next = (replay_next + 1) % replay.size();
      }
      regime.train(batch);
      injected += n;
    }
    RetentionRecord r;
    r.regime = label;
    r.pairs = sample;
    r.correct_t0 = t0;
    r.correct_t1 = flags();
    r.injected = injected;
    r.rate = retention_rate(r.correct_t0, r.correct_t1);
    records.push_back(std::move(r));
  }
  return records;
}

// ---- histograms ----

double Histogram::density(std::size_t bin) const {
  return total == 0 ? 0.0 : static_cast<double>(counts.at(bin)) / static_cast<double>(total);
}

Histogram make_histogram(std::span<const double> values, std::int32_t bins) {
  if (bins < 1) throw std::invalid_argument("make_histogram: bins must be >= 1");
  Histogram h;
  h.bins = bins;
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  for (double v : values) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("make_histogram: value outside [0, 1]");
    const auto b = std::min<std::int64_t>(bins - 1, static_cast<std::int64_t>(std::floor(v * bins)));
    ++h.counts[static_cast<std::size_t>(b)];
    ++h.total;
  }
  return h;
}

double histogram_overlap(const Histogram& a, const Histogram& b) {
  if (a.bins != b.bins) throw std::invalid_argument("histogram_overlap: bin counts differ");
  double s = 0.0;
  for (std::size_t j = 0; j < static_cast<std::size_t>(a.bins); ++j) {
    s += std::min(a.density(j), b.density(j));
  }
  return s;
}

HistogramSamples sample_histogram_pairs(const DatasetSplit& split, const ItemPartition& partition,
                                        std::int32_t per_set, std::uint64_t seed) {
  HistogramSamples s;
  for (const auto* stage : {&split.validation, &split.test}) {
    const bool for_test = stage == &split.test;
    for (const auto& x : stage->interactions) {
      if (x.label == 1 && partition.cold(x.item)) s.cold_pos.push_back({x.user, x.item, for_test});
    }
  }
  if (s.cold_pos.empty()) throw std::invalid_argument("sample_histogram_pairs: no held-out cold positives");
  if (partition.cold_items.empty() || partition.warm_items.empty()) {
    throw std::invalid_argument("sample_histogram_pairs: need both cold and warm items");
  }
  std::mt19937_64 rng(seed ^ 0x68697374ULL);
  std::shuffle(s.cold_pos.begin(), s.cold_pos.end(), rng);
  if (s.cold_pos.size() > static_cast<std::size_t>(per_set)) s.cold_pos.resize(static_cast<std::size_t>(per_set));

  auto negatives = [&](const std::vector<ItemId>& pool) {
    std::vector<ScoredPair> out;
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (std::int32_t j = 0; j < per_set; ++j) {
      const UserId u = s.cold_pos[static_cast<std::size_t>(j) % s.cold_pos.size()].user;
      const auto& seen = split.interacted.at(static_cast<std::size_t>(u));
      ItemId i = pool[pick(rng)];
      for (int attempt = 0; std::binary_search(seen.begin(), seen.end(), i); ++attempt) {
        if (attempt > 100000) throw std::runtime_error("sample_histogram_pairs: no unseen item");
        i = pool[pick(rng)];
      }
      out.push_back({u, i, true});
    }
    return out;
  };
  s.cold_neg = negatives(partition.cold_items);
  s.warm_neg = negatives(partition.warm_items);
  return s;
}

PairProbability backbone_pair_probability(const BackboneParams& params, const DatasetSplit& split) {
  auto val = std::make_shared<Eigen::MatrixXd>(stage_user_contexts(params, split, false));
  auto test = std::make_shared<Eigen::MatrixXd>(stage_user_contexts(params, split, true));
  auto items = std::make_shared<Eigen::MatrixXd>(encode_all_items(params));
  const double tau = params.config.temperature;
  return [val, test, items, tau](const ScoredPair& p) {
    const auto& users = p.for_test ? *test : *val;
    return predict_ctr(users.row(p.user), items->row(p.item), tau);
  };
}

PairProbability prompt_pair_probability(const PromptModel& model, const DatasetSplit& split) {
  const auto& bp = model.backbone().params();
  auto val = std::make_shared<Eigen::MatrixXd>(stage_user_contexts(bp, split, false));
  auto test = std::make_shared<Eigen::MatrixXd>(stage_user_contexts(bp, split, true));
  auto items = std::make_shared<Eigen::MatrixXd>(model.final_items());
  return [&model, val, test, items](const ScoredPair& p) {
    const auto& users = p.for_test ? *test : *val;
    return score_final_probability(model.final_user(users.row(p.user)), items->row(p.item));
  };
}

ScoreHistograms score_histogram(const PairProbability& model, const HistogramSamples& samples,
                                std::int32_t bins) {
  auto hist = [&](const std::vector<ScoredPair>& pairs) {
    if (pairs.empty()) throw std::invalid_argument("score_histogram: empty sample set");
    std::vector<double> p;
    p.reserve(pairs.size());
    for (const auto& x : pairs) p.push_back(model(x));
    return make_histogram(p, bins);
  };
  ScoreHistograms h;
  h.cold_pos = hist(samples.cold_pos);
  h.cold_neg = hist(samples.cold_neg);
  h.warm_neg = hist(samples.warm_neg);
  h.overlap_cold_pos_warm_neg = histogram_overlap(h.cold_pos, h.warm_neg);
  h.overlap_cold_pos_cold_neg = histogram_overlap(h.cold_pos, h.cold_neg);
  return h;
}

// ---- reports ----

std::string format_metrics(const MetricsReport& report) {
  std::string out = "# regime=" + report.regime + " digest=" + report.config_digest + "\n";
  for (const char* name : {"cold", "warm", "all"}) {
    const PartitionMetrics& p = report.partition(name);
    for (int k : report.ks) {
      const std::string n = std::to_string(p.count);
      const std::string head = report.regime + ", " + name + ", " + std::to_string(k) + ", ";
      out += head + "hitrate, " + fmt(p.hitrate.at(k)) + ", " + n + "\n";
      out += head + "ndcg, " + fmt(p.ndcg.at(k)) + ", " + n + "\n";
    }
  }
  return out;
}

std::vector<MetricsReport> parse_metrics(const std::string& text) {
  std::vector<MetricsReport> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("# regime=", 0) == 0) {
      MetricsReport r;
      const auto d = line.find(" digest=");
      if (d == std::string::npos) throw std::runtime_error("metrics: malformed header: " + line);
      r.regime = line.substr(9, d - 9);
      r.config_digest = line.substr(d + 8);
      out.push_back(std::move(r));
      continue;
    }
    if (line[0] == '#') continue;
    const auto f = split_fields(line);
    if (f.size() != 6 || out.empty()) throw std::runtime_error("metrics: malformed line: " + line);
    MetricsReport& r = out.back();
    if (f[0] != r.regime) throw std::runtime_error("metrics: regime changes without a header");
    PartitionMetrics& p = f[1] == "cold"   ? r.cold
                          : f[1] == "warm" ? r.warm
                          : f[1] == "all"  ? r.all
                                           : throw std::runtime_error("metrics: bad partition " + f[1]);
    const int k = std::stoi(f[2]);
    if (std::find(r.ks.begin(), r.ks.end(), k) == r.ks.end()) r.ks.push_back(k);
    const double v = std::stod(f[4]);
    if (f[3] == "hitrate") {
      p.hitrate[k] = v;
    } else if (f[3] == "ndcg") {
      p.ndcg[k] = v;
    } else {
      throw std::runtime_error("metrics: bad metric " + f[3]);
    }
    p.count = static_cast<std::size_t>(std::stoull(f[5]));
  }
  return out;
}

std::string metrics_json(std::span<const MetricsReport> reports) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : reports) {
    nlohmann::ordered_json j;
    j["regime"] = r.regime;
    j["config_digest"] = r.config_digest;
    for (const char* name : {"cold", "warm", "all"}) {
      const PartitionMetrics& p = r.partition(name);
      nlohmann::ordered_json pj;
      pj["n"] = p.count;
      for (int k : r.ks) {
        pj["hitrate@" + std::to_string(k)] = p.hitrate.at(k);
        pj["ndcg@" + std::to_string(k)] = p.ndcg.at(k);
      }
      j[name] = pj;
    }
    arr.push_back(j);
  }
  return arr.dump(2) + "\n";
}

bool same_report(const MetricsReport& a, const MetricsReport& b) {
  auto same = [](const PartitionMetrics& x, const PartitionMetrics& y) {
    return x.count == y.count && x.hitrate == y.hitrate && x.ndcg == y.ndcg;
  };
  return a.regime == b.regime && a.config_digest == b.config_digest && a.ks == b.ks &&
         same(a.cold, b.cold) && same(a.warm, b.warm) && same(a.all, b.all);
}

std::string format_histograms(const ScoreHistograms& h) {
  std::string out;
  out += "# overlap_cold_pos_warm_neg=" + fmt(h.overlap_cold_pos_warm_neg) + "\n";
  out += "# overlap_cold_pos_cold_neg=" + fmt(h.overlap_cold_pos_cold_neg) + "\n";
  out += "# samples cold_pos=" + std::to_string(h.cold_pos.total) +
         " cold_neg=" + std::to_string(h.cold_neg.total) +
         " warm_neg=" + std::to_string(h.warm_neg.total) + "\n";
  out += "bin_lo, bin_hi, cold_pos, cold_neg, warm_neg\n";
  const double w = 1.0 / h.cold_pos.bins;
  for (std::size_t j = 0; j < static_cast<std::size_t>(h.cold_pos.bins); ++j) {
    out += fmt(static_cast<double>(j) * w) + ", " + fmt(static_cast<double>(j + 1) * w) + ", " +
           fmt(h.cold_pos.density(j)) + ", " + fmt(h.cold_neg.density(j)) + ", " +
           fmt(h.warm_neg.density(j)) + "\n";
  }
  return out;
}

std::string format_retention(std::span<const RetentionRecord> records) {
  std::string out = "regime, injected, correct_t0, retained, rate\n";
  for (const auto& r : records) {
    std::size_t t0 = 0, kept = 0;
    for (std::size_t j = 0; j < r.correct_t0.size(); ++j) {
      t0 += r.correct_t0[j];
      kept += r.correct_t0[j] && r.correct_t1[j];
    }
    out += r.regime + ", " + std::to_string(r.injected) + ", " + std::to_string(t0) + ", " +
           std::to_string(kept) + ", " + fmt(r.rate) + "\n";
  }
  return out;
}

}  // namespace promo
