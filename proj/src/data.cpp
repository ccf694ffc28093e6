#include "promo/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace promo {
namespace {

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

template <typename T>
T parse_number(const std::string& text, const std::filesystem::path& path,
               std::size_t line_no, const char* field) {
  const std::string t = trim(text);
  T value{};
  if constexpr (std::is_floating_point_v<T>) {
    try {
      std::size_t used = 0;
      value = static_cast<T>(std::stod(t, &used));
      if (used != t.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": malformed " + field + " '" + t + "'");
    }
  } else {
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
    if (ec != std::errc() || ptr != t.data() + t.size()) {
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": malformed " + field + " '" + t + "'");
    }
  }
  return value;
}

struct RawRow {
  std::int64_t user;
  std::int64_t item;
  int label;
  std::int64_t timestamp;
  double stay_time;
  double interact_score;
  double rating;  // MovieLens only
};

std::vector<std::int64_t> sorted_unique(std::vector<std::int64_t> ids) {
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

std::int32_t dense_index(const std::vector<std::int64_t>& sorted, std::int64_t raw) {
  return static_cast<std::int32_t>(
      std::lower_bound(sorted.begin(), sorted.end(), raw) - sorted.begin());
}

void sort_by_time(std::vector<Interaction>& xs) {
  std::stable_sort(xs.begin(), xs.end(), [](const Interaction& a, const Interaction& b) {
    return a.timestamp < b.timestamp;
  });
}

}  // namespace

std::optional<ItemId> InteractionLog::dense_item(std::int64_t raw) const {
  auto it = std::lower_bound(raw_item_ids.begin(), raw_item_ids.end(), raw);
  if (it == raw_item_ids.end() || *it != raw) return std::nullopt;
  return static_cast<ItemId>(it - raw_item_ids.begin());
}

LogFormat parse_log_format(const std::string& name) {
  if (name == "movielens_tab") return LogFormat::kMovielensTab;
  if (name == "generic_csv") return LogFormat::kGenericCsv;
  throw DataError("unknown dataset format '" + name + "'");
}

std::string to_string(LogFormat format) {
  return format == LogFormat::kMovielensTab ? "movielens_tab" : "generic_csv";
}

InteractionLog load_interactions(const std::filesystem::path& path, LogFormat format,
                                 const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset file " + path.string());

  std::vector<RawRow> rows;
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (format == LogFormat::kMovielensTab) {
      auto f = split(line, '\t');
      if (f.size() != 4) {
        throw DataError(path.string() + ":" + std::to_string(line_no) +
                        ": expected 4 tab-separated fields, got " + std::to_string(f.size()));
      }
      RawRow r{};
      r.user = parse_number<std::int64_t>(f[0], path, line_no, "user");
      r.item = parse_number<std::int64_t>(f[1], path, line_no, "item");
      r.rating = parse_number<double>(f[2], path, line_no, "rating");
      r.timestamp = parse_number<std::int64_t>(f[3], path, line_no, "timestamp");
      if (r.rating < 1.0 || r.rating > 5.0) {
        throw DataError(path.string() + ":" + std::to_string(line_no) +
                        ": rating out of [1,5]");
      }
      rows.push_back(r);
    } else {
      if (!header_seen) {
        header_seen = true;
        std::string h = line;
        h.erase(std::remove_if(h.begin(), h.end(), ::isspace), h.end());
        if (h != "user,item,label,timestamp,stay_time,interact_score") {
          throw DataError(path.string() + ":" + std::to_string(line_no) +
                          ": expected header user,item,label,timestamp,stay_time,interact_score");
        }
        continue;
      }
      auto f = split(line, ',');
      if (f.size() != 6) {
        throw DataError(path.string() + ":" + std::to_string(line_no) +
                        ": expected 6 comma-separated fields, got " + std::to_string(f.size()));
      }
      RawRow r{};
      r.user = parse_number<std::int64_t>(f[0], path, line_no, "user");
      r.item = parse_number<std::int64_t>(f[1], path, line_no, "item");
      r.label = parse_number<int>(f[2], path, line_no, "label");
      r.timestamp = parse_number<std::int64_t>(f[3], path, line_no, "timestamp");
      r.stay_time = parse_number<double>(f[4], path, line_no, "stay_time");
      r.interact_score = parse_number<double>(f[5], path, line_no, "interact_score");
      if (r.label != 0 && r.label != 1) {
        throw DataError(path.string() + ":" + std::to_string(line_no) + ": label must be 0 or 1");
      }
      if (!(r.stay_time >= 0.0) || !(r.interact_score >= 0.0)) {
        throw DataError(path.string() + ":" + std::to_string(line_no) +
                        ": stay_time and interact_score must be nonnegative");
      }
      rows.push_back(r);
    }
  }
  if (rows.empty()) throw DataError("empty interaction log: " + path.string());

  InteractionLog log;
  {
    std::vector<std::int64_t> us, is;
    us.reserve(rows.size());
    is.reserve(rows.size());
    for (const auto& r : rows) {
      us.push_back(r.user);
      is.push_back(r.item);
    }
    log.raw_user_ids = sorted_unique(std::move(us));
    log.raw_item_ids = sorted_unique(std::move(is));
  }
  log.user_count = static_cast<std::int32_t>(log.raw_user_ids.size());
  log.item_count = static_cast<std::int32_t>(log.raw_item_ids.size());

  if (format == LogFormat::kMovielensTab) {
    // Surrogate engagement signals: stay_time is the rescaled rating, interact_score
    // is how far the rating sits above the user's own mean rating.
    std::vector<double> sum(log.user_count, 0.0);
    std::vector<int> cnt(log.user_count, 0);
    for (const auto& r : rows) {
      auto u = dense_index(log.raw_user_ids, r.user);
      sum[u] += r.rating;
      cnt[u] += 1;
    }
    for (auto& r : rows) {
      auto u = dense_index(log.raw_user_ids, r.user);
      double mean = sum[u] / cnt[u];
      r.label = r.rating >= options.positive_min_rating ? 1 : 0;
      r.stay_time = (r.rating - 1.0) / 4.0;
      r.interact_score = std::clamp(r.rating - mean, 0.0, 4.0) / 4.0;
    }
  }

  log.interactions.reserve(rows.size());
  for (const auto& r : rows) {
    Interaction x;
    x.user = dense_index(log.raw_user_ids, r.user);
    x.item = dense_index(log.raw_item_ids, r.item);
    x.label = r.label;
    x.timestamp = r.timestamp;
    x.stay_time = r.stay_time;
    x.interact_score = r.interact_score;
    log.interactions.push_back(x);
  }
  sort_by_time(log.interactions);
  return log;
}

ItemFeatures load_item_features(const std::filesystem::path& path, const InteractionLog& log) {
  static const char* kGenres[] = {
      "unknown", "Action",   "Adventure", "Animation", "Children's", "Comedy", "Crime",
      "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery",
      "Romance", "Sci-Fi", "Thriller", "War", "Western"};
  std::ifstream in(path);
  if (!in) throw DataError("cannot open item feature file " + path.string());

  ItemFeatures out;
  out.item_features.assign(log.item_count, {});
  std::map<std::string, std::int32_t> vocab;
  auto feature_id = [&](const std::string& name) {
    auto [it, inserted] = vocab.emplace(name, static_cast<std::int32_t>(vocab.size()));
    if (inserted) out.feature_names.push_back(name);
    return it->second;
  };

  std::string line;
  std::size_t line_no = 0;
  bool generic = path.extension() == ".csv";
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    std::int64_t raw = 0;
    std::vector<std::string> tokens;
    if (generic) {
      if (line_no == 1) continue;  // header
      auto comma = line.find(',');
      if (comma == std::string::npos) {
        throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected item,features");
      }
      raw = parse_number<std::int64_t>(line.substr(0, comma), path, line_no, "item");
      std::istringstream ts(line.substr(comma + 1));
      std::string tok;
      while (ts >> tok) tokens.push_back(tok);
    } else {
      auto f = split(line, '|');
      if (f.size() < 19) {
        throw DataError(path.string() + ":" + std::to_string(line_no) +
                        ": expected at least 19 '|'-separated fields");
      }
      raw = parse_number<std::int64_t>(f[0], path, line_no, "item");
      std::size_t base = f.size() - 19;
      for (std::size_t g = 0; g < 19; ++g) {
        if (trim(f[base + g]) == "1") tokens.emplace_back(kGenres[g]);
      }
    }
    auto dense = log.dense_item(raw);
    if (!dense) continue;  // item never interacted with
    auto& feats = out.item_features[*dense];
    for (const auto& t : tokens) feats.push_back(feature_id(t));
    std::sort(feats.begin(), feats.end());
    feats.erase(std::unique(feats.begin(), feats.end()), feats.end());
  }
  out.feature_count = static_cast<std::int32_t>(vocab.size());
  return out;
}

std::vector<ItemId> DatasetSplit::context_sequence(UserId user, bool for_test) const {
  std::vector<ItemId> seq = full_train_sequences.at(user);
  if (for_test) {
    for (const auto& x : validation.interactions) {
      if (x.user == user) seq.push_back(x.item);
    }
  }
  if (static_cast<std::int32_t>(seq.size()) > max_seq_len) {
    seq.erase(seq.begin(), seq.end() - max_seq_len);
  }
  return seq;
}

DatasetSplit leave_one_out_split(const InteractionLog& log, std::int32_t max_seq_len) {
  if (log.empty()) throw DataError("leave_one_out_split: empty log");
  if (max_seq_len < 1) throw DataError("leave_one_out_split: max_seq_len must be positive");

  DatasetSplit split;
  split.max_seq_len = max_seq_len;
  for (InteractionLog* part : {&split.train, &split.validation, &split.test}) {
    part->user_count = log.user_count;
    part->item_count = log.item_count;
  }

  std::vector<std::vector<std::size_t>> positives(log.user_count);
  split.interacted.assign(log.user_count, {});
  for (std::size_t k = 0; k < log.interactions.size(); ++k) {
    const auto& x = log.interactions[k];
    split.interacted[x.user].push_back(x.item);
    if (x.label == 1) positives[x.user].push_back(k);
  }
  for (auto& items : split.interacted) {
    std::sort(items.begin(), items.end());
    items.erase(std::unique(items.begin(), items.end()), items.end());
  }

  // Record assignment per interaction index so each part keeps global time order.
  enum : std::uint8_t { kNone, kTrain, kVal, kTest };
  std::vector<std::uint8_t> where(log.interactions.size(), kNone);
  for (const auto& idx : positives) {
    if (idx.size() >= 3) {
      for (std::size_t j = 0; j + 2 < idx.size(); ++j) where[idx[j]] = kTrain;
      where[idx[idx.size() - 2]] = kVal;
      where[idx.back()] = kTest;
    } else {
      for (auto k : idx) where[k] = kTrain;
    }
  }
  split.full_train_sequences.assign(log.user_count, {});
  for (std::size_t k = 0; k < log.interactions.size(); ++k) {
    const auto& x = log.interactions[k];
    switch (where[k]) {
      case kTrain:
        split.train.interactions.push_back(x);
        split.full_train_sequences[x.user].push_back(x.item);
        break;
      case kVal: split.validation.interactions.push_back(x); break;
      case kTest: split.test.interactions.push_back(x); break;
      default: break;
    }
  }
  split.user_sequences.resize(log.user_count);
  for (UserId u = 0; u < log.user_count; ++u) {
    const auto& full = split.full_train_sequences[u];
    auto start = full.size() > static_cast<std::size_t>(max_seq_len)
                     ? full.end() - max_seq_len
                     : full.begin();
    split.user_sequences[u].assign(start, full.end());
  }
  return split;
}

double ItemPartition::cold_warm_ratio() const {
  if (warm_items.empty()) return std::numeric_limits<double>::infinity();
  return static_cast<double>(cold_items.size()) / static_cast<double>(warm_items.size());
}

double ItemPartition::cold_fraction() const {
  auto total = cold_items.size() + warm_items.size();
  return total == 0 ? 0.0 : static_cast<double>(cold_items.size()) / static_cast<double>(total);
}

ItemPartition partition_items(const InteractionLog& train, std::int32_t threshold) {
  if (threshold < 1) throw DataError("partition_items: threshold must be >= 1");
  ItemPartition p;
  p.threshold = threshold;
  p.train_positive_count.assign(train.item_count, 0);
  for (const auto& x : train.interactions) {
    if (x.label == 1) p.train_positive_count[x.item] += 1;
  }
  p.is_cold.assign(train.item_count, 0);
  for (ItemId i = 0; i < train.item_count; ++i) {
    if (p.train_positive_count[i] > threshold) {
      p.warm_items.push_back(i);
    } else {
      p.cold_items.push_back(i);
      p.is_cold[i] = 1;
    }
  }
  return p;
}

EvalCandidates sample_eval_negatives(const DatasetSplit& split, std::int32_t n,
                                     std::uint64_t seed, EvalStage stage) {
  if (n < 1) throw DataError("sample_eval_negatives: n must be >= 1");
  const InteractionLog& targets = stage == EvalStage::kTest ? split.test : split.validation;
  EvalCandidates out;
  out.stage = stage;
  out.seed = seed;
  out.negatives = n;

  std::vector<const Interaction*> ordered;
  for (const auto& x : targets.interactions) ordered.push_back(&x);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const Interaction* a, const Interaction* b) { return a->user < b->user; });

  const std::int32_t items = split.item_count();
  for (const Interaction* x : ordered) {
    const auto& seen = split.interacted[x->user];
    std::int64_t available = items - static_cast<std::int64_t>(seen.size());
    if (available < n) {
      throw DataError("sample_eval_negatives: user " + std::to_string(x->user) + " has only " +
                      std::to_string(available) + " non-interacted items, need " +
                      std::to_string(n));
    }
    // Per-user stream so lists do not depend on which other users are present.
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(x->user) +
                        (stage == EvalStage::kTest ? 0x5bd1e995ULL : 0ULL));
    std::uniform_int_distribution<ItemId> pick(0, items - 1);
    std::vector<ItemId> negs;
    std::unordered_set<ItemId> chosen;
    while (static_cast<std::int32_t>(negs.size()) < n) {
      ItemId c = pick(rng);
      if (std::binary_search(seen.begin(), seen.end(), c)) continue;
      if (!chosen.insert(c).second) continue;
      negs.push_back(c);
    }
    CandidateList list;
    list.user = x->user;
    list.target = x->item;
    list.items = std::move(negs);
    list.items.push_back(x->item);
    std::shuffle(list.items.begin(), list.items.end(), rng);
    out.lists.push_back(std::move(list));
  }
  return out;
}

void write_log(const InteractionLog& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "# user_count=" << log.user_count << " item_count=" << log.item_count << "\n";
  out << "user,item,label,timestamp,stay_time,interact_score\n";
  out.precision(17);
  for (const auto& x : log.interactions) {
    out << x.user << ',' << x.item << ',' << x.label << ',' << x.timestamp << ','
        << x.stay_time << ',' << x.interact_score << '\n';
  }
}

InteractionLog read_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  InteractionLog log;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.rfind("# ", 0) == 0) {
      std::istringstream hs(line.substr(2));
      std::string kv;
      while (hs >> kv) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) continue;
        auto key = kv.substr(0, eq);
        auto val = parse_number<std::int32_t>(kv.substr(eq + 1), path, line_no, key.c_str());
        if (key == "user_count") log.user_count = val;
        if (key == "item_count") log.item_count = val;
      }
      continue;
    }
    if (line.rfind("user,", 0) == 0 || line.empty()) continue;
    auto f = split(line, ',');
    if (f.size() != 6) throw DataError(path.string() + ":" + std::to_string(line_no) + ": bad row");
    Interaction x;
    x.user = parse_number<UserId>(f[0], path, line_no, "user");
    x.item = parse_number<ItemId>(f[1], path, line_no, "item");
    x.label = parse_number<int>(f[2], path, line_no, "label");
    x.timestamp = parse_number<std::int64_t>(f[3], path, line_no, "timestamp");
    x.stay_time = parse_number<double>(f[4], path, line_no, "stay_time");
    x.interact_score = parse_number<double>(f[5], path, line_no, "interact_score");
    log.interactions.push_back(x);
  }
  return log;
}

std::vector<std::vector<UserId>> positive_users_by_item(const InteractionLog& train) {
  std::vector<std::vector<UserId>> out(train.item_count);
  for (const auto& x : train.interactions) {
    if (x.label == 1) out[x.item].push_back(x.user);
  }
  for (auto& users : out) {
    std::sort(users.begin(), users.end());
    users.erase(std::unique(users.begin(), users.end()), users.end());
  }
  return out;
}

}  // namespace promo
