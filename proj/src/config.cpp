#include "promo/config.hpp"

#include "promo/checkpoint.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace promo {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError(key, "cannot parse '" + value + "' as a number");
  }
  return out;
}

template <typename T>
std::string format_number(T v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& value) {
  std::vector<T> out;
  for (const auto& p : split_list(value)) out.push_back(parse_number<T>(key, p));
  if (out.empty()) throw ConfigError(key, "empty list");
  return out;
}

template <typename T>
std::string format_list(const std::vector<T>& v) {
  std::string out;
  for (std::size_t j = 0; j < v.size(); ++j) out += (j ? "," : "") + format_number(v[j]);
  return out;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& value) {
  std::filesystem::path p(value);
  if (p.is_relative() && !base.empty()) p = base / p;
  return p.lexically_normal();
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&, const std::filesystem::path&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field number(const std::string& key, T RunConfig::*member) {
  return {key,
          [key, member](RunConfig& c, const std::string& v, const std::filesystem::path&) {
            c.*member = parse_number<T>(key, v);
          },
          [member](const RunConfig& c) { return format_number(c.*member); }};
}

template <typename T>
Field list(const std::string& key, std::vector<T> RunConfig::*member) {
  return {key,
          [key, member](RunConfig& c, const std::string& v, const std::filesystem::path&) {
            c.*member = parse_list<T>(key, v);
          },
          [member](const RunConfig& c) { return format_list(c.*member); }};
}

Field path_field(const std::string& key, std::filesystem::path RunConfig::*member,
                 bool relative_to_config) {
  return {key,
          [member, relative_to_config](RunConfig& c, const std::string& v,
                                       const std::filesystem::path& base) {
            c.*member = relative_to_config ? resolve(base, v) : std::filesystem::path(v);
          },
          [member](const RunConfig& c) { return (c.*member).string(); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    f.push_back(path_field("data.path", &RunConfig::data_path, true));
    f.push_back({"data.format",
                 [](RunConfig& c, const std::string& v, const std::filesystem::path&) {
                   try {
                     c.data_format = parse_log_format(v);
                   } catch (const std::exception& e) {
                     throw ConfigError("data.format", e.what());
                   }
                 },
                 [](const RunConfig& c) { return to_string(c.data_format); }});
    f.push_back(path_field("data.item_features", &RunConfig::item_features_path, true));
    f.push_back(number("data.positive_min_rating", &RunConfig::positive_min_rating));
    f.push_back(number("data.cold_threshold", &RunConfig::cold_threshold));
    f.push_back(number("model.dim", &RunConfig::dim));
    f.push_back(number("model.blocks", &RunConfig::blocks));
    f.push_back(number("model.ffn_dim", &RunConfig::ffn_dim));
    f.push_back(number("model.max_seq_len", &RunConfig::max_seq_len));
    f.push_back(number("model.temperature", &RunConfig::temperature));
    f.push_back(number("pretrain.lr", &RunConfig::pretrain_lr));
    f.push_back(number("pretrain.batch_size", &RunConfig::pretrain_batch_size));
    f.push_back(number("pretrain.max_epochs", &RunConfig::pretrain_max_epochs));
    f.push_back(number("pretrain.patience", &RunConfig::pretrain_patience));
    f.push_back(number("prompt.k", &RunConfig::k));
    f.push_back(number("prompt.alpha", &RunConfig::alpha));
    f.push_back(number("prompt.beta", &RunConfig::beta));
    f.push_back({"prompt.layer_dims",
                 [](RunConfig& c, const std::string& v, const std::filesystem::path&) {
                   LayerDims dims;
                   for (const auto& part : split_list(v)) {
                     const auto x = part.find('x');
                     if (x == std::string::npos) {
                       throw ConfigError("prompt.layer_dims", "expected INxOUT, got '" + part + "'");
                     }
                     dims.emplace_back(parse_number<int>("prompt.layer_dims", part.substr(0, x)),
                                       parse_number<int>("prompt.layer_dims", part.substr(x + 1)));
                   }
                   if (dims.empty()) throw ConfigError("prompt.layer_dims", "empty list");
                   c.layer_dims = dims;
                 },
                 [](const RunConfig& c) {
                   std::string out;
                   for (std::size_t j = 0; j < c.layer_dims.size(); ++j) {
                     out += (j ? "," : "") + std::to_string(c.layer_dims[j].first) + "x" +
                            std::to_string(c.layer_dims[j].second);
                   }
                   return out;
                 }});
    f.push_back(number("tune.lambda1", &RunConfig::lambda1));
    f.push_back(number("tune.lambda2", &RunConfig::lambda2));
    f.push_back(number("tune.lr", &RunConfig::tune_lr));
    f.push_back(number("tune.batch_size", &RunConfig::tune_batch_size));
    f.push_back(number("tune.max_epochs", &RunConfig::tune_max_epochs));
    f.push_back(number("tune.patience", &RunConfig::tune_patience));
    f.push_back(number("tune.negatives", &RunConfig::tune_negatives));
    f.push_back(number("tune.fusion_hidden", &RunConfig::fusion_hidden));
    f.push_back(number("finetune.lr", &RunConfig::finetune_lr));
    f.push_back(number("finetune.max_epochs", &RunConfig::finetune_max_epochs));
    f.push_back(number("finetune.patience", &RunConfig::finetune_patience));
    f.push_back(number("eval.negatives", &RunConfig::eval_negatives));
    f.push_back(list("eval.ks", &RunConfig::eval_ks));
    f.push_back(number("retention.pairs", &RunConfig::retention_pairs));
    f.push_back(list("retention.schedule", &RunConfig::retention_schedule));
    f.push_back(number("retention.batch_size", &RunConfig::retention_batch_size));
    f.push_back(number("histogram.samples", &RunConfig::histogram_samples));
    f.push_back(number("histogram.bins", &RunConfig::histogram_bins));
    f.push_back(list("ablation.seeds", &RunConfig::ablation_seeds));
    f.push_back(number("seed", &RunConfig::seed));
    f.push_back(path_field("out", &RunConfig::out_dir, false));
    std::sort(f.begin(), f.end(), [](const Field& a, const Field& b) { return a.key < b.key; });
    return f;
  }();
  return all;
}

void require(bool ok, const std::string& field, const std::string& message) {
  if (!ok) throw ConfigError(field, message);
}

}  // namespace

void set_config_value(RunConfig& config, const std::string& key, const std::string& value,
                      const std::filesystem::path& base_dir) {
  for (const auto& f : fields()) {
    if (f.key == key) {
      f.set(config, value, base_dir);
      return;
    }
  }
  throw ConfigError(key, "unknown configuration key");
}

RunConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
  RunConfig config;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  std::vector<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no), "expected key = value");
    }
    const std::string key = trim(t.substr(0, eq));
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) {
      throw ConfigError(key, "duplicate key");
    }
    seen.push_back(key);
    set_config_value(config, key, trim(t.substr(eq + 1)), base_dir);
  }
  validate(config);
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

void validate(const RunConfig& c) {
  require(!c.data_path.empty(), "data.path", "required");
  require(c.positive_min_rating >= 1 && c.positive_min_rating <= 5, "data.positive_min_rating",
          "must be in [1, 5]");
  require(c.cold_threshold >= 0, "data.cold_threshold", "must be >= 0");
  require(c.dim >= 1 && c.dim <= 1024, "model.dim", "must be in [1, 1024]");
  require(c.blocks >= 1 && c.blocks <= 8, "model.blocks", "must be in [1, 8]");
  require(c.ffn_dim >= 1 && c.ffn_dim <= 4096, "model.ffn_dim", "must be in [1, 4096]");
  require(c.max_seq_len >= 1 && c.max_seq_len <= 1000, "model.max_seq_len",
          "must be in [1, 1000]");
  require(c.temperature > 0.0 && c.temperature <= 100.0, "model.temperature",
          "must be in (0, 100]");
  require(c.pretrain_lr > 0.0 && c.pretrain_lr <= 1.0, "pretrain.lr", "must be in (0, 1]");
  require(c.pretrain_batch_size >= 1, "pretrain.batch_size", "must be >= 1");
  require(c.pretrain_max_epochs >= 1, "pretrain.max_epochs", "must be >= 1");
  require(c.pretrain_patience >= 0, "pretrain.patience", "must be >= 0");
  require(c.k >= 1 && c.k <= 1000, "prompt.k", "must be in [1, 1000]");
  require(c.alpha >= 0.0, "prompt.alpha", "must be >= 0");
  require(c.beta >= 0.0, "prompt.beta", "must be >= 0");
  require(!c.layer_dims.empty(), "prompt.layer_dims", "at least one layer");
  require(c.layer_dims.front().first == c.dim, "prompt.layer_dims",
          "first layer input must equal model.dim");
  for (std::size_t n = 0; n < c.layer_dims.size(); ++n) {
    require(c.layer_dims[n].first >= 1 && c.layer_dims[n].second >= 1, "prompt.layer_dims",
            "layer sizes must be >= 1");
    if (n > 0) {
      require(c.layer_dims[n].first == c.layer_dims[n - 1].second, "prompt.layer_dims",
              "layer " + std::to_string(n) + " input must equal the previous output");
    }
  }
  require(c.lambda1 >= 0.0, "tune.lambda1", "must be >= 0");
  require(c.lambda2 >= 0.0, "tune.lambda2", "must be >= 0");
  require(c.tune_lr > 0.0 && c.tune_lr <= 1.0, "tune.lr", "must be in (0, 1]");
  require(c.tune_batch_size >= 2, "tune.batch_size", "must be >= 2");
  require(c.tune_max_epochs >= 1, "tune.max_epochs", "must be >= 1");
  require(c.tune_patience >= 0, "tune.patience", "must be >= 0");
  require(c.tune_negatives >= 1, "tune.negatives", "must be >= 1");
  require(c.fusion_hidden >= 1, "tune.fusion_hidden", "must be >= 1");
  require(c.finetune_lr > 0.0 && c.finetune_lr <= 1.0, "finetune.lr", "must be in (0, 1]");
  require(c.finetune_max_epochs >= 1, "finetune.max_epochs", "must be >= 1");
  require(c.finetune_patience >= 0, "finetune.patience", "must be >= 0");
  require(c.eval_negatives >= 1, "eval.negatives", "must be >= 1");
  for (int k : c.eval_ks) {
    require(k >= 1 && k <= c.eval_negatives + 1, "eval.ks", "each K must be in [1, negatives+1]");
  }
  require(c.retention_pairs >= 1, "retention.pairs", "must be >= 1");
  for (std::size_t j = 0; j < c.retention_schedule.size(); ++j) {
    require(c.retention_schedule[j] >= 0, "retention.schedule", "counts must be >= 0");
    if (j > 0) {
      require(c.retention_schedule[j] >= c.retention_schedule[j - 1], "retention.schedule",
              "counts must be non-decreasing (cumulative)");
    }
  }
  require(c.retention_batch_size >= 1, "retention.batch_size", "must be >= 1");
  require(c.histogram_samples >= 1, "histogram.samples", "must be >= 1");
  require(c.histogram_bins >= 1, "histogram.bins", "must be >= 1");
  require(!c.ablation_seeds.empty(), "ablation.seeds", "at least one seed");
  require(!c.out_dir.empty(), "out", "required");
}

std::string RunConfig::canonical() const {
  std::string out;
  for (const auto& f : fields()) {
    if (f.key == "out") continue;  // where results go does not change them
    out += f.key + "=" + f.get(*this) + "\n";
  }
  return out;
}

std::string RunConfig::digest() const { return sha256_hex(canonical()); }

BackboneConfig RunConfig::backbone_config() const {
  BackboneConfig b;
  b.dim = dim;
  b.blocks = blocks;
  b.ffn_dim = ffn_dim;
  b.max_seq_len = max_seq_len;
  b.temperature = temperature;
  return b;
}

PretrainOptions RunConfig::pretrain_options() const {
  PretrainOptions o;
  o.adam.learning_rate = pretrain_lr;
  o.batch_size = pretrain_batch_size;
  o.max_epochs = pretrain_max_epochs;
  o.patience = pretrain_patience;
  o.eval_negatives = eval_negatives;
  return o;
}

PromptStoreConfig RunConfig::prompt_store_config() const {
  PromptStoreConfig s;
  s.k = k;
  s.alpha = alpha;
  s.beta = beta;
  s.layer_dims = layer_dims;
  return s;
}

TuneConfig RunConfig::tune_config(PromptVariant variant) const {
  TuneConfig t;
  t.variant = variant;
  t.lambda1 = lambda1;
  t.lambda2 = lambda2;
  t.adam.learning_rate = tune_lr;
  t.batch_size = tune_batch_size;
  t.max_epochs = tune_max_epochs;
  t.patience = tune_patience;
  t.negatives_per_positive = tune_negatives;
  t.fusion_hidden = fusion_hidden;
  t.eval_negatives = eval_negatives;
  return t;
}

}  // namespace promo
