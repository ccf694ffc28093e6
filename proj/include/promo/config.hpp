#pragma once

#include "promo/backbone.hpp"
#include "promo/data.hpp"
#include "promo/prompt_generator.hpp"
#include "promo/prompt_tuner.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace promo {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

// Flat `key = value` run configuration. Lines starting with '#' are comments.
// Every key has a default; unknown keys and out-of-range values are errors.
struct RunConfig {
  std::filesystem::path data_path;
  LogFormat data_format = LogFormat::kMovielensTab;
  std::filesystem::path item_features_path;  // empty: feature variants unavailable
  int positive_min_rating = 5;
  std::int32_t cold_threshold = 20;

  std::int32_t dim = 64;
  std::int32_t blocks = 2;
  std::int32_t ffn_dim = 64;
  std::int32_t max_seq_len = 50;
  double temperature = 1.0;

  double pretrain_lr = 1e-3;
  std::int32_t pretrain_batch_size = 256;
  std::int32_t pretrain_max_epochs = 100;
  std::int32_t pretrain_patience = 10;

  int k = 10;
  double alpha = 0.5;
  double beta = 0.5;
  LayerDims layer_dims{{64, 64}, {64, 32}};

  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double tune_lr = 3e-4;
  std::int32_t tune_batch_size = 256;
  std::int32_t tune_max_epochs = 30;
  std::int32_t tune_patience = 5;
  std::int32_t tune_negatives = 1;
  std::int32_t fusion_hidden = 32;

  double finetune_lr = 1e-3;
  std::int32_t finetune_max_epochs = 30;
  std::int32_t finetune_patience = 5;

  std::int32_t eval_negatives = 100;
  std::vector<int> eval_ks{5, 10};

  std::int32_t retention_pairs = 500;
  std::vector<std::int32_t> retention_schedule{100, 500, 1000};
  std::int32_t retention_batch_size = 100;

  std::int32_t histogram_samples = 500;
  std::int32_t histogram_bins = 50;

  std::vector<std::uint64_t> ablation_seeds{1, 2, 3};

  std::uint64_t seed = 1;
  std::filesystem::path out_dir = "runs/default";

  // Sorted `key=value` lines over every field; the digest hashes this text.
  std::string canonical() const;
  std::string digest() const;

  BackboneConfig backbone_config() const;
  PretrainOptions pretrain_options() const;
  PromptStoreConfig prompt_store_config() const;
  TuneConfig tune_config(PromptVariant variant) const;
};

RunConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);
// Range checks; throws ConfigError naming the first offending field.
void validate(const RunConfig& config);
// Applies one key/value pair; throws ConfigError for unknown keys or bad values.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value,
                      const std::filesystem::path& base_dir = {});

}  // namespace promo
