#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace promo::cli {

inline constexpr const char* kToolVersion = "promo 0.1.0";

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kInvalidInput = 2,      // bad config field or unreadable dataset
  kDiverged = 3,
  kBadBackbone = 4,       // backbone checkpoint fails its checksum
  kRegimeMismatch = 5,    // regime needs an artifact that is missing or of another variant
};

struct CommonOptions {
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::vector<std::string> overrides;  // key=value, applied after the file
};

struct TuneOptions {
  std::filesystem::path backbone;  // default <out>/backbone.ckpt
  std::string variant = "PROMO";
};

struct EvaluateOptions {
  std::string regime = "PROMO";
  std::filesystem::path backbone;  // default <out>/backbone.ckpt
  std::filesystem::path prompts;   // default <out>/prompts.ckpt
};

struct AblateOptions {
  std::vector<std::string> regimes;  // empty: all eight
};

struct RetentionCliOptions {
  std::filesystem::path backbone;  // pretrained when empty and <out>/backbone.ckpt is absent
};

int cmd_pretrain(const CommonOptions& common, std::ostream& log);
int cmd_tune(const CommonOptions& common, const TuneOptions& options, std::ostream& log);
int cmd_evaluate(const CommonOptions& common, const EvaluateOptions& options, std::ostream& log);
int cmd_ablate(const CommonOptions& common, const AblateOptions& options, std::ostream& log);
int cmd_retention(const CommonOptions& common, const RetentionCliOptions& options,
                  std::ostream& log);

// manifest.txt: `key value...` lines. Artifact lines are `artifact NAME SHA256`
// with NAME relative to the manifest's directory (or absolute).
struct Manifest {
  std::string command;
  std::string config_digest;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> artifacts;  // name, sha256
  std::vector<std::pair<std::string, std::string>> metrics;
  std::vector<std::pair<std::string, double>> timings;

  std::string text() const;
};
Manifest read_manifest(const std::filesystem::path& path);
// Empty when every artifact exists and matches; otherwise one message per problem.
std::vector<std::string> verify_manifest(const std::filesystem::path& path);

}  // namespace promo::cli
