#pragma once

// Self-describing binary container: a magic tag followed by named, typed
// entries (matrices, scalars, integers, strings). Doubles are stored as raw
// IEEE-754 bytes, so a write/read cycle is bit-exact.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace promo {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& text);
std::string sha256_file(const std::filesystem::path& path);

class Checkpoint {
 public:
  using Value = std::variant<Eigen::MatrixXd, double, std::int64_t, std::string>;

  explicit Checkpoint(std::string kind = "promo") : kind_(std::move(kind)) {}

  const std::string& kind() const { return kind_; }

  void put(const std::string& name, Eigen::MatrixXd value);
  void put(const std::string& name, double value);
  void put(const std::string& name, std::int64_t value);
  void put(const std::string& name, std::string value);

  bool has(const std::string& name) const;
  const Eigen::MatrixXd& matrix(const std::string& name) const;
  double real(const std::string& name) const;
  std::int64_t integer(const std::string& name) const;
  const std::string& text(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(std::span<const std::uint8_t> bytes);

  // Writes the file and returns its SHA-256.
  std::string save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  const Value& get(const std::string& name) const;

  std::string kind_;
  std::vector<std::string> order_;
  std::map<std::string, Value> entries_;
};

// Digest of matrices and scalars in a fixed order; used for parameter freezing.
class Digest {
 public:
  void add(const std::string& name, const Eigen::MatrixXd& m);
  void add(const std::string& name, double x);
  void add(const std::string& name, std::int64_t x);
  std::string hex() const;

 private:
  std::vector<std::uint8_t> buffer_;
};

}  // namespace promo
