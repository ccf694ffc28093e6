#include "promo/checkpoint.hpp"

#include <openssl/evp.h>

#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>

namespace promo {
namespace {

constexpr char kMagic[8] = {'P', 'R', 'O', 'M', 'O', 'C', 'K', '1'};

enum : std::uint8_t { kMatrix = 1, kReal = 2, kInteger = 3, kText = 4 };

template <typename T>
void put_raw(std::vector<std::uint8_t>& out, const T& v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
  put_raw(out, static_cast<std::uint64_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

void put_matrix(std::vector<std::uint8_t>& out, const Eigen::MatrixXd& m) {
  put_raw(out, static_cast<std::int64_t>(m.rows()));
  put_raw(out, static_cast<std::int64_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) put_raw(out, m(r, c));
}

class Cursor {
 public:
  explicit Cursor(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T raw() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    auto n = raw<std::uint64_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  Eigen::MatrixXd matrix() {
    auto rows = raw<std::int64_t>();
    auto cols = raw<std::int64_t>();
    if (rows < 0 || cols < 0) throw CheckpointError("checkpoint: negative matrix shape");
    need(static_cast<std::uint64_t>(rows) * static_cast<std::uint64_t>(cols) * sizeof(double));
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = raw<double>();
    return m;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (pos_ + n > bytes_.size()) throw CheckpointError("checkpoint: truncated data");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw CheckpointError("sha256 failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) {
    out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  }
  return out.str();
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex(std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

void Checkpoint::put(const std::string& name, Eigen::MatrixXd value) {
  if (!entries_.count(name)) order_.push_back(name);
  entries_[name] = std::move(value);
}
void Checkpoint::put(const std::string& name, double value) {
  if (!entries_.count(name)) order_.push_back(name);
  entries_[name] = value;
}
void Checkpoint::put(const std::string& name, std::int64_t value) {
  if (!entries_.count(name)) order_.push_back(name);
  entries_[name] = value;
}
void Checkpoint::put(const std::string& name, std::string value) {
  if (!entries_.count(name)) order_.push_back(name);
  entries_[name] = std::move(value);
}

bool Checkpoint::has(const std::string& name) const { return entries_.count(name) != 0; }

const Checkpoint::Value& Checkpoint::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw CheckpointError("checkpoint: missing entry '" + name + "'");
  return it->second;
}

const Eigen::MatrixXd& Checkpoint::matrix(const std::string& name) const {
  const auto* m = std::get_if<Eigen::MatrixXd>(&get(name));
  if (!m) throw CheckpointError("checkpoint: entry '" + name + "' is not a matrix");
  return *m;
}
double Checkpoint::real(const std::string& name) const {
  const auto* v = std::get_if<double>(&get(name));
  if (!v) throw CheckpointError("checkpoint: entry '" + name + "' is not a real");
  return *v;
}
std::int64_t Checkpoint::integer(const std::string& name) const {
  const auto* v = std::get_if<std::int64_t>(&get(name));
  if (!v) throw CheckpointError("checkpoint: entry '" + name + "' is not an integer");
  return *v;
}
const std::string& Checkpoint::text(const std::string& name) const {
  const auto* v = std::get_if<std::string>(&get(name));
  if (!v) throw CheckpointError("checkpoint: entry '" + name + "' is not text");
  return *v;
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_string(out, kind_);
  put_raw(out, static_cast<std::uint64_t>(order_.size()));
  for (const auto& name : order_) {
    const Value& v = entries_.at(name);
    put_raw(out, static_cast<std::uint8_t>(v.index() + 1));
    put_string(out, name);
    std::visit(
        [&out](const auto& x) {
          using T = std::decay_t<decltype(x)>;
          if constexpr (std::is_same_v<T, Eigen::MatrixXd>) put_matrix(out, x);
          else if constexpr (std::is_same_v<T, std::string>) put_string(out, x);
          else put_raw(out, x);
        },
        v);
  }
  return out;
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("checkpoint: bad magic");
  }
  Cursor cur(bytes.subspan(sizeof(kMagic)));
  Checkpoint ck(cur.str());
  auto count = cur.raw<std::uint64_t>();
  for (std::uint64_t k = 0; k < count; ++k) {
    auto type = cur.raw<std::uint8_t>();
    std::string name = cur.str();
    switch (type) {
      case kMatrix: ck.put(name, cur.matrix()); break;
      case kReal: ck.put(name, cur.raw<double>()); break;
      case kInteger: ck.put(name, cur.raw<std::int64_t>()); break;
      case kText: ck.put(name, cur.str()); break;
      default: throw CheckpointError("checkpoint: unknown entry type");
    }
  }
  if (!cur.done()) throw CheckpointError("checkpoint: trailing bytes");
  return ck;
}

std::string Checkpoint::save(const std::filesystem::path& path) const {
  auto bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path.string());
  return sha256_hex(bytes);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

void Digest::add(const std::string& name, const Eigen::MatrixXd& m) {
  put_string(buffer_, name);
  put_matrix(buffer_, m);
}
void Digest::add(const std::string& name, double x) {
  put_string(buffer_, name);
  put_raw(buffer_, x);
}
void Digest::add(const std::string& name, std::int64_t x) {
  put_string(buffer_, name);
  put_raw(buffer_, x);
}
std::string Digest::hex() const { return sha256_hex(buffer_); }

}  // namespace promo
