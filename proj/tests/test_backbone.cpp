#include "promo/backbone.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace promo;
using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major, rows of length cols

namespace {

BackboneConfig small_config() {
  BackboneConfig c;
  c.user_count = 4;
  c.item_count = 7;
  c.dim = 8;
  c.blocks = 2;
  c.ffn_dim = 6;
  c.max_seq_len = 5;
  c.temperature = 0.7;
  return c;
}

// Every parameter gets random values, biases and norms included.
BackboneParams random_params(const BackboneConfig& c, unsigned seed) {
  BackboneParams p = BackboneParams::init(c, seed);
  std::mt19937 g(seed + 1);
  std::normal_distribution<double> n(0.0, 0.4);
  for (auto* q : p.parameters()) {
    for (Eigen::Index i = 0; i < q->value.size(); ++i) q->value.data()[i] = n(g);
  }
  return p;
}

// Straight-line re-computation with plain loops.
Mat to_mat(const Eigen::MatrixXd& m) {
  Mat out(m.rows(), Vec(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out[r][c] = m(r, c);
  return out;
}

Vec row(const ad::Parameter& p, int r) { return to_mat(p.value)[r]; }

Vec affine(const Vec& x, const ad::Parameter& w, const ad::Parameter& b) {
  Mat W = to_mat(w.value);
  Vec out(W.size());
  for (std::size_t o = 0; o < W.size(); ++o) {
    double s = b.value(0, o);
    for (std::size_t i = 0; i < x.size(); ++i) s += W[o][i] * x[i];
    out[o] = s;
  }
  return out;
}

Vec norm(const Vec& x, const ad::Parameter& g, const ad::Parameter& b) {
  double mu = 0.0, var = 0.0;
  for (double v : x) mu += v;
  mu /= x.size();
  for (double v : x) var += (v - mu) * (v - mu);
  var /= x.size();
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = (x[i] - mu) / std::sqrt(var + 1e-6) * g.value(0, i) + b.value(0, i);
  }
  return out;
}

Vec plus(Vec a, const Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

Vec oracle_user(const BackboneParams& p, const std::vector<ItemId>& seq, UserId u) {
  const std::size_t n = seq.size(), d = p.config.dim;
  Mat x(n);
  for (std::size_t t = 0; t < n; ++t) {
    x[t] = plus(row(p.item_emb, seq[t]), row(p.pos_emb, p.config.max_seq_len - n + t));
  }
  for (const auto& b : p.blocks) {
    Mat q(n), k(n), v(n);
    for (std::size_t t = 0; t < n; ++t) {
      Vec a = norm(x[t], b.ln1_gamma, b.ln1_beta);
      q[t] = affine(a, b.wq, b.bq);
      k[t] = affine(a, b.wk, b.bk);
      v[t] = affine(a, b.wv, b.bv);
    }
    Mat y(n);
    for (std::size_t t = 0; t < n; ++t) {
      Vec w(t + 1);
      double z = 0.0;
      for (std::size_t s = 0; s <= t; ++s) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += q[t][j] * k[s][j];
        w[s] = std::exp(dot / std::sqrt(static_cast<double>(d)));
        z += w[s];
      }
      Vec o(d, 0.0);
      for (std::size_t s = 0; s <= t; ++s)
        for (std::size_t j = 0; j < d; ++j) o[j] += w[s] / z * v[s][j];
      y[t] = plus(x[t], affine(o, b.wo, b.bo));
    }
    for (std::size_t t = 0; t < n; ++t) {
      Vec h = affine(norm(y[t], b.ln2_gamma, b.ln2_beta), b.ff1_w, b.ff1_b);
      for (double& e : h) e = std::max(e, 0.0);
      x[t] = plus(y[t], affine(h, b.ff2_w, b.ff2_b));
    }
  }
  Vec ctx = norm(x[n - 1], p.final_gamma, p.final_beta);
  Vec joined = ctx;
  Vec eu = row(p.user_emb, u);
  joined.insert(joined.end(), eu.begin(), eu.end());
  Vec z = affine(joined, p.seq_w1, p.seq_b1);
  for (double& e : z) e = std::tanh(e);
  return affine(z, p.seq_w2, p.seq_b2);
}

Vec oracle_item(const BackboneParams& p, ItemId i) {
  Vec e = row(p.item_emb, i);
  Vec z = affine(e, p.item_w1, p.item_b1);
  for (double& v : z) v = std::tanh(v);
  return plus(e, affine(z, p.item_w2, p.item_b2));
}

double max_abs_diff(const Eigen::RowVectorXd& a, const Vec& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) m = std::max(m, std::abs(a(i) - b[i]));
  return m;
}

}  // namespace

TEST_CASE("encode_user and encode_item match a straight-line oracle") {
  BackboneParams p = random_params(small_config(), 3);
  const std::vector<ItemId> seq{3, 1, 4};
  CHECK(max_abs_diff(encode_user(p, seq, 2), oracle_user(p, seq, 2)) < 1e-10);
  for (ItemId i = 0; i < 7; ++i) CHECK(max_abs_diff(encode_item(p, i), oracle_item(p, i)) < 1e-10);
  CHECK(encode_item(p, 5) == encode_item(p, 5));
  CHECK_THROWS_AS(encode_item(p, 7), std::out_of_range);
  CHECK_THROWS_AS(encode_item(p, -1), std::out_of_range);
}

TEST_CASE("padding is masked and only leading padding is accepted") {
  BackboneParams p = random_params(small_config(), 5);
  auto plain = encode_user(p, std::vector<ItemId>{3, 1}, 0);
  auto padded = encode_user(p, std::vector<ItemId>{kPaddingItem, kPaddingItem, 3, 1}, 0);
  auto padded1 = encode_user(p, std::vector<ItemId>{kPaddingItem, 3, 1}, 0);
  CHECK((plain - padded).norm() == 0.0);
  CHECK((plain - padded1).norm() == 0.0);
  CHECK_THROWS(encode_user(p, std::vector<ItemId>{3, kPaddingItem, 1}, 0));
  CHECK_THROWS(encode_user(p, std::vector<ItemId>{0, 1, 2, 3, 4, 5}, 0));
}

TEST_CASE("empty history feeds a zero context to the user head") {
  BackboneParams p = random_params(small_config(), 6);
  Eigen::RowVectorXd h = encode_user(p, std::vector<ItemId>{}, 1);
  // tanh(W1 [0, e_u] + b1) then W2 . + b2
  Eigen::VectorXd joined(16);
  joined << Eigen::VectorXd::Zero(8), p.user_emb.value.row(1).transpose();
  Eigen::VectorXd z = (p.seq_w1.value * joined + p.seq_b1.value.transpose()).array().tanh();
  Eigen::VectorXd want = p.seq_w2.value * z + p.seq_b2.value.transpose();
  CHECK((h.transpose() - want).norm() < 1e-12);
}

TEST_CASE("single-item sequence depends only on that item and the user") {
  BackboneConfig c = small_config();
  c.blocks = 1;
  BackboneParams p = random_params(c, 7);
  auto before = encode_user(p, std::vector<ItemId>{2}, 1);
  for (ItemId i = 0; i < c.item_count; ++i) {
    if (i != 2) p.item_emb.value.row(i).setRandom();
  }
  p.user_emb.value.row(0).setRandom();
  CHECK((before - encode_user(p, std::vector<ItemId>{2}, 1)).norm() == 0.0);
}

TEST_CASE("encoder is causal") {
  BackboneParams p = random_params(small_config(), 8);
  ad::Tape tape;
  BackboneGraph g(tape, p);
  const std::vector<ItemId> a{1, 2, 3, 4}, b{1, 2, 6, 0};
  Eigen::MatrixXd ha = g.encode_sequence(a).value(), hb = g.encode_sequence(b).value();
  CHECK((ha.topRows(2) - hb.topRows(2)).norm() == 0.0);
  CHECK((ha.row(3) - hb.row(3)).norm() > 1e-6);
  // prefix rows agree with the per-prefix user encoding
  Eigen::MatrixXd pref = encode_user_prefixes(p, a, 0);
  REQUIRE(pref.rows() == 5);
  CHECK((pref.row(0) - encode_user(p, std::vector<ItemId>{}, 0)).norm() < 1e-12);
  CHECK((pref.row(4) - encode_user(p, a, 0)).norm() < 1e-12);
}

TEST_CASE("zero item embedding through a zero-bias tower stays zero") {
  BackboneParams p = BackboneParams::init(small_config(), 1);  // biases start at zero
  p.item_emb.value.row(3).setZero();
  CHECK(encode_item(p, 3).norm() == 0.0);
}

TEST_CASE("predict_ctr") {
  Eigen::RowVectorXd u(2), i(2);
  u << 1, 0;
  i << 0, 1;
  CHECK(predict_ctr(u, i, 1.0) == doctest::Approx(0.5));
  i << 0.7, 0;
  CHECK(predict_ctr(u, i, 0.7) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-12));
  CHECK(predict_ctr(u, i, 0.7) == doctest::Approx(0.73106).epsilon(1e-5));
  double prev = predict_ctr(u, i, 0.7);
  for (double tau : {1.0, 10.0, 100.0, 1e4}) {
    double p = predict_ctr(u, i, tau);
    CHECK(p < prev);
    CHECK(p > 0.5);
    prev = p;
  }
  CHECK(std::abs(prev - 0.5) < 1e-4);
  Eigen::RowVectorXd w(3);
  CHECK_THROWS(predict_ctr(u, w, 1.0));
  CHECK_THROWS(predict_ctr(u, i, 0.0));
}

TEST_CASE("bce_loss") {
  CHECK(bce_loss(Vec{0.5}, std::vector<int>{1}) == doctest::Approx(std::log(2.0)));
  CHECK(bce_loss(Vec{1.0, 0.0}, std::vector<int>{1, 0}) < 1e-6);
  const double want = (-std::log(0.9) - std::log(0.8)) / 2.0;
  CHECK(bce_loss(Vec{0.9, 0.2}, std::vector<int>{1, 0}) == doctest::Approx(want).epsilon(1e-12));
  CHECK(want == doctest::Approx(0.1643).epsilon(1e-3));
  CHECK_THROWS(bce_loss(Vec{}, std::vector<int>{}));
}

TEST_CASE("bce gradient wrt predictions and embedding rows match finite differences") {
  // d(bce)/d(p) for one sample is -(y/p) + (1-y)/(1-p), averaged over N
  {
    ad::Parameter probs("p", (Eigen::MatrixXd(3, 1) << 0.3, 0.6, 0.9).finished());
    const std::vector<double> labels{1, 0, 1};
    auto f = [&] {
      ad::Tape t;
      return ad::bce(t.param(probs), labels).scalar();
    };
    probs.zero_grad();
    ad::Tape t;
    t.backward(ad::bce(t.param(probs), labels));
    CHECK(testutil::max_fd_error(f, probs.value, probs.grad) < 1e-4);
  }

  BackboneParams p = random_params(small_config(), 11);
  for (auto* q : p.parameters()) q->value *= 0.5;
  const std::vector<LabeledPair> pairs{{0, 2, 1}, {1, 5, 0}, {2, 2, 0}, {3, 6, 1}};
  const std::vector<std::vector<ItemId>> ctx{{1, 3}, {4}, {0, 1, 6}, {2, 5, 1, 3}};
  // loss evaluated through the public, tape-free path
  auto f = [&] {
    std::vector<double> pr;
    std::vector<int> y;
    for (std::size_t s = 0; s < pairs.size(); ++s) {
      pr.push_back(predict_ctr(encode_user(p, ctx[s], pairs[s].user), encode_item(p, pairs[s].item),
                               p.config.temperature));
      y.push_back(pairs[s].label);
    }
    return bce_loss(pr, y);
  };
  for (auto* q : p.parameters()) q->zero_grad();
  {
    ad::Tape tape;
    BackboneGraph g(tape, p, true);
    std::vector<ad::Var> users;
    std::vector<ItemId> items;
    std::vector<double> labels;
    for (std::size_t s = 0; s < pairs.size(); ++s) {
      ad::Var h = g.encode_sequence(ctx[s]);
      users.push_back(g.user_head(ad::slice_rows(h, h.rows() - 1, 1), pairs[s].user));
      items.push_back(pairs[s].item);
      labels.push_back(pairs[s].label);
    }
    ad::Var logits = ad::scale(ad::row_dot(ad::vcat(users), g.item_tower(items)),
                               1.0 / p.config.temperature);
    ad::Var loss = ad::bce(ad::sigmoid(logits), labels);
    CHECK(loss.scalar() == doctest::Approx(f()).epsilon(1e-12));
    tape.backward(loss);
  }
  CHECK(testutil::max_fd_error(f, p.item_emb.value, p.item_emb.grad) < 1e-4);
  CHECK(testutil::max_fd_error(f, p.user_emb.value, p.user_emb.grad) < 1e-4);
  CHECK(testutil::max_fd_error(f, p.blocks[0].wq.value, p.blocks[0].wq.grad) < 1e-4);
  CHECK(testutil::max_fd_error(f, p.seq_w1.value, p.seq_w1.grad) < 1e-4);
}

namespace {

DatasetSplit toy_split() {
  // 10 positives: two users with five each
  std::vector<testutil::Row> rows;
  for (int t = 0; t < 5; ++t) {
    rows.push_back({0, t, 1, t});
    rows.push_back({1, 5 - t, 1, t});
  }
  return leave_one_out_split(testutil::make_log(rows, 2, 8), 5);
}

}  // namespace

TEST_CASE("pretrain descends on a toy log and is deterministic") {
  DatasetSplit split = toy_split();
  BackboneConfig c;
  c.dim = 8;
  c.blocks = 1;
  c.ffn_dim = 8;
  PretrainOptions o;
  o.adam.learning_rate = 0.05;
  o.batch_size = 1;
  o.max_epochs = 1;
  o.eval_negatives = 3;
  auto a = pretrain(split, c, o, 4);
  REQUIRE(a.history.size() == 1);
  CHECK(a.history[0].last_batch_loss < a.history[0].first_batch_loss);
  auto b = pretrain(split, c, o, 4);
  CHECK(a.params.checksum() == b.params.checksum());
  auto other = pretrain(split, c, o, 5);
  CHECK(a.params.checksum() != other.params.checksum());
}

TEST_CASE("freeze checksums and checkpoint round trip") {
  BackboneParams p = random_params(small_config(), 12);
  FrozenBackbone f1 = freeze(p), f2 = freeze(p);
  CHECK(f1.checksum() == f2.checksum());
  CHECK(f1.verify());

  auto bytes = f1.to_checkpoint().serialize();
  FrozenBackbone back = FrozenBackbone::from_checkpoint(Checkpoint::deserialize(bytes));
  CHECK(back.checksum() == f1.checksum());
  CHECK(back.to_checkpoint().serialize() == bytes);

  f1.mutable_params_for_testing().blocks[1].wv.value(0, 0) += 1e-12;
  CHECK(!f1.verify());
  Checkpoint tampered = f1.to_checkpoint();
  tampered.put("freeze_checksum", f2.checksum());
  CHECK_THROWS_AS(FrozenBackbone::from_checkpoint(tampered), CheckpointError);
}
