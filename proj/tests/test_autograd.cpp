#include "promo/autograd.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <random>

using namespace promo;
using ad::Matrix;
using ad::Parameter;
using ad::Tape;
using ad::Var;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, unsigned seed, double scale = 1.0) {
  std::mt19937 g(seed);
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(g);
  return m;
}

// Reduces an op output to a scalar with fixed random weights, so every output
// entry contributes a distinct amount to the gradient.
using Op = std::function<Var(Tape&, std::vector<Var>&)>;

void check_op(const char* name, std::vector<Parameter> params, const Op& op, double tol = 1e-6) {
  Matrix weights;
  auto forward = [&](bool grad) {
    Tape tape;
    std::vector<Var> in;
    for (auto& p : params) in.push_back(tape.param(p));
    Var out = op(tape, in);
    if (weights.size() == 0) weights = random_matrix(out.rows(), out.cols(), 99);
    Var loss = ad::sum(ad::mul(out, tape.constant(weights)));
    if (grad) tape.backward(loss);
    return loss.scalar();
  };
  for (auto& p : params) p.zero_grad();
  forward(true);
  for (auto& p : params) {
    const Matrix analytic = p.grad;
    const double err = testutil::max_fd_error([&] { return forward(false); }, p.value, analytic);
    INFO(name << " param " << p.name);
    CHECK(err < tol);
  }
}

Parameter P(const char* n, Eigen::Index r, Eigen::Index c, unsigned seed, double s = 1.0) {
  return Parameter(n, random_matrix(r, c, seed, s));
}

}  // namespace

TEST_CASE("finite differences agree with every op's backward") {
  check_op("matmul", {P("a", 3, 4, 1), P("b", 4, 2, 2)},
           [](Tape&, auto& v) { return ad::matmul(v[0], v[1]); });
  check_op("matmul_nt", {P("a", 3, 4, 1), P("b", 5, 4, 2)},
           [](Tape&, auto& v) { return ad::matmul_nt(v[0], v[1]); });
  check_op("add/sub/mul", {P("a", 3, 4, 1), P("b", 3, 4, 2)}, [](Tape&, auto& v) {
    return ad::mul(ad::add(v[0], v[1]), ad::sub(v[0], v[1]));
  });
  check_op("add_row", {P("a", 3, 4, 1), P("r", 1, 4, 2)},
           [](Tape&, auto& v) { return ad::add_row(v[0], v[1]); });
  check_op("scale/add_scalar", {P("a", 2, 3, 1)},
           [](Tape&, auto& v) { return ad::add_scalar(ad::scale(v[0], -1.5), 0.3); });
  check_op("tanh", {P("a", 3, 3, 1)}, [](Tape&, auto& v) { return ad::tanh(v[0]); });
  check_op("sigmoid", {P("a", 3, 3, 1)}, [](Tape&, auto& v) { return ad::sigmoid(v[0]); });
  check_op("relu", {P("a", 3, 3, 1)}, [](Tape&, auto& v) { return ad::relu(v[0]); });
  check_op("linear", {P("x", 4, 3, 1), P("w", 5, 3, 2), P("b", 1, 5, 3)},
           [](Tape&, auto& v) { return ad::linear(v[0], v[1], v[2]); });
  check_op("hcat/vcat", {P("a", 2, 3, 1), P("b", 2, 2, 2)}, [](Tape&, auto& v) {
    std::vector<Var> h{v[0], v[1]};
    Var c = ad::hcat(h);
    std::vector<Var> w{c, c};
    return ad::vcat(w);
  });
  check_op("slices", {P("a", 4, 5, 1)}, [](Tape&, auto& v) {
    return ad::slice_cols(ad::slice_rows(v[0], 1, 2), 2, 3);
  });
  check_op("select_rows", {P("a", 4, 3, 1)}, [](Tape&, auto& v) {
    std::vector<std::int32_t> rows{2, 0, 2, 3};
    return ad::select_rows(v[0], rows);
  });
  check_op("reshape/repeat", {P("a", 1, 6, 1)}, [](Tape&, auto& v) {
    return ad::add(ad::reshape(v[0], 2, 3), ad::repeat_row(ad::slice_cols(v[0], 0, 3), 2));
  });
  check_op("mean_rows/mean", {P("a", 3, 4, 1), P("b", 3, 4, 2)}, [](Tape&, auto& v) {
    std::vector<Var> parts{ad::mean_rows(v[0]), ad::mean(v[1])};
    return ad::hcat(parts);
  });
  check_op("row_dot", {P("a", 3, 4, 1), P("b", 3, 4, 2)},
           [](Tape&, auto& v) { return ad::row_dot(v[0], v[1]); });
  check_op("causal_attention", {P("q", 4, 3, 1), P("k", 4, 3, 2), P("v", 4, 3, 3)},
           [](Tape&, auto& v) { return ad::causal_attention(v[0], v[1], v[2]); });
  check_op("layer_norm", {P("x", 3, 5, 1), P("g", 1, 5, 2), P("b", 1, 5, 3)},
           [](Tape&, auto& v) { return ad::layer_norm(v[0], v[1], v[2]); }, 1e-5);
  check_op("pairwise_l1_sum", {P("a", 3, 4, 1), P("b", 2, 4, 2)},
           [](Tape&, auto& v) { return ad::pairwise_l1_sum(v[0], v[1]); });
  check_op("softplus_neg", {P("a", 3, 3, 1, 3.0)},
           [](Tape&, auto& v) { return ad::softplus_neg(v[0]); });
  check_op("bce", {P("a", 4, 1, 1)}, [](Tape&, auto& v) {
    static const std::vector<double> y{1, 0, 1, 0};
    return ad::bce(ad::sigmoid(v[0]), y);
  });
}

TEST_CASE("gather_rows scatters into touched rows only") {
  Parameter table("t", random_matrix(5, 3, 4), true);
  table.zero_grad();
  Tape tape;
  std::vector<std::int32_t> rows{1, 3, 1};
  tape.backward(ad::sum(tape.gather_rows(table, rows)));
  CHECK(table.grad.row(1).sum() == doctest::Approx(6.0));
  CHECK(table.grad.row(3).sum() == doctest::Approx(3.0));
  CHECK(table.grad.row(0).isZero());
  REQUIRE(table.touched.size() == 5);
  CHECK(table.touched[1] == 1);
  CHECK(table.touched[0] == 0);
}

TEST_CASE("causal attention ignores the future") {
  Tape tape;
  Matrix q = random_matrix(3, 2, 1), k = random_matrix(3, 2, 2), v = random_matrix(3, 2, 3);
  Matrix out = ad::causal_attention(tape.constant(q), tape.constant(k), tape.constant(v)).value();
  // The first position can only see itself.
  CHECK((out.row(0) - v.row(0)).norm() < 1e-12);
  Matrix v2 = v;
  v2.row(2).setConstant(100.0);
  Matrix out2 = ad::causal_attention(tape.constant(q), tape.constant(k), tape.constant(v2)).value();
  CHECK((out.topRows(2) - out2.topRows(2)).norm() < 1e-12);
}

TEST_CASE("softplus_neg is overflow safe and matches log1p(exp(-x))") {
  CHECK(ad::softplus_neg(0.0) == doctest::Approx(std::log(2.0)));
  CHECK(ad::softplus_neg(2.0) == doctest::Approx(std::log1p(std::exp(-2.0))));
  CHECK(ad::softplus_neg(-800.0) == doctest::Approx(800.0));
  CHECK(std::isfinite(ad::softplus_neg(800.0)));
  CHECK(ad::sigmoid(-800.0) >= 0.0);
}
