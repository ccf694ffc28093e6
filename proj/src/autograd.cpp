#include "promo/autograd.hpp"

#include <cmath>
#include <stdexcept>

namespace promo::ad {
namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw std::logic_error("autograd: uninitialized Var");
  return *a.tape();
}

Tape& tape_of(Var a, Var b) {
  if (a.tape() != b.tape()) throw std::logic_error("autograd: Vars from different tapes");
  return tape_of(a);
}

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
  }
}

bool needs(const Tape& t, Var v) { return t.node(v.id()).needs_grad; }

}  // namespace

Parameter::Parameter(std::string n, Matrix v, bool sparse)
    : name(std::move(n)), value(std::move(v)), row_sparse(sparse) {
  grad = Matrix::Zero(value.rows(), value.cols());
  if (row_sparse) touched.assign(static_cast<std::size_t>(value.rows()), 0);
}

void Parameter::zero_grad() {
  if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
    grad = Matrix::Zero(value.rows(), value.cols());
  } else if (row_sparse && !touched.empty()) {
    for (std::size_t r = 0; r < touched.size(); ++r) {
      if (touched[r]) grad.row(static_cast<Eigen::Index>(r)).setZero();
    }
  } else {
    grad.setZero();
  }
  if (row_sparse) touched.assign(static_cast<std::size_t>(value.rows()), 0);
}

void Parameter::mark_rows_touched() {
  if (row_sparse) touched.assign(static_cast<std::size_t>(value.rows()), 1);
}

const Matrix& Var::value() const { return tape_->node(id_).value; }
const Matrix& Var::grad() const { return tape_->node(id_).grad; }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw std::logic_error("autograd: scalar() on non-scalar");
  return v(0, 0);
}

Var Tape::push(Matrix value, bool needs_grad, std::function<void()> backward) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::constant(Matrix value) { return push(std::move(value), false, {}); }

Var Tape::param(Parameter& p) {
  if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) p.zero_grad();
  int id = static_cast<int>(nodes_.size());
  Parameter* target = &p;
  return push(p.value, true, [this, id, target] {
    target->grad += node(id).grad;
    target->mark_rows_touched();
  });
}

Var Tape::gather_rows(Parameter& table, std::span<const std::int32_t> rows) {
  if (table.grad.rows() != table.value.rows()) table.zero_grad();
  Matrix out(static_cast<Eigen::Index>(rows.size()), table.value.cols());
  for (std::size_t j = 0; j < rows.size(); ++j) {
    if (rows[j] < 0 || rows[j] >= table.value.rows()) {
      throw std::out_of_range("gather_rows: row " + std::to_string(rows[j]) + " outside " +
                              table.name);
    }
    out.row(static_cast<Eigen::Index>(j)) = table.value.row(rows[j]);
  }
  int id = static_cast<int>(nodes_.size());
  Parameter* target = &table;
  std::vector<std::int32_t> idx(rows.begin(), rows.end());
  return push(std::move(out), true, [this, id, target, idx = std::move(idx)] {
    const Matrix& g = node(id).grad;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      target->grad.row(idx[j]) += g.row(static_cast<Eigen::Index>(j));
      if (target->row_sparse) target->touched[static_cast<std::size_t>(idx[j])] = 1;
    }
  });
}

Var Tape::gather_rows(const Matrix& table, std::span<const std::int32_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), table.cols());
  for (std::size_t j = 0; j < rows.size(); ++j) {
    if (rows[j] < 0 || rows[j] >= table.rows()) {
      throw std::out_of_range("gather_rows: row " + std::to_string(rows[j]) + " out of range");
    }
    out.row(static_cast<Eigen::Index>(j)) = table.row(rows[j]);
  }
  return constant(std::move(out));
}

void Tape::backward(Var root) {
  if (root.tape() != this) throw std::logic_error("backward: foreign Var");
  if (node(root.id()).value.size() != 1) throw std::logic_error("backward: root must be 1x1");
  for (auto& n : nodes_) {
    if (n.needs_grad) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  }
  if (!node(root.id()).needs_grad) return;
  node(root.id()).grad(0, 0) = 1.0;
  for (int id = root.id(); id >= 0; --id) {
    auto& n = node(id);
    if (n.needs_grad && n.backward) n.backward();
  }
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  int ia = a.id(), ib = b.id();
  bool ng = needs(t, a) || needs(t, b);
  int id = static_cast<int>(t.size());
  Matrix v = a.value() * b.value();
  return t.push(std::move(v), ng, [&t, id, ia, ib] {
    const Matrix& g = t.node(id).grad;
    if (t.node(ia).needs_grad) t.node(ia).grad.noalias() += g * t.node(ib).value.transpose();
    if (t.node(ib).needs_grad) t.node(ib).grad.noalias() += t.node(ia).value.transpose() * g;
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: dimension mismatch");
  int ia = a.id(), ib = b.id();
  bool ng = needs(t, a) || needs(t, b);
  int id = static_cast<int>(t.size());
  Matrix v = a.value() * b.value().transpose();
  return t.push(std::move(v), ng, [&t, id, ia, ib] {
    const Matrix& g = t.node(id).grad;
    if (t.node(ia).needs_grad) t.node(ia).grad.noalias() += g * t.node(ib).value;
    if (t.node(ib).needs_grad) t.node(ib).grad.noalias() += g.transpose() * t.node(ia).value;
  });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  check_same_shape(a.value(), b.value(), "add");
  int ia = a.id(), ib = b.id();
  int id = static_cast<int>(t.size());
  Matrix v = a.value() + b.value();
  return t.push(std::move(v), needs(t, a) || needs(t, b), [&t, id, ia, ib] {
    const Matrix& g = t.node(id).grad;
    if (t.node(ia).needs_grad) t.node(ia).grad += g;
    if (t.node(ib).needs_grad) t.node(ib).grad += g;
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  check_same_shape(a.value(), b.value(), "sub");
  int ia = a.id(), ib = b.id();
  int id = static_cast<int>(t.size());
  Matrix v = a.value() - b.value();
  return t.push(std::move(v), needs(t, a) || needs(t, b), [&t, id, ia, ib] {
    const Matrix& g = t.node(id).grad;
    if (t.node(ia).needs_grad) t.node(ia).grad += g;
    if (t.node(ib).needs_grad) t.node(ib).grad -= g;
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  check_same_shape(a.value(), b.value(), "mul");
  int ia = a.id(), ib = b.id();
  int id = static_cast<int>(t.size());
  Matrix v = a.value().cwiseProduct(b.value());
  return t.push(std::move(v), needs(t, a) || needs(t, b), [&t, id, ia, ib] {
    const Matrix& g = t.node(id).grad;
    if (t.node(ia).needs_grad) t.node(ia).grad += g.cwiseProduct(t.node(ib).value);
    if (t.node(ib).needs_grad) t.node(ib).grad += g.cwiseProduct(t.node(ia).value);
  });
}

Var add_row(Var a, Var row) {
  Tape& t = tape_of(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw std::invalid_argument("add_row: expected 1x" + std::to_string(a.cols()) + " row");
  }
  int ia = a.id(), ir = row.id();
  int id = static_cast<int>(t.size());
  Matrix v = a.value();
  v.rowwise() += row.value().row(0);
  return t.push(std::move(v), needs(t, a) || needs(t, row), [&t, id, ia, ir] {
    const Matrix& g = t.node(id).grad;
    if (t.node(ia).needs_grad) t.node(ia).grad += g;
    if (t.node(ir).needs_grad) t.node(ir).grad += g.colwise().sum();
  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  int ia = a.id();
  int id = static_cast<int>(t.size());
  return t.push(a.value() * s, needs(t, a), [&t, id, ia, s] {
    t.node(ia).grad += t.node(id).grad * s;
  });
}

Var add_scalar(Var a, double s) {
  Tape& t = tape_of(a);
  int ia = a.id();
  int id = static_cast<int>(t.size());
  Matrix v = a.value().array() + s;
  return t.push(std::move(v), needs(t, a), [&t, id, ia] { t.node(ia).grad += t.node(id).grad; });
}

Var tanh(Var a) {
  Tape& t = tape_of(a);
  int ia = a.id();
  int id = static_cast<int>(t.size());
  Matrix v = a.value().array().tanh();
  return t.push(std::move(v), needs(t, a), [&t, id, ia] {
    const Matrix& y = t.node(id).value;
    t.node(ia).grad.array() += t.node(id).grad.array() * (1.0 - y.array().square());
  });
}

Var relu(Var a) {
  Tape& t = tape_of(a);
  int ia = a.id();
  int id = static_cast<int>(t.size());
  Matrix v = a.value().cwiseMax(0.0);
  return t.push(std::move(v), needs(t, a), [&t, id, ia] {
    const Matrix& x = t.node(ia).value;
    t.node(ia).grad.array() += (x.array() > 0.0).select(t.node(id).grad.array(), 0.0);
  });
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_neg(double x) {
  // log(1 + exp(-x)) = max(-x, 0) + log1p(exp(-|x|))
  return std::max(-x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

Var sigmoid(Var a) {
  Tape& t = tape_of(a);
  int ia = a.id();
  int id = static_cast<int>(t.size());
  Matrix v = a.value().unaryExpr([](double x) { return sigmoid(x); });
  return t.push(std::move(v), needs(t, a), [&t, id, ia] {
    const Matrix& y = t.node(id).value;
    t.node(ia).grad.array() += t.node(id).grad.array() * y.array() * (1.0 - y.array());
  });
}

Var linear(Var x, Var weight, Var bias) { return add_row(matmul_nt(x, weight), bias); }

Var hcat(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("hcat: no inputs");
  Tape& t = tape_of(parts[0]);
  Eigen::Index rows = parts[0].rows(), cols = 0;
  bool ng = false;
  std::vector<int> ids;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw std::logic_error("hcat: Vars from different tapes");
    if (p.rows() != rows) throw std::invalid_argument("hcat: row count mismatch");
    cols += p.cols();
    ng = ng || needs(t, p);
    ids.push_back(p.id());
  }
  Matrix v(rows, cols);
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    v.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  int id = static_cast<int>(t.size());
  return t.push(std::move(v), ng, [&t, id, ids = std::move(ids)] {
    const Matrix& g = t.node(id).grad;
    Eigen::Index c0 = 0;
    for (int pid : ids) {
      auto& n = t.node(pid);
      if (n.needs_grad) n.grad += g.middleCols(c0, n.value.cols());
      c0 += n.value.cols();
    }
  });
}

Var vcat(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("vcat: no inputs");
  Tape& t = tape_of(parts[0]);
  Eigen::Index cols = parts[0].cols(), rows = 0;
  bool ng = false;
  std::vector<int> ids;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw std::logic_error("vcat: Vars from different tapes");
    if (p.cols() != cols) throw std::invalid_argument("vcat: column count mismatch");
    rows += p.rows();
    ng = ng || needs(t, p);
    ids.push_back(p.id());
  }
  Matrix v(rows, cols);
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    v.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  int id = static_cast<int>(t.size());
  return t.push(std::move(v), ng, [&t, id, ids = std::move(ids)] {
    const Matrix& g = t.node(id).grad;
    Eigen::Index r0 = 0;
    for (int pid : ids) {
      auto& n = t.node(pid);
      if (n.needs_grad) n.grad += g.middleRows(r0, n.value.rows());
      r0 += n.value.rows();
    }
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  Tape& t = tape_of(a);
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw std::out_of_range("slice_rows: range outside matrix");
  }
  int ia = a.id();
  int id = static_cast<int>(t.size());
  Matrix v = a.value().middleRows(start, count);
  return t.push(std::move(v), needs(t, a), [&t, id, ia, start, count] {
    t.node(ia).grad.middleRows(start, count) += t.node(id).grad;
  });
}

Var select_rows(Var a, std::span<const std::int32_t> rows) {
  Tape& t = tape_of(a);
  Matrix v(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= a.rows()) throw std::out_of_range("select_rows: row index");
    v.row(static_cast<Eigen::Index>(r)) = a.value().row(rows[r]);
  }
  int ia = a.id();
  int id = static_cast<int>(t.size());
  std::vector<std::int32_t> idx(rows.begin(), rows.end());
  return t.push(std::move(v), needs(t, a), [&t, id, ia, idx = std::move(idx)] {
    const Matrix& g = t.node(id).grad;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      t.node(ia).grad.row(idx[r]) += g.row(static_cast<Eigen::Index>(r));
    }
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  Tape& t = tape_of(a);
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::out_of_range("slice_cols: range outside matrix");
  }
  int ia = a.id();
  int id = static_cast<int>(t.size());
  Matrix v = a.value().middleCols(start, count);
  return t.push(std::move(v), needs(t, a), [&t, id, ia, start, count] {
    t.node(ia).grad.middleCols(start, count) += t.node(id).grad;
  });
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  Tape& t = tape_of(a);
  if (a.rows() != 1 || a.cols() != rows * cols) {
    throw std::invalid_argument("reshape: expected 1x" + std::to_string(rows * cols) + " input");
  }
  int ia = a.id();
  int id = static_cast<int>(t.size());
  Matrix v(rows, cols);
  const Matrix& src = a.value();
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) v(r, c) = src(0, r * cols + c);
  return t.push(std::move(v), needs(t, a), [&t, id, ia, rows, cols] {
    const Matrix& g = t.node(id).grad;
    Matrix& dst = t.node(ia).grad;
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) dst(0, r * cols + c) += g(r, c);
  });
}

Var repeat_row(Var row, Eigen::Index n) {
  Tape& t = tape_of(row);
  if (row.rows() != 1) throw std::invalid_argument("repeat_row: expected a row vector");
  int ir = row.id();
  int id = static_cast<int>(t.size());
  Matrix v = row.value().replicate(n, 1);
  return t.push(std::move(v), needs(t, row), [&t, id, ir] {
    t.node(ir).grad += t.node(id).grad.colwise().sum();
  });
}

Var mean_rows(Var a) {
  Tape& t = tape_of(a);
  if (a.rows() == 0) throw std::invalid_argument("mean_rows: empty input");
  int ia = a.id();
  int id = static_cast<int>(t.size());
  double inv = 1.0 / static_cast<double>(a.rows());
  Matrix v = a.value().colwise().sum() * inv;
  return t.push(std::move(v), needs(t, a), [&t, id, ia, inv] {
    t.node(ia).grad.rowwise() += t.node(id).grad.row(0) * inv;
  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  int ia = a.id();
  int id = static_cast<int>(t.size());
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return t.push(std::move(v), needs(t, a), [&t, id, ia] {
    t.node(ia).grad.array() += t.node(id).grad(0, 0);
  });
}

Var mean(Var a) {
  if (a.value().size() == 0) throw std::invalid_argument("mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var row_dot(Var a, Var b) {
  Tape& t = tape_of(a, b);
  check_same_shape(a.value(), b.value(), "row_dot");
  int ia = a.id(), ib = b.id();
  int id = static_cast<int>(t.size());
  Matrix v = a.value().cwiseProduct(b.value()).rowwise().sum();
  return t.push(std::move(v), needs(t, a) || needs(t, b), [&t, id, ia, ib] {
    const Matrix& g = t.node(id).grad;  // n x 1
    if (t.node(ia).needs_grad)
      t.node(ia).grad += (t.node(ib).value.array().colwise() * g.col(0).array()).matrix();
    if (t.node(ib).needs_grad)
      t.node(ib).grad += (t.node(ia).value.array().colwise() * g.col(0).array()).matrix();
  });
}

Var causal_attention(Var q, Var k, Var v) {
  Tape& t = tape_of(q, k);
  if (v.tape() != &t) throw std::logic_error("causal_attention: Vars from different tapes");
  check_same_shape(q.value(), k.value(), "causal_attention");
  if (v.rows() != q.rows()) throw std::invalid_argument("causal_attention: value rows mismatch");
  const Eigen::Index n = q.rows();
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Matrix s = q.value() * k.value().transpose() * inv;
  Matrix p = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double mx = s.row(i).head(i + 1).maxCoeff();
    double z = 0.0;
    for (Eigen::Index j = 0; j <= i; ++j) {
      p(i, j) = std::exp(s(i, j) - mx);
      z += p(i, j);
    }
    p.row(i).head(i + 1) /= z;
  }
  Matrix out = p * v.value();
  int iq = q.id(), ik = k.id(), iv = v.id();
  int id = static_cast<int>(t.size());
  bool ng = needs(t, q) || needs(t, k) || needs(t, v);
  return t.push(std::move(out), ng, [&t, id, iq, ik, iv, p = std::move(p), inv] {
    const Matrix& g = t.node(id).grad;
    if (t.node(iv).needs_grad) t.node(iv).grad.noalias() += p.transpose() * g;
    Matrix dp = g * t.node(iv).value.transpose();
    Matrix ds = p.cwiseProduct(dp);
    Eigen::VectorXd rs = ds.rowwise().sum();
    ds -= (p.array().colwise() * rs.array()).matrix();
    // ds is zero above the diagonal because p is.
    if (t.node(iq).needs_grad) t.node(iq).grad.noalias() += ds * t.node(ik).value * inv;
    if (t.node(ik).needs_grad) t.node(ik).grad.noalias() += ds.transpose() * t.node(iq).value * inv;
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = tape_of(x, gamma);
  if (beta.tape() != &t) throw std::logic_error("layer_norm: Vars from different tapes");
  const Eigen::Index n = x.rows(), d = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw std::invalid_argument("layer_norm: gamma/beta must be 1 x cols");
  }
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    double mu = x.value().row(r).mean();
    double var = (x.value().row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.value().row(r).array() - mu) * inv_std(r);
  }
  Matrix out = xhat;
  out.array().rowwise() *= gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  int ix = x.id(), ig = gamma.id(), ib = beta.id();
  int id = static_cast<int>(t.size());
  bool ng = needs(t, x) || needs(t, gamma) || needs(t, beta);
  return t.push(std::move(out), ng,
                [&t, id, ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std), d] {
                  const Matrix& g = t.node(id).grad;
                  if (t.node(ig).needs_grad)
                    t.node(ig).grad += g.cwiseProduct(xhat).colwise().sum();
                  if (t.node(ib).needs_grad) t.node(ib).grad += g.colwise().sum();
                  if (t.node(ix).needs_grad) {
                    Matrix dxhat = g;
                    dxhat.array().rowwise() *= t.node(ig).value.row(0).array();
                    for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                      double m1 = dxhat.row(r).mean();
                      double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).sum() / d;
                      t.node(ix).grad.row(r).array() +=
                          inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                    }
                  }
                });
}

Var pairwise_l1_sum(Var a, Var b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != b.cols()) throw std::invalid_argument("pairwise_l1_sum: dimension mismatch");
  if (a.rows() == 0 || b.rows() == 0) throw std::invalid_argument("pairwise_l1_sum: empty input");
  double total = 0.0;
  for (Eigen::Index x = 0; x < a.rows(); ++x)
    for (Eigen::Index y = 0; y < b.rows(); ++y)
      total += (a.value().row(x) - b.value().row(y)).cwiseAbs().sum();
  Matrix v(1, 1);
  v(0, 0) = total;
  int ia = a.id(), ib = b.id();
  int id = static_cast<int>(t.size());
  return t.push(std::move(v), needs(t, a) || needs(t, b), [&t, id, ia, ib] {
    const double g = t.node(id).grad(0, 0);
    const Matrix& av = t.node(ia).value;
    const Matrix& bv = t.node(ib).value;
    for (Eigen::Index x = 0; x < av.rows(); ++x) {
      for (Eigen::Index y = 0; y < bv.rows(); ++y) {
        Eigen::RowVectorXd s = (av.row(x) - bv.row(y)).unaryExpr(
            [](double z) { return z > 0 ? 1.0 : (z < 0 ? -1.0 : 0.0); });
        if (t.node(ia).needs_grad) t.node(ia).grad.row(x) += g * s;
        if (t.node(ib).needs_grad) t.node(ib).grad.row(y) -= g * s;
      }
    }
  });
}

Var softplus_neg(Var x) {
  Tape& t = tape_of(x);
  int ix = x.id();
  int id = static_cast<int>(t.size());
  Matrix v = x.value().unaryExpr([](double z) { return softplus_neg(z); });
  return t.push(std::move(v), needs(t, x), [&t, id, ix] {
    // d/dx log(1 + e^{-x}) = -sigmoid(-x)
    const Matrix& xv = t.node(ix).value;
    t.node(ix).grad.array() -=
        t.node(id).grad.array() * xv.unaryExpr([](double z) { return sigmoid(-z); }).array();
  });
}

Var bce(Var probs, std::span<const double> labels, double clamp) {
  Tape& t = tape_of(probs);
  const Matrix& p = probs.value();
  if (p.cols() != 1 || p.rows() != static_cast<Eigen::Index>(labels.size())) {
    throw std::invalid_argument("bce: predictions and labels differ in length");
  }
  if (labels.empty()) throw std::invalid_argument("bce: empty batch");
  const double n = static_cast<double>(labels.size());
  double loss = 0.0;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    double q = std::clamp(p(r, 0), clamp, 1.0 - clamp);
    double y = labels[static_cast<std::size_t>(r)];
    loss -= y * std::log(q) + (1.0 - y) * std::log(1.0 - q);
  }
  Matrix v(1, 1);
  v(0, 0) = loss / n;
  int ip = probs.id();
  int id = static_cast<int>(t.size());
  std::vector<double> ys(labels.begin(), labels.end());
  return t.push(std::move(v), needs(t, probs), [&t, id, ip, ys = std::move(ys), clamp, n] {
    const double g = t.node(id).grad(0, 0);
    const Matrix& pv = t.node(ip).value;
    Matrix& dst = t.node(ip).grad;
    for (Eigen::Index r = 0; r < pv.rows(); ++r) {
      double q = pv(r, 0);
      if (q < clamp || q > 1.0 - clamp) continue;  // clamped: flat
      double y = ys[static_cast<std::size_t>(r)];
      dst(r, 0) += g * (-(y / q) + (1.0 - y) / (1.0 - q)) / n;
    }
  });
}

}  // namespace promo::ad
