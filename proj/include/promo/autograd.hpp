#pragma once

// Minimal reverse-mode differentiation over dense Eigen matrices.
//
// Vectors are 1 x n row matrices; a batch of vectors stacks rows. A Tape owns
// every intermediate of one forward pass and is discarded after backward().

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace promo::ad {

using Matrix = Eigen::MatrixXd;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  // Embedding-style tables: the optimizer only updates rows touched since
  // the last zero_grad().
  bool row_sparse = false;
  std::vector<std::uint8_t> touched;

  Parameter() = default;
  Parameter(std::string n, Matrix v, bool sparse = false);

  void zero_grad();
  void mark_rows_touched();
  Eigen::Index size() const { return value.size(); }
};

class Tape;

class Var {
 public:
  Var() = default;
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  const Matrix& grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  // Differentiable copy of a parameter; gradients accumulate into p.grad.
  Var param(Parameter& p);
  // Rows of an embedding table; gradients scatter back into those rows.
  Var gather_rows(Parameter& table, std::span<const std::int32_t> rows);
  Var gather_rows(const Matrix& table, std::span<const std::int32_t> rows);

  // Seeds d(root)/d(root) = 1; root must be 1 x 1.
  void backward(Var root);

  // Internal: used by the op implementations.
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    std::function<void()> backward;
  };
  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  Var push(Matrix value, bool needs_grad, std::function<void()> backward);
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

// Elementwise / structural ops. All inputs must share one tape.
Var matmul(Var a, Var b);        // a * b
Var matmul_nt(Var a, Var b);     // a * b^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);           // elementwise
Var add_row(Var a, Var row);     // row broadcast over a's rows
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var tanh(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var linear(Var x, Var weight, Var bias);  // x W^T + b, W is out x in
Var hcat(std::span<const Var> parts);
Var vcat(std::span<const Var> parts);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
// Row gather with repetition allowed; gradients accumulate per source row.
Var select_rows(Var a, std::span<const std::int32_t> rows);
// Row-major reinterpretation: out(r, c) = flat[r * cols + c] for a 1 x (rows*cols) input.
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
Var repeat_row(Var row, Eigen::Index n);
Var mean_rows(Var a);            // 1 x cols
Var sum(Var a);                  // 1 x 1
Var mean(Var a);                 // 1 x 1
Var row_dot(Var a, Var b);       // n x 1
// softmax(q k^T / sqrt(d) with j > i masked) v
Var causal_attention(Var q, Var k, Var v);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6);
// sum over all row pairs (x in a, y in b) of ||a_x - b_y||_1
Var pairwise_l1_sum(Var a, Var b);
// log(1 + exp(-x)), elementwise, overflow-safe
Var softplus_neg(Var x);
// -(1/N) sum y log p + (1-y) log(1-p) with p clamped to [clamp, 1-clamp]
Var bce(Var probs, std::span<const double> labels, double clamp = 1e-7);

// Scalar helpers shared with non-tape code paths.
double softplus_neg(double x);
double sigmoid(double x);

}  // namespace promo::ad
