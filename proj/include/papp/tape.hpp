#pragma once

// Reverse-mode differentiation over real matrices. Every node stores its
// value; the backward sweep walks nodes in reverse insertion order once.
// Complex quantities are carried as (re, im) pairs of real nodes (CVar).

#include "papp/linalg.hpp"

#include <cstdint>
#include <initializer_list>
#include <vector>

namespace papp::ad {

using Matrix = Eigen::MatrixXd;

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Scale,
  AddConst,
  MatMul,
  Transpose,
  Relu,
  Softplus,
  Log,
  Exp,
  Sqrt,
  Sin,
  Cos,
  Sum,
  RowSum,
  ColSum,
  Block,
  ConcatH,
  ConcatV,
  Reshape,
  Im2Col3x3,
  QuantileCols,
  Solve,
};

const char* op_name(Op op);

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
};

struct Node {
  Op op = Op::Leaf;
  std::vector<int> inputs;
  Matrix value;
  // op-specific cached data (masks, sort weights, LU input, ...)
  Matrix aux;
  double param = 0.0;
  std::vector<int> iparams;
  bool requires_grad = false;
};

class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Matrix> g) : grads_(std::move(g)) {}
  /// Gradient of the output w.r.t. v (zeros if v does not influence it).
  Matrix operator[](const Var& v) const;
  bool has(const Var& v) const;

 private:
  std::vector<Matrix> grads_;
};

class Tape {
 public:
  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable leaf (a parameter or input we want gradients for).
  Var variable(Matrix value);
  /// Non-differentiable leaf.
  Var constant(Matrix value);
  Var scalar_variable(double v) { return variable(Matrix::Constant(1, 1, v)); }
  Var scalar_constant(double v) { return constant(Matrix::Constant(1, 1, v)); }

  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }

  Var push(Op op, std::vector<int> inputs, Matrix value, Matrix aux = {}, double param = 0.0,
           std::vector<int> iparams = {});

  /// Reverse sweep from a 1x1 output node.
  Gradients backward(const Var& output) const;

 private:
  void propagate(const Node& n, const Matrix& g, std::vector<Matrix>& grads) const;
  std::vector<Node> nodes_;
};

// Elementwise arithmetic. Shapes must agree, or one side may be a 1x1
// scalar, a 1xm row (broadcast down rows) or an nx1 column (broadcast
// across columns).
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator-(const Var& a);
Var operator*(double c, const Var& a);
Var operator*(const Var& a, double c);
Var operator+(const Var& a, double c);
Var operator+(double c, const Var& a);
Var operator-(const Var& a, double c);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var relu(const Var& a);
Var softplus(const Var& a);
Var log(const Var& a);
Var exp(const Var& a);
Var sqrt(const Var& a);
Var sin(const Var& a);
Var cos(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
Var row_sum(const Var& a);
Var col_sum(const Var& a);
Var block(const Var& a, Eigen::Index r, Eigen::Index c, Eigen::Index nr, Eigen::Index nc);
Var concat_h(const std::vector<Var>& parts);
Var concat_v(const std::vector<Var>& parts);
/// Row-major reshape.
Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols);
/// a is (channels x grid_rows*grid_cols), each row a row-major plane. Result
/// is (channels*9 x grid_rows*grid_cols) patch matrix for a 3x3 kernel with
/// stride 1 and zero padding 1.
Var im2col3x3(const Var& a, Eigen::Index grid_rows, Eigen::Index grid_cols);
/// Per-column quantile with linear interpolation between order statistics.
Var quantile_cols(const Var& a, double p);
/// X with A X = B.
Var solve(const Var& a, const Var& b);

/// Complex matrix as a pair of real nodes.
struct CVar {
  Var re;
  Var im;
  Eigen::Index rows() const { return re.rows(); }
  Eigen::Index cols() const { return re.cols(); }
  CMatrix value() const;
};

CVar constant(Tape& t, const CMatrix& m);
CVar variable(Tape& t, const CMatrix& m);
CVar cmatmul(const CVar& a, const CVar& b);
/// Conjugate transpose.
CVar adjoint(const CVar& a);
CVar operator+(const CVar& a, const CVar& b);
CVar operator-(const CVar& a, const CVar& b);
/// Scales every entry by the real scalar node s (1x1).
CVar scale(const CVar& a, const Var& s);
/// |entries|^2.
Var abs2(const CVar& a);
/// Squared Frobenius norm as a 1x1 node.
Var frobenius2(const CVar& a);
/// Complex solve A X = B through the real block embedding [[Ar,-Ai],[Ai,Ar]].
CVar csolve(const CVar& a, const CVar& b);

}  // namespace papp::ad
