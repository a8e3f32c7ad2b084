#include "papp/tape.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace papp::ad {

namespace {

Matrix expand(const Matrix& m, Eigen::Index r, Eigen::Index c) {
  if (m.rows() == r && m.cols() == c) return m;
  if (m.rows() == 1 && m.cols() == 1) return Matrix::Constant(r, c, m(0, 0));
  if (m.rows() == 1 && m.cols() == c) return m.replicate(r, 1);
  if (m.cols() == 1 && m.rows() == r) return m.replicate(1, c);
  throw DimensionError("broadcast: cannot expand " + shape_str(m.rows(), m.cols()) + " to " + shape_str(r, c));
}

Matrix reduce_to(const Matrix& g, Eigen::Index r, Eigen::Index c) {
  if (g.rows() == r && g.cols() == c) return g;
  if (r == 1 && c == 1) return Matrix::Constant(1, 1, g.sum());
  if (r == 1) return g.colwise().sum();
  return g.rowwise().sum();
}

Eigen::Index broadcast_dim(Eigen::Index a, Eigen::Index b, const char* what) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  throw DimensionError(std::string(what) + ": incompatible dimensions " + std::to_string(a) + " and " +
                       std::to_string(b));
}

Tape& tape_of(const Var& a, const Var& b) {
  if (a.tape == nullptr || a.tape != b.tape) throw std::invalid_argument("vars belong to different tapes");
  return *a.tape;
}

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Matrix reshape_row_major(const Matrix& m, Eigen::Index r, Eigen::Index c) {
  RowMajorMatrix rm = m;
  return Eigen::Map<const RowMajorMatrix>(rm.data(), r, c);
}

double softplus_scalar(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Var binary(Op op, const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const Eigen::Index r = broadcast_dim(av.rows(), bv.rows(), op_name(op));
  const Eigen::Index c = broadcast_dim(av.cols(), bv.cols(), op_name(op));
  const Matrix ae = expand(av, r, c);
  const Matrix be = expand(bv, r, c);
  Matrix out;
  switch (op) {
    case Op::Add: out = ae + be; break;
    case Op::Sub: out = ae - be; break;
    case Op::Mul: out = ae.cwiseProduct(be); break;
    case Op::Div: out = ae.cwiseQuotient(be); break;
    default: throw std::logic_error("binary: bad op");
  }
  return t.push(op, {a.id, b.id}, std::move(out));
}

Var unary(Op op, const Var& a, Matrix out, double param = 0.0) {
  return a.tape->push(op, {a.id}, std::move(out), {}, param);
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Scale: return "scale";
    case Op::AddConst: return "add_const";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Relu: return "relu";
    case Op::Softplus: return "softplus";
    case Op::Log: return "log";
    case Op::Exp: return "exp";
    case Op::Sqrt: return "sqrt";
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Sum: return "sum";
    case Op::RowSum: return "row_sum";
    case Op::ColSum: return "col_sum";
    case Op::Block: return "block";
    case Op::ConcatH: return "concat_h";
    case Op::ConcatV: return "concat_v";
    case Op::Reshape: return "reshape";
    case Op::Im2Col3x3: return "im2col3x3";
    case Op::QuantileCols: return "quantile_cols";
    case Op::Solve: return "solve";
  }
  return "?";
}

const Matrix& Var::value() const { return tape->node(id).value; }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw DimensionError("Var::scalar on " + shape_str(v.rows(), v.cols()));
  return v(0, 0);
}

Matrix Gradients::operator[](const Var& v) const {
  const auto i = static_cast<std::size_t>(v.id);
  if (i < grads_.size() && grads_[i].size() > 0) return grads_[i];
  return Matrix::Zero(v.rows(), v.cols());
}

bool Gradients::has(const Var& v) const {
  const auto i = static_cast<std::size_t>(v.id);
  return i < grads_.size() && grads_[i].size() > 0;
}

Var Tape::variable(Matrix value) {
  if (!value.allFinite()) throw std::invalid_argument("tape: non-finite leaf value");
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::push(Op op, std::vector<int> inputs, Matrix value, Matrix aux, double param, std::vector<int> iparams) {
  Node n;
  n.op = op;
  const int next = static_cast<int>(nodes_.size());
  for (int in : inputs) {
    if (in < 0 || in >= next) throw std::logic_error("tape: input does not reference an earlier node");
    n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(in)].requires_grad;
  }
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  n.aux = std::move(aux);
  n.param = param;
  n.iparams = std::move(iparams);
  nodes_.push_back(std::move(n));
  return Var{this, next};
}

Gradients Tape::backward(const Var& output) const {
  if (output.tape != this) throw std::invalid_argument("backward: output belongs to another tape");
  const Node& out = node(output.id);
  if (out.value.size() != 1)
    throw DimensionError("backward: output must be scalar, got " + shape_str(out.value.rows(), out.value.cols()));
  std::vector<Matrix> grads(nodes_.size());
  grads[static_cast<std::size_t>(output.id)] = Matrix::Ones(1, 1);
  for (int i = output.id; i >= 0; --i) {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    const Matrix& g = grads[static_cast<std::size_t>(i)];
    if (n.op == Op::Leaf || g.size() == 0 || !n.requires_grad) continue;
    propagate(n, g, grads);
  }
  return Gradients(std::move(grads));
}

void Tape::propagate(const Node& n, const Matrix& g, std::vector<Matrix>& grads) const {
  auto in = [&](std::size_t k) -> const Node& { return nodes_[static_cast<std::size_t>(n.inputs[k])]; };
  auto accum = [&](std::size_t k, const Matrix& d) {
    const auto id = static_cast<std::size_t>(n.inputs[k]);
    if (!nodes_[id].requires_grad) return;
    Matrix& slot = grads[id];
    if (slot.size() == 0)
      slot = d;
    else
      slot += d;
  };
  auto needs = [&](std::size_t k) { return in(k).requires_grad; };

  switch (n.op) {
    case Op::Leaf: break;
    case Op::Add:
      accum(0, reduce_to(g, in(0).value.rows(), in(0).value.cols()));
      accum(1, reduce_to(g, in(1).value.rows(), in(1).value.cols()));
      break;
    case Op::Sub:
      accum(0, reduce_to(g, in(0).value.rows(), in(0).value.cols()));
      accum(1, reduce_to(-g, in(1).value.rows(), in(1).value.cols()));
      break;
    case Op::Mul: {
      const Matrix& a = in(0).value;
      const Matrix& b = in(1).value;
      if (needs(0)) accum(0, reduce_to(g.cwiseProduct(expand(b, g.rows(), g.cols())), a.rows(), a.cols()));
      if (needs(1)) accum(1, reduce_to(g.cwiseProduct(expand(a, g.rows(), g.cols())), b.rows(), b.cols()));
      break;
    }
    case Op::Div: {
      const Matrix& a = in(0).value;
      const Matrix& b = in(1).value;
      const Matrix be = expand(b, g.rows(), g.cols());
      if (needs(0)) accum(0, reduce_to(g.cwiseQuotient(be), a.rows(), a.cols()));
      if (needs(1)) {
        const Matrix d = -g.cwiseProduct(n.value).cwiseQuotient(be);
        accum(1, reduce_to(d, b.rows(), b.cols()));
      }
      break;
    }
    case Op::Scale: accum(0, n.param * g); break;
    case Op::AddConst: accum(0, g); break;
    case Op::MatMul:
      if (needs(0)) accum(0, g * in(1).value.transpose());
      if (needs(1)) accum(1, in(0).value.transpose() * g);
      break;
    case Op::Transpose: accum(0, g.transpose()); break;
    case Op::Relu: accum(0, g.cwiseProduct((in(0).value.array() > 0.0).cast<double>().matrix())); break;
    case Op::Softplus: accum(0, g.cwiseProduct(in(0).value.unaryExpr([](double x) { return sigmoid(x); }))); break;
    case Op::Log: accum(0, g.cwiseQuotient(in(0).value)); break;
    case Op::Exp: accum(0, g.cwiseProduct(n.value)); break;
    case Op::Sqrt: accum(0, (0.5 * g.array() / n.value.array()).matrix()); break;
    case Op::Sin: accum(0, g.cwiseProduct(in(0).value.array().cos().matrix())); break;
    case Op::Cos: accum(0, (-g.array() * in(0).value.array().sin()).matrix()); break;
    case Op::Sum: accum(0, Matrix::Constant(in(0).value.rows(), in(0).value.cols(), g(0, 0))); break;
    case Op::RowSum: accum(0, g.replicate(1, in(0).value.cols())); break;
    case Op::ColSum: accum(0, g.replicate(in(0).value.rows(), 1)); break;
    case Op::Block: {
      Matrix d = Matrix::Zero(in(0).value.rows(), in(0).value.cols());
      d.block(n.iparams[0], n.iparams[1], g.rows(), g.cols()) = g;
      accum(0, d);
      break;
    }
    case Op::ConcatH: {
      Eigen::Index off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Eigen::Index w = in(k).value.cols();
        if (needs(k)) accum(k, g.middleCols(off, w));
        off += w;
      }
      break;
    }
    case Op::ConcatV: {
      Eigen::Index off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Eigen::Index h = in(k).value.rows();
        if (needs(k)) accum(k, g.middleRows(off, h));
        off += h;
      }
      break;
    }
    case Op::Reshape: accum(0, reshape_row_major(g, in(0).value.rows(), in(0).value.cols())); break;
    case Op::Im2Col3x3: {
      const Eigen::Index gr = n.iparams[0];
      const Eigen::Index gc = n.iparams[1];
      const Eigen::Index channels = in(0).value.rows();
      Matrix d = Matrix::Zero(channels, gr * gc);
      for (Eigen::Index ch = 0; ch < channels; ++ch)
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const Eigen::Index row = ch * 9 + ky * 3 + kx;
            for (Eigen::Index y = 0; y < gr; ++y) {
              const Eigen::Index sy = y + ky - 1;
              if (sy < 0 || sy >= gr) continue;
              for (Eigen::Index x = 0; x < gc; ++x) {
                const Eigen::Index sx = x + kx - 1;
                if (sx < 0 || sx >= gc) continue;
                d(ch, sy * gc + sx) += g(row, y * gc + x);
              }
            }
          }
      accum(0, d);
      break;
    }
    case Op::QuantileCols: {
      Matrix d = Matrix::Zero(in(0).value.rows(), in(0).value.cols());
      for (Eigen::Index j = 0; j < d.cols(); ++j) {
        const auto lo = static_cast<Eigen::Index>(n.aux(0, j));
        const auto hi = static_cast<Eigen::Index>(n.aux(1, j));
        const double f = n.aux(2, j);
        d(lo, j) += (1.0 - f) * g(0, j);
        d(hi, j) += f * g(0, j);
      }
      accum(0, d);
      break;
    }
    case Op::Solve: {
      LuFactor<double> lu(in(0).value);
      const Matrix gb = lu.solve_transposed(g);
      if (needs(1)) accum(1, gb);
      if (needs(0)) accum(0, -gb * n.value.transpose());
      break;
    }
  }
}

Var operator+(const Var& a, const Var& b) { return binary(Op::Add, a, b); }
Var operator-(const Var& a, const Var& b) { return binary(Op::Sub, a, b); }
Var operator*(const Var& a, const Var& b) { return binary(Op::Mul, a, b); }
Var operator/(const Var& a, const Var& b) { return binary(Op::Div, a, b); }
Var operator-(const Var& a) { return -1.0 * a; }
Var operator*(double c, const Var& a) { return unary(Op::Scale, a, c * a.value(), c); }
Var operator*(const Var& a, double c) { return c * a; }
Var operator+(const Var& a, double c) { return unary(Op::AddConst, a, (a.value().array() + c).matrix(), c); }
Var operator+(double c, const Var& a) { return a + c; }
Var operator-(const Var& a, double c) { return a + (-c); }

Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != b.rows())
    throw DimensionError("matmul: " + shape_str(a.rows(), a.cols()) + " * " + shape_str(b.rows(), b.cols()));
  return t.push(Op::MatMul, {a.id, b.id}, a.value() * b.value());
}

Var transpose(const Var& a) { return unary(Op::Transpose, a, a.value().transpose()); }
Var relu(const Var& a) { return unary(Op::Relu, a, a.value().cwiseMax(0.0)); }
Var softplus(const Var& a) { return unary(Op::Softplus, a, a.value().unaryExpr(&softplus_scalar)); }
Var log(const Var& a) { return unary(Op::Log, a, a.value().array().log().matrix()); }
Var exp(const Var& a) { return unary(Op::Exp, a, a.value().array().exp().matrix()); }
Var sqrt(const Var& a) { return unary(Op::Sqrt, a, a.value().array().sqrt().matrix()); }
Var sin(const Var& a) { return unary(Op::Sin, a, a.value().array().sin().matrix()); }
Var cos(const Var& a) { return unary(Op::Cos, a, a.value().array().cos().matrix()); }
Var sum(const Var& a) { return unary(Op::Sum, a, Matrix::Constant(1, 1, a.value().sum())); }
Var mean(const Var& a) { return sum(a) * (1.0 / static_cast<double>(a.value().size())); }
Var row_sum(const Var& a) { return unary(Op::RowSum, a, a.value().rowwise().sum()); }
Var col_sum(const Var& a) { return unary(Op::ColSum, a, a.value().colwise().sum()); }

Var block(const Var& a, Eigen::Index r, Eigen::Index c, Eigen::Index nr, Eigen::Index nc) {
  if (r < 0 || c < 0 || r + nr > a.rows() || c + nc > a.cols())
    throw DimensionError("block: out of range on " + shape_str(a.rows(), a.cols()));
  return a.tape->push(Op::Block, {a.id}, a.value().block(r, c, nr, nc), {}, 0.0,
                      {static_cast<int>(r), static_cast<int>(c)});
}

Var concat_h(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_h: no inputs");
  Eigen::Index cols = 0;
  std::vector<int> ids;
  for (const Var& p : parts) {
    if (p.rows() != parts.front().rows()) throw DimensionError("concat_h: row mismatch");
    cols += p.cols();
    ids.push_back(p.id);
  }
  Matrix out(parts.front().rows(), cols);
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return parts.front().tape->push(Op::ConcatH, std::move(ids), std::move(out));
}

Var concat_v(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_v: no inputs");
  Eigen::Index rows = 0;
  std::vector<int> ids;
  for (const Var& p : parts) {
    if (p.cols() != parts.front().cols()) throw DimensionError("concat_v: column mismatch");
    rows += p.rows();
    ids.push_back(p.id);
  }
  Matrix out(rows, parts.front().cols());
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return parts.front().tape->push(Op::ConcatV, std::move(ids), std::move(out));
}

Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) throw DimensionError("reshape: size mismatch");
  return unary(Op::Reshape, a, reshape_row_major(a.value(), rows, cols));
}

Var im2col3x3(const Var& a, Eigen::Index grid_rows, Eigen::Index grid_cols) {
  if (a.cols() != grid_rows * grid_cols) throw DimensionError("im2col3x3: plane size mismatch");
  const Matrix& v = a.value();
  const Eigen::Index channels = v.rows();
  Matrix out = Matrix::Zero(channels * 9, grid_rows * grid_cols);
  for (Eigen::Index ch = 0; ch < channels; ++ch)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const Eigen::Index row = ch * 9 + ky * 3 + kx;
        for (Eigen::Index y = 0; y < grid_rows; ++y) {
          const Eigen::Index sy = y + ky - 1;
          if (sy < 0 || sy >= grid_rows) continue;
          for (Eigen::Index x = 0; x < grid_cols; ++x) {
            const Eigen::Index sx = x + kx - 1;
            if (sx < 0 || sx >= grid_cols) continue;
            out(row, y * grid_cols + x) = v(ch, sy * grid_cols + sx);
          }
        }
      }
  return a.tape->push(Op::Im2Col3x3, {a.id}, std::move(out), {}, 0.0,
                      {static_cast<int>(grid_rows), static_cast<int>(grid_cols)});
}

Var quantile_cols(const Var& a, double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("quantile_cols: p outside [0,1]");
  const Matrix& v = a.value();
  const Eigen::Index n = v.rows();
  Matrix out(1, v.cols());
  Matrix aux(3, v.cols());
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  const double h = static_cast<double>(n - 1) * p;
  const auto lo_rank = static_cast<Eigen::Index>(std::floor(h));
  const Eigen::Index hi_rank = std::min(lo_rank + 1, n - 1);
  const double frac = h - static_cast<double>(lo_rank);
  for (Eigen::Index j = 0; j < v.cols(); ++j) {
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index x, Eigen::Index y) { return v(x, j) < v(y, j); });
    const Eigen::Index lo = order[static_cast<std::size_t>(lo_rank)];
    const Eigen::Index hi = order[static_cast<std::size_t>(hi_rank)];
    out(0, j) = v(lo, j) + frac * (v(hi, j) - v(lo, j));
    aux(0, j) = static_cast<double>(lo);
    aux(1, j) = static_cast<double>(hi);
    aux(2, j) = frac;
  }
  return a.tape->push(Op::QuantileCols, {a.id}, std::move(out), std::move(aux), p);
}

Var solve(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  LuFactor<double> lu(a.value());
  return t.push(Op::Solve, {a.id, b.id}, lu.solve(b.value()));
}

CMatrix CVar::value() const {
  CMatrix m(re.rows(), re.cols());
  m.real() = re.value();
  m.imag() = im.value();
  return m;
}

CVar constant(Tape& t, const CMatrix& m) { return {t.constant(m.real()), t.constant(m.imag())}; }
CVar variable(Tape& t, const CMatrix& m) { return {t.variable(m.real()), t.variable(m.imag())}; }

CVar cmatmul(const CVar& a, const CVar& b) {
  return {matmul(a.re, b.re) - matmul(a.im, b.im), matmul(a.re, b.im) + matmul(a.im, b.re)};
}

CVar adjoint(const CVar& a) { return {transpose(a.re), -transpose(a.im)}; }
CVar operator+(const CVar& a, const CVar& b) { return {a.re + b.re, a.im + b.im}; }
CVar operator-(const CVar& a, const CVar& b) { return {a.re - b.re, a.im - b.im}; }
CVar scale(const CVar& a, const Var& s) { return {a.re * s, a.im * s}; }
Var abs2(const CVar& a) { return a.re * a.re + a.im * a.im; }
Var frobenius2(const CVar& a) { return sum(abs2(a)); }

CVar csolve(const CVar& a, const CVar& b) {
  const Eigen::Index n = a.rows();
  const Var big = concat_v({concat_h({a.re, -a.im}), concat_h({a.im, a.re})});
  const Var rhs = concat_v({b.re, b.im});
  const Var x = solve(big, rhs);
  return {block(x, 0, 0, n, b.cols()), block(x, n, 0, n, b.cols())};
}

}  // namespace papp::ad
