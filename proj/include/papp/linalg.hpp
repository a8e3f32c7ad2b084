#pragma once

// Dense complex linear algebra used by the precoders and the channel
// generator. Storage is Eigen, row-major, templated on the real scalar.

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

namespace papp {

template <typename Real>
using CMat = Eigen::Matrix<std::complex<Real>, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using CVec = Eigen::Matrix<std::complex<Real>, Eigen::Dynamic, 1>;
template <typename Real>
using RMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Real>
using RVec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

using cdouble = std::complex<double>;
using CMatrix = CMat<double>;
using CVector = CVec<double>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class SingularMatrixError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Absolute pivot magnitude below which a factorization is declared singular.
inline constexpr double kSingularPivot = 1e-14;

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <typename A, typename B>
void require_same_shape(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.rows(), a.cols()) + " vs " +
                         shape_str(b.rows(), b.cols()));
}

/// Complex (or real) matrix product with a dimension check.
template <typename A, typename B>
auto cmat_mul(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  using Scalar = typename A::Scalar;
  if (a.cols() != b.rows())
    throw DimensionError("cmat_mul: inner dimensions " + shape_str(a.rows(), a.cols()) + " * " +
                         shape_str(b.rows(), b.cols()));
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> out = a * b;
  return out;
}

/// LU factorization with partial (column) pivoting. Works for real and
/// complex scalars; the tape's differentiable solve reuses it on real data.
template <typename Scalar>
class LuFactor {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  explicit LuFactor(Matrix a) : lu_(std::move(a)), perm_(static_cast<std::size_t>(lu_.rows())) {
    if (lu_.rows() != lu_.cols()) throw DimensionError("LuFactor: matrix must be square");
    const Eigen::Index n = lu_.rows();
    for (Eigen::Index i = 0; i < n; ++i) perm_[static_cast<std::size_t>(i)] = i;
    for (Eigen::Index k = 0; k < n; ++k) {
      Eigen::Index piv = k;
      double best = std::abs(lu_(k, k));
      for (Eigen::Index i = k + 1; i < n; ++i) {
        const double m = std::abs(lu_(i, k));
        if (m > best) {
          best = m;
          piv = i;
        }
      }
      if (best < kSingularPivot)
        throw SingularMatrixError("singular system: pivot " + std::to_string(best) + " at column " +
                                  std::to_string(k));
      if (piv != k) {
        lu_.row(k).swap(lu_.row(piv));
        std::swap(perm_[static_cast<std::size_t>(k)], perm_[static_cast<std::size_t>(piv)]);
      }
      const Scalar inv = Scalar(1) / lu_(k, k);
      for (Eigen::Index i = k + 1; i < n; ++i) {
        lu_(i, k) *= inv;
        const Scalar f = lu_(i, k);
        if (f == Scalar(0)) continue;
        lu_.row(i).tail(n - k - 1).noalias() -= f * lu_.row(k).tail(n - k - 1);
      }
    }
  }

  Eigen::Index size() const { return lu_.rows(); }

  /// Solves A X = B.
  template <typename Derived>
  Matrix solve(const Eigen::MatrixBase<Derived>& b) const {
    const Eigen::Index n = size();
    if (b.rows() != n) throw DimensionError("LuFactor::solve: rhs has " + std::to_string(b.rows()) + " rows");
    Matrix x(n, b.cols());
    for (Eigen::Index i = 0; i < n; ++i) x.row(i) = b.row(perm_[static_cast<std::size_t>(i)]);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index k = 0; k < i; ++k) x.row(i) -= lu_(i, k) * x.row(k);
    for (Eigen::Index i = n - 1; i >= 0; --i) {
      for (Eigen::Index k = i + 1; k < n; ++k) x.row(i) -= lu_(i, k) * x.row(k);
      x.row(i) /= lu_(i, i);
    }
    return x;
  }

  /// Solves A^T X = B (plain transpose, no conjugation).
  template <typename Derived>
  Matrix solve_transposed(const Eigen::MatrixBase<Derived>& b) const {
    const Eigen::Index n = size();
    if (b.rows() != n) throw DimensionError("LuFactor::solve_transposed: rhs row mismatch");
    // A = P^T L U, so A^T = U^T L^T P.
    Matrix y = b;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index k = 0; k < i; ++k) y.row(i) -= lu_(k, i) * y.row(k);
      y.row(i) /= lu_(i, i);
    }
    for (Eigen::Index i = n - 1; i >= 0; --i)
      for (Eigen::Index k = i + 1; k < n; ++k) y.row(i) -= lu_(k, i) * y.row(k);
    Matrix x(n, b.cols());
    for (Eigen::Index i = 0; i < n; ++i) x.row(perm_[static_cast<std::size_t>(i)]) = y.row(i);
    return x;
  }

 private:
  Matrix lu_;
  std::vector<Eigen::Index> perm_;
};

/// Solves (a + ridge*I) X = b for Hermitian a. Throws SingularMatrixError if
/// a pivot falls below kSingularPivot.
template <typename Real>
CMat<Real> solve_hermitian(const CMat<Real>& a, Real ridge, const CMat<Real>& b) {
  if (a.rows() != a.cols()) throw DimensionError("solve_hermitian: matrix not square");
  if (b.rows() != a.rows()) throw DimensionError("solve_hermitian: rhs row mismatch");
  if (!(ridge >= Real(0))) throw std::invalid_argument("solve_hermitian: ridge must be nonnegative");
  const Real scale = std::max<Real>(Real(1), a.cwiseAbs().maxCoeff());
  if ((a - a.adjoint()).cwiseAbs().maxCoeff() > Real(1e-10) * scale)
    throw std::invalid_argument("solve_hermitian: matrix is not Hermitian");
  CMat<Real> aug = a;
  aug.diagonal().array() += ridge;
  return LuFactor<std::complex<Real>>(std::move(aug)).solve(b);
}

/// Tr(W W^H), i.e. squared Frobenius norm.
template <typename Derived>
double trace_power(const Eigen::MatrixBase<Derived>& w) {
  return static_cast<double>(w.squaredNorm());
}

}  // namespace papp
