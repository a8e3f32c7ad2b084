#include "papp/linalg.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace papp;

TEST(LuFactor, SolvesSmallRealSystem) {
  Eigen::MatrixXd a(2, 2);
  a << 4, 1, 2, 3;
  Eigen::VectorXd b(2);
  b << 1, 2;
  const Eigen::MatrixXd x = LuFactor<double>(a).solve(b);
  EXPECT_NEAR(x(0, 0), 0.1, 1e-15);
  EXPECT_NEAR(x(1, 0), 0.6, 1e-15);
}

TEST(LuFactor, PivotsAroundZeroLeadingEntry) {
  Eigen::MatrixXd a(2, 2);
  a << 0, 1, 1, 0;
  Eigen::VectorXd b(2);
  b << 3, 5;
  const Eigen::MatrixXd x = LuFactor<double>(a).solve(b);
  EXPECT_DOUBLE_EQ(x(0, 0), 5.0);
  EXPECT_DOUBLE_EQ(x(1, 0), 3.0);
}

TEST(LuFactor, ComplexResidualIsSmall) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const CMatrix a = test::random_cmatrix(6, 6, rng);
    const CMatrix b = test::random_cmatrix(6, 2, rng);
    const CMatrix x = LuFactor<cdouble>(a).solve(b);
    EXPECT_LT((a * x - b).norm(), 1e-10 * b.norm());
  }
}

TEST(LuFactor, TransposedSolve) {
  std::mt19937_64 rng(4);
  const Eigen::MatrixXd a = test::random_matrix(5, 5, rng);
  const Eigen::MatrixXd b = test::random_matrix(5, 3, rng);
  const Eigen::MatrixXd x = LuFactor<double>(a).solve_transposed(b);
  EXPECT_LT((a.transpose() * x - b).norm(), 1e-10);
}

TEST(LuFactor, SingularThrows) {
  Eigen::MatrixXd a(2, 2);
  a << 1, 2, 2, 4;
  EXPECT_THROW(LuFactor<double>{a}, SingularMatrixError);
}

TEST(LuFactor, RhsMismatchThrows) {
  const LuFactor<double> lu(Eigen::MatrixXd::Identity(3, 3));
  EXPECT_THROW(lu.solve(Eigen::MatrixXd::Ones(2, 1)), DimensionError);
}

TEST(SolveHermitian, AddsRidge) {
  std::mt19937_64 rng(5);
  const CMatrix g = test::random_cmatrix(4, 4, rng);
  const CMatrix a = g * g.adjoint();
  const CMatrix b = test::random_cmatrix(4, 1, rng);
  const CMatrix x = solve_hermitian<double>(a, 0.5, b);
  const CMatrix lhs = (a + 0.5 * CMatrix::Identity(4, 4)) * x;
  EXPECT_LT((lhs - b).norm(), 1e-10);
}

TEST(SolveHermitian, RejectsBadInput) {
  CMatrix a = CMatrix::Identity(2, 2);
  const CMatrix b = CMatrix::Ones(2, 1);
  EXPECT_THROW(solve_hermitian<double>(a, -1.0, b), std::invalid_argument);
  a(0, 1) = {1.0, 0.0};
  EXPECT_THROW(solve_hermitian<double>(a, 0.0, b), std::invalid_argument);
  EXPECT_THROW(solve_hermitian<double>(CMatrix::Identity(2, 3), 0.0, b), DimensionError);
}

TEST(TracePower, IsSquaredFrobenius) {
  CMatrix w(2, 1);
  w << cdouble(1, 1), cdouble(0, 2);
  EXPECT_DOUBLE_EQ(trace_power(w), 6.0);
}
