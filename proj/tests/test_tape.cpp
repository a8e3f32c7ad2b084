#include "papp/tape.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace papp;
using ad::Var;

namespace {

using Build = std::function<Var(ad::Tape&, const std::vector<Var>&)>;

// Checks d<W, f(x)>/dx against central differences for random weights W.
void expect_gradient(const std::vector<Eigen::MatrixXd>& inputs, const Build& f, double tol = 1e-6) {
  std::vector<Eigen::Index> offsets{0};
  for (const auto& m : inputs) offsets.push_back(offsets.back() + m.size());
  Eigen::VectorXd x(offsets.back());
  for (std::size_t i = 0; i < inputs.size(); ++i)
    x.segment(offsets[i], inputs[i].size()) = inputs[i].reshaped();

  Eigen::MatrixXd weights;
  auto evaluate = [&](const Eigen::VectorXd& flat, ad::Tape& tape, std::vector<Var>& vars) {
    vars.clear();
    for (std::size_t i = 0; i < inputs.size(); ++i)
      vars.push_back(tape.variable(
          flat.segment(offsets[i], inputs[i].size()).reshaped(inputs[i].rows(), inputs[i].cols())));
    const Var out = f(tape, vars);
    if (weights.size() == 0) {
      std::mt19937_64 rng(99);
      weights = test::random_matrix(out.rows(), out.cols(), rng);
    }
    return sum(out * tape.constant(weights));
  };

  ad::Tape tape;
  std::vector<Var> vars;
  const Var loss = evaluate(x, tape, vars);
  const auto grads = tape.backward(loss);
  Eigen::VectorXd analytic(x.size());
  for (std::size_t i = 0; i < inputs.size(); ++i)
    analytic.segment(offsets[i], inputs[i].size()) = grads[vars[i]].reshaped();

  const auto numeric = test::numeric_gradient(
      [&](const Eigen::VectorXd& p) {
        ad::Tape t;
        std::vector<Var> v;
        return evaluate(p, t, v).scalar();
      },
      x);
  EXPECT_LT(test::gradient_mismatch(analytic, numeric), tol);
}

Eigen::MatrixXd rnd(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return test::random_matrix(r, c, rng);
}

Eigen::MatrixXd positive(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  return rnd(r, c, seed).cwiseAbs().array() + 0.5;
}

}  // namespace

TEST(TapeGradient, Elementwise) {
  const auto a = rnd(3, 4, 1), b = rnd(3, 4, 2);
  expect_gradient({a, b}, [](ad::Tape&, const std::vector<Var>& v) { return v[0] + v[1]; });
  expect_gradient({a, b}, [](ad::Tape&, const std::vector<Var>& v) { return v[0] - v[1]; });
  expect_gradient({a, b}, [](ad::Tape&, const std::vector<Var>& v) { return v[0] * v[1]; });
  expect_gradient({a, positive(3, 4, 3)}, [](ad::Tape&, const std::vector<Var>& v) { return v[0] / v[1]; });
  expect_gradient({a}, [](ad::Tape&, const std::vector<Var>& v) { return -v[0]; });
  expect_gradient({a}, [](ad::Tape&, const std::vector<Var>& v) { return 2.5 * v[0] + 1.0; });
  expect_gradient({a}, [](ad::Tape&, const std::vector<Var>& v) { return (v[0] * -0.5) - 3.0; });
}

TEST(TapeGradient, Broadcasting) {
  expect_gradient({rnd(3, 4, 1), rnd(1, 4, 2)}, [](ad::Tape&, const std::vector<Var>& v) { return v[0] + v[1]; });
  expect_gradient({rnd(3, 4, 1), rnd(3, 1, 2)}, [](ad::Tape&, const std::vector<Var>& v) { return v[0] * v[1]; });
  expect_gradient({rnd(3, 4, 1), positive(1, 1, 2)},
                  [](ad::Tape&, const std::vector<Var>& v) { return v[0] / v[1]; });
  expect_gradient({rnd(1, 1, 1), rnd(2, 3, 2)}, [](ad::Tape&, const std::vector<Var>& v) { return v[0] - v[1]; });
}

TEST(TapeGradient, Unary) {
  const auto a = rnd(3, 3, 4);
  const auto p = positive(3, 3, 5);
  expect_gradient({a}, [](ad::Tape&, const std::vector<Var>& v) { return ad::relu(v[0]); });
  expect_gradient({a}, [](ad::Tape&, const std::vector<Var>& v) { return ad::softplus(v[0]); });
  expect_gradient({a}, [](ad::Tape&, const std::vector<Var>& v) { return ad::exp(v[0]); });
  expect_gradient({a}, [](ad::Tape&, const std::vector<Var>& v) { return ad::sin(v[0]); });
  expect_gradient({a}, [](ad::Tape&, const std::vector<Var>& v) { return ad::cos(v[0]); });
  expect_gradient({p}, [](ad::Tape&, const std::vector<Var>& v) { return ad::log(v[0]); });
  expect_gradient({p}, [](ad::Tape&, const std::vector<Var>& v) { return ad::sqrt(v[0]); });
}

TEST(TapeGradient, Reductions) {
  const auto a = rnd(3, 5, 6);
  expect_gradient({a}, [](ad::Tape&, const std::vector<Var>& v) { return ad::sum(v[0]); });
  expect_gradient({a}, [](ad::Tape&, const std::vector<Var>& v) { return ad::mean(v[0]); });
  expect_gradient({a}, [](ad::Tape&, const std::vector<Var>& v) { return ad::row_sum(v[0]); });
  expect_gradient({a}, [](ad::Tape&, const std::vector<Var>& v) { return ad::col_sum(v[0]); });
  for (double p : {0.0, 0.25, 0.5, 0.75, 1.0})
    expect_gradient({a}, [p](ad::Tape&, const std::vector<Var>& v) { return ad::quantile_cols(v[0], p); });
}

TEST(TapeGradient, Structural) {
  const auto a = rnd(3, 4, 7), b = rnd(4, 2, 8), c = rnd(3, 2, 9);
  expect_gradient({a, b}, [](ad::Tape&, const std::vector<Var>& v) { return ad::matmul(v[0], v[1]); });
  expect_gradient({a}, [](ad::Tape&, const std::vector<Var>& v) { return ad::transpose(v[0]); });
  expect_gradient({a}, [](ad::Tape&, const std::vector<Var>& v) { return ad::block(v[0], 1, 1, 2, 3); });
  expect_gradient({a, c}, [](ad::Tape&, const std::vector<Var>& v) { return ad::concat_h({v[0], v[1]}); });
  expect_gradient({a, rnd(2, 4, 10)},
                  [](ad::Tape&, const std::vector<Var>& v) { return ad::concat_v({v[0], v[1]}); });
  expect_gradient({a}, [](ad::Tape&, const std::vector<Var>& v) { return ad::reshape(v[0], 2, 6); });
  expect_gradient({rnd(2, 12, 11)}, [](ad::Tape&, const std::vector<Var>& v) { return ad::im2col3x3(v[0], 3, 4); });
}

TEST(TapeGradient, Solve) {
  Eigen::MatrixXd a = rnd(4, 4, 12);
  a.diagonal().array() += 4.0;
  expect_gradient({a, rnd(4, 2, 13)}, [](ad::Tape&, const std::vector<Var>& v) { return ad::solve(v[0], v[1]); });
}

TEST(TapeGradient, ComplexComposite) {
  // |(A + jB)^-1 (C + jD)|^2 summed, through csolve, cmatmul and adjoint.
  Eigen::MatrixXd ar = rnd(3, 3, 14);
  ar.diagonal().array() += 3.0;
  expect_gradient({ar, rnd(3, 3, 15), rnd(3, 2, 16), rnd(3, 2, 17)}, [](ad::Tape&, const std::vector<Var>& v) {
    const ad::CVar a{v[0], v[1]};
    const ad::CVar b{v[2], v[3]};
    const ad::CVar x = ad::csolve(a, b);
    const ad::CVar y = ad::cmatmul(ad::adjoint(x), a + a);
    return ad::abs2(y) + ad::frobenius2(x);
  });
}

TEST(TapeGradient, RandomMlpComposite) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    expect_gradient({rnd(4, 6, seed), rnd(6, 5, seed + 100), rnd(1, 5, seed + 200)},
                    [](ad::Tape&, const std::vector<Var>& v) {
                      const Var h = ad::softplus(ad::matmul(v[0], v[1]) + v[2]);
                      const Var pooled = ad::concat_h({ad::mean(h) * h, h + ad::quantile_cols(h, 0.5)});
                      return ad::log(1.0 + ad::exp(ad::sin(pooled)));
                    });
  }
}

TEST(Tape, ValuesMatchDirectComputation) {
  ad::Tape t;
  Eigen::MatrixXd m(4, 1);
  m << 4, 1, 3, 2;
  const Var q = ad::quantile_cols(t.constant(m), 0.25);
  EXPECT_DOUBLE_EQ(q.scalar(), 1.75);
  const Var s = ad::softplus(t.scalar_constant(0.0));
  EXPECT_DOUBLE_EQ(s.scalar(), std::log(2.0));
  const Var c = ad::cos(t.scalar_constant(std::numbers::pi));
  EXPECT_DOUBLE_EQ(c.scalar(), -1.0);
}

TEST(Tape, UnusedVariableHasZeroGradient) {
  ad::Tape t;
  const Var a = t.variable(Eigen::MatrixXd::Ones(2, 2));
  const Var b = t.variable(Eigen::MatrixXd::Ones(3, 1));
  const auto g = t.backward(ad::sum(a * a));
  EXPECT_TRUE(g[b].isZero());
  EXPECT_TRUE(g[a].isApprox(2.0 * Eigen::MatrixXd::Ones(2, 2)));
}

TEST(Tape, ConstantsCarryNoGradient) {
  ad::Tape t;
  const Var a = t.constant(Eigen::MatrixXd::Ones(2, 2));
  const Var b = t.variable(Eigen::MatrixXd::Ones(2, 2));
  const auto g = t.backward(ad::sum(a * b));
  EXPECT_TRUE(g[b].isApprox(Eigen::MatrixXd::Ones(2, 2)));
}

TEST(Tape, Errors) {
  ad::Tape t;
  const Var a = t.variable(Eigen::MatrixXd::Ones(2, 3));
  const Var b = t.variable(Eigen::MatrixXd::Ones(3, 2));
  EXPECT_THROW(a + b, DimensionError);
  EXPECT_THROW(ad::matmul(a, a), DimensionError);
  EXPECT_THROW(t.backward(a), std::invalid_argument);
  EXPECT_THROW(ad::quantile_cols(a, 1.5), std::invalid_argument);
  EXPECT_THROW(ad::reshape(a, 4, 2), DimensionError);
  ad::Tape other;
  const Var c = other.variable(Eigen::MatrixXd::Ones(2, 3));
  EXPECT_THROW(a + c, std::invalid_argument);
}
