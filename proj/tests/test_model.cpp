#include "papp/model.hpp"
#include "papp/precoding.hpp"
#include "papp/training.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

using namespace papp;
using namespace papp::model;

namespace {

BackboneParams small_backbone(PrecoderMode mode, std::uint64_t seed, int n_rf = 3) {
  const ModelDims dims{4, 2, n_rf};
  return init_backbone(dims, FeatureConfig::for_dims(dims), mode, seed);
}

training::Sample random_sample(const ModelDims& dims, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const CMatrix h = test::random_cmatrix(dims.n_users, dims.n_tx, rng);
  const CMatrix h_est = 0.9 * h + 0.3 * test::random_cmatrix(dims.n_users, dims.n_tx, rng);
  return training::make_sample(h, h_est, 3.0, 1.0);
}

// Perturbs the parameters so gates and biases are generic.
void jitter(ParamGroup& g, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  Eigen::VectorXd flat = g.flatten();
  flat += scale * test::random_matrix(flat.size(), 1, rng);
  g.assign(flat);
}

double gradient_rel_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric) {
  return (analytic - numeric).norm() / std::max(numeric.norm(), 1e-8);
}

}  // namespace

TEST(Backbone, ShapesAndInit) {
  const auto p = small_backbone(PrecoderMode::Fdp, 1);
  EXPECT_EQ(p.features.embed_len, 8);
  EXPECT_EQ(p.pi.get("cnn0.w").rows(), 8);
  EXPECT_EQ(p.pi.get("cnn0.w").cols(), 18);
  EXPECT_EQ(p.theta.get("head.w").rows(), p.features.shared_len(p.dims));
  EXPECT_EQ(p.theta.get("head.w").cols(), 6);
  EXPECT_EQ(p.phi.get("fdp1.w").cols(), 4);
  EXPECT_DOUBLE_EQ(p.pi.get("gate_mean")(0, 0), 0.1);
  EXPECT_EQ(p, small_backbone(PrecoderMode::Fdp, 1));
  EXPECT_FALSE(p == small_backbone(PrecoderMode::Fdp, 2));
  const auto h = small_backbone(PrecoderMode::Hbf, 1);
  EXPECT_EQ(h.phi.get("phase1.w").cols(), 4 * 3);
  EXPECT_EQ(h.pi, p.pi);
}

TEST(Backbone, Validation) {
  const ModelDims dims{4, 2, 3};
  auto cfg = FeatureConfig::for_dims(dims);
  cfg.kernel = 5;
  EXPECT_THROW(init_backbone(dims, cfg, PrecoderMode::Fdp, 1), std::invalid_argument);
  EXPECT_THROW(init_backbone(ModelDims{4, 2, 5}, FeatureConfig::for_dims(dims), PrecoderMode::Hbf, 1),
               std::invalid_argument);
  EXPECT_THROW(parse_mode("analog"), std::invalid_argument);
  EXPECT_EQ(parse_mode("hbf"), PrecoderMode::Hbf);
  EXPECT_EQ(to_string(PrecoderMode::Fdp), "fdp");
}

TEST(ParamGroup, FlattenAssignRoundTrip) {
  auto p = small_backbone(PrecoderMode::Fdp, 3);
  const Eigen::VectorXd flat = p.pi.flatten();
  EXPECT_EQ(flat.size(), p.pi.numel());
  auto q = p;
  jitter(q.pi, 4);
  EXPECT_FALSE(q.pi == p.pi);
  q.pi.assign(flat);
  EXPECT_EQ(q.pi, p.pi);
  EXPECT_THROW(q.pi.assign(Eigen::VectorXd::Zero(3)), DimensionError);
  EXPECT_THROW(q.pi.get("missing"), std::out_of_range);
  EXPECT_THROW(q.pi.add("gate_mean", Eigen::MatrixXd::Zero(1, 1)), std::invalid_argument);
}

TEST(Student, UnitPowerAndUnitModulus) {
  for (auto mode : {PrecoderMode::Fdp, PrecoderMode::Hbf})
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto p = small_backbone(mode, seed);
      jitter(p.phi, seed + 50);
      const auto s = random_sample(p.dims, seed);
      ad::Tape tape;
      const auto pi = bind(p.pi, tape, false);
      const auto phi = bind(p.phi, tape, false);
      const auto feats = feature_forward(pi, p.dims, p.features, s.h_input, tape);
      const auto out = student_forward(phi, p.dims, feats, mode, tape);
      EXPECT_NEAR(out.w.value().squaredNorm(), 1.0, 1e-9);
      if (mode == PrecoderMode::Hbf) {
        ASSERT_TRUE(out.a && out.w_dp);
        const CMatrix a = out.a->value();
        for (Eigen::Index i = 0; i < a.size(); ++i) EXPECT_NEAR(std::abs(a.data()[i]), 1.0, 1e-15);
        EXPECT_LT((a * out.w_dp->value() - out.w.value()).norm(), 1e-12);
      }
      EXPECT_NEAR(predict_student(p, s.h_input).squaredNorm(), 1.0, 1e-9);
      EXPECT_NEAR(predict_teacher(p, s.h_input).squaredNorm(), 1.0, 1e-9);
    }
}

TEST(Student, ModeMismatchThrows) {
  const auto p = small_backbone(PrecoderMode::Fdp, 1);
  const auto s = random_sample(p.dims, 1);
  ad::Tape tape;
  const auto feats = feature_forward(bind(p.pi, tape, false), p.dims, p.features, s.h_input, tape);
  EXPECT_THROW(student_forward(bind(p.phi, tape, false), p.dims, feats, PrecoderMode::Hbf, tape),
               std::invalid_argument);
  EXPECT_THROW(feature_forward(bind(p.pi, tape, false), p.dims, p.features, CMatrix::Ones(3, 4), tape),
               DimensionError);
}

TEST(Student, InitialOutputIsNearMatchedFilter) {
  const auto p = small_backbone(PrecoderMode::Fdp, 5);
  const auto s = random_sample(p.dims, 5);
  const CMatrix mf = s.h_input.adjoint() / s.h_input.norm();
  EXPECT_LT((predict_student(p, s.h_input) - mf).norm(), 0.5);
}

TEST(Pooling, PermutationInvariantContext) {
  const ModelDims dims{4, 4, 4};
  auto p = init_backbone(dims, FeatureConfig::for_dims(dims), PrecoderMode::Fdp, 9);
  jitter(p.pi, 10, 0.05);
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const CMatrix h = test::random_cmatrix(4, 4, rng, 3.0);
    std::vector<int> perm(4);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    CMatrix hp(4, 4);
    for (int k = 0; k < 4; ++k) hp.row(k) = h.row(perm[static_cast<std::size_t>(k)]);
    ad::Tape tape;
    const auto pi = bind(p.pi, tape, false);
    const auto f = feature_forward(pi, dims, p.features, h, tape);
    const auto fp = feature_forward(pi, dims, p.features, hp, tape);
    EXPECT_LT((f.context.value() - fp.context.value()).cwiseAbs().maxCoeff(), 1e-12);
    for (int k = 0; k < 4; ++k)
      EXPECT_LT((fp.per_user.value().row(k) - f.per_user.value().row(perm[static_cast<std::size_t>(k)]))
                    .cwiseAbs()
                    .maxCoeff(),
                1e-12);
  }
}

TEST(Pooling, GatesOffLeavesEmbeddings) {
  auto p = small_backbone(PrecoderMode::Fdp, 12);
  p.pi.get("gate_mean").setZero();
  p.pi.get("gate_quantile").setZero();
  const auto s = random_sample(p.dims, 12);
  ad::Tape tape;
  const auto f = feature_forward(bind(p.pi, tape, false), p.dims, p.features, s.h_input, tape);
  const Eigen::MatrixXd e = f.embeddings.value();
  const Eigen::MatrixXd expected = (Eigen::MatrixXd(e.rows(), 4 * e.cols()) << e, e, e, e).finished();
  EXPECT_EQ(f.per_user.value(), expected);
}

TEST(Pooling, IdenticalUsersCollapseQuantiles) {
  const auto p = small_backbone(PrecoderMode::Fdp, 13);
  std::mt19937_64 rng(13);
  const CMatrix row = test::random_cmatrix(1, 4, rng);
  CMatrix h(2, 4);
  h << row, row;
  ad::Tape tape;
  const auto f = feature_forward(bind(p.pi, tape, false), p.dims, p.features, h, tape);
  const Eigen::MatrixXd c = f.context.value();
  const Eigen::Index e = p.features.embed_len;
  for (int q = 1; q < 4; ++q) EXPECT_LT((c.middleCols(q * e, e) - c.leftCols(e)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GramFeatures, ScaleInvariantBlock) {
  std::mt19937_64 rng(14);
  const CMatrix h = test::random_cmatrix(2, 4, rng);
  const Eigen::MatrixXd a = gram_features(h);
  const Eigen::MatrixXd b = gram_features(10.0 * h);
  EXPECT_LT((a.leftCols(4) - b.leftCols(4)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(b(0, 4) - a(0, 4), std::log(100.0) / 10.0, 1e-12);
  EXPECT_NEAR(a(0, 0) + a(1, 1), 2.0, 1e-12);
  EXPECT_THROW(gram_features(CMatrix::Zero(2, 4)), std::invalid_argument);
}

TEST(Teacher, ReproducesWmmseUpdate) {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 10; ++trial) {
    const CMatrix h = test::random_cmatrix(2, 4, rng, 2.0);
    const auto [w, st] = precoding::wmmse<double>(h, 1.0, 1.0, 500, 1e-13);
    RVec<double> v;
    CVec<double> u;
    precoding::wmmse_auxiliaries<double>(h, w.w, 1.0, v, u);
    const double mu = precoding::solve_mu<double>(h, v, u, 1.0);
    ad::Tape tape;
    TeacherAux aux{tape.constant(v), ad::constant(tape, CMatrix(u)), tape.scalar_constant(mu)};
    const CMatrix w_t = teacher_precoder(h, aux, tape).value();
    const CMatrix step = precoding::wmmse_step<double>(h, v, u, mu);
    EXPECT_LT((w_t - step / step.norm()).norm(), 1e-9);
    // Fixed point: at convergence the update returns the converged precoder.
    EXPECT_LT((w_t - w.w / w.w.norm()).norm(), 1e-5);
  }
}

TEST(Teacher, AuxiliariesArePositive) {
  auto p = small_backbone(PrecoderMode::Fdp, 16);
  jitter(p.theta, 16, 2.0);
  const auto s = random_sample(p.dims, 16);
  ad::Tape tape;
  const auto f = feature_forward(bind(p.pi, tape, false), p.dims, p.features, s.h_input, tape);
  const auto aux = teacher_forward(bind(p.theta, tape, false), f, 1.0, tape);
  EXPECT_TRUE((aux.v.value().array() > 0).all());
  EXPECT_GT(aux.mu.scalar(), 0.0);
  EXPECT_THROW(teacher_forward(bind(p.theta, tape, false), f, 0.0, tape), std::invalid_argument);
}

TEST(Gradients, TeacherLossMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto p = small_backbone(PrecoderMode::Fdp, seed);
    jitter(p.theta, seed + 100, 0.2);
    const auto s = random_sample(p.dims, seed + 200);
    const auto g = training::teacher_gradient(p, s);

    const auto num_theta = test::numeric_gradient(
        [&](const Eigen::VectorXd& x) {
          auto q = p;
          q.theta.assign(x);
          return training::teacher_gradient(q, s).loss;
        },
        p.theta.flatten());
    EXPECT_LT(gradient_rel_error(g.theta, num_theta), 1e-4) << "seed " << seed;

    const auto num_pi = test::numeric_gradient(
        [&](const Eigen::VectorXd& x) {
          auto q = p;
          q.pi.assign(x);
          return training::teacher_gradient(q, s).loss;
        },
        p.pi.flatten());
    EXPECT_LT(gradient_rel_error(g.pi, num_pi), 1e-4) << "seed " << seed;
  }
}

TEST(Gradients, StudentLossMatchesFiniteDifferences) {
  for (auto mode : {PrecoderMode::Fdp, PrecoderMode::Hbf})
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto p = small_backbone(mode, seed, 2 + static_cast<int>(seed % 3));
      jitter(p.phi, seed + 300, 0.2);
      const auto s = random_sample(p.dims, seed + 400);
      const auto target = training::student_target(p, s);
      const auto g = training::student_gradient(p, s, target, 0.1);
      const auto num = test::numeric_gradient(
          [&](const Eigen::VectorXd& x) {
            auto q = p;
            q.phi.assign(x);
            return training::student_gradient(q, s, target, 0.1).loss;
          },
          p.phi.flatten());
      EXPECT_LT(gradient_rel_error(g.phi, num), 1e-4) << to_string(mode) << " seed " << seed;
    }
}

TEST(Footprint, MatchesEnergyCounts) {
  const auto c = count_footprint(ModelDims{64, 4, 8}, PrecoderMode::Fdp);
  EXPECT_EQ(c.n_c, 877056);
  EXPECT_EQ(count_footprint(ModelDims{64, 4, 8}, PrecoderMode::Hbf).n_c, 950784);
}
