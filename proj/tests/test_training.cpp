#include "papp/precoding.hpp"
#include "papp/training.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <atomic>
#include <set>

using namespace papp;
using namespace papp::training;

namespace {

const model::ModelDims kDims{4, 2, 3};

DomainData random_domain(const std::string& site, int n, std::uint64_t seed, double p_tx = 4.0) {
  std::mt19937_64 rng(seed);
  DomainData d{channel::Domain{site, p_tx, true, 0.0}, {}};
  for (int i = 0; i < n; ++i) {
    const CMatrix h = test::random_cmatrix(kDims.n_users, kDims.n_tx, rng);
    d.samples.push_back(make_sample(h, h, p_tx, 1.0));
  }
  return d;
}

ParamVectors mean_teacher_grads(const BackboneParams& p, const DomainRefs& domains) {
  ParamVectors total{Eigen::VectorXd::Zero(p.pi.numel()), Eigen::VectorXd::Zero(p.theta.numel())};
  for (const auto* d : domains) {
    Eigen::VectorXd gp = Eigen::VectorXd::Zero(p.pi.numel()), gt = Eigen::VectorXd::Zero(p.theta.numel());
    for (const auto& s : d->samples) {
      const auto g = teacher_gradient(p, s);
      gp += g.pi;
      gt += g.theta;
    }
    total[0] += gp / static_cast<double>(d->samples.size());
    total[1] += gt / static_cast<double>(d->samples.size());
  }
  for (auto& g : total) g /= static_cast<double>(domains.size());
  return total;
}

Eigen::VectorXd mean_student_grad(const BackboneParams& p, const DomainRefs& domains, const TargetCache& targets,
                                  double lambda) {
  Eigen::VectorXd total = Eigen::VectorXd::Zero(p.phi.numel());
  for (const auto* d : domains) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(p.phi.numel());
    for (std::size_t i = 0; i < d->samples.size(); ++i)
      g += student_gradient(p, d->samples[i], targets.at(d)[i], lambda).phi;
    total += g / static_cast<double>(d->samples.size());
  }
  return total / static_cast<double>(domains.size());
}

BackboneParams with(const BackboneParams& base, const ParamVectors& teacher) {
  BackboneParams p = base;
  p.pi.assign(teacher[0]);
  p.theta.assign(teacher[1]);
  return p;
}

double max_abs_diff(const Eigen::VectorXd& a, const Eigen::VectorXd& b) { return (a - b).cwiseAbs().maxCoeff(); }

TrainHyper tiny_hyper() {
  TrainHyper h;
  h.warmup_epochs = 1;
  h.teacher_epochs = 1;
  h.student_epochs = 1;
  h.max_cycles = 2;
  h.batch_size = 8;
  h.threads = 2;
  return h;
}

}  // namespace

TEST(Losses, RateMatchesClosedForm) {
  std::mt19937_64 rng(1);
  const CMatrix h = test::random_cmatrix(2, 4, rng, 2.0);
  const CMatrix w = test::random_cmatrix(4, 2, rng);
  ad::Tape tape;
  const auto wv = ad::constant(tape, w);
  EXPECT_NEAR(sum_rate(h, wv, 0.7, tape).scalar(), precoding::sum_rate<double>(h, w, 0.7), 1e-12);
  EXPECT_NEAR(teacher_loss(h, wv, 2.0, tape).scalar(), -precoding::sum_rate<double>(h, w, 1.0) / 2.0, 1e-12);
  EXPECT_THROW(teacher_loss(h, wv, 0.0, tape), std::invalid_argument);
  EXPECT_THROW(sum_rate(CMatrix::Ones(3, 4), wv, 1.0, tape), DimensionError);
}

TEST(Losses, TeacherLossIsMinusOneAtWmmse) {
  std::mt19937_64 rng(2);
  const CMatrix h = test::random_cmatrix(2, 4, rng, 3.0);
  const auto s = make_sample(h, h, 1.0, 1.0);
  const auto [w, st] = precoding::wmmse<double>(s.h_true, 1.0, 1.0);
  ad::Tape tape;
  EXPECT_NEAR(teacher_loss(s.h_true, ad::constant(tape, w.w), s.r_wmmse, tape).scalar(), -1.0, 1e-12);
}

TEST(Losses, ImitationAndStudent) {
  CMatrix wt(2, 1), ws(2, 1);
  wt << cdouble(1, 0), cdouble(0, 1);
  ws << cdouble(0, 0), cdouble(0, 0);
  ad::Tape tape;
  const auto v = ad::constant(tape, ws);
  EXPECT_DOUBLE_EQ(imitation_loss(wt, v, tape).scalar(), 1.0);
  CMatrix h(1, 2);
  h << cdouble(1, 0), cdouble(0, 0);
  ws(0, 0) = 1.0;
  const auto v2 = ad::constant(tape, ws);
  // mse = 1/2, R = log2(2) = 1
  EXPECT_DOUBLE_EQ(student_loss(wt, v2, h, 2.0, 0.0, tape).scalar(), 0.5);
  EXPECT_DOUBLE_EQ(student_loss(wt, v2, h, 2.0, 0.1, tape).scalar(), 0.5 - 0.05);
  EXPECT_THROW(imitation_loss(CMatrix::Ones(3, 1), v, tape), DimensionError);
}

TEST(ReliabilityGate, SwitchesAfterPatienceOnPlateau) {
  TrainHyper h;
  h.patience = 2;
  h.plateau_tol = 0.01;
  GateState s;
  double lambda;
  std::tie(lambda, s) = reliability_gate(s, 1.0, h);
  EXPECT_EQ(lambda, h.lambda0);
  EXPECT_EQ(s.best_val, 1.0);
  std::tie(lambda, s) = reliability_gate(s, 0.5, h);  // clear improvement
  EXPECT_EQ(s.epochs_since_improve, 0);
  std::tie(lambda, s) = reliability_gate(s, 0.499, h);  // below tolerance
  EXPECT_EQ(s.epochs_since_improve, 1);
  EXPECT_EQ(s.best_val, 0.499);
  EXPECT_EQ(lambda, h.lambda0);
  std::tie(lambda, s) = reliability_gate(s, 0.6, h);
  EXPECT_EQ(s.epochs_since_improve, 2);
  EXPECT_EQ(lambda, h.lambda1);
  std::tie(lambda, s) = reliability_gate(s, 0.1, h);
  EXPECT_EQ(s.epochs_since_improve, 0);
  EXPECT_EQ(lambda, h.lambda0);
}

TEST(MetaUpdate, HandTracedQuadratic) {
  // Train loss 0.5 a (x - c)^2, gen loss 0.5 b (x - d)^2 per group.
  // Group 0 (features): a=2 c=3 b=1 d=0; group 1 (heads): a=1 c=-1 b=4 d=1.
  auto grad = [](double a, double c) { return [a, c](double x) { return a * (x - c); }; };
  const auto tr0 = grad(2, 3), tr1 = grad(1, -1), ge0 = grad(1, 0), ge1 = grad(4, 1);
  const GradientOracle train = [&](const ParamVectors& p) {
    return ParamVectors{Eigen::VectorXd::Constant(1, tr0(p[0](0))), Eigen::VectorXd::Constant(1, tr1(p[1](0)))};
  };
  const GradientOracle gen = [&](const ParamVectors& p) {
    return ParamVectors{Eigen::VectorXd::Constant(1, ge0(p[0](0))), Eigen::VectorXd::Constant(1, ge1(p[1](0)))};
  };
  const ParamVectors p0{Eigen::VectorXd::Constant(1, 1.0), Eigen::VectorXd::Constant(1, 2.0)};
  const std::vector<LearningRates> rates{{0.1, 0.5, 0.1}, {0.2, 0.25, 0.05}};
  UpdateRule rule;
  const auto p1 = mldg_update(p0, rates, train, gen, rule, {0, 1});
  // group 0: delta = 2(1-3) = -4; inner = 1 + 0.4 = 1.4; delta' = 1.4;
  //          x = 1 - 0.1 (-4 + 0.5 * 1.4) = 1.33
  // group 1: delta = 2+1 = 3; inner = 2 - 0.6 = 1.4; delta' = 4 * 0.4 = 1.6;
  //          x = 2 - 0.05 (3 + 0.25 * 1.6) = 1.83
  EXPECT_DOUBLE_EQ(p1[0](0), 1.33);
  EXPECT_DOUBLE_EQ(p1[1](0), 1.83);

  // Student form: one group.
  const GradientOracle s_train = [&](const ParamVectors& p) {
    return ParamVectors{Eigen::VectorXd::Constant(1, tr0(p[0](0)))};
  };
  const GradientOracle s_gen = [&](const ParamVectors& p) {
    return ParamVectors{Eigen::VectorXd::Constant(1, ge1(p[0](0)))};
  };
  const auto s1 = mldg_update({Eigen::VectorXd::Constant(1, 0.0)}, {{0.5, 1.0, 0.1}}, s_train, s_gen, rule, {2});
  // delta = -6; inner = 3; delta' = 4 * 2 = 8; x = 0 - 0.1 (-6 + 8) = -0.2
  EXPECT_DOUBLE_EQ(s1[0](0), -0.2);
}

TEST(MetaUpdate, ZeroBetaSkipsGenAndTakesPlainStep) {
  int gen_calls = 0;
  const GradientOracle train = [](const ParamVectors& p) { return ParamVectors{2.0 * p[0]}; };
  const GradientOracle gen = [&](const ParamVectors& p) {
    ++gen_calls;
    return ParamVectors{p[0]};
  };
  UpdateRule rule;
  const auto out = mldg_update({Eigen::VectorXd::Constant(3, 1.0)}, {{0.1, 0.0, 0.25}}, train, gen, rule, {0});
  EXPECT_EQ(gen_calls, 0);
  EXPECT_TRUE(out[0].isApprox(Eigen::VectorXd::Constant(3, 0.5)));
  EXPECT_THROW(mldg_update({Eigen::VectorXd::Zero(1)}, {}, train, gen, rule, {0}), std::invalid_argument);
}

TEST(MetaUpdate, AdamFirstStepIsSignStep) {
  UpdateRule rule(OptimizerKind::Adam);
  Eigen::VectorXd p = Eigen::VectorXd::Zero(3);
  Eigen::VectorXd g(3);
  g << 2.0, -0.5, 1e-3;
  rule.apply(0, p, g, 0.01);
  EXPECT_NEAR(p(0), -0.01, 1e-8);
  EXPECT_NEAR(p(1), 0.01, 1e-8);
  EXPECT_NEAR(p(2), -0.01, 1e-7);
  EXPECT_THROW(rule.apply(0, p, Eigen::VectorXd::Zero(2), 0.01), DimensionError);
}

class EpochMechanics : public ::testing::Test {
 protected:
  void SetUp() override {
    params = model::init_backbone(kDims, model::FeatureConfig::for_dims(kDims), model::PrecoderMode::Fdp, 3);
    for (int i = 0; i < 3; ++i) domains.push_back(random_domain("d" + std::to_string(i), 4, 10 + i));
    hyper.batch_size = 8;  // 4 per train domain: one step covering each domain once
    hyper.threads = 2;
  }
  BackboneParams params;
  std::vector<DomainData> domains;
  TrainHyper hyper;
};

TEST_F(EpochMechanics, TeacherZeroBetaIsPlainGradientStep) {
  hyper.teacher.beta = hyper.feature.beta = 0.0;
  std::mt19937_64 rng(1);
  UpdateRule rule;
  const DomainRefs train{&domains[0], &domains[1]}, gen{&domains[2]};
  EpochStats st;
  const auto out = mldg_teacher_epoch(params, train, gen, EpochContext{&hyper, &rng, &rule}, &st);
  EXPECT_EQ(st.steps, 1);
  const auto g = mean_teacher_grads(params, train);
  EXPECT_LT(max_abs_diff(out.pi.flatten(), params.pi.flatten() - hyper.feature.eps * g[0]), 1e-12);
  EXPECT_LT(max_abs_diff(out.theta.flatten(), params.theta.flatten() - hyper.teacher.eps * g[1]), 1e-12);
  EXPECT_EQ(out.phi, params.phi);
}

TEST_F(EpochMechanics, TeacherMetaStepMatchesManualComputation) {
  std::mt19937_64 rng(1);
  UpdateRule rule;
  const DomainRefs train{&domains[0], &domains[1]}, gen{&domains[2]};
  const auto out = mldg_teacher_epoch(params, train, gen, EpochContext{&hyper, &rng, &rule});
  const auto d = mean_teacher_grads(params, train);
  const ParamVectors inner{params.pi.flatten() - hyper.feature.alpha * d[0],
                           params.theta.flatten() - hyper.teacher.alpha * d[1]};
  const auto dg = mean_teacher_grads(with(params, inner), gen);
  const Eigen::VectorXd pi = params.pi.flatten() - hyper.feature.eps * (d[0] + hyper.feature.beta * dg[0]);
  const Eigen::VectorXd th = params.theta.flatten() - hyper.teacher.eps * (d[1] + hyper.teacher.beta * dg[1]);
  EXPECT_LT(max_abs_diff(out.pi.flatten(), pi), 1e-12);
  EXPECT_LT(max_abs_diff(out.theta.flatten(), th), 1e-12);
}

TEST_F(EpochMechanics, StudentZeroBetaAndMetaStep) {
  const DomainRefs train{&domains[0], &domains[1]}, gen{&domains[2]};
  const DomainRefs all{&domains[0], &domains[1], &domains[2]};
  const auto targets = build_targets(params, all, 2);
  const double lambda = 0.1;
  {
    TrainHyper h0 = hyper;
    h0.student.beta = 0.0;
    std::mt19937_64 rng(1);
    UpdateRule rule;
    const auto out = mldg_student_epoch(params, train, gen, targets, lambda, EpochContext{&h0, &rng, &rule});
    const Eigen::VectorXd expected =
        params.phi.flatten() - h0.student.eps * mean_student_grad(params, train, targets, lambda);
    EXPECT_LT(max_abs_diff(out.phi.flatten(), expected), 1e-12);
    EXPECT_EQ(out.pi, params.pi);
    EXPECT_EQ(out.theta, params.theta);
  }
  {
    std::mt19937_64 rng(1);
    UpdateRule rule;
    const auto out = mldg_student_epoch(params, train, gen, targets, lambda, EpochContext{&hyper, &rng, &rule});
    const Eigen::VectorXd d = mean_student_grad(params, train, targets, lambda);
    BackboneParams inner = params;
    inner.phi.assign(params.phi.flatten() - hyper.student.alpha * d);
    const Eigen::VectorXd dg = mean_student_grad(inner, gen, targets, lambda);
    const Eigen::VectorXd expected = params.phi.flatten() - hyper.student.eps * (d + hyper.student.beta * dg);
    EXPECT_LT(max_abs_diff(out.phi.flatten(), expected), 1e-12);
  }
}

TEST_F(EpochMechanics, RejectsBadDomainSets) {
  std::mt19937_64 rng(1);
  UpdateRule rule;
  const EpochContext ctx{&hyper, &rng, &rule};
  EXPECT_THROW(mldg_teacher_epoch(params, {}, {&domains[2]}, ctx), std::invalid_argument);
  EXPECT_THROW(mldg_teacher_epoch(params, {&domains[0]}, {&domains[0]}, ctx), std::invalid_argument);
  EXPECT_THROW(mldg_teacher_epoch(params, {&domains[0]}, {&domains[1]}, EpochContext{}), std::invalid_argument);
  EXPECT_THROW(mldg_student_epoch(params, {&domains[0]}, {&domains[1]}, TargetCache{}, 0.0, ctx),
               std::invalid_argument);
}

TEST(Splits, TableTwoSizes) {
  EXPECT_EQ(split_sizes(56), (std::pair<int, int>{40, 16}));
  EXPECT_EQ(split_sizes(16), (std::pair<int, int>{11, 5}));
  EXPECT_EQ(split_sizes(2), (std::pair<int, int>{1, 1}));
  EXPECT_THROW(split_sizes(1), std::invalid_argument);
  std::mt19937_64 rng(4);
  const auto [tr, gn] = split_domains(56, rng);
  EXPECT_EQ(tr.size(), 40u);
  EXPECT_EQ(gn.size(), 16u);
  std::set<int> all(tr.begin(), tr.end());
  all.insert(gn.begin(), gn.end());
  EXPECT_EQ(all.size(), 56u);
}

TEST(Schedule, DeterministicAcrossRunsAndThreadCounts) {
  std::vector<DomainData> domains;
  for (int i = 0; i < 4; ++i) domains.push_back(random_domain("s" + std::to_string(i), 10, 20 + i));
  auto hyper = tiny_hyper();
  std::vector<LogRecord> log;
  const auto a = train_backbone(domains, kDims, hyper, model::PrecoderMode::Fdp, 5,
                                [&](const LogRecord& r) { log.push_back(r); });
  const auto b = train_backbone(domains, kDims, hyper, model::PrecoderMode::Fdp, 5);
  hyper.threads = 1;
  const auto c = train_backbone(domains, kDims, hyper, model::PrecoderMode::Fdp, 5);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
  EXPECT_TRUE(a.all_finite());
  ASSERT_FALSE(log.empty());
  EXPECT_EQ(log.front().phase, "warmup");
  const auto j = nlohmann::json::parse(to_json_line(log.back()));
  EXPECT_EQ(j.at("phase"), "validate");
}

TEST(Schedule, PooledTrainerRunsHbf) {
  std::vector<DomainData> domains;
  for (int i = 0; i < 2; ++i) domains.push_back(random_domain("s" + std::to_string(i), 10, 30 + i));
  const auto p = train_deepall(domains, kDims, tiny_hyper(), model::PrecoderMode::Hbf, 6);
  EXPECT_EQ(p.mode, model::PrecoderMode::Hbf);
  EXPECT_TRUE(p.all_finite());
  EXPECT_THROW(train_backbone({domains[0]}, kDims, tiny_hyper(), model::PrecoderMode::Fdp, 1),
               std::invalid_argument);
}

TEST(Finetune, ZeroRateOrEpochsIsIdentity) {
  const auto p = model::init_backbone(kDims, model::FeatureConfig::for_dims(kDims), model::PrecoderMode::Fdp, 7);
  const auto local = random_domain("x", 12, 40).samples;
  FinetuneOptions opts;
  opts.lr = 0.0;
  EXPECT_EQ(finetune_site(p, local, opts), p);
  opts.lr = 0.01;
  opts.epochs = 0;
  EXPECT_EQ(finetune_site(p, local, opts), p);
  opts.batch_size = 0;
  EXPECT_THROW(finetune_site(p, local, opts), std::invalid_argument);
  EXPECT_THROW(finetune_site(p, {}, FinetuneOptions{}), std::invalid_argument);
}

TEST(Finetune, ImprovesLocalRate) {
  const auto p = model::init_backbone(kDims, model::FeatureConfig::for_dims(kDims), model::PrecoderMode::Fdp, 8);
  const auto local = random_domain("x", 40, 41, 30.0).samples;
  FinetuneOptions opts;
  opts.epochs = 20;
  opts.lr = 0.003;
  opts.batch_size = 10;
  opts.optimizer = OptimizerKind::Adam;
  const auto q = finetune_site(p, local, opts);
  EXPECT_GT(mean_student_rate(q, local), mean_student_rate(p, local));
  opts.freeze_pi = true;
  const auto r = finetune_site(p, local, opts);
  EXPECT_EQ(r.pi, p.pi);
  EXPECT_FALSE(r.phi == p.phi);
}

TEST(Hyper, Validation) {
  TrainHyper h;
  EXPECT_NO_THROW(h.validate());
  h.batch_size = 0;
  EXPECT_THROW(h.validate(), std::invalid_argument);
  h = TrainHyper{};
  h.val_fraction = 1.0;
  EXPECT_THROW(h.validate(), std::invalid_argument);
  EXPECT_EQ(parse_optimizer("adam"), OptimizerKind::Adam);
  EXPECT_THROW(parse_optimizer("rmsprop"), std::invalid_argument);
}

TEST(ParallelFor, VisitsEveryIndexOnceAndPropagatesErrors) {
  std::vector<std::atomic<int>> hits(100);
  parallel_for(100, 4, [&](std::size_t i) { hits[i]++; });
  for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                 if (i == 7) throw std::runtime_error("boom");
               }),
               std::runtime_error);
}

TEST(Samples, NormalizationAndReference) {
  std::mt19937_64 rng(9);
  const CMatrix h = test::random_cmatrix(2, 4, rng);
  const auto s = make_sample(h, h, 4.0, 0.5);
  EXPECT_LT((s.h_true - 4.0 * h).norm(), 1e-12);
  EXPECT_GT(s.r_wmmse, 0.0);
  EXPECT_EQ(make_sample(h, h, 4.0, 0.5, 3.5).r_wmmse, 3.5);
  EXPECT_THROW(make_sample(h, CMatrix::Ones(3, 4), 1.0, 1.0), DimensionError);
}
