#include "papp/training.hpp"

#include "papp/precoding.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace papp::training {

using ad::CVar;
using ad::Tape;
using ad::Var;

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::Sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(std::string_view text) {
  if (text == "sgd") return OptimizerKind::Sgd;
  if (text == "adam") return OptimizerKind::Adam;
  throw std::invalid_argument("unknown optimizer '" + std::string(text) + "' (expected sgd or adam)");
}

void TrainHyper::validate() const {
  for (const auto* r : {&teacher, &feature, &student})
    if (!(r->alpha > 0 && r->beta >= 0 && r->eps > 0))
      throw std::invalid_argument("TrainHyper: learning rates must be positive (meta weights nonnegative)");
  if (warmup_epochs < 0 || teacher_epochs < 0 || student_epochs < 0)
    throw std::invalid_argument("TrainHyper: epoch counts must be nonnegative");
  if (batch_size < 1) throw std::invalid_argument("TrainHyper: batch_size must be >= 1");
  if (!(lambda0 >= 0 && lambda0 <= lambda1)) throw std::invalid_argument("TrainHyper: need 0 <= lambda0 <= lambda1");
  if (patience < 1) throw std::invalid_argument("TrainHyper: patience must be >= 1");
  if (!(plateau_tol >= 0)) throw std::invalid_argument("TrainHyper: plateau_tol must be nonnegative");
  if (max_cycles < 0 || convergence_cycles < 1) throw std::invalid_argument("TrainHyper: bad cycle limits");
  if (!(val_fraction > 0 && val_fraction < 1)) throw std::invalid_argument("TrainHyper: val_fraction in (0,1)");
  if (threads < 0) throw std::invalid_argument("TrainHyper: threads must be >= 0");
}

Sample make_sample(const CMatrix& h_true, const CMatrix& h_input, double p_tx, double sigma,
                   std::optional<double> r_wmmse) {
  require_same_shape(h_true, h_input, "make_sample");
  Sample s;
  s.h_true = channel::normalize_input(h_true, p_tx, sigma);
  s.h_input = channel::normalize_input(h_input, p_tx, sigma);
  s.r_wmmse = r_wmmse ? *r_wmmse : precoding::wmmse<double>(s.h_true, 1.0, 1.0).second.rate_trace.back();
  if (!(s.r_wmmse > 0)) throw std::invalid_argument("make_sample: WMMSE reference rate must be positive");
  return s;
}

// ---- losses -----------------------------------------------------------------

Var sum_rate(const CMatrix& h, const CVar& w, double sigma, Tape& tape) {
  if (h.cols() != w.rows() || h.rows() != w.cols())
    throw DimensionError("sum_rate: channel " + shape_str(h.rows(), h.cols()) + " vs precoder " +
                         shape_str(w.rows(), w.cols()));
  const double noise = sigma * sigma;
  const Var p = abs2(cmatmul(ad::constant(tape, h), w));
  const Eigen::Index n = h.rows();
  const Var signal = row_sum(p * tape.constant(Eigen::MatrixXd::Identity(n, n)));
  const Var total = row_sum(p) + noise;
  return sum(log(total) - log(total - signal)) * (1.0 / std::log(2.0));
}

Var teacher_loss(const CMatrix& h, const CVar& w_t, double r_wmmse, Tape& tape) {
  if (!(r_wmmse > 0)) throw std::invalid_argument("teacher_loss: r_wmmse must be positive");
  return sum_rate(h, w_t, 1.0, tape) * (-1.0 / r_wmmse);
}

Var imitation_loss(const CMatrix& w_t, const CVar& w_s, Tape& tape) {
  if (w_t.rows() != w_s.rows() || w_t.cols() != w_s.cols())
    throw DimensionError("imitation_loss: shape mismatch " + shape_str(w_t.rows(), w_t.cols()) + " vs " +
                         shape_str(w_s.rows(), w_s.cols()));
  return frobenius2(w_s - ad::constant(tape, w_t)) * (1.0 / static_cast<double>(w_t.size()));
}

Var student_loss(const CMatrix& w_t, const CVar& w_s, const CMatrix& h, double r_wmmse, double lambda, Tape& tape) {
  if (!(r_wmmse > 0)) throw std::invalid_argument("student_loss: r_wmmse must be positive");
  const Var mse = imitation_loss(w_t, w_s, tape);
  if (lambda == 0.0) return mse;
  return mse - sum_rate(h, w_s, 1.0, tape) * (lambda / r_wmmse);
}

std::pair<double, GateState> reliability_gate(GateState state, double val_loss, const TrainHyper& hyper) {
  if (std::isinf(state.best_val)) {
    state.best_val = val_loss;
    state.epochs_since_improve = 0;
  } else if (val_loss < state.best_val - hyper.plateau_tol * std::abs(state.best_val)) {
    state.best_val = val_loss;
    state.epochs_since_improve = 0;
  } else {
    state.best_val = std::min(state.best_val, val_loss);
    ++state.epochs_since_improve;
  }
  const double lambda = state.epochs_since_improve >= hyper.patience ? hyper.lambda1 : hyper.lambda0;
  return {lambda, state};
}

// ---- per-sample gradients ---------------------------------------------------

TeacherGradient teacher_gradient(const BackboneParams& params, const Sample& sample) {
  Tape tape;
  const auto pi = model::bind(params.pi, tape, true);
  const auto theta = model::bind(params.theta, tape, true);
  const auto feats = model::feature_forward(pi, params.dims, params.features, sample.h_input, tape);
  const auto aux = model::teacher_forward(theta, feats, 1.0, tape);
  const CVar w = model::teacher_precoder(sample.h_input, aux, tape);
  const Var loss = teacher_loss(sample.h_true, w, sample.r_wmmse, tape);
  const auto grads = tape.backward(loss);
  TeacherGradient g;
  g.pi = model::flat_gradient(pi, grads);
  g.theta = model::flat_gradient(theta, grads);
  g.loss = loss.scalar();
  g.rate = -g.loss * sample.r_wmmse;
  return g;
}

StudentTarget student_target(const BackboneParams& params, const Sample& sample) {
  Tape tape;
  const auto pi = model::bind(params.pi, tape, false);
  const auto theta = model::bind(params.theta, tape, false);
  const auto feats = model::feature_forward(pi, params.dims, params.features, sample.h_input, tape);
  const auto aux = model::teacher_forward(theta, feats, 1.0, tape);
  return {feats.shared.value(), model::teacher_precoder(sample.h_input, aux, tape).value()};
}

StudentGradient student_gradient(const BackboneParams& params, const Sample& sample, const StudentTarget& target,
                                 double lambda) {
  Tape tape;
  const auto phi = model::bind(params.phi, tape, true);
  const auto feats = model::constant_features(target.shared, sample.h_input, tape);
  const auto out = model::student_forward(phi, params.dims, feats, params.mode, tape);
  const Var mse = imitation_loss(target.w_teacher, out.w, tape);
  const Var rate = sum_rate(sample.h_true, out.w, 1.0, tape);
  const Var loss = lambda == 0.0 ? mse : mse - rate * (lambda / sample.r_wmmse);
  const auto grads = tape.backward(loss);
  return {model::flat_gradient(phi, grads), loss.scalar(), mse.scalar(), rate.scalar()};
}

// ---- meta update --------------------------------------------------------------

void UpdateRule::apply(int slot, Eigen::VectorXd& params, const Eigen::VectorXd& direction, double lr) {
  if (params.size() != direction.size()) throw DimensionError("UpdateRule: direction length mismatch");
  if (kind_ == OptimizerKind::Sgd) {
    params -= lr * direction;
    return;
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  auto& mo = moments_[slot];
  if (mo.m.size() != params.size()) {
    mo.m = Eigen::VectorXd::Zero(params.size());
    mo.v = Eigen::VectorXd::Zero(params.size());
    mo.steps = 0;
  }
  ++mo.steps;
  mo.m = b1 * mo.m + (1 - b1) * direction;
  mo.v = b2 * mo.v + (1 - b2) * direction.cwiseAbs2();
  const double c1 = 1 - std::pow(b1, static_cast<double>(mo.steps));
  const double c2 = 1 - std::pow(b2, static_cast<double>(mo.steps));
  params.array() -= lr * (mo.m.array() / c1) / ((mo.v.array() / c2).sqrt() + eps);
}

ParamVectors mldg_update(const ParamVectors& params, const std::vector<LearningRates>& rates,
                         const GradientOracle& train, const GradientOracle& gen, UpdateRule& rule,
                         const std::vector<int>& slots) {
  if (rates.size() != params.size() || slots.size() != params.size())
    throw std::invalid_argument("mldg_update: one rate set and slot per group required");
  const ParamVectors delta = train(params);
  const bool meta = std::any_of(rates.begin(), rates.end(), [](const LearningRates& r) { return r.beta != 0.0; });
  ParamVectors out = params;
  if (!meta) {
    for (std::size_t g = 0; g < params.size(); ++g) rule.apply(slots[g], out[g], delta[g], rates[g].eps);
    return out;
  }
  ParamVectors inner = params;
  for (std::size_t g = 0; g < params.size(); ++g) inner[g] -= rates[g].alpha * delta[g];
  const ParamVectors delta_gen = gen(inner);
  for (std::size_t g = 0; g < params.size(); ++g)
    rule.apply(slots[g], out[g], delta[g] + rates[g].beta * delta_gen[g], rates[g].eps);
  return out;
}

// ---- threading ----------------------------------------------------------------

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  std::size_t workers = threads > 0 ? static_cast<std::size_t>(threads)
                                    : std::max<std::size_t>(1, std::thread::hardware_concurrency());
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---- epochs -------------------------------------------------------------------

namespace {

enum Slot { kSlotPi = 0, kSlotTheta = 1, kSlotPhi = 2, kSlotSitePi = 3, kSlotSitePhi = 4 };

void require_domains(const DomainRefs& d, const char* what) {
  if (d.empty()) throw std::invalid_argument(std::string(what) + ": empty domain set");
  for (const auto* p : d)
    if (p == nullptr || p->samples.empty()) throw std::invalid_argument(std::string(what) + ": domain without samples");
}

void require_disjoint(const DomainRefs& a, const DomainRefs& b, const char* what) {
  for (const auto* x : a)
    if (std::find(b.begin(), b.end(), x) != b.end())
      throw std::invalid_argument(std::string(what) + ": train and gen domains overlap");
}

/// Per-domain shuffled index streams; one epoch visits every sample of the
/// largest domain once.
class Batcher {
 public:
  Batcher(const DomainRefs& domains, int batch_size, std::mt19937_64& rng) : rng_(rng) {
    per_domain_ = std::max<std::size_t>(1, static_cast<std::size_t>(batch_size) / domains.size());
    std::size_t largest = 0;
    for (const auto* d : domains) {
      std::vector<std::size_t> order(d->samples.size());
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng_);
      orders_.push_back(std::move(order));
      cursor_.push_back(0);
      largest = std::max(largest, d->samples.size());
    }
    steps_ = static_cast<int>((largest + per_domain_ - 1) / per_domain_);
  }

  int steps() const { return steps_; }

  /// Next batch of sample indices for domain i.
  std::vector<std::size_t> next(std::size_t i) {
    auto& order = orders_[i];
    std::vector<std::size_t> out;
    const std::size_t take = std::min(per_domain_, order.size());
    for (std::size_t k = 0; k < take; ++k) {
      if (cursor_[i] == order.size()) {
        std::shuffle(order.begin(), order.end(), rng_);
        cursor_[i] = 0;
      }
      out.push_back(order[cursor_[i]++]);
    }
    return out;
  }

 private:
  std::mt19937_64& rng_;
  std::size_t per_domain_ = 1;
  std::vector<std::vector<std::size_t>> orders_;
  std::vector<std::size_t> cursor_;
  int steps_ = 0;
};

using Batch = std::vector<std::pair<const DomainData*, std::vector<std::size_t>>>;

Batch draw(Batcher& b, const DomainRefs& domains) {
  Batch out;
  for (std::size_t i = 0; i < domains.size(); ++i) out.emplace_back(domains[i], b.next(i));
  return out;
}

struct BatchResult {
  ParamVectors grads;
  double loss = 0.0;
  double rate = 0.0;
};

/// Per-domain mean, then mean over domains. Per-sample results are computed
/// in parallel and reduced in a fixed order.
template <typename Fn>
BatchResult batch_mean(const Batch& batch, int threads, Fn&& per_sample) {
  std::vector<std::pair<std::size_t, std::size_t>> flat;
  for (std::size_t d = 0; d < batch.size(); ++d)
    for (std::size_t k = 0; k < batch[d].second.size(); ++k) flat.emplace_back(d, k);
  std::vector<BatchResult> results(flat.size());
  parallel_for(flat.size(), threads, [&](std::size_t i) {
    const auto [d, k] = flat[i];
    results[i] = per_sample(*batch[d].first, batch[d].second[k]);
  });

  BatchResult total;
  std::size_t i = 0;
  for (const auto& [dom, idx] : batch) {
    BatchResult dsum = results[i];
    for (std::size_t k = 1; k < idx.size(); ++k) {
      const auto& r = results[i + k];
      for (std::size_t g = 0; g < dsum.grads.size(); ++g) dsum.grads[g] += r.grads[g];
      dsum.loss += r.loss;
      dsum.rate += r.rate;
    }
    i += idx.size();
    const double inv = 1.0 / static_cast<double>(idx.size());
    if (total.grads.empty()) {
      total.grads.resize(dsum.grads.size());
      for (std::size_t g = 0; g < dsum.grads.size(); ++g) total.grads[g] = Eigen::VectorXd::Zero(dsum.grads[g].size());
    }
    for (std::size_t g = 0; g < dsum.grads.size(); ++g) total.grads[g] += inv * dsum.grads[g];
    total.loss += inv * dsum.loss;
    total.rate += inv * dsum.rate;
  }
  const double inv_d = 1.0 / static_cast<double>(batch.size());
  for (auto& g : total.grads) g *= inv_d;
  total.loss *= inv_d;
  total.rate *= inv_d;
  return total;
}

BackboneParams with_teacher(const BackboneParams& base, const ParamVectors& v) {
  BackboneParams p = base;
  p.pi.assign(v[0]);
  p.theta.assign(v[1]);
  return p;
}

BackboneParams with_student(const BackboneParams& base, const Eigen::VectorXd& phi) {
  BackboneParams p = base;
  p.phi.assign(phi);
  return p;
}

BackboneParams teacher_epoch(const BackboneParams& params, const DomainRefs& d_train, const DomainRefs& d_gen,
                             const EpochContext& ctx, EpochStats* stats) {
  const auto& hyper = *ctx.hyper;
  Batcher train_b(d_train, hyper.batch_size, *ctx.rng);
  std::optional<Batcher> gen_b;
  if (!d_gen.empty()) gen_b.emplace(d_gen, hyper.batch_size, *ctx.rng);
  const std::vector<LearningRates> rates{hyper.feature, hyper.teacher};

  auto oracle_for = [&](const Batch& batch, BatchResult* keep) {
    return [&, keep](const ParamVectors& v) {
      const BackboneParams p = with_teacher(params, v);
      BatchResult r = batch_mean(batch, hyper.threads, [&](const DomainData& d, std::size_t idx) {
        auto g = teacher_gradient(p, d.samples[idx]);
        return BatchResult{{std::move(g.pi), std::move(g.theta)}, g.loss, g.rate};
      });
      if (keep) *keep = r;
      return r.grads;
    };
  };

  ParamVectors current{params.pi.flatten(), params.theta.flatten()};
  EpochStats s;
  for (int step = 0; step < train_b.steps(); ++step) {
    const Batch tb = draw(train_b, d_train);
    const Batch gb = gen_b ? draw(*gen_b, d_gen) : Batch{};
    BatchResult train_res;
    const GradientOracle train = oracle_for(tb, &train_res);
    const GradientOracle gen = oracle_for(gb, nullptr);
    current = mldg_update(current, rates, train, gen, *ctx.rule, {kSlotPi, kSlotTheta});
    s.loss += train_res.loss;
    s.rate += train_res.rate;
    ++s.steps;
  }
  if (s.steps > 0) {
    s.loss /= s.steps;
    s.rate /= s.steps;
  }
  if (stats) *stats = s;
  return with_teacher(params, current);
}

BackboneParams student_epoch(const BackboneParams& params, const DomainRefs& d_train, const DomainRefs& d_gen,
                             const TargetCache& targets, double lambda, const EpochContext& ctx, EpochStats* stats) {
  const auto& hyper = *ctx.hyper;
  Batcher train_b(d_train, hyper.batch_size, *ctx.rng);
  std::optional<Batcher> gen_b;
  if (!d_gen.empty()) gen_b.emplace(d_gen, hyper.batch_size, *ctx.rng);
  auto target_of = [&](const DomainData& d, std::size_t idx) -> const StudentTarget& {
    const auto it = targets.find(&d);
    if (it == targets.end()) throw std::invalid_argument("student epoch: no teacher targets for a domain");
    return it->second.at(idx);
  };

  auto oracle_for = [&](const Batch& batch, BatchResult* keep) {
    return [&, keep](const ParamVectors& v) {
      const BackboneParams p = with_student(params, v[0]);
      BatchResult r = batch_mean(batch, hyper.threads, [&](const DomainData& d, std::size_t idx) {
        auto g = student_gradient(p, d.samples[idx], target_of(d, idx), lambda);
        return BatchResult{{std::move(g.phi)}, g.loss, g.rate};
      });
      if (keep) *keep = r;
      return r.grads;
    };
  };

  ParamVectors current{params.phi.flatten()};
  EpochStats s;
  for (int step = 0; step < train_b.steps(); ++step) {
    const Batch tb = draw(train_b, d_train);
    const Batch gb = gen_b ? draw(*gen_b, d_gen) : Batch{};
    BatchResult train_res;
    current = mldg_update(current, {hyper.student}, oracle_for(tb, &train_res), oracle_for(gb, nullptr), *ctx.rule,
                          {kSlotPhi});
    s.loss += train_res.loss;
    s.rate += train_res.rate;
    ++s.steps;
  }
  if (s.steps > 0) {
    s.loss /= s.steps;
    s.rate /= s.steps;
  }
  if (stats) *stats = s;
  return with_student(params, current[0]);
}

void check_context(const EpochContext& ctx) {
  if (!ctx.hyper || !ctx.rng || !ctx.rule) throw std::invalid_argument("EpochContext: missing hyper, rng or rule");
}

}  // namespace

BackboneParams mldg_teacher_epoch(const BackboneParams& params, const DomainRefs& d_train, const DomainRefs& d_gen,
                                  const EpochContext& ctx, EpochStats* stats) {
  check_context(ctx);
  require_domains(d_train, "mldg_teacher_epoch");
  require_domains(d_gen, "mldg_teacher_epoch");
  require_disjoint(d_train, d_gen, "mldg_teacher_epoch");
  return teacher_epoch(params, d_train, d_gen, ctx, stats);
}

BackboneParams mldg_student_epoch(const BackboneParams& params, const DomainRefs& d_train, const DomainRefs& d_gen,
                                  const TargetCache& targets, double lambda, const EpochContext& ctx,
                                  EpochStats* stats) {
  check_context(ctx);
  require_domains(d_train, "mldg_student_epoch");
  require_domains(d_gen, "mldg_student_epoch");
  require_disjoint(d_train, d_gen, "mldg_student_epoch");
  return student_epoch(params, d_train, d_gen, targets, lambda, ctx, stats);
}

TargetCache build_targets(const BackboneParams& params, const DomainRefs& domains, int threads) {
  TargetCache cache;
  for (const auto* d : domains) {
    auto& out = cache[d];
    out.resize(d->samples.size());
    parallel_for(d->samples.size(), threads, [&](std::size_t i) { out[i] = student_target(params, d->samples[i]); });
  }
  return cache;
}

// ---- schedules ------------------------------------------------------------------

std::string to_json_line(const LogRecord& rec) {
  nlohmann::ordered_json j;
  j["phase"] = rec.phase;
  j["cycle"] = rec.cycle;
  j["epoch"] = rec.epoch;
  j["split"] = rec.split;
  j["loss"] = rec.loss;
  j["rate"] = rec.rate;
  j["lambda"] = rec.lambda;
  return j.dump();
}

std::pair<int, int> split_sizes(int n_domains) {
  if (n_domains < 2) throw std::invalid_argument("split_sizes: need at least 2 domains");
  const int gen = std::clamp(static_cast<int>(std::lround(n_domains * 2.0 / 7.0)), 1, n_domains - 1);
  return {n_domains - gen, gen};
}

std::pair<std::vector<int>, std::vector<int>> split_domains(int n_domains, std::mt19937_64& rng) {
  const int n_train = split_sizes(n_domains).first;
  std::vector<int> idx(static_cast<std::size_t>(n_domains));
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<int> train(idx.begin(), idx.begin() + n_train);
  std::vector<int> gen(idx.begin() + n_train, idx.end());
  std::sort(train.begin(), train.end());
  std::sort(gen.begin(), gen.end());
  return {train, gen};
}

namespace {

struct Partition {
  std::vector<DomainData> fit;
  std::vector<DomainData> val;
};

Partition hold_out(const std::vector<DomainData>& domains, double fraction, std::mt19937_64& rng) {
  Partition p;
  for (const auto& d : domains) {
    if (d.samples.size() < 2) throw std::invalid_argument("training: every domain needs at least 2 samples");
    std::vector<std::size_t> order(d.samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_val = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(fraction * static_cast<double>(d.samples.size()))), 1,
        d.samples.size() - 1);
    DomainData fit{d.domain, {}};
    DomainData val{d.domain, {}};
    for (std::size_t i = 0; i < order.size(); ++i)
      (i < n_val ? val : fit).samples.push_back(d.samples[order[i]]);
    p.fit.push_back(std::move(fit));
    p.val.push_back(std::move(val));
  }
  return p;
}

DomainRefs refs(const std::vector<DomainData>& v, const std::vector<int>& idx) {
  DomainRefs out;
  for (int i : idx) out.push_back(&v[static_cast<std::size_t>(i)]);
  return out;
}

double mean_imitation(const BackboneParams& params, const DomainRefs& domains, const TargetCache& targets,
                      int threads) {
  double total = 0.0;
  for (const auto* d : domains) {
    const auto& t = targets.at(d);
    std::vector<double> vals(d->samples.size());
    parallel_for(vals.size(), threads, [&](std::size_t i) {
      vals[i] = student_gradient(params, d->samples[i], t[i], 0.0).imitation;
    });
    total += std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
  }
  return total / static_cast<double>(domains.size());
}

/// Normalized validation score: mean student rate over WMMSE rate (higher is better).
double validation_score(const BackboneParams& params, const std::vector<DomainData>& val, int threads) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& d : val) {
    std::vector<double> vals(d.samples.size());
    parallel_for(vals.size(), threads, [&](std::size_t i) {
      const auto& s = d.samples[i];
      vals[i] = precoding::sum_rate<double>(s.h_true, model::predict_student(params, s.h_input), 1.0) / s.r_wmmse;
    });
    total += std::accumulate(vals.begin(), vals.end(), 0.0);
    n += vals.size();
  }
  return total / static_cast<double>(n);
}

/// Shared driver for the meta-learning and pooled trainers. In pooled mode
/// every domain is merged into one and gen sets stay empty.
BackboneParams run_schedule(const std::vector<DomainData>& domains, const model::ModelDims& dims,
                            TrainHyper hyper, PrecoderMode mode, std::uint64_t seed, const LogSink& log,
                            bool pooled) {
  if (domains.size() < 2 && !pooled) throw std::invalid_argument("train_backbone: need at least 2 domains");
  if (domains.empty()) throw std::invalid_argument("train_deepall: no domains");
  hyper.validate();
  if (pooled) hyper.teacher.beta = hyper.feature.beta = hyper.student.beta = 0.0;

  std::mt19937_64 rng(seed);
  auto params = model::init_backbone(dims, model::FeatureConfig::for_dims(dims), mode,
                                     channel::mix_seed(seed, 0x1417));
  UpdateRule rule(hyper.optimizer);
  const EpochContext ctx{&hyper, &rng, &rule};

  std::vector<DomainData> source = domains;
  if (pooled) {
    DomainData merged{domains.front().domain, {}};
    merged.domain.site_id = "pooled";
    for (const auto& d : domains) merged.samples.insert(merged.samples.end(), d.samples.begin(), d.samples.end());
    source = {std::move(merged)};
  }
  const Partition part = hold_out(source, hyper.val_fraction, rng);
  const int n_dom = static_cast<int>(part.fit.size());

  auto next_split = [&]() -> std::pair<std::vector<int>, std::vector<int>> {
    if (pooled) return {{0}, {}};
    return split_domains(n_dom, rng);
  };
  auto emit = [&](LogRecord r) {
    if (log) log(r);
  };

  // warm-up: teacher alone
  for (int e = 0; e < hyper.warmup_epochs; ++e) {
    const auto [tr, gn] = next_split();
    EpochStats st;
    params = teacher_epoch(params, refs(part.fit, tr), refs(part.fit, gn), ctx, &st);
    emit({"warmup", 0, e, "train", st.loss, st.rate, 0.0});
  }

  GateState gate;
  double lambda = hyper.lambda0;
  double best_score = -std::numeric_limits<double>::infinity();
  BackboneParams best = params;
  int stale = 0;
  for (int cycle = 1; cycle <= hyper.max_cycles; ++cycle) {
    const auto [tr, gn] = next_split();
    const DomainRefs d_train = refs(part.fit, tr);
    const DomainRefs d_gen = refs(part.fit, gn);
    const DomainRefs d_val = refs(part.val, tr);

    for (int e = 0; e < hyper.teacher_epochs; ++e) {
      EpochStats st;
      params = teacher_epoch(params, d_train, d_gen, ctx, &st);
      emit({"teacher", cycle, e, "train", st.loss, st.rate, 0.0});
    }

    DomainRefs all = d_train;
    all.insert(all.end(), d_gen.begin(), d_gen.end());
    all.insert(all.end(), d_val.begin(), d_val.end());
    const TargetCache targets = build_targets(params, all, hyper.threads);
    for (int e = 0; e < hyper.student_epochs; ++e) {
      EpochStats st;
      params = student_epoch(params, d_train, d_gen, targets, lambda, ctx, &st);
      emit({"student", cycle, e, "train", st.loss, st.rate, lambda});
      const double val_loss = mean_imitation(params, d_val, targets, hyper.threads);
      emit({"student", cycle, e, "val", val_loss, 0.0, lambda});
      std::tie(lambda, gate) = reliability_gate(gate, val_loss, hyper);
    }

    const double score = validation_score(params, part.val, hyper.threads);
    emit({"validate", cycle, 0, "val", -score, score, lambda});
    if (score > best_score) {
      best_score = score;
      best = params;
      stale = 0;
    } else if (++stale >= hyper.convergence_cycles) {
      break;
    }
  }
  return hyper.max_cycles > 0 ? best : params;
}

}  // namespace

BackboneParams train_backbone(const std::vector<DomainData>& domains, const model::ModelDims& dims,
                              const TrainHyper& hyper, PrecoderMode mode, std::uint64_t seed, const LogSink& log) {
  return run_schedule(domains, dims, hyper, mode, seed, log, false);
}

BackboneParams train_deepall(const std::vector<DomainData>& domains, const model::ModelDims& dims,
                             const TrainHyper& hyper, PrecoderMode mode, std::uint64_t seed, const LogSink& log) {
  if (domains.size() < 2) throw std::invalid_argument("train_deepall: need at least 2 domains");
  return run_schedule(domains, dims, hyper, mode, seed, log, true);
}

BackboneParams finetune_site(const BackboneParams& params, const std::vector<Sample>& local,
                             const FinetuneOptions& opts, const LogSink& log) {
  if (local.empty()) throw std::invalid_argument("finetune_site: empty dataset");
  if (opts.epochs < 0 || !(opts.lr >= 0) || opts.batch_size < 1)
    throw std::invalid_argument("finetune_site: epochs >= 0, lr >= 0 and batch_size >= 1 required");
  if (opts.epochs == 0 || opts.lr == 0.0) return params;

  BackboneParams p = params;
  std::mt19937_64 rng(opts.seed);
  UpdateRule rule(opts.optimizer);
  std::vector<std::size_t> order(local.size());
  std::iota(order.begin(), order.end(), 0);
  const auto bs = static_cast<std::size_t>(opts.batch_size);

  for (int e = 0; e < opts.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_rate = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t n = std::min(bs, order.size() - start);
      std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>> grads(n);
      std::vector<double> rates(n);
      parallel_for(n, opts.threads, [&](std::size_t i) {
        const auto& s = local[order[start + i]];
        Tape tape;
        const auto pi = model::bind(p.pi, tape, !opts.freeze_pi);
        const auto phi = model::bind(p.phi, tape, true);
        const auto feats = model::feature_forward(pi, p.dims, p.features, s.h_input, tape);
        const auto out = model::student_forward(phi, p.dims, feats, p.mode, tape);
        const Var rate = sum_rate(s.h_input, out.w, 1.0, tape);
        const auto g = tape.backward(-rate);
        grads[i] = {opts.freeze_pi ? Eigen::VectorXd() : model::flat_gradient(pi, g), model::flat_gradient(phi, g)};
        rates[i] = rate.scalar();
      });
      Eigen::VectorXd g_phi = Eigen::VectorXd::Zero(p.phi.numel());
      Eigen::VectorXd g_pi = Eigen::VectorXd::Zero(p.pi.numel());
      for (std::size_t i = 0; i < n; ++i) {
        g_phi += grads[i].second;
        if (!opts.freeze_pi) g_pi += grads[i].first;
        epoch_rate += rates[i];
      }
      const double inv = 1.0 / static_cast<double>(n);
      Eigen::VectorXd phi_flat = p.phi.flatten();
      rule.apply(kSlotSitePhi, phi_flat, inv * g_phi, opts.lr);
      p.phi.assign(phi_flat);
      if (!opts.freeze_pi) {
        Eigen::VectorXd pi_flat = p.pi.flatten();
        rule.apply(kSlotSitePi, pi_flat, inv * g_pi, opts.lr);
        p.pi.assign(pi_flat);
      }
    }
    epoch_rate /= static_cast<double>(local.size());
    if (log) log({"finetune", 0, e, "train", -epoch_rate, epoch_rate, 0.0});
  }
  if (!p.all_finite()) throw std::runtime_error("finetune_site: parameters diverged");
  return p;
}

double mean_student_rate(const BackboneParams& params, const std::vector<Sample>& samples, int threads) {
  if (samples.empty()) throw std::invalid_argument("mean_student_rate: no samples");
  std::vector<double> vals(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    vals[i] = precoding::sum_rate<double>(samples[i].h_true, model::predict_student(params, samples[i].h_input), 1.0);
  });
  return std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
}

double mean_teacher_loss(const BackboneParams& params, const std::vector<Sample>& samples, int threads) {
  if (samples.empty()) throw std::invalid_argument("mean_teacher_loss: no samples");
  std::vector<double> vals(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    const auto& s = samples[i];
    vals[i] = -precoding::sum_rate<double>(s.h_true, model::predict_teacher(params, s.h_input), 1.0) / s.r_wmmse;
  });
  return std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
}

}  // namespace papp::training
