#pragma once

// Losses, the reliability gate, meta-learning domain generalization epochs
// for the teacher and student, the alternating schedule, the pooled
// (DeepAll) baseline trainer and site fine-tuning.

#include "papp/channel.hpp"
#include "papp/model.hpp"
#include "papp/tape.hpp"

#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace papp::training {

using model::BackboneParams;
using model::PrecoderMode;

/// Inner step, meta weight and outer step of one parameter group.
struct LearningRates {
  double alpha = 0.0;
  double beta = 0.0;
  double eps = 0.0;
};

enum class OptimizerKind { Sgd, Adam };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view text);

struct TrainHyper {
  LearningRates teacher{0.1, 0.01, 0.01};
  LearningRates feature{0.1, 0.01, 0.01};
  LearningRates student{0.01, 0.001, 0.001};
  int warmup_epochs = 20;
  int teacher_epochs = 5;
  int student_epochs = 5;
  int batch_size = 1000;
  double lambda0 = 0.01;
  double lambda1 = 0.1;
  int patience = 5;
  double plateau_tol = 1e-3;
  int max_cycles = 20;
  int convergence_cycles = 3;  // cycles without validation improvement before stopping
  double val_fraction = 0.1;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  int threads = 0;  // 0: hardware concurrency

  void validate() const;
};

struct GateState {
  double best_val = std::numeric_limits<double>::infinity();
  int epochs_since_improve = 0;
};

/// One training example. Channels are normalized (sqrt(P)/sigma scaling).
struct Sample {
  CMatrix h_input;  // what the network sees, possibly with estimation error
  CMatrix h_true;   // perfect CSI used to score rates
  double r_wmmse = 1.0;  // WMMSE sum-rate on h_true at unit power
};

/// Normalizes both channels and, unless given, computes the WMMSE reference.
Sample make_sample(const CMatrix& h_true, const CMatrix& h_input, double p_tx, double sigma,
                   std::optional<double> r_wmmse = std::nullopt);

struct DomainData {
  channel::Domain domain;
  std::vector<Sample> samples;
};

using DomainRefs = std::vector<const DomainData*>;

// ---- losses ----------------------------------------------------------------

/// Sum-rate (bits/s/Hz) of precoder w on channel h at noise std sigma.
ad::Var sum_rate(const CMatrix& h, const ad::CVar& w, double sigma, ad::Tape& tape);
/// -R(w_t) / r_wmmse at sigma = 1.
ad::Var teacher_loss(const CMatrix& h, const ad::CVar& w_t, double r_wmmse, ad::Tape& tape);
/// Mean |w_t - w_s|^2 over entries.
ad::Var imitation_loss(const CMatrix& w_t, const ad::CVar& w_s, ad::Tape& tape);
/// Imitation minus lambda * R(w_s) / r_wmmse.
ad::Var student_loss(const CMatrix& w_t, const ad::CVar& w_s, const CMatrix& h, double r_wmmse, double lambda,
                     ad::Tape& tape);

/// Updates the gate with this epoch's validation imitation loss and returns
/// the self-supervision weight to use next.
std::pair<double, GateState> reliability_gate(GateState state, double val_loss, const TrainHyper& hyper);

// ---- per-sample gradients ----------------------------------------------------

struct TeacherGradient {
  Eigen::VectorXd pi;
  Eigen::VectorXd theta;
  double loss = 0.0;
  double rate = 0.0;
};

TeacherGradient teacher_gradient(const BackboneParams& params, const Sample& sample);

/// Frozen inputs of the student phase: shared features and teacher precoder.
struct StudentTarget {
  Eigen::MatrixXd shared;
  CMatrix w_teacher;
};

StudentTarget student_target(const BackboneParams& params, const Sample& sample);

struct StudentGradient {
  Eigen::VectorXd phi;
  double loss = 0.0;
  double imitation = 0.0;
  double rate = 0.0;
};

StudentGradient student_gradient(const BackboneParams& params, const Sample& sample, const StudentTarget& target,
                                 double lambda);

// ---- meta update -------------------------------------------------------------

using ParamVectors = std::vector<Eigen::VectorXd>;
/// Mean gradient of each group at the given parameters.
using GradientOracle = std::function<ParamVectors(const ParamVectors&)>;

/// Applies a descent direction to one parameter group. Adam keeps moment
/// buffers per slot.
class UpdateRule {
 public:
  explicit UpdateRule(OptimizerKind kind = OptimizerKind::Sgd) : kind_(kind) {}
  void apply(int slot, Eigen::VectorXd& params, const Eigen::VectorXd& direction, double lr);
  OptimizerKind kind() const { return kind_; }

 private:
  struct Moments {
    Eigen::VectorXd m;
    Eigen::VectorXd v;
    long steps = 0;
  };
  OptimizerKind kind_;
  std::unordered_map<int, Moments> moments_;
};

/// delta = train(p); p' = p - alpha delta; delta' = gen(p');
/// p <- p - eps (delta + beta delta'). gen is skipped when every beta is 0.
ParamVectors mldg_update(const ParamVectors& params, const std::vector<LearningRates>& rates,
                         const GradientOracle& train, const GradientOracle& gen, UpdateRule& rule,
                         const std::vector<int>& slots);

// ---- epochs ------------------------------------------------------------------

struct EpochStats {
  double loss = 0.0;  // mean training loss over the epoch's meta-train batches
  double rate = 0.0;  // mean sum-rate over the same batches
  int steps = 0;
};

struct EpochContext {
  const TrainHyper* hyper = nullptr;
  std::mt19937_64* rng = nullptr;
  UpdateRule* rule = nullptr;
};

BackboneParams mldg_teacher_epoch(const BackboneParams& params, const DomainRefs& d_train, const DomainRefs& d_gen,
                                  const EpochContext& ctx, EpochStats* stats = nullptr);

/// Frozen-teacher targets for every sample of the given domains.
using TargetCache = std::unordered_map<const DomainData*, std::vector<StudentTarget>>;
TargetCache build_targets(const BackboneParams& params, const DomainRefs& domains, int threads = 0);

BackboneParams mldg_student_epoch(const BackboneParams& params, const DomainRefs& d_train, const DomainRefs& d_gen,
                                  const TargetCache& targets, double lambda, const EpochContext& ctx,
                                  EpochStats* stats = nullptr);

// ---- schedules ---------------------------------------------------------------

struct LogRecord {
  std::string phase;  // warmup, teacher, student, validate, finetune
  int cycle = 0;
  int epoch = 0;
  std::string split;  // train or val
  double loss = 0.0;
  double rate = 0.0;
  double lambda = 0.0;
};

std::string to_json_line(const LogRecord& rec);
using LogSink = std::function<void(const LogRecord&)>;

/// Train/gen split sizes for n domains at the 5:2 ratio (56 -> 40/16).
std::pair<int, int> split_sizes(int n_domains);
/// Seeded disjoint split of domain indices into (train, gen).
std::pair<std::vector<int>, std::vector<int>> split_domains(int n_domains, std::mt19937_64& rng);

BackboneParams train_backbone(const std::vector<DomainData>& domains, const model::ModelDims& dims,
                              const TrainHyper& hyper, PrecoderMode mode, std::uint64_t seed,
                              const LogSink& log = {});

BackboneParams train_deepall(const std::vector<DomainData>& domains, const model::ModelDims& dims,
                             const TrainHyper& hyper, PrecoderMode mode, std::uint64_t seed,
                             const LogSink& log = {});

struct FinetuneOptions {
  int epochs = 10;
  double lr = 0.001;
  int batch_size = 40;
  bool freeze_pi = false;
  std::uint64_t seed = 1;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  int threads = 0;
};

/// Minimizes -R(W_bar) on the (noisy) normalized inputs of `local`.
BackboneParams finetune_site(const BackboneParams& params, const std::vector<Sample>& local,
                             const FinetuneOptions& opts, const LogSink& log = {});

// ---- evaluation ----------------------------------------------------------------

/// Mean student sum-rate scored on each sample's h_true.
double mean_student_rate(const BackboneParams& params, const std::vector<Sample>& samples, int threads = 0);
/// Mean teacher loss over the samples.
double mean_teacher_loss(const BackboneParams& params, const std::vector<Sample>& samples, int threads = 0);

/// Runs fn(i) for i in [0, n) on a fixed pool of threads.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace papp::training
