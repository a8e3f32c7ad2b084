#pragma once

// Teacher-student precoding backbone. Shared feature extractor (CNN branch
// plus per-user encoder with quantile pooling and gated merge), teacher heads
// predicting WMMSE auxiliaries, and an FDP or HBF student head. All forward
// passes are recorded on an ad::Tape.

#include "papp/energy.hpp"
#include "papp/linalg.hpp"
#include "papp/tape.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace papp::model {

using energy::PrecoderMode;

std::string to_string(PrecoderMode mode);
PrecoderMode parse_mode(std::string_view text);

struct ModelDims {
  int n_tx = 8;
  int n_users = 2;
  int n_rf = 4;
};

struct FeatureConfig {
  int embed_len = 16;  // E = 2 n_tx
  std::array<int, 3> cnn_channels{8, 8, 2};
  int encoder_depth = 5;
  std::array<double, 3> quantiles{0.25, 0.5, 0.75};
  int kernel = 3;
  int student_hidden = 64;

  static FeatureConfig for_dims(const ModelDims& dims);
  void validate(const ModelDims& dims) const;
  /// Length of one user's shared feature vector.
  int shared_len(const ModelDims& dims) const;
  /// Length of the analytic Gram-row block at the end of the shared vector.
  static int gram_len(const ModelDims& dims) { return 2 * dims.n_users + 2; }
};

struct NamedTensor {
  std::string name;
  Eigen::MatrixXd value;
};

/// Flat, ordered collection of named tensors.
class ParamGroup {
 public:
  void add(std::string name, Eigen::MatrixXd value);
  const Eigen::MatrixXd& get(std::string_view name) const;
  Eigen::MatrixXd& get(std::string_view name);
  std::size_t index_of(std::string_view name) const;
  const std::vector<NamedTensor>& tensors() const { return tensors_; }
  std::vector<NamedTensor>& tensors() { return tensors_; }
  Eigen::Index numel() const;
  Eigen::VectorXd flatten() const;
  void assign(const Eigen::VectorXd& flat);
  bool all_finite() const;
  bool operator==(const ParamGroup& other) const;

 private:
  std::vector<NamedTensor> tensors_;
};

struct BackboneParams {
  ModelDims dims;
  FeatureConfig features;
  PrecoderMode mode = PrecoderMode::Fdp;
  ParamGroup pi;     // shared features
  ParamGroup theta;  // teacher heads
  ParamGroup phi;    // student head for `mode`

  bool all_finite() const { return pi.all_finite() && theta.all_finite() && phi.all_finite(); }
  bool operator==(const BackboneParams& other) const;
};

/// Uniform(+-sqrt(1/fan_in)) weights and biases, gates at 0.1.
BackboneParams init_backbone(const ModelDims& dims, const FeatureConfig& features, PrecoderMode mode,
                             std::uint64_t seed);

/// A parameter group placed on a tape, in the group's tensor order.
struct BoundGroup {
  const ParamGroup* group = nullptr;
  std::vector<ad::Var> vars;
  ad::Var operator[](std::string_view name) const { return vars[group->index_of(name)]; }
};

BoundGroup bind(const ParamGroup& group, ad::Tape& tape, bool trainable);
/// Flat gradient of a bound group, zeros for tensors off the output's path.
Eigen::VectorXd flat_gradient(const BoundGroup& bound, const ad::Gradients& grads);

struct SharedFeatures {
  ad::Var embeddings;   // N_U x E, encoder outputs
  ad::Var context;      // 1 x 4E: mean then three quantiles
  ad::Var per_user;     // N_U x 4E, duplicated embeddings plus gated context
  ad::Var cnn_summary;  // 1 x (C3 N_U N_T), flattened CNN output
  ad::Var shared;       // N_U x F: per_user, replicated CNN summary, Gram rows
  CMatrix h_bar;        // the input channel
};

/// Per-user rows of the trace-normalized Gram matrix H H^H (re, im), the log
/// and the reciprocal of the mean row power: N_U x (2 N_U + 2).
Eigen::MatrixXd gram_features(const CMatrix& h_bar);

SharedFeatures feature_forward(const BoundGroup& pi, const ModelDims& dims, const FeatureConfig& cfg,
                               const CMatrix& h_bar, ad::Tape& tape);

/// Features held fixed (e.g. cached while the student trains).
SharedFeatures constant_features(const Eigen::MatrixXd& shared, const CMatrix& h_bar, ad::Tape& tape);

struct TeacherAux {
  ad::Var v;   // N_U x 1
  ad::CVar u;  // N_U x 1
  ad::Var mu;  // 1 x 1
};

TeacherAux teacher_forward(const BoundGroup& theta, const SharedFeatures& feats, double sigma, ad::Tape& tape);

/// One WMMSE precoder update seeded with the teacher's auxiliaries, then
/// unit-power normalization.
ad::CVar teacher_precoder(const CMatrix& h_bar, const TeacherAux& aux, ad::Tape& tape);

ad::CVar normalize_unit_power(const ad::CVar& w);

struct NormalizedPrecoder {
  ad::CVar w;                    // N_T x N_U composite, Tr = 1
  std::optional<ad::CVar> a;     // HBF analog matrix, N_T x N_RF
  std::optional<ad::CVar> w_dp;  // HBF digital matrix (scaled), N_RF x N_U
};

/// Student precoders combine, per user, the Krylov vectors H^H (G/s)^m e_k
/// (m < N_U) of the (effective) channel with predicted complex weights. The
/// HBF analog stage adds learned offsets to channel-matched phases of user
/// (r mod N_U).

NormalizedPrecoder student_forward(const BoundGroup& phi, const ModelDims& dims, const SharedFeatures& feats,
                                   PrecoderMode mode, ad::Tape& tape);

/// Deployment-time inference: normalized precoder for one normalized input.
CMatrix predict_student(const BackboneParams& params, const CMatrix& h_bar);
/// Teacher precoder value for one normalized input.
CMatrix predict_teacher(const BackboneParams& params, const CMatrix& h_bar);

/// Closed-form MAC / weight / activation footprint of the deployed student.
energy::FootprintCounts count_footprint(const ModelDims& dims, PrecoderMode mode);

}  // namespace papp::model
