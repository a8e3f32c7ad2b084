#include "papp/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace papp::model {

using ad::CVar;
using ad::Tape;
using ad::Var;

std::string to_string(PrecoderMode mode) { return mode == PrecoderMode::Fdp ? "fdp" : "hbf"; }

PrecoderMode parse_mode(std::string_view text) {
  if (text == "fdp" || text == "FDP") return PrecoderMode::Fdp;
  if (text == "hbf" || text == "HBF") return PrecoderMode::Hbf;
  throw std::invalid_argument("unknown precoder mode '" + std::string(text) + "' (expected fdp or hbf)");
}

FeatureConfig FeatureConfig::for_dims(const ModelDims& dims) {
  FeatureConfig cfg;
  cfg.embed_len = 2 * dims.n_tx;
  cfg.student_hidden = 4 * cfg.embed_len;
  return cfg;
}

void FeatureConfig::validate(const ModelDims& dims) const {
  if (dims.n_tx < 1 || dims.n_users < 1) throw std::invalid_argument("ModelDims: dimensions must be positive");
  if (dims.n_users > dims.n_tx) throw std::invalid_argument("ModelDims: n_users must be <= n_tx");
  if (dims.n_rf < dims.n_users || dims.n_rf > dims.n_tx)
    throw std::invalid_argument("ModelDims: n_rf must lie in [n_users, n_tx]");
  if (embed_len != 2 * dims.n_tx) throw std::invalid_argument("FeatureConfig: embed_len must equal 2*n_tx");
  for (int c : cnn_channels)
    if (c < 1) throw std::invalid_argument("FeatureConfig: cnn channels must be positive");
  if (encoder_depth < 1) throw std::invalid_argument("FeatureConfig: encoder_depth must be >= 1");
  if (kernel != 3) throw std::invalid_argument("FeatureConfig: only kernel 3 is supported");
  if (student_hidden < 1) throw std::invalid_argument("FeatureConfig: student_hidden must be >= 1");
  double prev = 0.0;
  for (double q : quantiles) {
    if (!(q > prev && q < 1.0)) throw std::invalid_argument("FeatureConfig: quantiles must increase within (0,1)");
    prev = q;
  }
}

int FeatureConfig::shared_len(const ModelDims& dims) const {
  return 4 * embed_len + cnn_channels[2] * dims.n_users * dims.n_tx + gram_len(dims);
}

// ---- ParamGroup -------------------------------------------------------------

void ParamGroup::add(std::string name, Eigen::MatrixXd value) {
  for (const auto& t : tensors_)
    if (t.name == name) throw std::invalid_argument("ParamGroup: duplicate tensor '" + name + "'");
  tensors_.push_back({std::move(name), std::move(value)});
}

std::size_t ParamGroup::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < tensors_.size(); ++i)
    if (tensors_[i].name == name) return i;
  throw std::out_of_range("ParamGroup: no tensor '" + std::string(name) + "'");
}

const Eigen::MatrixXd& ParamGroup::get(std::string_view name) const { return tensors_[index_of(name)].value; }
Eigen::MatrixXd& ParamGroup::get(std::string_view name) { return tensors_[index_of(name)].value; }

Eigen::Index ParamGroup::numel() const {
  Eigen::Index n = 0;
  for (const auto& t : tensors_) n += t.value.size();
  return n;
}

Eigen::VectorXd ParamGroup::flatten() const {
  Eigen::VectorXd flat(numel());
  Eigen::Index off = 0;
  for (const auto& t : tensors_) {
    flat.segment(off, t.value.size()) = t.value.reshaped();
    off += t.value.size();
  }
  return flat;
}

void ParamGroup::assign(const Eigen::VectorXd& flat) {
  if (flat.size() != numel())
    throw DimensionError("ParamGroup::assign: expected " + std::to_string(numel()) + " values, got " +
                         std::to_string(flat.size()));
  Eigen::Index off = 0;
  for (auto& t : tensors_) {
    t.value.reshaped() = flat.segment(off, t.value.size());
    off += t.value.size();
  }
}

bool ParamGroup::all_finite() const {
  for (const auto& t : tensors_)
    if (!t.value.allFinite()) return false;
  return true;
}

bool ParamGroup::operator==(const ParamGroup& other) const {
  if (tensors_.size() != other.tensors_.size()) return false;
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    const auto& a = tensors_[i];
    const auto& b = other.tensors_[i];
    if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols()) return false;
    if (a.value != b.value) return false;
  }
  return true;
}

bool BackboneParams::operator==(const BackboneParams& other) const {
  return dims.n_tx == other.dims.n_tx && dims.n_users == other.dims.n_users && dims.n_rf == other.dims.n_rf &&
         mode == other.mode && pi == other.pi && theta == other.theta && phi == other.phi;
}

// ---- initialization ----------------------------------------------------------

namespace {

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Eigen::MatrixXd uniform(Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in) {
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng_);
    return m;
  }

  // Dense layer stored as (fan_in x fan_out) with a (1 x fan_out) bias.
  void dense(ParamGroup& g, const std::string& name, int fan_in, int fan_out) {
    g.add(name + ".w", uniform(fan_in, fan_out, fan_in));
    g.add(name + ".b", uniform(1, fan_out, fan_in));
  }

  // Convolution stored as (c_out x 9 c_in) acting on im2col patches.
  void conv(ParamGroup& g, const std::string& name, int c_in, int c_out) {
    g.add(name + ".w", uniform(c_out, 9 * c_in, 9 * c_in));
    g.add(name + ".b", uniform(c_out, 1, 9 * c_in));
  }

 private:
  std::mt19937_64 rng_;
};

Var dense(const BoundGroup& g, const std::string& name, const Var& x) {
  return matmul(x, g[name + ".w"]) + g[name + ".b"];
}

bool has_tensor(const ParamGroup& g, std::string_view name) {
  for (const auto& t : g.tensors())
    if (t.name == name) return true;
  return false;
}

}  // namespace

BackboneParams init_backbone(const ModelDims& dims, const FeatureConfig& features, PrecoderMode mode,
                             std::uint64_t seed) {
  features.validate(dims);
  BackboneParams p;
  p.dims = dims;
  p.features = features;
  p.mode = mode;
  Initializer init(seed);
  const int e = features.embed_len;
  const auto& ch = features.cnn_channels;

  init.conv(p.pi, "cnn0", 2, ch[0]);
  init.conv(p.pi, "cnn1", ch[0], ch[1]);
  init.conv(p.pi, "cnn2", ch[1], ch[2]);
  for (int l = 0; l < features.encoder_depth; ++l) init.dense(p.pi, "enc" + std::to_string(l), e, e);
  p.pi.add("gate_mean", Eigen::MatrixXd::Constant(1, 1, 0.1));
  p.pi.add("gate_quantile", Eigen::MatrixXd::Constant(1, 1, 0.1));

  const int f = features.shared_len(dims);
  init.dense(p.theta, "head", f, 6);

  const int h = features.student_hidden;
  if (mode == PrecoderMode::Fdp) {
    init.dense(p.phi, "fdp0", f, h);
    init.dense(p.phi, "fdp1", h, 2 * dims.n_users);
  } else {
    init.dense(p.phi, "phase0", f, h);
    init.dense(p.phi, "phase1", h, dims.n_tx * dims.n_rf);
    init.dense(p.phi, "digital0", f, h);
    init.dense(p.phi, "digital1", h, 2 * dims.n_users);
  }
  // Output layers start small so students begin at the matched filter.
  for (auto& t : p.phi.tensors())
    if (t.name.starts_with("fdp1") || t.name.starts_with("digital1") || t.name.starts_with("phase1")) t.value *= 0.1;
  return p;
}

BoundGroup bind(const ParamGroup& group, Tape& tape, bool trainable) {
  BoundGroup b;
  b.group = &group;
  b.vars.reserve(group.tensors().size());
  for (const auto& t : group.tensors()) b.vars.push_back(trainable ? tape.variable(t.value) : tape.constant(t.value));
  return b;
}

Eigen::VectorXd flat_gradient(const BoundGroup& bound, const ad::Gradients& grads) {
  Eigen::VectorXd flat(bound.group->numel());
  Eigen::Index off = 0;
  for (const auto& v : bound.vars) {
    const Eigen::MatrixXd g = grads[v];
    flat.segment(off, g.size()) = g.reshaped();
    off += g.size();
  }
  return flat;
}

// ---- forward passes ----------------------------------------------------------

SharedFeatures feature_forward(const BoundGroup& pi, const ModelDims& dims, const FeatureConfig& cfg,
                               const CMatrix& h_bar, Tape& tape) {
  if (h_bar.rows() != dims.n_users || h_bar.cols() != dims.n_tx)
    throw DimensionError("feature_forward: channel is " + shape_str(h_bar.rows(), h_bar.cols()) + ", expected " +
                         shape_str(dims.n_users, dims.n_tx));
  const Eigen::Index nu = dims.n_users;
  const Eigen::Index nt = dims.n_tx;

  // CNN branch over the (real, imag) planes of the N_U x N_T grid.
  Eigen::MatrixXd planes(2, nu * nt);
  for (Eigen::Index k = 0; k < nu; ++k)
    for (Eigen::Index n = 0; n < nt; ++n) {
      planes(0, k * nt + n) = h_bar(k, n).real();
      planes(1, k * nt + n) = h_bar(k, n).imag();
    }
  Var x = tape.constant(planes);
  for (int l = 0; l < 3; ++l) {
    const std::string name = "cnn" + std::to_string(l);
    x = matmul(pi[name + ".w"], im2col3x3(x, nu, nt)) + pi[name + ".b"];
    if (l < 2) x = relu(x);
  }
  SharedFeatures f;
  f.cnn_summary = reshape(x, 1, x.rows() * x.cols());

  // Per-user encoder over [Re h_k, Im h_k].
  Eigen::MatrixXd rows(nu, 2 * nt);
  rows << h_bar.real(), h_bar.imag();
  Var emb = tape.constant(rows);
  for (int l = 0; l < cfg.encoder_depth; ++l) {
    emb = dense(pi, "enc" + std::to_string(l), emb);
    if (l + 1 < cfg.encoder_depth) emb = relu(emb);
  }
  f.embeddings = emb;

  const Var mean_part = col_sum(emb) * (1.0 / static_cast<double>(nu));
  std::vector<Var> ctx{mean_part};
  std::vector<Var> gated{mean_part * pi["gate_mean"]};
  for (double q : cfg.quantiles) {
    const Var qv = quantile_cols(emb, q);
    ctx.push_back(qv);
    gated.push_back(qv * pi["gate_quantile"]);
  }
  f.context = ad::concat_h(ctx);
  f.per_user = ad::concat_h({emb, emb, emb, emb}) + ad::concat_h(gated);

  const Var ones = tape.constant(Eigen::MatrixXd::Ones(nu, 1));
  f.shared = ad::concat_h({f.per_user, matmul(ones, f.cnn_summary), tape.constant(gram_features(h_bar))});
  f.h_bar = h_bar;
  return f;
}

Eigen::MatrixXd gram_features(const CMatrix& h_bar) {
  const CMatrix g = h_bar * h_bar.adjoint();
  const Eigen::Index nu = h_bar.rows();
  const double scale = g.diagonal().real().mean();
  if (!(scale > 0)) throw std::invalid_argument("gram_features: zero channel");
  Eigen::MatrixXd out(nu, 2 * nu + 2);
  out.leftCols(nu) = g.real() / scale;
  out.middleCols(nu, nu) = g.imag() / scale;
  out.col(2 * nu).setConstant(std::log(scale) / 10.0);
  out.col(2 * nu + 1).setConstant(1.0 / scale);
  return out;
}

SharedFeatures constant_features(const Eigen::MatrixXd& shared, const CMatrix& h_bar, Tape& tape) {
  SharedFeatures f;
  f.shared = tape.constant(shared);
  f.h_bar = h_bar;
  return f;
}

TeacherAux teacher_forward(const BoundGroup& theta, const SharedFeatures& feats, double sigma, Tape& /*tape*/) {
  if (!(sigma > 0.0)) throw std::invalid_argument("teacher_forward: sigma must be positive");
  const double s2 = sigma * sigma;
  const Var out = dense(theta, "head", feats.shared);
  const Eigen::Index nu = out.rows();
  auto column = [&](Eigen::Index c) { return block(out, 0, c, nu, 1); };

  TeacherAux aux;
  aux.v = (softplus(column(0)) + s2) / (softplus(column(1)) + s2);
  const Var denom = softplus(column(4)) + s2;
  aux.u = {column(2) / denom, column(3) / denom};
  aux.mu = softplus(mean(column(5)));
  return aux;
}

CVar teacher_precoder(const CMatrix& h_bar, const TeacherAux& aux, Tape& tape) {
  const Eigen::Index nu = h_bar.rows();
  const Eigen::Index nt = h_bar.cols();
  if (aux.v.rows() != nu || aux.u.rows() != nu)
    throw DimensionError("teacher_precoder: auxiliaries do not match the channel's user count");
  const CVar h = ad::constant(tape, h_bar);
  const CVar h_adj = ad::constant(tape, CMatrix(h_bar.adjoint()));

  // A = H^H diag(v |u|^2) H + mu I
  const Var d = aux.v * abs2(aux.u);
  const CVar weighted{h.re * d, h.im * d};
  CVar a = cmatmul(h_adj, weighted);
  a.re = a.re + tape.constant(Eigen::MatrixXd::Identity(nt, nt)) * aux.mu;

  // B = H^H diag(u v)
  const Var cr = transpose(aux.u.re * aux.v);
  const Var ci = transpose(aux.u.im * aux.v);
  const CVar b{h_adj.re * cr - h_adj.im * ci, h_adj.re * ci + h_adj.im * cr};
  return normalize_unit_power(ad::csolve(a, b));
}

CVar normalize_unit_power(const CVar& w) {
  const Var p = frobenius2(w);
  if (!(p.scalar() > 0.0)) throw std::invalid_argument("normalize_unit_power: zero precoder");
  const Var n = sqrt(p);
  return {w.re / n, w.im / n};
}

namespace {

/// Column k of W is sum_m c(m,k) H^H (G/s)^m e_k with G = H H^H and s its
/// mean diagonal; row k of y holds (re c(., k), im c(., k)) and c(0, k) is
/// offset by one.
CVar combine_users(const CVar& h, const Var& y, Tape& tape) {
  const Eigen::Index nu = y.rows();
  const CVar h_adj = ad::adjoint(h);
  const CVar g = cmatmul(h, h_adj);
  const CVar g_scaled = scale(g, tape.scalar_constant(static_cast<double>(nu)) / frobenius2(h));
  CVar basis = h_adj;
  CVar w;
  for (Eigen::Index m = 0; m < nu; ++m) {
    Var c_re = transpose(block(y, 0, m, nu, 1));
    const Var c_im = transpose(block(y, 0, nu + m, nu, 1));
    if (m == 0) c_re = c_re + 1.0;
    const CVar term{basis.re * c_re - basis.im * c_im, basis.re * c_im + basis.im * c_re};
    w = m == 0 ? term : w + term;
    if (m + 1 < nu) basis = cmatmul(basis, g_scaled);
  }
  return w;
}

}  // namespace

NormalizedPrecoder student_forward(const BoundGroup& phi, const ModelDims& dims, const SharedFeatures& feats,
                                   PrecoderMode mode, Tape& tape) {
  const bool fdp_head = has_tensor(*phi.group, "fdp0.w");
  if ((mode == PrecoderMode::Fdp) != fdp_head)
    throw std::invalid_argument("student_forward: mode " + to_string(mode) + " does not match the student head");
  const Eigen::Index nu = dims.n_users;
  const Eigen::Index nt = dims.n_tx;
  if (feats.shared.rows() != nu || feats.h_bar.rows() != nu || feats.h_bar.cols() != nt)
    throw DimensionError("student_forward: features do not match the model dimensions");
  NormalizedPrecoder out;

  if (mode == PrecoderMode::Fdp) {
    const Var y = dense(phi, "fdp1", relu(dense(phi, "fdp0", feats.shared)));
    out.w = normalize_unit_power(combine_users(ad::constant(tape, feats.h_bar), y, tape));
    return out;
  }

  const Eigen::Index nrf = dims.n_rf;
  Eigen::MatrixXd base(nt, nrf);
  for (Eigen::Index n = 0; n < nt; ++n)
    for (Eigen::Index r = 0; r < nrf; ++r) base(n, r) = -std::arg(feats.h_bar(r % nu, n));
  const Var pooled = col_sum(feats.shared) * (1.0 / static_cast<double>(nu));
  const Var offsets = reshape(dense(phi, "phase1", relu(dense(phi, "phase0", pooled))), nt, nrf);
  const Var phases = offsets + tape.constant(base);
  const CVar a{cos(phases), sin(phases)};

  // Digital stage over the effective channel H A.
  const CVar h_eff = cmatmul(ad::constant(tape, feats.h_bar), a);
  const Var y = dense(phi, "digital1", relu(dense(phi, "digital0", feats.shared)));
  const CVar w_dp = combine_users(h_eff, y, tape);
  const CVar composite = cmatmul(a, w_dp);
  const Var p = frobenius2(composite);
  if (!(p.scalar() > 0.0)) throw std::invalid_argument("student_forward: zero hybrid precoder");
  const Var n = sqrt(p);
  out.w = {composite.re / n, composite.im / n};
  out.a = a;
  out.w_dp = CVar{w_dp.re / n, w_dp.im / n};
  return out;
}

CMatrix predict_student(const BackboneParams& params, const CMatrix& h_bar) {
  Tape tape;
  const auto pi = bind(params.pi, tape, false);
  const auto phi = bind(params.phi, tape, false);
  const auto feats = feature_forward(pi, params.dims, params.features, h_bar, tape);
  return student_forward(phi, params.dims, feats, params.mode, tape).w.value();
}

CMatrix predict_teacher(const BackboneParams& params, const CMatrix& h_bar) {
  Tape tape;
  const auto pi = bind(params.pi, tape, false);
  const auto theta = bind(params.theta, tape, false);
  const auto feats = feature_forward(pi, params.dims, params.features, h_bar, tape);
  return teacher_precoder(h_bar, teacher_forward(theta, feats, 1.0, tape), tape).value();
}

energy::FootprintCounts count_footprint(const ModelDims& dims, PrecoderMode mode) {
  return energy::counts_papp(dims.n_tx, dims.n_users, dims.n_rf, mode);
}

}  // namespace papp::model
