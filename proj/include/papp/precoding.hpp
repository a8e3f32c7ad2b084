#pragma once

// Classical downlink precoders and rate metrics. Channel convention: row k
// of H is the conjugated channel of user k, so the received gain of stream j
// at user k is (H W)(k, j).

#include "papp/linalg.hpp"

#include <cmath>
#include <complex>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace papp::precoding {

template <typename Real>
struct RateReport {
  RVec<Real> sinr;
  Real sum_rate = 0;
};

template <typename Real>
struct FdpPrecoder {
  CMat<Real> w;  // n_tx x n_users
  Real p_tx = 0;
};

template <typename Real>
struct HbfPrecoder {
  CMat<Real> a;     // n_tx x n_rf, unit-modulus entries
  CMat<Real> w_dp;  // n_rf x n_users
  Real p_tx = 0;
  std::vector<Real> gap_trace;  // ||A W_dp - W_target||_F after each iteration
};

template <typename Real>
struct WmmseState {
  RVec<Real> v;
  CVec<Real> u;
  Real mu = 0;
  std::vector<Real> rate_trace;  // entry 0 is the initializer's rate
};

template <typename Real>
RateReport<Real> evaluate_rates(const CMat<Real>& h, const CMat<Real>& w, Real sigma) {
  if (h.cols() != w.rows() || h.rows() != w.cols())
    throw DimensionError("evaluate_rates: H is " + shape_str(h.rows(), h.cols()) + ", W is " +
                         shape_str(w.rows(), w.cols()));
  const CMat<Real> g = h * w;
  const Eigen::Index n = h.rows();
  RateReport<Real> r;
  r.sinr.resize(n);
  const Real noise = sigma * sigma;
  for (Eigen::Index k = 0; k < n; ++k) {
    const Real total = g.row(k).squaredNorm();
    const Real signal = std::norm(g(k, k));
    r.sinr(k) = signal / (total - signal + noise);
    r.sum_rate += std::log2(Real(1) + r.sinr(k));
  }
  return r;
}

template <typename Real>
Real sum_rate(const CMat<Real>& h, const CMat<Real>& w, Real sigma) {
  return evaluate_rates(h, w, sigma).sum_rate;
}

template <typename Real>
CMat<Real> compose_hbf(const HbfPrecoder<Real>& p) {
  return cmat_mul(p.a, p.w_dp);
}

template <typename Real>
CMat<Real> scale_to_power(const CMat<Real>& w, Real p_tx) {
  const Real power = w.squaredNorm();
  if (!(power > 0)) throw std::invalid_argument("scale_to_power: zero precoder");
  return (std::sqrt(p_tx / power)) * w;
}

/// W proportional to H^H (H H^H)^{-1}, scaled to Tr(W W^H) = p_tx.
template <typename Real>
FdpPrecoder<Real> zf_precoder(const CMat<Real>& h, Real p_tx) {
  if (h.rows() > h.cols()) throw DimensionError("zf_precoder: more users than antennas");
  const CMat<Real> gram = h * h.adjoint();
  const CMat<Real> eye = CMat<Real>::Identity(h.rows(), h.rows());
  const CMat<Real> w = h.adjoint() * solve_hermitian<Real>(gram, Real(0), eye);
  return {scale_to_power<Real>(w, p_tx), p_tx};
}

/// Matched filter W proportional to H^H.
template <typename Real>
FdpPrecoder<Real> matched_filter(const CMat<Real>& h, Real p_tx) {
  return {scale_to_power<Real>(h.adjoint(), p_tx), p_tx};
}

namespace detail {

template <typename Real>
void check_aux(const CMat<Real>& h, const RVec<Real>& v, const CVec<Real>& u) {
  if (v.size() != h.rows() || u.size() != h.rows()) throw DimensionError("wmmse: v/u length must equal n_users");
  if (!(v.array() > Real(0)).all()) throw std::invalid_argument("wmmse: weights v must be positive");
}

/// WMMSE precoder update through the push-through identity
/// (H^H D H + mu I)^{-1} H^H = H^H (D H H^H + mu I)^{-1}; valid at mu = 0
/// when D and H H^H are nonsingular.
template <typename Real>
CMat<Real> reduced_step(const CMat<Real>& h, const RVec<Real>& v, const CVec<Real>& u, Real mu) {
  const Eigen::Index n = h.rows();
  CMat<Real> m = h * h.adjoint();
  for (Eigen::Index j = 0; j < n; ++j) m.row(j) *= v(j) * std::norm(u(j));
  m.diagonal().array() += mu;
  CMat<Real> rhs = CMat<Real>::Zero(n, n);
  for (Eigen::Index k = 0; k < n; ++k) rhs(k, k) = u(k) * v(k);
  return h.adjoint() * LuFactor<std::complex<Real>>(std::move(m)).solve(rhs);
}

template <typename Real>
Real power_at(const CMat<Real>& h, const RVec<Real>& v, const CVec<Real>& u, Real mu) {
  return reduced_step<Real>(h, v, u, mu).squaredNorm();
}

}  // namespace detail

/// Precoder update w_k = u_k v_k (sum_j v_j |u_j|^2 h_j h_j^H + mu I)^{-1} h_k.
template <typename Real>
CMat<Real> wmmse_step(const CMat<Real>& h, const RVec<Real>& v, const CVec<Real>& u, Real mu) {
  detail::check_aux(h, v, u);
  if (!(mu >= Real(0))) throw std::invalid_argument("wmmse_step: mu must be nonnegative");
  CMat<Real> weighted = h;
  for (Eigen::Index j = 0; j < h.rows(); ++j) weighted.row(j) *= v(j) * std::norm(u(j));
  const CMat<Real> a = h.adjoint() * weighted;
  const CMat<Real> a_herm = Real(0.5) * (a + a.adjoint());
  CMat<Real> rhs = h.adjoint();
  for (Eigen::Index k = 0; k < h.rows(); ++k) rhs.col(k) *= u(k) * v(k);
  return solve_hermitian<Real>(a_herm, mu, rhs);
}

/// Lagrange multiplier meeting the power budget: 0 when the unconstrained
/// update already fits, otherwise bisection on [0, mu_hi] with mu_hi doubled
/// until the power drops below p_tx. The returned mu never exceeds the budget.
template <typename Real>
Real solve_mu(const CMat<Real>& h, const RVec<Real>& v, const CVec<Real>& u, Real p_tx) {
  detail::check_aux(h, v, u);
  if (!(p_tx > 0)) throw std::invalid_argument("solve_mu: p_tx must be positive");
  try {
    if (detail::power_at<Real>(h, v, u, Real(0)) <= p_tx) return Real(0);
  } catch (const SingularMatrixError&) {
    // unbounded power at mu = 0
  }
  Real hi = std::max<Real>(Real(1e-12), (h.cwiseAbs2().rowwise().sum().array() * v.array() *
                                         u.cwiseAbs2().array()).maxCoeff());
  for (int i = 0; i < 200 && detail::power_at<Real>(h, v, u, hi) >= p_tx; ++i) hi *= 2;
  Real lo = 0;
  for (int it = 0; it < 60; ++it) {
    const Real mid = Real(0.5) * (lo + hi);
    Real p;
    try {
      p = detail::power_at<Real>(h, v, u, mid);
    } catch (const SingularMatrixError&) {
      lo = mid;
      continue;
    }
    if (p > p_tx)
      lo = mid;
    else
      hi = mid;
    if (std::abs(p - p_tx) <= Real(1e-12) * p_tx) break;
  }
  return hi;
}

template <typename Real>
void wmmse_auxiliaries(const CMat<Real>& h, const CMat<Real>& w, Real sigma, RVec<Real>& v, CVec<Real>& u) {
  const CMat<Real> g = h * w;
  const Eigen::Index n = h.rows();
  v.resize(n);
  u.resize(n);
  const Real noise = sigma * sigma;
  for (Eigen::Index k = 0; k < n; ++k) {
    const Real total = g.row(k).squaredNorm() + noise;
    const Real interference = total - std::norm(g(k, k));
    v(k) = total / interference;
    u(k) = g(k, k) / total;
  }
}

/// Iterative WMMSE from a feasible initializer. Stops when the sum-rate
/// changes by less than tol or after max_iter iterations.
template <typename Real>
std::pair<FdpPrecoder<Real>, WmmseState<Real>> wmmse(const CMat<Real>& h, Real sigma, Real p_tx,
                                                     const FdpPrecoder<Real>& w0, int max_iter = 100,
                                                     Real tol = Real(1e-3)) {
  if (w0.w.rows() != h.cols() || w0.w.cols() != h.rows()) throw DimensionError("wmmse: initializer shape");
  if (w0.w.squaredNorm() > p_tx * (Real(1) + Real(1e-8)))
    throw std::invalid_argument("wmmse: initializer violates the power budget");
  WmmseState<Real> st;
  CMat<Real> w = w0.w;
  Real rate = sum_rate<Real>(h, w, sigma);
  st.rate_trace.push_back(rate);
  for (int it = 0; it < max_iter; ++it) {
    wmmse_auxiliaries<Real>(h, w, sigma, st.v, st.u);
    st.mu = solve_mu<Real>(h, st.v, st.u, p_tx);
    CMat<Real> next = st.mu > Real(0) ? wmmse_step<Real>(h, st.v, st.u, st.mu)
                                      : detail::reduced_step<Real>(h, st.v, st.u, Real(0));
    const Real power = next.squaredNorm();
    if (power > p_tx) next *= std::sqrt(p_tx / power);
    const Real next_rate = sum_rate<Real>(h, next, sigma);
    w = std::move(next);
    st.rate_trace.push_back(next_rate);
    const Real delta = next_rate - rate;
    rate = next_rate;
    if (std::abs(delta) < tol) break;
  }
  return {FdpPrecoder<Real>{w, p_tx}, st};
}

/// Default initializer: ZF at full power, matched filter if ZF is singular.
template <typename Real>
FdpPrecoder<Real> wmmse_initializer(const CMat<Real>& h, Real p_tx) {
  try {
    return zf_precoder<Real>(h, p_tx);
  } catch (const SingularMatrixError&) {
    return matched_filter<Real>(h, p_tx);
  }
}

template <typename Real>
std::pair<FdpPrecoder<Real>, WmmseState<Real>> wmmse(const CMat<Real>& h, Real sigma, Real p_tx, int max_iter = 100,
                                                     Real tol = Real(1e-3)) {
  return wmmse<Real>(h, sigma, p_tx, wmmse_initializer<Real>(h, p_tx), max_iter, tol);
}

namespace detail {

template <typename Real>
Real factor_gap(const CMat<Real>& a, const CMat<Real>& w_dp, const CMat<Real>& target) {
  return (a * w_dp - target).norm();
}

/// Least-squares digital stage for a fixed analog matrix.
template <typename Real>
CMat<Real> digital_ls(const CMat<Real>& a, const CMat<Real>& target) {
  const CMat<Real> gram = a.adjoint() * a;
  const CMat<Real> herm = Real(0.5) * (gram + gram.adjoint());
  return solve_hermitian<Real>(herm, Real(0), CMat<Real>(a.adjoint() * target));
}

/// One exact coordinate sweep over the analog entries: with every other
/// entry fixed, the best unit-modulus a(n,m) is exp(j arg(r w_m^H)).
template <typename Real>
void analog_sweep(CMat<Real>& a, const CMat<Real>& w_dp, const CMat<Real>& target) {
  for (Eigen::Index n = 0; n < a.rows(); ++n) {
    CMat<Real> residual = target.row(n) - a.row(n) * w_dp;
    for (Eigen::Index m = 0; m < a.cols(); ++m) {
      residual += a(n, m) * w_dp.row(m);
      const std::complex<Real> c = residual.row(0).dot(w_dp.row(m));  // conj(r) . w -> conj of r w^H
      if (std::abs(c) > Real(0)) a(n, m) = std::polar(Real(1), std::arg(std::conj(c)));
      residual -= a(n, m) * w_dp.row(m);
    }
  }
}

}  // namespace detail

/// Hybrid factorization W_target ~ A W_dp by alternating minimization with
/// phase extraction. The result is rescaled to Tr = p_tx.
template <typename Real>
HbfPrecoder<Real> pe_altmin(const CMat<Real>& w_target, int n_rf, int iterations, Real p_tx,
                            std::uint64_t seed = 7) {
  const auto n_tx = w_target.rows();
  const auto n_users = w_target.cols();
  if (n_rf < n_users) throw std::invalid_argument("pe_altmin: n_rf must be >= n_users");
  if (n_rf > n_tx) throw std::invalid_argument("pe_altmin: n_rf must be <= n_tx");
  if (iterations < 1) throw std::invalid_argument("pe_altmin: need at least one iteration");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<Real> phase(Real(0), Real(2 * 3.14159265358979323846));
  HbfPrecoder<Real> out;
  out.p_tx = p_tx;
  out.a.resize(n_tx, n_rf);
  for (Eigen::Index i = 0; i < out.a.size(); ++i) out.a.data()[i] = std::polar(Real(1), phase(rng));

  out.w_dp = detail::digital_ls<Real>(out.a, w_target);
  for (int t = 0; t < iterations; ++t) {
    const CMat<Real> prod = w_target * out.w_dp.adjoint();
    CMat<Real> candidate = out.a;
    for (Eigen::Index i = 0; i < prod.size(); ++i)
      if (std::abs(prod.data()[i]) > Real(0)) candidate.data()[i] = std::polar(Real(1), std::arg(prod.data()[i]));
    if (detail::factor_gap<Real>(candidate, out.w_dp, w_target) <=
        detail::factor_gap<Real>(out.a, out.w_dp, w_target))
      out.a = std::move(candidate);
    detail::analog_sweep<Real>(out.a, out.w_dp, w_target);
    out.w_dp = detail::digital_ls<Real>(out.a, w_target);
    out.gap_trace.push_back(detail::factor_gap<Real>(out.a, out.w_dp, w_target));
  }
  const Real power = (out.a * out.w_dp).squaredNorm();
  if (power > Real(0)) out.w_dp *= std::sqrt(p_tx / power);
  return out;
}

}  // namespace papp::precoding
