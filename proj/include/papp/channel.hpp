#pragma once

// Synthetic multi-site channels, CSI estimation error, transmit-power-aware
// input scaling and training-domain enumeration.

#include "papp/linalg.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace papp::channel {

struct SystemConfig {
  int n_tx = 8;
  int n_users = 2;
  int n_rf = 4;
  double noise_power = 1.0;  // sigma^2
  int array_rows = 2;
  int array_cols = 4;
  double element_spacing = 0.5;  // wavelengths

  double sigma() const { return std::sqrt(noise_power); }
  void validate() const;
};

/// Propagation statistics of one base-station site. The seed fixes the site
/// geometry (scatterer directions and user sector); the remaining fields
/// shape the per-sample draws.
struct SiteSpec {
  std::string site_id = "site";
  std::uint64_t seed = 1;
  int n_clusters_los = 3;   // paths per LOS user, the first being the direct path
  int n_clusters_nlos = 4;  // scattered paths per NLOS user
  double angle_spread = 0.1;  // radians, jitter around scatterer centers
  double power_decay = 0.6;   // geometric per-cluster power ratio
  double los_fraction = 0.5;
  double rician_k_db = 6.0;  // direct-to-scattered power for LOS users, >= 0 dB
  double shadowing_db = 3.0;  // per-user log-normal large-scale spread
  double channel_variance = 0.0;  // sigma_H^2 per entry, 0 until calibrated

  void validate() const;
};

struct EstimationErrorSpec {
  double beta = 0.0;
  double sigma_eps_sq = 1.0;
  void validate() const;
};

struct Domain {
  std::string site_id;
  double p_tx = 1.0;
  bool los = true;
  double beta = 0.0;

  std::string tag() const;
  bool operator==(const Domain&) const = default;
};

using DomainSet = std::vector<Domain>;

struct ChannelRealization {
  CMatrix h;  // n_users x n_tx, row k is the conjugated channel of user k
  Domain domain;
};

/// Mixes a base seed with a stream index (splitmix64).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

CVector steering_vector(const SystemConfig& cfg, double azimuth, double elevation);

/// One propagation path of a user row.
struct Path {
  std::complex<double> gain;
  double azimuth = 0.0;
  double elevation = 0.0;
  bool direct = false;
};

/// Path list for one user; exposed for inspection by tests.
std::vector<Path> sample_user_paths(const SiteSpec& site, bool los, std::mt19937_64& rng);

/// n realizations of the given domain; every user has the domain's LOS state.
std::vector<ChannelRealization> sample_channels(const SystemConfig& cfg, const SiteSpec& site, const Domain& domain,
                                                int n, std::uint64_t seed);

/// n realizations where each user is LOS with probability site.los_fraction.
/// Used for deployment-site evaluation sets.
std::vector<ChannelRealization> sample_site_mixture(const SystemConfig& cfg, const SiteSpec& site, double p_tx,
                                                    double beta, int n, std::uint64_t seed);

/// Empirical per-entry variance E|h_ij|^2 over a LOS/NLOS mixture draw.
double calibrate_channel_variance(const SystemConfig& cfg, const SiteSpec& site, int n_samples = 10000,
                                  std::uint64_t seed = 0x5eed);

ChannelRealization apply_estimation_error(const ChannelRealization& h, const EstimationErrorSpec& spec,
                                          std::uint64_t seed);

/// H_bar = sqrt(P) / sigma * H.
CMatrix normalize_input(const CMatrix& h, double p_tx, double sigma);

/// W = sqrt(P) * W_bar; requires Tr(W_bar W_bar^H) = 1 within 1e-9.
CMatrix denormalize_precoder(const CMatrix& w_bar, double p_tx);

/// Transmit power reaching the given average SNR,
/// SNR = P * E||h_k||^2 / (N_U sigma^2).
double power_for_snr_db(const SystemConfig& cfg, double snr_db, double mean_row_power);

/// Cartesian product sites x powers x {LOS, NLOS} x betas.
DomainSet enumerate_domains(const std::vector<std::string>& sites, const std::vector<double>& powers,
                            const std::vector<double>& betas);

/// All n_users-subsets of the pooled user rows in lexicographic order. When
/// budget > 0 and the count exceeds it, a seeded uniform subset of `budget`
/// distinct combinations is returned, still in lexicographic order.
std::vector<ChannelRealization> augment_user_combinations(const std::vector<ChannelRealization>& samples,
                                                          int n_users, std::size_t budget = 0,
                                                          std::uint64_t seed = 0);

/// Binomial coefficient, saturating at the maximum uint64 value.
std::uint64_t n_choose_k(std::uint64_t n, std::uint64_t k);

}  // namespace papp::channel
