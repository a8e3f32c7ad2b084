#include "papp/channel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

namespace papp::channel {

namespace {

constexpr double kPi = std::numbers::pi;

// Fixed per-site geometry derived from the site seed.
struct SiteGeometry {
  std::vector<double> scatter_az;
  std::vector<double> scatter_el;
  double user_az_center = 0.0;
  double user_az_width = 0.0;
  double user_el_min = 0.0;
  double user_el_max = 0.0;
};

SiteGeometry site_geometry(const SiteSpec& site) {
  std::mt19937_64 rng(mix_seed(site.seed, 0x6e0));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SiteGeometry g;
  const int n_scatter = 2 * std::max(site.n_clusters_los, site.n_clusters_nlos) + 2;
  for (int i = 0; i < n_scatter; ++i) {
    g.scatter_az.push_back(2.0 * kPi * unit(rng));
    g.scatter_el.push_back(0.15 + 1.25 * unit(rng));
  }
  g.user_az_center = 2.0 * kPi * unit(rng);
  g.user_az_width = 0.6 + 1.8 * unit(rng);
  g.user_el_min = 0.2 + 0.4 * unit(rng);
  g.user_el_max = g.user_el_min + 0.3 + 0.5 * unit(rng);
  return g;
}

std::vector<Path> draw_paths(const SiteSpec& site, const SiteGeometry& geo, bool los, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, geo.scatter_az.size() - 1);

  std::vector<Path> paths;
  const int n_scattered = los ? site.n_clusters_los - 1 : site.n_clusters_nlos;
  double scattered_energy = 0.0;
  for (int c = 0; c < n_scattered; ++c) {
    const std::size_t s = pick(rng);
    Path p;
    p.azimuth = geo.scatter_az[s] + site.angle_spread * gauss(rng);
    p.elevation = std::clamp(geo.scatter_el[s] + site.angle_spread * gauss(rng), 0.0, kPi / 2);
    const double amp = std::sqrt(std::pow(site.power_decay, c) / 2.0);
    p.gain = {amp * gauss(rng), amp * gauss(rng)};
    scattered_energy += std::norm(p.gain);
    paths.push_back(p);
  }

  double scattered_share = 1.0;
  if (los) {
    const double k = std::pow(10.0, site.rician_k_db / 10.0);
    scattered_share = n_scattered > 0 ? 1.0 / (k + 1.0) : 0.0;
    Path direct;
    direct.direct = true;
    direct.azimuth = geo.user_az_center + geo.user_az_width * (unit(rng) - 0.5);
    direct.elevation = geo.user_el_min + (geo.user_el_max - geo.user_el_min) * unit(rng);
    direct.gain = std::polar(std::sqrt(1.0 - scattered_share), 2.0 * kPi * unit(rng));
    paths.insert(paths.begin(), direct);
  }
  if (scattered_energy > 0.0) {
    const double s = std::sqrt(scattered_share / scattered_energy);
    for (Path& p : paths)
      if (!p.direct) p.gain *= s;
  }
  return paths;
}

CVector user_row(const SystemConfig& cfg, const SiteSpec& site, const SiteGeometry& geo, bool los,
                 std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto paths = draw_paths(site, geo, los, rng);
  const double large_scale = std::pow(10.0, site.shadowing_db * gauss(rng) / 20.0);
  CVector row = CVector::Zero(cfg.n_tx);
  for (const Path& p : paths) row += p.gain * steering_vector(cfg, p.azimuth, p.elevation);
  return large_scale * row;
}

}  // namespace

void SystemConfig::validate() const {
  if (n_tx < 1 || n_users < 1 || n_rf < 1) throw std::invalid_argument("SystemConfig: counts must be positive");
  if (n_rf > n_tx) throw std::invalid_argument("SystemConfig: n_rf must not exceed n_tx");
  if (n_users > n_rf) throw std::invalid_argument("SystemConfig: n_users must not exceed n_rf");
  if (array_rows * array_cols != n_tx)
    throw std::invalid_argument("SystemConfig: array_rows * array_cols must equal n_tx");
  if (!(noise_power > 0.0)) throw std::invalid_argument("SystemConfig: noise_power must be positive");
  if (!(element_spacing > 0.0)) throw std::invalid_argument("SystemConfig: element_spacing must be positive");
}

void SiteSpec::validate() const {
  if (!(los_fraction >= 0.0 && los_fraction <= 1.0)) throw std::invalid_argument("SiteSpec: los_fraction outside [0,1]");
  if (n_clusters_los < 1 || n_clusters_nlos < 1) throw std::invalid_argument("SiteSpec: cluster counts must be >= 1");
  if (!(power_decay > 0.0 && power_decay <= 1.0)) throw std::invalid_argument("SiteSpec: power_decay outside (0,1]");
  if (!(angle_spread >= 0.0)) throw std::invalid_argument("SiteSpec: negative angle_spread");
  if (!(rician_k_db >= 0.0)) throw std::invalid_argument("SiteSpec: rician_k_db must be >= 0 dB");
  if (!(shadowing_db >= 0.0)) throw std::invalid_argument("SiteSpec: negative shadowing_db");
}

void EstimationErrorSpec::validate() const {
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("EstimationErrorSpec: beta outside [0,1]");
  if (!(sigma_eps_sq > 0.0)) throw std::invalid_argument("EstimationErrorSpec: sigma_eps_sq must be positive");
}

std::string Domain::tag() const {
  std::ostringstream os;
  os << site_id << "|p=" << p_tx << "|" << (los ? "LOS" : "NLOS") << "|b=" << beta;
  return os.str();
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

CVector steering_vector(const SystemConfig& cfg, double azimuth, double elevation) {
  if (!std::isfinite(azimuth) || !std::isfinite(elevation))
    throw std::invalid_argument("steering_vector: non-finite angle");
  CVector a(cfg.array_rows * cfg.array_cols);
  const double u = std::sin(elevation) * std::cos(azimuth);
  const double v = std::sin(elevation) * std::sin(azimuth);
  for (int m = 0; m < cfg.array_rows; ++m)
    for (int n = 0; n < cfg.array_cols; ++n)
      a(m * cfg.array_cols + n) = std::polar(1.0, 2.0 * kPi * cfg.element_spacing * (m * u + n * v));
  return a;
}

std::vector<Path> sample_user_paths(const SiteSpec& site, bool los, std::mt19937_64& rng) {
  site.validate();
  return draw_paths(site, site_geometry(site), los, rng);
}

std::vector<ChannelRealization> sample_channels(const SystemConfig& cfg, const SiteSpec& site, const Domain& domain,
                                                int n, std::uint64_t seed) {
  cfg.validate();
  site.validate();
  if (n < 1) throw std::invalid_argument("sample_channels: n must be >= 1");
  const SiteGeometry geo = site_geometry(site);
  std::mt19937_64 rng(mix_seed(mix_seed(seed, site.seed), domain.los ? 1 : 2));
  std::vector<ChannelRealization> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) {
    ChannelRealization r;
    r.domain = domain;
    r.h.resize(cfg.n_users, cfg.n_tx);
    for (int k = 0; k < cfg.n_users; ++k) r.h.row(k) = user_row(cfg, site, geo, domain.los, rng).transpose();
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<ChannelRealization> sample_site_mixture(const SystemConfig& cfg, const SiteSpec& site, double p_tx,
                                                    double beta, int n, std::uint64_t seed) {
  cfg.validate();
  site.validate();
  if (n < 1) throw std::invalid_argument("sample_site_mixture: n must be >= 1");
  const SiteGeometry geo = site_geometry(site);
  std::mt19937_64 rng(mix_seed(mix_seed(seed, site.seed), 3));
  std::bernoulli_distribution is_los(site.los_fraction);
  std::vector<ChannelRealization> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) {
    ChannelRealization r;
    r.h.resize(cfg.n_users, cfg.n_tx);
    int n_los = 0;
    for (int k = 0; k < cfg.n_users; ++k) {
      const bool los = is_los(rng);
      n_los += los ? 1 : 0;
      r.h.row(k) = user_row(cfg, site, geo, los, rng).transpose();
    }
    r.domain = Domain{site.site_id, p_tx, 2 * n_los >= cfg.n_users, beta};
    out.push_back(std::move(r));
  }
  return out;
}

double calibrate_channel_variance(const SystemConfig& cfg, const SiteSpec& site, int n_samples, std::uint64_t seed) {
  const auto draws = sample_site_mixture(cfg, site, 1.0, 0.0, n_samples, seed);
  double acc = 0.0;
  for (const auto& d : draws) acc += d.h.squaredNorm();
  return acc / (static_cast<double>(n_samples) * cfg.n_users * cfg.n_tx);
}

ChannelRealization apply_estimation_error(const ChannelRealization& h, const EstimationErrorSpec& spec,
                                          std::uint64_t seed) {
  spec.validate();
  ChannelRealization out = h;
  out.domain.beta = spec.beta;
  if (spec.beta == 0.0) return out;
  std::mt19937_64 rng(mix_seed(seed, 0xe57));
  std::normal_distribution<double> gauss(0.0, std::sqrt(spec.sigma_eps_sq / 2.0));
  const double keep = std::sqrt(1.0 - spec.beta * spec.beta);
  for (Eigen::Index i = 0; i < out.h.rows(); ++i)
    for (Eigen::Index j = 0; j < out.h.cols(); ++j) {
      const cdouble eps(gauss(rng), gauss(rng));
      out.h(i, j) = keep * h.h(i, j) + spec.beta * eps;
    }
  return out;
}

CMatrix normalize_input(const CMatrix& h, double p_tx, double sigma) {
  if (!(p_tx > 0.0) || !(sigma > 0.0)) throw std::invalid_argument("normalize_input: p_tx and sigma must be positive");
  return (std::sqrt(p_tx) / sigma) * h;
}

CMatrix denormalize_precoder(const CMatrix& w_bar, double p_tx) {
  if (!(p_tx > 0.0)) throw std::invalid_argument("denormalize_precoder: p_tx must be positive");
  const double power = trace_power(w_bar);
  if (std::abs(power - 1.0) > 1e-9)
    throw std::invalid_argument("denormalize_precoder: input is not unit-power (Tr = " + std::to_string(power) + ")");
  return std::sqrt(p_tx) * w_bar;
}

double power_for_snr_db(const SystemConfig& cfg, double snr_db, double mean_row_power) {
  if (!(mean_row_power > 0.0)) throw std::invalid_argument("power_for_snr_db: mean_row_power must be positive");
  return std::pow(10.0, snr_db / 10.0) * cfg.n_users * cfg.noise_power / mean_row_power;
}

DomainSet enumerate_domains(const std::vector<std::string>& sites, const std::vector<double>& powers,
                            const std::vector<double>& betas) {
  if (sites.empty() || powers.empty() || betas.empty())
    throw std::invalid_argument("enumerate_domains: sites, powers and betas must be nonempty");
  DomainSet out;
  out.reserve(2 * sites.size() * powers.size() * betas.size());
  for (const auto& s : sites)
    for (double p : powers) {
      if (!(p > 0.0)) throw std::invalid_argument("enumerate_domains: powers must be positive");
      for (bool los : {true, false})
        for (double b : betas) out.push_back(Domain{s, p, los, b});
    }
  return out;
}

std::uint64_t n_choose_k(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  unsigned __int128 acc = 1;
  for (std::uint64_t i = 1; i <= k; ++i) {
    acc = acc * (n - k + i) / i;
    if (acc > std::numeric_limits<std::uint64_t>::max()) return std::numeric_limits<std::uint64_t>::max();
  }
  return static_cast<std::uint64_t>(acc);
}

std::vector<ChannelRealization> augment_user_combinations(const std::vector<ChannelRealization>& samples,
                                                          int n_users, std::size_t budget, std::uint64_t seed) {
  if (n_users < 1) throw std::invalid_argument("augment_user_combinations: n_users must be >= 1");
  std::vector<CVector> rows;
  for (const auto& s : samples)
    for (Eigen::Index k = 0; k < s.h.rows(); ++k) rows.push_back(s.h.row(k).transpose());
  const std::size_t n = rows.size();
  const auto k = static_cast<std::size_t>(n_users);
  if (n < k)
    throw std::invalid_argument("augment_user_combinations: " + std::to_string(n) + " rows available, need " +
                                std::to_string(k));

  auto build = [&](const std::vector<std::size_t>& idx) {
    ChannelRealization r;
    r.domain = samples.front().domain;
    r.h.resize(n_users, rows.front().size());
    for (std::size_t i = 0; i < k; ++i) r.h.row(static_cast<Eigen::Index>(i)) = rows[idx[i]].transpose();
    return r;
  };

  std::vector<ChannelRealization> out;
  const std::uint64_t total = n_choose_k(n, k);
  if (budget == 0 || total <= budget) {
    std::vector<std::size_t> idx(k);
    for (std::size_t i = 0; i < k; ++i) idx[i] = i;
    while (true) {
      out.push_back(build(idx));
      std::size_t i = k;
      while (i > 0 && idx[i - 1] == n - k + (i - 1)) --i;
      if (i == 0) break;
      ++idx[i - 1];
      for (std::size_t j = i; j < k; ++j) idx[j] = idx[j - 1] + 1;
    }
    return out;
  }

  std::mt19937_64 rng(mix_seed(seed, 0xa06));
  std::set<std::vector<std::size_t>> chosen;
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  while (chosen.size() < budget) {
    // partial Fisher-Yates for a uniform k-subset
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> d(i, n - 1);
      std::swap(pool[i], pool[d(rng)]);
    }
    std::vector<std::size_t> idx(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(idx.begin(), idx.end());
    chosen.insert(std::move(idx));
  }
  for (const auto& idx : chosen) out.push_back(build(idx));
  return out;
}

}  // namespace papp::channel
