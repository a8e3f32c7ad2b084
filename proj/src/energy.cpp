#include "papp/energy.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace papp::energy {

namespace {

void require_dims(int n_tx, int n_users) {
  if (n_tx < 1 || n_users < 1) throw std::invalid_argument("energy: dimensions must be positive");
}

std::string format_energy(double pj, Unit unit) {
  std::ostringstream os;
  if (unit == Unit::MicroJoule)
    os << std::fixed << std::setprecision(2) << pj * 1e-6;
  else
    os << std::fixed << std::setprecision(1) << pj;
  return os.str();
}

const char* unit_label(Unit unit) { return unit == Unit::MicroJoule ? "EC_uJ" : "EC_pJ"; }

double wmmse_exact(int n_tx, int n_users, int iters) {
  const double t = n_tx;
  const double u = n_users;
  return 4.0 * iters * u * ((2.0 / 3.0) * t * t * t + t * t + 2.0 * t * (2.0 * u + 1.0) + u + 14.0 / 3.0);
}

double zf_exact(int n_tx, int n_users) {
  const double t = n_tx;
  const double u = n_users;
  return 8.0 * u * u * t + (8.0 / 3.0) * u * u * u;
}

}  // namespace

void EnergyConstants::validate() const {
  if (!(parallelism >= 1.0)) throw std::invalid_argument("EnergyConstants: parallelism must be >= 1");
  if (e_mac < 0 || e_local < 0 || e_main < 0) throw std::invalid_argument("EnergyConstants: negative energy");
}

std::int64_t round_count(double x) { return static_cast<std::int64_t>(std::llround(x)); }

FootprintCounts counts_wmmse(int n_tx, int n_users, int iters) {
  require_dims(n_tx, n_users);
  if (iters < 1) throw std::invalid_argument("counts_wmmse: iters must be >= 1");
  return {round_count(wmmse_exact(n_tx, n_users, iters)), 0, 0};
}

FootprintCounts counts_zf(int n_tx, int n_users) {
  require_dims(n_tx, n_users);
  if (n_users > n_tx) throw std::invalid_argument("counts_zf: n_users must be <= n_tx");
  return {round_count(zf_exact(n_tx, n_users)), 0, 0};
}

double pe_altmin_term(int n_tx, int n_users, int n_rf, int t) {
  const double nt = n_tx;
  const double nu = n_users;
  const double r = n_rf;
  return 4.0 * t * r * ((4.0 / 3.0) * r * r + 2.0 * r * (nt + nu) + nt * (2.0 * nu + 1.0));
}

FootprintCounts counts_pe_altmin(int n_tx, int n_users, int n_rf, int t, FdpTarget target, int iters_target) {
  require_dims(n_tx, n_users);
  if (t < 0) throw std::invalid_argument("counts_pe_altmin: t must be >= 0");
  if (target == FdpTarget::Wmmse && iters_target < 1)
    throw std::invalid_argument("counts_pe_altmin: WMMSE target needs iters >= 1");
  const double target_exact =
      target == FdpTarget::Zf ? zf_exact(n_tx, n_users) : wmmse_exact(n_tx, n_users, iters_target);
  // rounded once, on the total
  return {round_count(target_exact + pe_altmin_term(n_tx, n_users, n_rf, t)), 0, 0};
}

FootprintCounts counts_papp(int n_tx, int n_users, int n_rf, PrecoderMode mode) {
  require_dims(n_tx, n_users);
  const double t = n_tx;
  const double u = n_users;
  const double r = n_rf;
  const double e = 2.0 * t;
  double n_c = 864.0 * t * u + 2.0 * t * u * e + 4.0 * e * e * (u + 2.0) + 4.0 * e + u * u * t * e;
  double n_w = 884.0 + u * u * t * e + 4.0 * e * e * (u + 2.0) + 10.0 * e;
  const double n_a = 20.0 * t * u + t * u * u + 4.0 * e * u + 10.0 * e;
  if (mode == PrecoderMode::Fdp) {
    n_c += 2.0 * e * t * u;
    n_w += 2.0 * t * u * (e + 1.0);
  } else {
    if (n_rf < 1) throw std::invalid_argument("counts_papp: HBF needs n_rf >= 1");
    n_c += 2.0 * e * r * (t + u);
    n_w += 2.0 * r * (t + u) * (e + 1.0);
  }
  return {round_count(n_c), round_count(n_w), round_count(n_a)};
}

double maml_inversion_term(int n_tx, int n_users) {
  const double t = n_tx;
  const double u = n_users;
  return 8.0 * ((4.0 / 3.0) * t * t * t + t * t * (3.0 * u + 2.0) + t * (2.0 * u + 3.0));
}

FootprintCounts counts_maml_cnn(int n_tx, int n_users, int c_out) {
  require_dims(n_tx, n_users);
  if (c_out < 1) throw std::invalid_argument("counts_maml_cnn: c_out must be >= 1");
  const double t = n_tx;
  const double u = n_users;
  const double c = c_out;
  const double n_c = 18.0 * c * t * u + c * t * u * (3.0 * u + 1.0) + maml_inversion_term(n_tx, n_users);
  const double n_w = 18.0 * c + (c * t * u + 1.0) * (3.0 * u + 1.0);
  const double n_a = c * t * u + 3.0 * u + 1.0;
  return {round_count(n_c), round_count(n_w), round_count(n_a)};
}

EnergyBreakdown dnn_energy(const FootprintCounts& counts, const EnergyConstants& k) {
  k.validate();
  if (counts.n_c < 0 || counts.n_w < 0 || counts.n_a < 0) throw std::invalid_argument("dnn_energy: negative count");
  const double nc = static_cast<double>(counts.n_c);
  const double nw = static_cast<double>(counts.n_w);
  const double na = static_cast<double>(counts.n_a);
  const double local = k.e_local * nc / std::sqrt(k.parallelism);
  EnergyBreakdown b;
  b.compute = k.e_mac * (nc + 3.0 * na);
  b.weights = k.e_main * nw + local;
  b.activations = 2.0 * k.e_main * na + local;
  b.total = b.compute + b.weights + b.activations;
  return b;
}

double baseline_energy(std::int64_t n_c, const EnergyConstants& k) {
  k.validate();
  if (n_c < 0) throw std::invalid_argument("baseline_energy: negative count");
  return static_cast<double>(n_c) * (k.e_mac + k.e_local / std::sqrt(k.parallelism));
}

std::vector<ReportRow> energy_report(const ReportConfig& cfg) {
  const auto& k = cfg.constants;
  std::vector<ReportRow> rows;
  auto baseline = [&](std::string family, std::string method, std::string arch, FootprintCounts c) {
    rows.push_back({std::move(family), std::move(method), std::move(arch), c, baseline_energy(c.n_c, k)});
  };
  auto dnn = [&](std::string family, std::string method, std::string arch, FootprintCounts c) {
    rows.push_back({std::move(family), std::move(method), std::move(arch), c, dnn_energy(c, k).total});
  };

  baseline("WMMSE", "WMMSE (I=" + std::to_string(cfg.wmmse_iters) + ")", "FDP",
           counts_wmmse(cfg.n_tx, cfg.n_users, cfg.wmmse_iters));
  if (cfg.maml_c_out)
    dnn("MAML-CNN", "MAML-CNN-FDP (C_out=" + std::to_string(*cfg.maml_c_out) + ")", "FDP",
        counts_maml_cnn(cfg.n_tx, cfg.n_users, *cfg.maml_c_out));
  dnn("PaPP", "PaPP-FDP", "FDP", counts_papp(cfg.n_tx, cfg.n_users, cfg.n_rf, PrecoderMode::Fdp));
  baseline("ZF", "Zero Forcing", "FDP", counts_zf(cfg.n_tx, cfg.n_users));
  const std::string t = "(T=" + std::to_string(cfg.pe_iters) + ")";
  baseline("PE-AltMin", "WMMSE + PE-AltMin " + t, "HBF",
           counts_pe_altmin(cfg.n_tx, cfg.n_users, cfg.n_rf, cfg.pe_iters, FdpTarget::Wmmse, cfg.wmmse_iters));
  baseline("PE-AltMin", "ZF + PE-AltMin " + t, "HBF",
           counts_pe_altmin(cfg.n_tx, cfg.n_users, cfg.n_rf, cfg.pe_iters, FdpTarget::Zf, 0));
  dnn("PaPP", "PaPP-HBF (N_RF=" + std::to_string(cfg.n_rf) + ")", "HBF",
      counts_papp(cfg.n_tx, cfg.n_users, cfg.n_rf, PrecoderMode::Hbf));
  return rows;
}

std::string format_report_delimited(const std::vector<ReportRow>& rows, Unit unit, char delim) {
  std::ostringstream os;
  os << "method" << delim << "family" << delim << "architecture" << delim << "N_c" << delim << "N_w" << delim
     << "N_a" << delim << unit_label(unit) << '\n';
  for (const auto& r : rows)
    os << r.method << delim << r.family << delim << r.architecture << delim << r.counts.n_c << delim << r.counts.n_w
       << delim << r.counts.n_a << delim << format_energy(r.energy_pj, unit) << '\n';
  return os.str();
}

std::string format_report_text(const std::vector<ReportRow>& rows, Unit unit) {
  std::size_t width = 6;
  for (const auto& r : rows) width = std::max(width, r.method.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(width) + 2) << "method" << std::setw(6) << "arch" << std::right
     << std::setw(14) << "N_c" << std::setw(12) << "N_w" << std::setw(10) << "N_a" << std::setw(14)
     << unit_label(unit) << '\n';
  for (const auto& r : rows)
    os << std::left << std::setw(static_cast<int>(width) + 2) << r.method << std::setw(6) << r.architecture
       << std::right << std::setw(14) << r.counts.n_c << std::setw(12) << r.counts.n_w << std::setw(10)
       << r.counts.n_a << std::setw(14) << format_energy(r.energy_pj, unit) << '\n';
  return os.str();
}

}  // namespace papp::energy
