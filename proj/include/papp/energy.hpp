#pragma once

// Closed-form MAC / weight / activation counts and the accelerator energy
// model used to compare learned and classical precoders.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace papp::energy {

enum class PrecoderMode { Fdp, Hbf };
enum class FdpTarget { Zf, Wmmse };

struct EnergyConstants {
  double e_mac = 0.86;   // pJ per MAC
  double e_local = 0.86;  // pJ per local-buffer access
  double e_main = 1.72;   // pJ per on-chip main-memory access
  double parallelism = 64.0;

  void validate() const;
};

struct FootprintCounts {
  std::int64_t n_c = 0;
  std::int64_t n_w = 0;
  std::int64_t n_a = 0;
};

struct EnergyBreakdown {
  double compute = 0.0;      // E_C, pJ
  double weights = 0.0;      // E_W, pJ
  double activations = 0.0;  // E_A, pJ
  double total = 0.0;        // pJ
};

std::int64_t round_count(double x);

FootprintCounts counts_wmmse(int n_tx, int n_users, int iters);
FootprintCounts counts_zf(int n_tx, int n_users);
/// Target counts plus the alternating-minimization term; t = 0 yields the
/// target alone.
FootprintCounts counts_pe_altmin(int n_tx, int n_users, int n_rf, int t, FdpTarget target, int iters_target);
FootprintCounts counts_papp(int n_tx, int n_users, int n_rf, PrecoderMode mode);
FootprintCounts counts_maml_cnn(int n_tx, int n_users, int c_out);

/// Unrounded MAML-CNN matrix-inversion term.
double maml_inversion_term(int n_tx, int n_users);
/// Unrounded PE-AltMin iteration term.
double pe_altmin_term(int n_tx, int n_users, int n_rf, int t);

EnergyBreakdown dnn_energy(const FootprintCounts& counts, const EnergyConstants& k = {});
/// E_B = N_c (E_MAC + E_L / sqrt(p)), pJ.
double baseline_energy(std::int64_t n_c, const EnergyConstants& k = {});

struct ReportConfig {
  int n_tx = 64;
  int n_users = 4;
  int n_rf = 8;
  int wmmse_iters = 15;
  int pe_iters = 100;
  std::optional<int> maml_c_out;  // no default; row omitted when unset
  EnergyConstants constants;
};

struct ReportRow {
  std::string family;  // ZF, WMMSE, PE-AltMin, PaPP, MAML-CNN
  std::string method;
  std::string architecture;  // FDP or HBF
  FootprintCounts counts;
  double energy_pj = 0.0;
};

std::vector<ReportRow> energy_report(const ReportConfig& cfg);

enum class Unit { MicroJoule, PicoJoule };

/// Delimiter-separated table with a header row.
std::string format_report_delimited(const std::vector<ReportRow>& rows, Unit unit, char delim = ',');
/// Column-aligned plain text.
std::string format_report_text(const std::vector<ReportRow>& rows, Unit unit);

}  // namespace papp::energy
