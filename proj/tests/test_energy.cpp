#include "papp/energy.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace papp::energy;

namespace {

double uj(double pj) { return pj * 1e-6; }
double round2(double x) { return std::round(x * 100.0) / 100.0; }

}  // namespace

TEST(Counts, ClassicalBaselines) {
  EXPECT_EQ(counts_wmmse(64, 4, 15).n_c, 43204640);
  EXPECT_EQ(counts_zf(64, 4).n_c, 8363);
  EXPECT_NEAR(pe_altmin_term(64, 4, 8, 100), 5597866.6666667, 1e-6);
  EXPECT_EQ(counts_pe_altmin(64, 4, 8, 100, FdpTarget::Zf, 0).n_c, 5606229);
  EXPECT_EQ(counts_pe_altmin(64, 4, 8, 100, FdpTarget::Wmmse, 15).n_c, 48802507);
  EXPECT_EQ(counts_pe_altmin(64, 4, 8, 0, FdpTarget::Zf, 0).n_c, counts_zf(64, 4).n_c);
}

TEST(Counts, LearnedPrecoders) {
  const auto fdp = counts_papp(64, 4, 8, PrecoderMode::Fdp);
  EXPECT_EQ(fdp.n_c, 877056);
  EXPECT_EQ(fdp.n_w, 592500);
  EXPECT_EQ(fdp.n_a, 9472);
  const auto hbf = counts_papp(64, 4, 8, PrecoderMode::Hbf);
  EXPECT_EQ(hbf.n_c, 950784);
  EXPECT_EQ(hbf.n_w, 666804);
  EXPECT_NEAR(maml_inversion_term(64, 4), 3260586.6666667, 1e-6);
  const auto maml = counts_maml_cnn(64, 4, 8);
  EXPECT_EQ(maml.n_c, 3324075);
  EXPECT_EQ(maml.n_w, 26781);
  EXPECT_EQ(maml.n_a, 2061);
}

TEST(Energy, TableOneValues) {
  EXPECT_EQ(round2(uj(baseline_energy(counts_zf(64, 4).n_c))), 0.01);
  const double fdp = uj(dnn_energy(counts_papp(64, 4, 8, PrecoderMode::Fdp)).total);
  const double hbf = uj(dnn_energy(counts_papp(64, 4, 8, PrecoderMode::Hbf)).total);
  const double wmmse = uj(baseline_energy(counts_wmmse(64, 4, 15).n_c));
  const double wmmse_pe = uj(baseline_energy(counts_pe_altmin(64, 4, 8, 100, FdpTarget::Wmmse, 15).n_c));
  const double zf_pe = uj(baseline_energy(counts_pe_altmin(64, 4, 8, 100, FdpTarget::Zf, 0).n_c));
  EXPECT_NEAR(fdp, 2.02, 0.005);
  EXPECT_NEAR(hbf, 2.23, 0.005);
  EXPECT_NEAR(wmmse, 41.80, 0.005);
  EXPECT_NEAR(wmmse_pe, 47.22, 0.005);
  EXPECT_NEAR(zf_pe, 5.42, 0.005);
  EXPECT_LE(std::abs(fdp - 2.0) / 2.0, 0.10);
  EXPECT_LE(std::abs(hbf - 2.2) / 2.2, 0.10);
  EXPECT_LE(std::abs(wmmse - 42.1) / 42.1, 0.15);
  EXPECT_GE(wmmse / fdp, 20.0);
  EXPECT_GE(wmmse_pe / hbf, 21.0);
}

TEST(Energy, BreakdownSumsAndScales) {
  const FootprintCounts c{1000, 640, 64};
  const auto e = dnn_energy(c);
  EXPECT_DOUBLE_EQ(e.total, e.compute + e.weights + e.activations);
  EXPECT_NEAR(e.compute, 0.86 * (1000 + 3 * 64), 1e-9);
  EXPECT_NEAR(e.weights, 640 * 1.72 + 1000 * 0.86 / 8.0, 1e-9);
  EXPECT_NEAR(e.activations, 2 * 64 * 1.72 + 1000 * 0.86 / 8.0, 1e-9);
  EXPECT_NEAR(baseline_energy(1000), 1000 * (0.86 + 0.86 / 8.0), 1e-9);
  EnergyConstants bad;
  bad.parallelism = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Report, RowsAndFormatting) {
  ReportConfig cfg;
  auto rows = energy_report(cfg);
  for (const auto& r : rows) EXPECT_NE(r.family, "MAML-CNN");
  cfg.maml_c_out = 8;
  rows = energy_report(cfg);
  bool maml = false;
  for (const auto& r : rows) maml |= r.family == "MAML-CNN";
  EXPECT_TRUE(maml);
  const std::string csv = format_report_delimited(rows, Unit::MicroJoule);
  EXPECT_NE(csv.find("family"), std::string::npos);
  EXPECT_NE(csv.find("41.80"), std::string::npos);
  const std::string text = format_report_text(rows, Unit::PicoJoule);
  EXPECT_NE(text.find("ZF"), std::string::npos);
}

TEST(Counts, Validation) {
  EXPECT_THROW(counts_wmmse(0, 4, 15), std::invalid_argument);
  EXPECT_THROW(counts_papp(64, 4, 0, PrecoderMode::Hbf), std::invalid_argument);
  EXPECT_THROW(counts_maml_cnn(64, 4, 0), std::invalid_argument);
}
