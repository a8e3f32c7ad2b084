#pragma once

// Experiment commands behind the command-line tool. Each validates its
// configuration fully before touching the output directory.

#include "papp/config.hpp"
#include "papp/io.hpp"

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace papp::cli {

/// Data directory layout under cfg.out.
struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path manifest() const { return data() / "manifest.txt"; }
  std::filesystem::path train_file(const channel::Domain& d) const;
  std::filesystem::path eval_file(const std::string& site, double snr_db) const;
  std::filesystem::path local_file(const std::string& site) const;
  std::filesystem::path checkpoint(const std::string& kind, model::PrecoderMode mode) const;
  std::filesystem::path site_checkpoint(const std::string& kind, const std::string& site,
                                        model::PrecoderMode mode) const;
};

/// Transmit power giving the average SNR at a calibrated site.
double site_power(const RunConfig& cfg, const channel::SiteSpec& site, double snr_db);

/// Training domains of the configuration, in enumeration order.
channel::DomainSet training_domains(const RunConfig& cfg);

/// Loads the generated training domains as normalized samples.
std::vector<training::DomainData> load_training_data(const RunConfig& cfg);

void cmd_gen_data(const RunConfig& cfg, std::ostream& log);
void cmd_train(const RunConfig& cfg, std::ostream& log);
void cmd_finetune(const RunConfig& cfg, std::ostream& log);
void cmd_eval(const RunConfig& cfg, std::ostream& log);
void cmd_energy(const RunConfig& cfg, std::ostream& out);

}  // namespace papp::cli
