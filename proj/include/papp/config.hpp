#pragma once

// Experiment configuration: a plain-text `key = value` file with `#`
// comments. Unknown or repeated keys are rejected. to_text() emits every key
// in a fixed order, so parse(to_text()) round-trips.

#include "papp/channel.hpp"
#include "papp/model.hpp"
#include "papp/training.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace papp::cli {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  std::string command;  // set from the command line, not stored in files

  channel::SystemConfig system;
  std::vector<std::string> train_sites{"site0", "site1", "site2", "site3"};
  std::vector<std::string> test_sites{"site4"};
  std::vector<double> snr_db{10, 25};
  std::vector<double> eval_snr_db{10, 15, 20, 25};
  std::vector<double> betas_backbone{0.0};
  double beta_ft = 0.0;

  int samples_per_domain = 2000;
  int eval_samples = 500;
  int local_samples = 2000;
  int fewshot_samples = 40;
  std::size_t augment_budget = 20000;

  model::PrecoderMode mode = model::PrecoderMode::Fdp;
  training::TrainHyper hyper;
  bool train_deepall = true;

  int finetune_epochs = 10;
  double finetune_lr = 0.001;
  int finetune_batch = 40;
  bool freeze_pi = false;

  int pe_iters = 100;
  int energy_n_tx = 64;
  int energy_n_users = 4;
  int energy_n_rf = 8;
  int wmmse_iters = 15;
  std::optional<int> maml_c_out;
  energy::Unit energy_unit = energy::Unit::MicroJoule;

  std::uint64_t seed = 1;
  std::filesystem::path out = "run";

  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::filesystem::path& path);
  std::string to_text() const;
  void validate() const;

  model::ModelDims dims() const { return {system.n_tx, system.n_users, system.n_rf}; }
  /// Site geometry for a named site, derived from the run seed and the name.
  channel::SiteSpec site(const std::string& site_id) const;
};

/// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace papp::cli
