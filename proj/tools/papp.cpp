// papp: dataset generation, backbone training, site fine-tuning, evaluation
// and energy reporting.

#include "papp/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <string>

int main(int argc, char** argv) {
  CLI::App app{"Teacher-student precoding experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<std::string> out;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Run configuration (key = value)");
    sub->add_option("--seed", seed, "Override the run seed");
    sub->add_option("--mode", mode, "Precoder head")->check(CLI::IsMember({"fdp", "hbf"}));
    sub->add_option("--out", out, "Output directory");
  };
  for (const char* name : {"gen-data", "train", "finetune", "eval", "energy"}) add_common(app.add_subcommand(name));
  app.get_subcommand("gen-data")->description("Generate per-domain datasets and a manifest");
  app.get_subcommand("train")->description("Train the backbone (and the pooled baseline)");
  app.get_subcommand("finetune")->description("Few-shot and full fine-tuning on held-out sites");
  app.get_subcommand("eval")->description("Per-site, per-SNR mean sum-rate table");
  app.get_subcommand("energy")->description("Operation counts and energy per use");

  CLI11_PARSE(app, argc, argv);

  try {
    auto cfg = config_path.empty() ? papp::cli::RunConfig{} : papp::cli::RunConfig::load(config_path);
    cfg.command = app.get_subcommands().front()->get_name();
    if (seed) cfg.seed = *seed;
    if (mode) cfg.mode = papp::model::parse_mode(*mode);
    if (out) cfg.out = *out;
    cfg.validate();

    if (cfg.command == "gen-data")
      papp::cli::cmd_gen_data(cfg, std::cerr);
    else if (cfg.command == "train")
      papp::cli::cmd_train(cfg, std::cerr);
    else if (cfg.command == "finetune")
      papp::cli::cmd_finetune(cfg, std::cerr);
    else if (cfg.command == "eval")
      papp::cli::cmd_eval(cfg, std::cout);
    else
      papp::cli::cmd_energy(cfg, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "papp: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
