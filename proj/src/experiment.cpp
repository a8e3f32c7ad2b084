#include "papp/experiment.hpp"

#include "papp/precoding.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace papp::cli {

namespace fs = std::filesystem;
using io::DatasetRecord;
using model::PrecoderMode;

namespace {

std::string snr_tag(double snr_db) {
  std::string s = format_double(snr_db);
  std::replace(s.begin(), s.end(), '.', 'p');
  return s;
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw std::runtime_error("cannot create directory '" + p.string() + "': " + ec.message());
}

void require_file(const fs::path& p, const char* what) {
  if (!fs::exists(p)) throw std::runtime_error(std::string("missing ") + what + " '" + p.string() + "'");
}

double wmmse_rate_for(const CMatrix& h_true, const CMatrix& h_design, double p_tx, double sigma) {
  const auto w = precoding::wmmse<double>(h_design, sigma, p_tx).first.w;
  return precoding::sum_rate<double>(h_true, w, sigma);
}

/// Variance of every configured site, calibrated once per command.
std::map<std::string, double> calibrate_sites(const RunConfig& cfg) {
  std::map<std::string, double> out;
  std::vector<std::string> all = cfg.train_sites;
  all.insert(all.end(), cfg.test_sites.begin(), cfg.test_sites.end());
  for (const auto& s : all) out[s] = channel::calibrate_channel_variance(cfg.system, cfg.site(s));
  return out;
}

channel::SiteSpec calibrated(const RunConfig& cfg, const std::string& name, const std::map<std::string, double>& var) {
  auto s = cfg.site(name);
  s.channel_variance = var.at(name);
  return s;
}

DatasetRecord make_record(const channel::ChannelRealization& clean, double beta, double variance,
                          std::uint64_t seed, double sigma, bool with_wmmse) {
  DatasetRecord rec;
  rec.sample = clean;
  rec.sample.domain.beta = beta;
  CMatrix design = clean.h;
  if (beta > 0.0) {
    design = channel::apply_estimation_error(clean, {beta, variance}, seed).h;
    rec.h_estimate = design;
  }
  if (with_wmmse) rec.wmmse_rate = wmmse_rate_for(clean.h, design, clean.domain.p_tx, sigma);
  return rec;
}

const CMatrix& input_of(const DatasetRecord& r) { return r.h_estimate ? *r.h_estimate : r.sample.h; }

training::Sample to_sample(const DatasetRecord& r, double sigma) {
  return training::make_sample(r.sample.h, input_of(r), r.sample.domain.p_tx, sigma, r.wmmse_rate);
}

/// Normalized local samples for fine-tuning; no reference rate is needed.
std::vector<training::Sample> local_samples(const std::vector<DatasetRecord>& recs, double sigma) {
  std::vector<training::Sample> out;
  for (const auto& r : recs) {
    training::Sample s;
    s.h_input = channel::normalize_input(input_of(r), r.sample.domain.p_tx, sigma);
    s.h_true = channel::normalize_input(r.sample.h, r.sample.domain.p_tx, sigma);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<training::Sample> augmented_fewshot(const RunConfig& cfg, const std::vector<training::Sample>& few) {
  std::vector<channel::ChannelRealization> rows;
  for (const auto& s : few) rows.push_back({s.h_input, {}});
  const auto combos =
      channel::augment_user_combinations(rows, cfg.system.n_users, cfg.augment_budget, channel::mix_seed(cfg.seed, 41));
  std::vector<training::Sample> out;
  out.reserve(combos.size());
  for (const auto& c : combos) out.push_back({c.h, c.h, 1.0});
  return out;
}

training::FinetuneOptions finetune_options(const RunConfig& cfg, std::uint64_t stream) {
  training::FinetuneOptions o;
  o.epochs = cfg.finetune_epochs;
  o.lr = cfg.finetune_lr;
  o.batch_size = cfg.finetune_batch;
  o.freeze_pi = cfg.freeze_pi;
  o.seed = channel::mix_seed(cfg.seed, stream);
  o.optimizer = cfg.hyper.optimizer;
  o.threads = cfg.hyper.threads;
  return o;
}

}  // namespace

fs::path RunPaths::train_file(const channel::Domain& d) const {
  std::ostringstream os;
  os << d.site_id << "_p" << std::setprecision(6) << d.p_tx << "_" << (d.los ? "los" : "nlos") << "_b" << d.beta
     << ".jsonl";
  return data() / "train" / os.str();
}

fs::path RunPaths::eval_file(const std::string& site, double snr_db) const {
  return data() / "eval" / (site + "_snr" + snr_tag(snr_db) + ".jsonl");
}

fs::path RunPaths::local_file(const std::string& site) const { return data() / "local" / (site + ".jsonl"); }

fs::path RunPaths::checkpoint(const std::string& kind, PrecoderMode mode) const {
  return root / (kind + "_" + model::to_string(mode) + ".ckpt");
}

fs::path RunPaths::site_checkpoint(const std::string& kind, const std::string& site, PrecoderMode mode) const {
  return root / (kind + "_" + site + "_" + model::to_string(mode) + ".ckpt");
}

double site_power(const RunConfig& cfg, const channel::SiteSpec& site, double snr_db) {
  if (!(site.channel_variance > 0)) throw std::invalid_argument("site_power: site is not calibrated");
  return channel::power_for_snr_db(cfg.system, snr_db, cfg.system.n_tx * site.channel_variance);
}

channel::DomainSet training_domains(const RunConfig& cfg) {
  const auto var = calibrate_sites(cfg);
  channel::DomainSet out;
  for (const auto& name : cfg.train_sites) {
    const auto site = calibrated(cfg, name, var);
    std::vector<double> powers;
    for (double snr : cfg.snr_db) powers.push_back(site_power(cfg, site, snr));
    const auto d = channel::enumerate_domains({name}, powers, cfg.betas_backbone);
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

void cmd_gen_data(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const RunPaths paths{cfg.out};
  const auto var = calibrate_sites(cfg);
  const double sigma = cfg.system.sigma();
  ensure_dir(paths.data() / "train");
  ensure_dir(paths.data() / "eval");
  ensure_dir(paths.data() / "local");

  io::Manifest manifest;
  manifest["config_seed"] = std::to_string(cfg.seed);
  manifest["n_tx"] = std::to_string(cfg.system.n_tx);
  manifest["n_users"] = std::to_string(cfg.system.n_users);
  for (const auto& [name, v] : var) {
    manifest["site." + name + ".seed"] = std::to_string(cfg.site(name).seed);
    manifest["site." + name + ".channel_variance"] = format_double(v);
  }

  const auto domains = training_domains(cfg);
  for (std::size_t i = 0; i < domains.size(); ++i) {
    const auto& d = domains[i];
    const auto site = calibrated(cfg, d.site_id, var);
    const std::uint64_t seed = channel::mix_seed(cfg.seed, 1000 + i);
    const auto clean = channel::sample_channels(cfg.system, site, d, cfg.samples_per_domain, seed);
    std::vector<DatasetRecord> recs;
    recs.reserve(clean.size());
    for (std::size_t k = 0; k < clean.size(); ++k)
      recs.push_back(make_record(clean[k], d.beta, site.channel_variance, channel::mix_seed(seed, k + 1), sigma, true));
    const auto file = paths.train_file(d);
    io::write_dataset(file, recs);
    manifest["train." + std::to_string(i) + ".domain"] = d.tag();
    manifest["train." + std::to_string(i) + ".file"] = fs::relative(file, paths.data()).string();
    manifest["train." + std::to_string(i) + ".hash"] = io::file_hash(file);
    log << "wrote " << recs.size() << " samples for " << d.tag() << '\n';
  }
  manifest["train.count"] = std::to_string(domains.size());

  for (std::size_t t = 0; t < cfg.test_sites.size(); ++t) {
    const auto& name = cfg.test_sites[t];
    const auto site = calibrated(cfg, name, var);
    for (std::size_t j = 0; j < cfg.eval_snr_db.size(); ++j) {
      const double p = site_power(cfg, site, cfg.eval_snr_db[j]);
      const std::uint64_t seed = channel::mix_seed(cfg.seed, 5000 + 100 * t + j);
      const auto clean = channel::sample_site_mixture(cfg.system, site, p, cfg.beta_ft, cfg.eval_samples, seed);
      std::vector<DatasetRecord> recs;
      for (std::size_t k = 0; k < clean.size(); ++k)
        recs.push_back(
            make_record(clean[k], cfg.beta_ft, site.channel_variance, channel::mix_seed(seed, k + 1), sigma, true));
      const auto file = paths.eval_file(name, cfg.eval_snr_db[j]);
      io::write_dataset(file, recs);
      manifest["eval." + name + ".snr" + snr_tag(cfg.eval_snr_db[j]) + ".hash"] = io::file_hash(file);
    }

    // Local pool spread evenly over the evaluation SNR grid.
    std::vector<DatasetRecord> local;
    const int n_snr = static_cast<int>(cfg.eval_snr_db.size());
    for (int j = 0; j < n_snr; ++j) {
      const int n = cfg.local_samples / n_snr + (j < cfg.local_samples % n_snr ? 1 : 0);
      if (n == 0) continue;
      const double p = site_power(cfg, site, cfg.eval_snr_db[static_cast<std::size_t>(j)]);
      const std::uint64_t seed = channel::mix_seed(cfg.seed, 9000 + 100 * t + static_cast<std::uint64_t>(j));
      const auto clean = channel::sample_site_mixture(cfg.system, site, p, cfg.beta_ft, n, seed);
      for (std::size_t k = 0; k < clean.size(); ++k)
        local.push_back(
            make_record(clean[k], cfg.beta_ft, site.channel_variance, channel::mix_seed(seed, k + 1), sigma, false));
    }
    // Interleave SNRs so the few-shot prefix covers the whole grid.
    std::vector<DatasetRecord> mixed;
    std::vector<std::size_t> starts;
    std::size_t off = 0;
    for (int j = 0; j < n_snr; ++j) {
      starts.push_back(off);
      off += static_cast<std::size_t>(cfg.local_samples / n_snr + (j < cfg.local_samples % n_snr ? 1 : 0));
    }
    starts.push_back(off);
    for (std::size_t k = 0; mixed.size() < local.size(); ++k)
      for (int j = 0; j < n_snr; ++j)
        if (starts[static_cast<std::size_t>(j)] + k < starts[static_cast<std::size_t>(j) + 1])
          mixed.push_back(local[starts[static_cast<std::size_t>(j)] + k]);
    const auto file = paths.local_file(name);
    io::write_dataset(file, mixed);
    manifest["local." + name + ".hash"] = io::file_hash(file);
    log << "wrote evaluation and local data for held-out site " << name << '\n';
  }
  io::write_manifest(paths.manifest(), manifest);
}

std::vector<training::DomainData> load_training_data(const RunConfig& cfg) {
  const RunPaths paths{cfg.out};
  require_file(paths.manifest(), "manifest");
  const auto manifest = io::read_manifest(paths.manifest());
  const auto domains = training_domains(cfg);
  const auto count = manifest.find("train.count");
  if (count == manifest.end() || count->second != std::to_string(domains.size()))
    throw std::runtime_error("dataset does not match the configuration (domain count); rerun gen-data");
  std::vector<training::DomainData> out;
  const double sigma = cfg.system.sigma();
  for (std::size_t i = 0; i < domains.size(); ++i) {
    const auto tag = manifest.find("train." + std::to_string(i) + ".domain");
    if (tag == manifest.end() || tag->second != domains[i].tag())
      throw std::runtime_error("dataset does not match the configuration (domain " + domains[i].tag() + ")");
    const auto file = paths.train_file(domains[i]);
    require_file(file, "training data");
    const auto recs = io::read_dataset(file);
    training::DomainData d{domains[i], {}};
    d.samples.reserve(recs.size());
    for (const auto& r : recs) {
      if (r.sample.h.rows() != cfg.system.n_users || r.sample.h.cols() != cfg.system.n_tx)
        throw std::runtime_error("dataset dimensions do not match the configuration");
      d.samples.push_back(to_sample(r, sigma));
    }
    out.push_back(std::move(d));
  }
  return out;
}

void cmd_train(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const RunPaths paths{cfg.out};
  const auto data = load_training_data(cfg);
  std::ofstream train_log(paths.root / ("train_log_" + model::to_string(cfg.mode) + ".jsonl"));
  if (!train_log) throw std::runtime_error("cannot write training log in '" + paths.root.string() + "'");
  auto sink_for = [&](const std::string& trainer) {
    return [&, trainer](const training::LogRecord& r) {
      auto line = training::to_json_line(r);
      line.insert(1, "\"trainer\":\"" + trainer + "\",");
      train_log << line << '\n';
    };
  };

  log << "training backbone on " << data.size() << " domains (" << model::to_string(cfg.mode) << ")\n";
  const auto params = training::train_backbone(data, cfg.dims(), cfg.hyper, cfg.mode, cfg.seed, sink_for("mldg"));
  io::save_checkpoint(params, paths.checkpoint("backbone", cfg.mode));
  if (cfg.train_deepall) {
    log << "training pooled baseline\n";
    const auto pooled = training::train_deepall(data, cfg.dims(), cfg.hyper, cfg.mode, cfg.seed, sink_for("deepall"));
    io::save_checkpoint(pooled, paths.checkpoint("deepall", cfg.mode));
  }
}

void cmd_finetune(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const RunPaths paths{cfg.out};
  const auto ckpt = paths.checkpoint("backbone", cfg.mode);
  require_file(ckpt, "checkpoint");
  const auto base = io::load_checkpoint(ckpt);
  if (base.mode != cfg.mode || base.dims.n_tx != cfg.system.n_tx || base.dims.n_users != cfg.system.n_users)
    throw std::runtime_error("checkpoint does not match the configuration");
  for (const auto& f : cfg.test_sites) require_file(paths.local_file(f), "local data");

  const double sigma = cfg.system.sigma();
  for (std::size_t t = 0; t < cfg.test_sites.size(); ++t) {
    const auto& name = cfg.test_sites[t];
    const auto local = local_samples(io::read_dataset(paths.local_file(name)), sigma);
    const std::vector<training::Sample> few(local.begin(), local.begin() + cfg.fewshot_samples);
    const auto augmented = augmented_fewshot(cfg, few);
    log << name << ": few-shot on " << augmented.size() << " user combinations\n";
    const auto fewshot = training::finetune_site(base, augmented, finetune_options(cfg, 700 + t));
    io::save_checkpoint(fewshot, paths.site_checkpoint("fewshot", name, cfg.mode));
    log << name << ": fine-tuning on " << local.size() << " samples\n";
    const auto tuned = training::finetune_site(base, local, finetune_options(cfg, 800 + t));
    io::save_checkpoint(tuned, paths.site_checkpoint("finetuned", name, cfg.mode));
  }
}

void cmd_eval(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const RunPaths paths{cfg.out};
  for (const auto& name : cfg.test_sites)
    for (double snr : cfg.eval_snr_db) require_file(paths.eval_file(name, snr), "evaluation data");
  const double sigma = cfg.system.sigma();
  const int n_rf = cfg.system.n_rf;

  auto try_load = [](const fs::path& p) -> std::optional<model::BackboneParams> {
    if (!fs::exists(p)) return std::nullopt;
    return io::load_checkpoint(p);
  };
  const auto backbone = try_load(paths.checkpoint("backbone", cfg.mode));
  const auto deepall = try_load(paths.checkpoint("deepall", cfg.mode));

  std::ostringstream table;
  table << "site,snr_db,method,mean_rate,samples\n";
  for (const auto& name : cfg.test_sites) {
    const auto fewshot = try_load(paths.site_checkpoint("fewshot", name, cfg.mode));
    const auto tuned = try_load(paths.site_checkpoint("finetuned", name, cfg.mode));
    std::vector<std::pair<std::string, const std::optional<model::BackboneParams>*>> learned{
        {"PaPP zero-shot", &backbone}, {"PaPP few-shot", &fewshot}, {"PaPP fine-tuned", &tuned}, {"DeepAll", &deepall}};

    for (double snr : cfg.eval_snr_db) {
      const auto recs = io::read_dataset(paths.eval_file(name, snr));
      if (recs.empty()) throw std::runtime_error("empty evaluation file for " + name);
      std::vector<std::pair<std::string, double>> rows{{"ZF", 0}, {"WMMSE", 0}, {"PE-AltMin(ZF)", 0},
                                                       {"PE-AltMin(WMMSE)", 0}};
      std::vector<double> learned_sum(learned.size(), 0.0);
      for (std::size_t k = 0; k < recs.size(); ++k) {
        const auto& r = recs[k];
        const CMatrix& h = r.sample.h;
        const CMatrix& design = input_of(r);
        const double p = r.sample.domain.p_tx;
        const auto zf = precoding::zf_precoder<double>(design, p).w;
        const auto wm = precoding::wmmse<double>(design, sigma, p).first.w;
        rows[0].second += precoding::sum_rate<double>(h, zf, sigma);
        rows[1].second += r.wmmse_rate ? *r.wmmse_rate : precoding::sum_rate<double>(h, wm, sigma);
        const auto seed = channel::mix_seed(cfg.seed, k);
        const auto pe_zf = precoding::compose_hbf(precoding::pe_altmin<double>(zf, n_rf, cfg.pe_iters, p, seed));
        const auto pe_wm = precoding::compose_hbf(precoding::pe_altmin<double>(wm, n_rf, cfg.pe_iters, p, seed));
        rows[2].second += precoding::sum_rate<double>(h, pe_zf, sigma);
        rows[3].second += precoding::sum_rate<double>(h, pe_wm, sigma);
        const CMatrix h_bar = channel::normalize_input(design, p, sigma);
        for (std::size_t m = 0; m < learned.size(); ++m)
          if (*learned[m].second) {
            const CMatrix w = channel::denormalize_precoder(model::predict_student(**learned[m].second, h_bar), p);
            learned_sum[m] += precoding::sum_rate<double>(h, w, sigma);
          }
      }
      for (std::size_t m = 0; m < learned.size(); ++m)
        if (*learned[m].second) rows.emplace_back(learned[m].first, learned_sum[m]);
      for (const auto& [method, total] : rows)
        table << name << ',' << format_double(snr) << ',' << method << ',' << std::fixed << std::setprecision(6)
              << total / static_cast<double>(recs.size()) << std::defaultfloat << ',' << recs.size() << '\n';
    }
  }
  const auto file = paths.root / ("eval_" + model::to_string(cfg.mode) + ".csv");
  std::ofstream os(file);
  if (!os) throw std::runtime_error("cannot write '" + file.string() + "'");
  os << table.str();
  log << table.str();
}

void cmd_energy(const RunConfig& cfg, std::ostream& out) {
  cfg.validate();
  energy::ReportConfig rc;
  rc.n_tx = cfg.energy_n_tx;
  rc.n_users = cfg.energy_n_users;
  rc.n_rf = cfg.energy_n_rf;
  rc.wmmse_iters = cfg.wmmse_iters;
  rc.pe_iters = cfg.pe_iters;
  rc.maml_c_out = cfg.maml_c_out;
  const auto rows = energy::energy_report(rc);
  ensure_dir(cfg.out);
  const auto text = energy::format_report_text(rows, cfg.energy_unit);
  std::ofstream csv(cfg.out / "energy.csv");
  std::ofstream txt(cfg.out / "energy.txt");
  if (!csv || !txt) throw std::runtime_error("cannot write energy report in '" + cfg.out.string() + "'");
  csv << energy::format_report_delimited(rows, cfg.energy_unit);
  txt << text;
  out << text;
}

}  // namespace papp::cli
