#include "papp/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace papp::cli {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  double x = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), x);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  return x;
}

template <typename Int>
Int to_int(const std::string& key, const std::string& v) {
  Int x = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), x);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("config: '" + key + "' expects true or false, got '" + v + "'");
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

std::string join(const std::vector<double>& v) {
  std::vector<std::string> s;
  for (double x : v) s.push_back(format_double(x));
  return join(s);
}

std::vector<double> to_doubles(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& item : split_list(v)) out.push_back(to_double(key, item));
  return out;
}

std::string rates_text(const training::LearningRates& r) {
  return join(std::vector<double>{r.alpha, r.beta, r.eps});
}

training::LearningRates to_rates(const std::string& key, const std::string& v) {
  const auto x = to_doubles(key, v);
  if (x.size() != 3) throw ConfigError("config: '" + key + "' expects three values: inner, meta, outer");
  return {x[0], x[1], x[2]};
}

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define PAPP_INT_FIELD(name, member)                                                            \
  Field {                                                                                       \
    name, [](const RunConfig& c) { return std::to_string(c.member); },                          \
        [](RunConfig& c, const std::string& v) { c.member = to_int<decltype(c.member)>(name, v); } \
  }
#define PAPP_DOUBLE_FIELD(name, member)                                                 \
  Field {                                                                               \
    name, [](const RunConfig& c) { return format_double(c.member); },                   \
        [](RunConfig& c, const std::string& v) { c.member = to_double(name, v); }        \
  }
#define PAPP_BOOL_FIELD(name, member)                                                   \
  Field {                                                                               \
    name, [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); },  \
        [](RunConfig& c, const std::string& v) { c.member = to_bool(name, v); }          \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f{
      PAPP_INT_FIELD("n_tx", system.n_tx),
      PAPP_INT_FIELD("n_users", system.n_users),
      PAPP_INT_FIELD("n_rf", system.n_rf),
      PAPP_DOUBLE_FIELD("noise_power", system.noise_power),
      PAPP_INT_FIELD("array_rows", system.array_rows),
      PAPP_INT_FIELD("array_cols", system.array_cols),
      PAPP_DOUBLE_FIELD("element_spacing", system.element_spacing),
      {"train_sites", [](const RunConfig& c) { return join(c.train_sites); },
       [](RunConfig& c, const std::string& v) { c.train_sites = split_list(v); }},
      {"test_sites", [](const RunConfig& c) { return join(c.test_sites); },
       [](RunConfig& c, const std::string& v) { c.test_sites = split_list(v); }},
      {"snr_db", [](const RunConfig& c) { return join(c.snr_db); },
       [](RunConfig& c, const std::string& v) { c.snr_db = to_doubles("snr_db", v); }},
      {"eval_snr_db", [](const RunConfig& c) { return join(c.eval_snr_db); },
       [](RunConfig& c, const std::string& v) { c.eval_snr_db = to_doubles("eval_snr_db", v); }},
      {"betas_backbone", [](const RunConfig& c) { return join(c.betas_backbone); },
       [](RunConfig& c, const std::string& v) { c.betas_backbone = to_doubles("betas_backbone", v); }},
      PAPP_DOUBLE_FIELD("beta_ft", beta_ft),
      PAPP_INT_FIELD("samples_per_domain", samples_per_domain),
      PAPP_INT_FIELD("eval_samples", eval_samples),
      PAPP_INT_FIELD("local_samples", local_samples),
      PAPP_INT_FIELD("fewshot_samples", fewshot_samples),
      PAPP_INT_FIELD("augment_budget", augment_budget),
      {"mode", [](const RunConfig& c) { return model::to_string(c.mode); },
       [](RunConfig& c, const std::string& v) { c.mode = model::parse_mode(v); }},
      {"lr_teacher", [](const RunConfig& c) { return rates_text(c.hyper.teacher); },
       [](RunConfig& c, const std::string& v) { c.hyper.teacher = to_rates("lr_teacher", v); }},
      {"lr_feature", [](const RunConfig& c) { return rates_text(c.hyper.feature); },
       [](RunConfig& c, const std::string& v) { c.hyper.feature = to_rates("lr_feature", v); }},
      {"lr_student", [](const RunConfig& c) { return rates_text(c.hyper.student); },
       [](RunConfig& c, const std::string& v) { c.hyper.student = to_rates("lr_student", v); }},
      PAPP_INT_FIELD("warmup_epochs", hyper.warmup_epochs),
      PAPP_INT_FIELD("teacher_epochs", hyper.teacher_epochs),
      PAPP_INT_FIELD("student_epochs", hyper.student_epochs),
      PAPP_INT_FIELD("batch_size", hyper.batch_size),
      PAPP_DOUBLE_FIELD("lambda0", hyper.lambda0),
      PAPP_DOUBLE_FIELD("lambda1", hyper.lambda1),
      PAPP_INT_FIELD("patience", hyper.patience),
      PAPP_DOUBLE_FIELD("plateau_tol", hyper.plateau_tol),
      PAPP_INT_FIELD("max_cycles", hyper.max_cycles),
      PAPP_INT_FIELD("convergence_cycles", hyper.convergence_cycles),
      PAPP_DOUBLE_FIELD("val_fraction", hyper.val_fraction),
      {"optimizer", [](const RunConfig& c) { return training::to_string(c.hyper.optimizer); },
       [](RunConfig& c, const std::string& v) { c.hyper.optimizer = training::parse_optimizer(v); }},
      PAPP_INT_FIELD("threads", hyper.threads),
      PAPP_BOOL_FIELD("train_deepall", train_deepall),
      PAPP_INT_FIELD("finetune_epochs", finetune_epochs),
      PAPP_DOUBLE_FIELD("finetune_lr", finetune_lr),
      PAPP_INT_FIELD("finetune_batch", finetune_batch),
      PAPP_BOOL_FIELD("freeze_pi", freeze_pi),
      PAPP_INT_FIELD("pe_iters", pe_iters),
      PAPP_INT_FIELD("energy_n_tx", energy_n_tx),
      PAPP_INT_FIELD("energy_n_users", energy_n_users),
      PAPP_INT_FIELD("energy_n_rf", energy_n_rf),
      PAPP_INT_FIELD("wmmse_iters", wmmse_iters),
      {"maml_c_out", [](const RunConfig& c) { return c.maml_c_out ? std::to_string(*c.maml_c_out) : std::string(); },
       [](RunConfig& c, const std::string& v) {
         if (v.empty())
           c.maml_c_out.reset();
         else
           c.maml_c_out = to_int<int>("maml_c_out", v);
       }},
      {"energy_unit",
       [](const RunConfig& c) { return std::string(c.energy_unit == energy::Unit::MicroJoule ? "uJ" : "pJ"); },
       [](RunConfig& c, const std::string& v) {
         if (v == "uJ")
           c.energy_unit = energy::Unit::MicroJoule;
         else if (v == "pJ")
           c.energy_unit = energy::Unit::PicoJoule;
         else
           throw ConfigError("config: 'energy_unit' expects uJ or pJ, got '" + v + "'");
       }},
      PAPP_INT_FIELD("seed", seed),
      {"out", [](const RunConfig& c) { return c.out.string(); },
       [](RunConfig& c, const std::string& v) { c.out = v; }},
  };
  return f;
}

#undef PAPP_INT_FIELD
#undef PAPP_DOUBLE_FIELD
#undef PAPP_BOOL_FIELD

std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream is{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("config line " + std::to_string(lineno) + ": repeated key '" + key + "'");
    bool known = false;
    for (const auto& f : fields())
      if (key == f.key) {
        try {
          f.set(cfg, value);
        } catch (const ConfigError&) {
          throw;
        } catch (const std::exception& e) {
          throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
        }
        known = true;
        break;
      }
    if (!known) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  for (const auto& f : fields()) os << f.key << " = " << f.get(*this) << '\n';
  return os.str();
}

void RunConfig::validate() const {
  try {
    system.validate();
    hyper.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (train_sites.empty()) throw ConfigError("config: train_sites must not be empty");
  std::set<std::string> names;
  for (const auto& s : train_sites)
    if (s.empty() || !names.insert(s).second) throw ConfigError("config: site names must be unique and nonempty");
  for (const auto& s : test_sites)
    if (s.empty() || !names.insert(s).second) throw ConfigError("config: test sites must differ from train sites");
  for (const auto& s : names)
    if (s.find_first_of("/\\ |") != std::string::npos) throw ConfigError("config: site name '" + s + "' has separators");
  if (snr_db.empty() || eval_snr_db.empty()) throw ConfigError("config: SNR grids must not be empty");
  if (betas_backbone.empty()) throw ConfigError("config: betas_backbone must not be empty");
  for (double b : betas_backbone)
    if (!(b >= 0 && b <= 1)) throw ConfigError("config: betas must lie in [0,1]");
  if (!(beta_ft >= 0 && beta_ft <= 1)) throw ConfigError("config: beta_ft must lie in [0,1]");
  if (samples_per_domain < 1 || eval_samples < 1 || local_samples < 1)
    throw ConfigError("config: sample counts must be >= 1");
  if (fewshot_samples < 1 || fewshot_samples > local_samples)
    throw ConfigError("config: fewshot_samples must lie in [1, local_samples]");
  if (finetune_epochs < 0 || !(finetune_lr >= 0) || finetune_batch < 1)
    throw ConfigError("config: invalid fine-tuning settings");
  if (pe_iters < 1 || wmmse_iters < 1) throw ConfigError("config: iteration counts must be >= 1");
  if (energy_n_tx < 1 || energy_n_users < 1 || energy_n_users > energy_n_tx || energy_n_rf < 1)
    throw ConfigError("config: invalid energy dimensions");
  if (maml_c_out && *maml_c_out < 1) throw ConfigError("config: maml_c_out must be >= 1");
  if (out.empty()) throw ConfigError("config: out must not be empty");
}

channel::SiteSpec RunConfig::site(const std::string& site_id) const {
  channel::SiteSpec s;
  s.site_id = site_id;
  s.seed = channel::mix_seed(seed, name_hash(site_id));
  return s;
}

}  // namespace papp::cli
