#include "stormlatent/config.hpp"

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

namespace stormlatent {

std::string to_string(IterationSpace s) { return s == IterationSpace::latent ? "latent" : "physical"; }

IterationSpace iteration_space_from_string(const std::string& s) {
  if (s == "latent") return IterationSpace::latent;
  if (s == "physical") return IterationSpace::physical;
  throw std::invalid_argument("unknown iteration_space '" + s + "'");
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("train config: " + what, 0);
  };
  require(epochs >= 1, "epochs must be >= 1");
  require(base_lr > 0, "base_lr must be > 0");
  require(warmup_epochs >= 0 && warmup_epochs <= static_cast<double>(epochs), "warmup_epochs must be in [0, epochs]");
  require(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1, "adam betas must be in [0,1)");
  require(adam_eps > 0, "adam_eps must be > 0");
  require(weight_decay >= 0, "weight_decay must be >= 0");
  require(dropout >= 0 && dropout < 1, "dropout must be in [0,1)");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(dry_keep_fraction >= 0 && dry_keep_fraction <= 1, "dry_keep_fraction must be in [0,1]");
  require(noise_sigma >= 0, "noise_sigma must be >= 0");
  require(windows_per_sequence >= 1, "windows_per_sequence must be >= 1");
  require(val_horizon >= 1, "val_horizon must be >= 1");
}

RunConfig RunConfig::toy_defaults() {
  RunConfig c;
  c.train.epochs = 30;
  return c;
}

void RunConfig::validate() const {
  try {
    generator.validate();
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what(), 0);
  }
  train.validate();
  if (model.height != generator.height || model.width != generator.width ||
      model.coarse_height != generator.coarse_height || model.coarse_width != generator.coarse_width)
    throw ConfigError("model grid differs from generator grid", 0);
  if (eval.horizon < 1) throw ConfigError("horizon must be >= 1", 0);
  if (generator.steps < 5 + eval.horizon)
    throw ConfigError("steps must cover the 5 observed steps plus the horizon", 0);
  if (train.val_horizon > eval.horizon) throw ConfigError("val_horizon exceeds horizon", 0);
  if (generator.steps < 1 + 3 * 4) throw ConfigError("steps too short for interval-4 training windows", 0);
  if (eval.thresholds.empty()) throw ConfigError("thresholds must be nonempty", 0);
  if (data.sequences < 1 || data.month_size < 1) throw ConfigError("sequences and month_size must be >= 1", 0);
}

bool RunConfig::operator==(const RunConfig& o) const {
  std::ostringstream a, b;
  write_config(a, *this);
  write_config(b, o);
  return a.str() == b.str();
}

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& type) {
  throw std::invalid_argument("value '" + value + "' for " + key + " is not " + type);
}

double parse_double(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE) bad_value(key, v, "a number");
  return d;
}

long long parse_int(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const long long i = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE) bad_value(key, v, "an integer");
  return i;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  if (!v.empty() && v[0] == '-') bad_value(key, v, "a nonnegative integer");
  const unsigned long long i = std::strtoull(v.c_str(), &end, 10);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE) bad_value(key, v, "a nonnegative integer");
  return i;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "a boolean");
}

std::string format_double(double d) {
  std::ostringstream os;
  os << std::setprecision(17) << d;
  return os.str();
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Access>
Field real(const std::string& key, Access access) {
  return {key, [key, access](RunConfig& c, const std::string& v) { access(c) = parse_double(key, v); },
          [access](const RunConfig& c) { return format_double(access(const_cast<RunConfig&>(c))); }};
}

template <typename Access>
Field integer(const std::string& key, Access access) {
  return {key, [key, access](RunConfig& c, const std::string& v) { access(c) = parse_int(key, v); },
          [access](const RunConfig& c) { return std::to_string(access(const_cast<RunConfig&>(c))); }};
}

template <typename Access>
Field flag(const std::string& key, Access access) {
  return {key, [key, access](RunConfig& c, const std::string& v) { access(c) = parse_bool(key, v); },
          [access](const RunConfig& c) { return std::string(access(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

#define FIELD_REF(expr) [](RunConfig& c) -> auto& { return expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    // grid (shared by generator and model)
    f.push_back({"height",
                 [](RunConfig& c, const std::string& v) { c.generator.height = c.model.height = parse_int("height", v); },
                 [](const RunConfig& c) { return std::to_string(c.generator.height); }});
    f.push_back({"width",
                 [](RunConfig& c, const std::string& v) { c.generator.width = c.model.width = parse_int("width", v); },
                 [](const RunConfig& c) { return std::to_string(c.generator.width); }});
    f.push_back({"coarse_height",
                 [](RunConfig& c, const std::string& v) {
                   c.generator.coarse_height = c.model.coarse_height = parse_int("coarse_height", v);
                 },
                 [](const RunConfig& c) { return std::to_string(c.generator.coarse_height); }});
    f.push_back({"coarse_width",
                 [](RunConfig& c, const std::string& v) {
                   c.generator.coarse_width = c.model.coarse_width = parse_int("coarse_width", v);
                 },
                 [](const RunConfig& c) { return std::to_string(c.generator.coarse_width); }});
    f.push_back({"include_satellite",
                 [](RunConfig& c, const std::string& v) {
                   c.generator.include_satellite = c.model.use_satellite = parse_bool("include_satellite", v);
                 },
                 [](const RunConfig& c) { return std::string(c.generator.include_satellite ? "true" : "false"); }});

    // generator
    f.push_back(integer("steps", FIELD_REF(c.generator.steps)));
    f.push_back({"wind_mode",
                 [](RunConfig& c, const std::string& v) { c.generator.wind_mode = wind_mode_from_string(v); },
                 [](const RunConfig& c) { return to_string(c.generator.wind_mode); }});
    f.push_back(real("constant_u", FIELD_REF(c.generator.constant_u)));
    f.push_back(real("constant_v", FIELD_REF(c.generator.constant_v)));
    f.push_back(real("mean_wind_speed", FIELD_REF(c.generator.mean_wind_speed)));
    f.push_back(real("wind_wave_amplitude", FIELD_REF(c.generator.wind_wave_amplitude)));
    f.push_back(real("humidity_threshold", FIELD_REF(c.generator.humidity_threshold)));
    f.push_back(real("birth_rate", FIELD_REF(c.generator.birth_rate)));
    f.push_back(integer("initial_cells", FIELD_REF(c.generator.initial_cells)));
    f.push_back(real("decay_rate", FIELD_REF(c.generator.decay_rate)));
    f.push_back(real("amplitude_log_mean", FIELD_REF(c.generator.amplitude_log_mean)));
    f.push_back(real("amplitude_log_std", FIELD_REF(c.generator.amplitude_log_std)));
    f.push_back(real("radius_min", FIELD_REF(c.generator.radius_min)));
    f.push_back(real("radius_max", FIELD_REF(c.generator.radius_max)));
    f.push_back(real("dry_fraction", FIELD_REF(c.generator.dry_fraction)));
    f.push_back(real("radar_noise", FIELD_REF(c.generator.radar_noise)));

    // data
    f.push_back(integer("sequences", FIELD_REF(c.data.sequences)));
    f.push_back(integer("month_size", FIELD_REF(c.data.month_size)));
    f.push_back({"data_seed", [](RunConfig& c, const std::string& v) { c.data.seed = parse_uint("data_seed", v); },
                 [](const RunConfig& c) { return std::to_string(c.data.seed); }});

    // model
    f.push_back(integer("latent_channels", FIELD_REF(c.model.latent_channels)));
    f.push_back(integer("time_channels", FIELD_REF(c.model.time_channels)));
    f.push_back(integer("const_channels", FIELD_REF(c.model.const_channels)));
    f.push_back(integer("feature_channels", FIELD_REF(c.model.feature_channels)));
    f.push_back(integer("recon_hidden", FIELD_REF(c.model.recon_hidden)));
    f.push_back(integer("vit_patch", FIELD_REF(c.model.vit_patch)));
    f.push_back(integer("vit_width", FIELD_REF(c.model.vit_width)));
    f.push_back(integer("vit_heads", FIELD_REF(c.model.vit_heads)));
    f.push_back(integer("vit_blocks", FIELD_REF(c.model.vit_blocks)));
    f.push_back(integer("lpm_blocks", FIELD_REF(c.model.lpm_blocks)));
    f.push_back(integer("projector_patch", FIELD_REF(c.model.projector_patch)));
    f.push_back(integer("projector_heads", FIELD_REF(c.model.projector_heads)));

    // training
    f.push_back(integer("epochs", FIELD_REF(c.train.epochs)));
    f.push_back(real("base_lr", FIELD_REF(c.train.base_lr)));
    f.push_back(real("warmup_epochs", FIELD_REF(c.train.warmup_epochs)));
    f.push_back(real("adam_beta1", FIELD_REF(c.train.adam_beta1)));
    f.push_back(real("adam_beta2", FIELD_REF(c.train.adam_beta2)));
    f.push_back(real("adam_eps", FIELD_REF(c.train.adam_eps)));
    f.push_back(real("weight_decay", FIELD_REF(c.train.weight_decay)));
    f.push_back(real("dropout", FIELD_REF(c.train.dropout)));
    f.push_back(integer("batch_size", FIELD_REF(c.train.batch_size)));
    f.push_back({"seed", [](RunConfig& c, const std::string& v) { c.train.seed = parse_uint("seed", v); },
                 [](const RunConfig& c) { return std::to_string(c.train.seed); }});
    f.push_back({"loss_variant",
                 [](RunConfig& c, const std::string& v) { c.train.loss_variant = loss_variant_from_string(v); },
                 [](const RunConfig& c) { return to_string(c.train.loss_variant); }});
    f.push_back({"iteration_space",
                 [](RunConfig& c, const std::string& v) { c.train.iteration_space = iteration_space_from_string(v); },
                 [](const RunConfig& c) { return to_string(c.train.iteration_space); }});
    f.push_back(flag("importance_sampling", FIELD_REF(c.train.importance_sampling)));
    f.push_back(real("dry_keep_fraction", FIELD_REF(c.train.dry_keep_fraction)));
    f.push_back(real("noise_sigma", FIELD_REF(c.train.noise_sigma)));
    f.push_back(real("grad_clip", FIELD_REF(c.train.grad_clip)));
    f.push_back(integer("windows_per_sequence", FIELD_REF(c.train.windows_per_sequence)));
    f.push_back(integer("val_horizon", FIELD_REF(c.train.val_horizon)));

    // evaluation
    f.push_back(integer("horizon", FIELD_REF(c.eval.horizon)));
    f.push_back(flag("hss_standard", FIELD_REF(c.eval.hss_standard)));
    f.push_back({"thresholds",
                 [](RunConfig& c, const std::string& v) {
                   std::vector<double> t;
                   std::stringstream ss(v);
                   std::string item;
                   while (std::getline(ss, item, ',')) t.push_back(parse_double("thresholds", trim(item)));
                   if (t.empty()) bad_value("thresholds", v, "a comma-separated list");
                   c.eval.thresholds = t;
                 },
                 [](const RunConfig& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.eval.thresholds.size(); ++i)
                     s += (i ? "," : "") + format_double(c.eval.thresholds[i]);
                   return s;
                 }});
    return f;
  }();
  return all;
}

#undef FIELD_REF

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

}  // namespace

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError("unknown config key '" + key + "'", 0);
  try {
    f->set(cfg, value);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what(), 0);
  }
}

RunConfig parse_config(std::istream& is) {
  RunConfig cfg = RunConfig::toy_defaults();
  std::string raw;
  int line = 0;
  while (std::getline(is, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string text = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (text.empty()) continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line) + ": expected 'key = value'", line);
    const std::string key = trim(text.substr(0, eq));
    const std::string value = trim(text.substr(eq + 1));
    const Field* f = find_field(key);
    if (!f) throw ConfigError("line " + std::to_string(line) + ": unknown config key '" + key + "'", line);
    try {
      f->set(cfg, value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("line " + std::to_string(line) + ": " + e.what(), line);
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string(), 0);
  return parse_config(is);
}

void write_config(std::ostream& os, const RunConfig& cfg) {
  for (const auto& f : fields()) os << f.key << " = " << f.get(cfg) << '\n';
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

}  // namespace stormlatent
