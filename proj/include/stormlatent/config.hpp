#pragma once

// Run configuration and its `key = value` text format.

#include "stormlatent/losses.hpp"
#include "stormlatent/model.hpp"
#include "stormlatent/synth.hpp"

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace stormlatent {

enum class IterationSpace { latent, physical };
std::string to_string(IterationSpace s);
IterationSpace iteration_space_from_string(const std::string& s);

struct TrainConfig {
  Index epochs = 200;
  double base_lr = 1e-5;
  double warmup_epochs = 20;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1.0;
  double dropout = 0.15;
  Index batch_size = 8;
  std::uint64_t seed = 1;
  LossVariant loss_variant = LossVariant::wmce;
  IterationSpace iteration_space = IterationSpace::latent;
  bool importance_sampling = false;
  double dry_keep_fraction = 0.5;  // share of dry sequences kept under importance sampling
  double noise_sigma = 0.02;
  double grad_clip = 1.0;          // global norm; <= 0 disables
  Index windows_per_sequence = 1;  // training windows drawn per sequence per epoch
  Index val_horizon = 6;           // lead steps scored for checkpoint selection

  void validate() const;
};

struct EvalConfig {
  Index horizon = 24;
  bool hss_standard = false;
  std::vector<double> thresholds = {0.2, 1.0, 2.0, 4.0, 8.0};
};

struct DataConfig {
  Index sequences = 60;
  Index month_size = 10;
  std::uint64_t seed = 7;
};

struct RunConfig {
  GeneratorConfig generator;
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;

  // Defaults used when a config file is empty: toy scale, 30 epochs.
  static RunConfig toy_defaults();
  void validate() const;
  bool operator==(const RunConfig& o) const;
};

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& message, int line) : std::runtime_error(message), line_(line) {}
  int line() const { return line_; }  // 0 when not tied to a line

 private:
  int line_;
};

// Starts from toy_defaults(); unknown keys and malformed values throw ConfigError.
RunConfig parse_config(std::istream& is);
RunConfig parse_config_file(const std::filesystem::path& path);
// Applies one `key = value` assignment (CLI overrides).
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
// Every key, one per line, in a form parse_config reads back identically.
void write_config(std::ostream& os, const RunConfig& cfg);
std::vector<std::string> config_keys();

}  // namespace stormlatent
