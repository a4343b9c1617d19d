#pragma once

// Synthetic multi-source weather sequences.
//
// Precipitation cells are Gaussian blobs carried by the reanalysis wind,
// born where low-level humidity exceeds a threshold and decaying faster in dry
// air. Radar levels are noisy monotone transforms of (smoothed) intensity;
// satellite channels are smoothed cloud masks that lead precipitation by one
// and two steps. A fraction of sequences are drawn from a dry regime with no
// precipitation at all, which is what gives the overall pixel imbalance.

#include "stormlatent/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace stormlatent {

inline constexpr Index kQpeRadarChannels = 4;
inline constexpr Index kReanalysisChannels = 8;
inline constexpr Index kSatelliteChannels = 3;
// mm/h; intensities at or above it are precipitation events.
inline constexpr double kEventThreshold = 0.2;

enum class WindMode { field, constant };

struct GeneratorConfig {
  Index height = 64;
  Index width = 64;
  Index coarse_height = 16;
  Index coarse_width = 16;
  Index steps = 29;  // 5 observed + 24 lead steps
  bool include_satellite = true;

  WindMode wind_mode = WindMode::field;
  double constant_u = 1.0;  // fine-grid pixels per step
  double constant_v = 0.0;
  double mean_wind_speed = 0.8;
  double wind_wave_amplitude = 0.3;

  double humidity_threshold = 0.55;
  double birth_rate = 0.4;  // expected birth attempts per step
  Index initial_cells = 2;
  double decay_rate = 0.06;
  double amplitude_log_mean = 1.8;
  double amplitude_log_std = 0.9;
  double radius_min = 2.0;
  double radius_max = 4.5;
  double dry_fraction = 0.3;
  double radar_noise = 1.0;

  void validate() const;
};

struct MultiSourceSample {
  Index time_index = 0;
  Tensor qpe_radar;   // [4,H,W]; channel 0 is intensity (mm/h)
  Tensor reanalysis;  // [8,Hc,Wc]
  Tensor satellite;   // [3,H,W] or undefined
  Tensor target;      // [1,H,W] intensity at time_index

  bool has_satellite() const { return satellite.defined(); }
};

struct Sequence {
  std::vector<MultiSourceSample> samples;
  std::uint64_t seed = 0;
  GeneratorConfig config;

  Index size() const { return static_cast<Index>(samples.size()); }
  // True if any target pixel reaches `threshold` (mm/h).
  bool has_event(double threshold) const;
};

Sequence generate_sequence(std::uint64_t seed, const GeneratorConfig& cfg);
// Sequence i of a batch uses seed mix(base_seed, i); generation is parallel.
std::vector<Sequence> generate_sequences(std::uint64_t base_seed, Index count, const GeneratorConfig& cfg);
std::uint64_t sequence_seed(std::uint64_t base_seed, Index index);

// ---- normalization -------------------------------------------------------------

struct NormStats {
  // Per-channel statistics. qpe_radar channel 0 is min-max scaled and its
  // mean/std slots are unused (kept as 0/1).
  std::vector<double> qpe_mean, qpe_std;
  std::vector<double> reanalysis_mean, reanalysis_std;
  std::vector<double> satellite_mean, satellite_std;
  double intensity_cap = 64.0;
  double tau_raw = 0.2;

  double tau_norm() const { return tau_raw / intensity_cap; }
  void validate() const;
  bool operator==(const NormStats&) const = default;
};

NormStats compute_stats(std::span<const Sequence> training, double intensity_cap = 64.0,
                        double tau_raw = kEventThreshold);

MultiSourceSample normalize(const MultiSourceSample& sample, const NormStats& stats);
MultiSourceSample denormalize(const MultiSourceSample& sample, const NormStats& stats);
// Intensity-only conversions (normalized <-> mm/h).
Array normalize_intensity(const Array& raw, const NormStats& stats);
Array denormalize_intensity(const Array& normalized, const NormStats& stats);

// Gaussian noise N(0, sigma) on every input channel; target untouched.
MultiSourceSample add_noise(const MultiSourceSample& sample, double sigma, std::uint64_t seed);

// ---- selection / diagnostics ---------------------------------------------------

// Indices of kept sequences: every sequence with an event at `event_threshold`,
// plus round(keep_fraction * dry_count) of the dry ones chosen by a seeded shuffle.
std::vector<std::size_t> importance_filter_indices(std::span<const Sequence> sequences, double keep_fraction,
                                                   double event_threshold, std::uint64_t seed);
std::vector<Sequence> importance_filter(std::span<const Sequence> sequences, double keep_fraction,
                                        double event_threshold, std::uint64_t seed);

// Fractions of pixels in (-inf,e0], (e0,e1], ..., (e_last, inf). Sums to 1.
std::vector<double> bucket_distribution(std::span<const Tensor> grids, const std::vector<double>& edges);
std::vector<double> bucket_distribution(std::span<const Sequence> sequences, const std::vector<double>& edges);

// Sequential 80/10/10 split within each consecutive `month_size` block.
struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};
SplitIndices split_by_month(std::size_t count, std::size_t month_size);

// ---- on-disk dataset -----------------------------------------------------------

std::map<std::string, std::string> sequence_metadata(const Sequence& seq);
void write_sequence(const std::filesystem::path& stem, const Sequence& seq);
Sequence read_sequence(const std::filesystem::path& stem);
// Writes `<dir>/<split>/seq_NNNNN.{lpta,meta}`.
void write_split(const std::filesystem::path& dir, std::span<const Sequence> sequences,
                 std::span<const std::size_t> indices);
std::vector<Sequence> read_split(const std::filesystem::path& dir);

std::string to_string(WindMode mode);
WindMode wind_mode_from_string(const std::string& s);

}  // namespace stormlatent
