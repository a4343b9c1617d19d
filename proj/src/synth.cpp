#include "stormlatent/synth.hpp"

#include "stormlatent/parallel.hpp"
#include "stormlatent/serialize.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>

namespace stormlatent {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Row-major single-channel field.
struct Field {
  Index h = 0, w = 0;
  std::vector<double> v;
  Field() = default;
  Field(Index rows, Index cols, double fill = 0.0) : h(rows), w(cols), v(static_cast<std::size_t>(rows * cols), fill) {}
  double& operator()(Index y, Index x) { return v[static_cast<std::size_t>(y * w + x)]; }
  double operator()(Index y, Index x) const { return v[static_cast<std::size_t>(y * w + x)]; }
};

// Samples a coarse field at fine-grid pixel coordinates (pixel centers at
// integer positions), bilinear with edge clamping.
double sample_coarse(const Field& coarse, double fx, double fy, Index fine_w, Index fine_h) {
  const double cx = std::clamp((fx + 0.5) * coarse.w / fine_w - 0.5, 0.0, static_cast<double>(coarse.w - 1));
  const double cy = std::clamp((fy + 0.5) * coarse.h / fine_h - 0.5, 0.0, static_cast<double>(coarse.h - 1));
  const Index x0 = static_cast<Index>(std::floor(cx)), y0 = static_cast<Index>(std::floor(cy));
  const Index x1 = std::min(x0 + 1, coarse.w - 1), y1 = std::min(y0 + 1, coarse.h - 1);
  const double tx = cx - x0, ty = cy - y0;
  return (1 - ty) * ((1 - tx) * coarse(y0, x0) + tx * coarse(y0, x1)) + ty * ((1 - tx) * coarse(y1, x0) + tx * coarse(y1, x1));
}

Field upsample(const Field& coarse, Index h, Index w) {
  Field out(h, w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) out(y, x) = sample_coarse(coarse, static_cast<double>(x), static_cast<double>(y), w, h);
  return out;
}

Field blur(const Field& f, double sigma) {
  const Index r = static_cast<Index>(std::ceil(3 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double total = 0;
  for (Index i = -r; i <= r; ++i) total += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& x : k) x /= total;
  Field tmp(f.h, f.w), out(f.h, f.w);
  for (Index y = 0; y < f.h; ++y)
    for (Index x = 0; x < f.w; ++x) {
      double s = 0;
      for (Index i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] * f(y, std::clamp<Index>(x + i, 0, f.w - 1));
      tmp(y, x) = s;
    }
  for (Index y = 0; y < f.h; ++y)
    for (Index x = 0; x < f.w; ++x) {
      double s = 0;
      for (Index i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] * tmp(std::clamp<Index>(y + i, 0, f.h - 1), x);
      out(y, x) = s;
    }
  return out;
}

struct Cell {
  double x, y, peak, radius;
  Index age;
};

struct HumidityMode {
  double kx, ky, amp, phase;
};

// Monotone reflectivity-like transform of intensity.
double reflectivity(double r) { return 10.0 * std::log10(1.0 + 200.0 * std::pow(std::max(r, 0.0), 1.6)); }

void copy_channel(Array& dst, Index channel, const Field& f) {
  const Index n = f.h * f.w;
  for (Index i = 0; i < n; ++i) dst[channel * n + i] = f.v[static_cast<std::size_t>(i)];
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

void GeneratorConfig::validate() const {
  if (height <= 0 || width <= 0 || height % 4 != 0 || width % 4 != 0) {
    throw std::invalid_argument("generator grid " + std::to_string(height) + "x" + std::to_string(width) +
                                " must be positive and divisible by 4");
  }
  if (coarse_height <= 0 || coarse_width <= 0) throw std::invalid_argument("coarse grid extents must be positive");
  if (steps < 1) throw std::invalid_argument("generator step count must be positive");
  if (radius_min <= 0 || radius_max < radius_min) throw std::invalid_argument("invalid cell radius range");
  if (dry_fraction < 0 || dry_fraction > 1) throw std::invalid_argument("dry_fraction must be in [0,1]");
  if (birth_rate < 0 || decay_rate < 0 || radar_noise < 0) throw std::invalid_argument("rates must be nonnegative");
}

bool Sequence::has_event(double threshold) const {
  for (const auto& s : samples)
    if ((s.target.value() >= threshold).any()) return true;
  return false;
}

std::uint64_t sequence_seed(std::uint64_t base_seed, Index index) {
  return splitmix(base_seed ^ splitmix(static_cast<std::uint64_t>(index) + 1));
}

Sequence generate_sequence(std::uint64_t seed, const GeneratorConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const Index H = cfg.height, W = cfg.width, Hc = cfg.coarse_height, Wc = cfg.coarse_width;
  const Index T = cfg.steps;
  const Index frames = T + 2;  // satellite leads precipitation by up to two steps

  const bool dry_regime = unit(rng) < cfg.dry_fraction;
  const double humidity_offset = dry_regime ? -0.5 : 0.25 + 0.2 * unit(rng);

  const double heading = kTwoPi * unit(rng);
  const double speed = cfg.mean_wind_speed * (0.6 + 0.8 * unit(rng));
  const double u0 = cfg.wind_mode == WindMode::constant ? cfg.constant_u : speed * std::cos(heading);
  const double v0 = cfg.wind_mode == WindMode::constant ? cfg.constant_v : speed * std::sin(heading);
  const double wave_phase_u = kTwoPi * unit(rng), wave_phase_v = kTwoPi * unit(rng);
  const double wave_freq = 0.05 + 0.1 * unit(rng);

  std::vector<HumidityMode> modes(3);
  for (auto& m : modes) {
    m.kx = 1.0 + std::floor(2.0 * unit(rng));
    m.ky = 1.0 + std::floor(2.0 * unit(rng));
    if (unit(rng) < 0.5) m.kx = -m.kx;
    m.amp = 0.15 + 0.15 * unit(rng);
    m.phase = kTwoPi * unit(rng);
  }
  const double drift_phase = kTwoPi * unit(rng);
  const double geo_tilt = 0.5 + unit(rng);

  // Fine-grid coordinates of coarse cell centers.
  auto coarse_x = [&](Index j) { return (j + 0.5) * static_cast<double>(W) / Wc - 0.5; };
  auto coarse_y = [&](Index i) { return (i + 0.5) * static_cast<double>(H) / Hc - 0.5; };

  auto wind_fields = [&](Index t) {
    Field u(Hc, Wc), v(Hc, Wc);
    for (Index i = 0; i < Hc; ++i)
      for (Index j = 0; j < Wc; ++j) {
        if (cfg.wind_mode == WindMode::constant) {
          u(i, j) = u0;
          v(i, j) = v0;
        } else {
          u(i, j) = u0 + cfg.wind_wave_amplitude * std::sin(kTwoPi * coarse_y(i) / H + wave_phase_u + wave_freq * t);
          v(i, j) = v0 + cfg.wind_wave_amplitude * std::cos(kTwoPi * coarse_x(j) / W + wave_phase_v + wave_freq * t);
        }
      }
    return std::pair{u, v};
  };
  auto humidity_field = [&](Index t) {
    Field q(Hc, Wc);
    for (Index i = 0; i < Hc; ++i)
      for (Index j = 0; j < Wc; ++j) {
        const double x = coarse_x(j) - u0 * t, y = coarse_y(i) - v0 * t;
        double s = humidity_offset + 0.12 * std::sin(0.08 * t + drift_phase);
        for (const auto& m : modes) s += m.amp * std::cos(kTwoPi * (m.kx * x / W + m.ky * y / H) + m.phase);
        q(i, j) = s;
      }
    return q;
  };

  std::vector<Field> u_t, v_t, q_t;
  for (Index t = 0; t < frames + 2; ++t) {
    auto [u, v] = wind_fields(t);
    u_t.push_back(std::move(u));
    v_t.push_back(std::move(v));
    q_t.push_back(humidity_field(t));
  }

  auto spawn = [&](bool require_humid, Index age) -> std::optional<Cell> {
    const double x = 2.0 + (W - 4.0) * unit(rng);
    const double y = 2.0 + (H - 4.0) * unit(rng);
    const double peak = std::exp(cfg.amplitude_log_mean + cfg.amplitude_log_std * gauss(rng));
    const double radius = cfg.radius_min + (cfg.radius_max - cfg.radius_min) * unit(rng);
    if (require_humid && sample_coarse(q_t[0], x, y, W, H) <= cfg.humidity_threshold) return std::nullopt;
    return Cell{x, y, peak, radius, age};
  };

  std::vector<Cell> cells;
  if (!dry_regime) {
    for (Index k = 0; k < cfg.initial_cells; ++k) {
      if (auto c = spawn(false, static_cast<Index>(3.0 * unit(rng)))) cells.push_back(*c);
    }
  }

  // Intensity frames 0..frames-1.
  std::vector<Field> intensity;
  std::poisson_distribution<int> births(cfg.birth_rate);
  for (Index t = 0; t < frames; ++t) {
    Field I(H, W);
    for (const auto& c : cells) {
      const double amp = c.peak * std::exp(-cfg.decay_rate * c.age);
      const Index r = static_cast<Index>(std::ceil(4.0 * c.radius));
      const Index y_lo = std::max<Index>(0, static_cast<Index>(std::floor(c.y)) - r);
      const Index y_hi = std::min<Index>(H - 1, static_cast<Index>(std::ceil(c.y)) + r);
      const Index x_lo = std::max<Index>(0, static_cast<Index>(std::floor(c.x)) - r);
      const Index x_hi = std::min<Index>(W - 1, static_cast<Index>(std::ceil(c.x)) + r);
      const double inv = 1.0 / (2.0 * c.radius * c.radius);
      for (Index y = y_lo; y <= y_hi; ++y)
        for (Index x = x_lo; x <= x_hi; ++x) {
          const double dx = x - c.x, dy = y - c.y;
          I(y, x) += amp * std::exp(-(dx * dx + dy * dy) * inv);
        }
    }
    intensity.push_back(std::move(I));

    // Advance: advect, age, drop exhausted or exited cells, then births.
    std::vector<Cell> next;
    for (auto c : cells) {
      const double u = sample_coarse(u_t[static_cast<std::size_t>(t)], c.x, c.y, W, H);
      const double v = sample_coarse(v_t[static_cast<std::size_t>(t)], c.x, c.y, W, H);
      const double q = sample_coarse(q_t[static_cast<std::size_t>(t)], c.x, c.y, W, H);
      c.x += u;
      c.y += v;
      c.age += 1;
      // Dry air erodes cells.
      if (q < cfg.humidity_threshold) c.peak *= std::exp(-0.15 * (cfg.humidity_threshold - q));
      const double amp = c.peak * std::exp(-cfg.decay_rate * c.age);
      const bool inside = c.x >= 0 && c.x < W && c.y >= 0 && c.y < H;
      if (inside && amp > 0.05) next.push_back(c);
    }
    cells = std::move(next);
    if (!dry_regime) {
      const int attempts = births(rng);
      for (int k = 0; k < attempts; ++k) {
        const double x = 2.0 + (W - 4.0) * unit(rng);
        const double y = 2.0 + (H - 4.0) * unit(rng);
        const double peak = std::exp(cfg.amplitude_log_mean + cfg.amplitude_log_std * gauss(rng));
        const double radius = cfg.radius_min + (cfg.radius_max - cfg.radius_min) * unit(rng);
        if (sample_coarse(q_t[static_cast<std::size_t>(t + 1)], x, y, W, H) > cfg.humidity_threshold) {
          cells.push_back(Cell{x, y, peak, radius, 0});
        }
      }
    }
  }

  Sequence seq;
  seq.seed = seed;
  seq.config = cfg;
  for (Index t = 0; t < T; ++t) {
    const auto ts = static_cast<std::size_t>(t);
    MultiSourceSample s;
    s.time_index = t;

    Array qr(kQpeRadarChannels * H * W);
    copy_channel(qr, 0, intensity[ts]);
    const Field smooth1 = blur(intensity[ts], 1.5);
    const Field smooth2 = blur(intensity[ts + 1], 2.5);
    Field lvl1(H, W), lvl2(H, W), lvl3(H, W);
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        lvl1(y, x) = std::max(0.0, reflectivity(intensity[ts](y, x)) + cfg.radar_noise * gauss(rng));
        lvl2(y, x) = std::max(0.0, 0.9 * reflectivity(smooth1(y, x)) + cfg.radar_noise * gauss(rng));
        lvl3(y, x) = std::max(0.0, 0.8 * reflectivity(smooth2(y, x)) + cfg.radar_noise * gauss(rng));
      }
    copy_channel(qr, 1, lvl1);
    copy_channel(qr, 2, lvl2);
    copy_channel(qr, 3, lvl3);
    s.qpe_radar = Tensor::from({kQpeRadarChannels, H, W}, std::move(qr));

    Array tgt(H * W);
    for (Index i = 0; i < H * W; ++i) tgt[i] = intensity[ts].v[static_cast<std::size_t>(i)];
    s.target = Tensor::from({1, H, W}, std::move(tgt));

    // Coarse-averaged intensity feeds the vertical-motion analog.
    Field coarse_rain(Hc, Wc);
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) coarse_rain(y * Hc / H, x * Wc / W) += intensity[ts](y, x);
    const double cell_area = static_cast<double>(H * W) / (Hc * Wc);

    const Field& u = u_t[ts];
    const Field& v = v_t[ts];
    const Field& q = q_t[ts];
    const Field& q_ahead = q_t[ts + 2];
    Array re(kReanalysisChannels * Hc * Wc);
    Field temp_low(Hc, Wc), humid_mid(Hc, Wc), temp_mid(Hc, Wc), geo(Hc, Wc), omega(Hc, Wc);
    for (Index i = 0; i < Hc; ++i)
      for (Index j = 0; j < Wc; ++j) {
        const double y = coarse_y(i) / H, x = coarse_x(j) / W;
        temp_low(i, j) = 1.0 - 0.6 * q(i, j) + 0.2 * y + 0.02 * gauss(rng);
        humid_mid(i, j) = 0.8 * q_ahead(i, j) + 0.02 * gauss(rng);
        temp_mid(i, j) = 0.5 * temp_low(i, j) - 0.3 + 0.02 * gauss(rng);
        geo(i, j) = geo_tilt * (u0 * y - v0 * x) + 0.1 * std::sin(kTwoPi * x + wave_phase_u);
        omega(i, j) = 2.0 * std::max(0.0, q(i, j) - cfg.humidity_threshold) + 0.05 * coarse_rain(i, j) / cell_area +
                      0.02 * gauss(rng);
      }
    copy_channel(re, 0, u);
    copy_channel(re, 1, v);
    copy_channel(re, 2, q);
    copy_channel(re, 3, temp_low);
    copy_channel(re, 4, humid_mid);
    copy_channel(re, 5, temp_mid);
    copy_channel(re, 6, geo);
    copy_channel(re, 7, omega);
    s.reanalysis = Tensor::from({kReanalysisChannels, Hc, Wc}, std::move(re));

    if (cfg.include_satellite) {
      Field cloud1(H, W), cloud2(H, W);
      for (std::size_t i = 0; i < cloud1.v.size(); ++i) {
        cloud1.v[i] = intensity[ts + 1].v[i] > 0.1 ? 1.0 : 0.0;
        cloud2.v[i] = intensity[ts + 2].v[i] > 0.1 ? 1.0 : 0.0;
      }
      cloud1 = blur(cloud1, 2.0);
      cloud2 = blur(cloud2, 3.0);
      const Field q_fine = upsample(q, H, W);
      Field bright(H, W);
      for (std::size_t i = 0; i < bright.v.size(); ++i) bright.v[i] = 0.6 * q_fine.v[i] + 0.4 * cloud1.v[i];
      Array sat(kSatelliteChannels * H * W);
      copy_channel(sat, 0, cloud1);
      copy_channel(sat, 1, cloud2);
      copy_channel(sat, 2, bright);
      s.satellite = Tensor::from({kSatelliteChannels, H, W}, std::move(sat));
    }
    seq.samples.push_back(std::move(s));
  }
  return seq;
}

std::vector<Sequence> generate_sequences(std::uint64_t base_seed, Index count, const GeneratorConfig& cfg) {
  cfg.validate();
  std::vector<Sequence> out(static_cast<std::size_t>(count));
  parallel_for(out.size(), [&](std::size_t i) { out[i] = generate_sequence(sequence_seed(base_seed, static_cast<Index>(i)), cfg); });
  return out;
}

// ---- normalization -------------------------------------------------------------

void NormStats::validate() const {
  if (!(intensity_cap > tau_raw && tau_raw > 0)) throw std::invalid_argument("NormStats requires cap > tau_raw > 0");
  auto check = [](const std::vector<double>& s, const char* name) {
    for (std::size_t c = 0; c < s.size(); ++c)
      if (!(s[c] > 0)) throw std::invalid_argument(std::string(name) + " channel " + std::to_string(c) + " has std <= 0");
  };
  check(qpe_std, "qpe_radar");
  check(reanalysis_std, "reanalysis");
  check(satellite_std, "satellite");
}

namespace {

void channel_moments(std::span<const Sequence> seqs, Tensor MultiSourceSample::*member, Index channels,
                     Index first_channel, const char* name, std::vector<double>& mean, std::vector<double>& stdev) {
  mean.assign(static_cast<std::size_t>(channels), 0.0);
  stdev.assign(static_cast<std::size_t>(channels), 1.0);
  for (Index c = first_channel; c < channels; ++c) {
    double sum = 0.0, count = 0.0;
    for (const auto& seq : seqs)
      for (const auto& s : seq.samples) {
        const Tensor& t = s.*member;
        const Index plane = t.numel() / channels;
        sum += t.value().segment(c * plane, plane).sum();
        count += static_cast<double>(plane);
      }
    const double mu = sum / count;
    double ss = 0.0;
    for (const auto& seq : seqs)
      for (const auto& s : seq.samples) {
        const Tensor& t = s.*member;
        const Index plane = t.numel() / channels;
        ss += (t.value().segment(c * plane, plane) - mu).square().sum();
      }
    const double sd = std::sqrt(ss / count);
    if (!(sd > 1e-12)) {
      throw std::invalid_argument(std::string("zero-variance channel: ") + name + "[" + std::to_string(c) + "]");
    }
    mean[static_cast<std::size_t>(c)] = mu;
    stdev[static_cast<std::size_t>(c)] = sd;
  }
}

Tensor zscore(const Tensor& t, const std::vector<double>& mean, const std::vector<double>& stdev, Index first,
              bool inverse) {
  const Index channels = static_cast<Index>(mean.size());
  const Index plane = t.numel() / channels;
  Array v = t.value();
  for (Index c = first; c < channels; ++c) {
    const double mu = mean[static_cast<std::size_t>(c)], sd = stdev[static_cast<std::size_t>(c)];
    auto seg = v.segment(c * plane, plane);
    if (inverse) {
      seg = seg * sd + mu;
    } else {
      seg = (seg - mu) / sd;
    }
  }
  return Tensor::from(t.shape(), std::move(v));
}

}  // namespace

NormStats compute_stats(std::span<const Sequence> training, double intensity_cap, double tau_raw) {
  if (training.empty() || training.front().samples.empty()) throw std::invalid_argument("compute_stats: empty training split");
  NormStats st;
  st.intensity_cap = intensity_cap;
  st.tau_raw = tau_raw;
  channel_moments(training, &MultiSourceSample::qpe_radar, kQpeRadarChannels, 1, "qpe_radar", st.qpe_mean, st.qpe_std);
  channel_moments(training, &MultiSourceSample::reanalysis, kReanalysisChannels, 0, "reanalysis", st.reanalysis_mean,
                  st.reanalysis_std);
  if (training.front().samples.front().has_satellite()) {
    channel_moments(training, &MultiSourceSample::satellite, kSatelliteChannels, 0, "satellite", st.satellite_mean,
                    st.satellite_std);
  }
  st.validate();
  return st;
}

Array normalize_intensity(const Array& raw, const NormStats& stats) {
  return (raw / stats.intensity_cap).max(0.0).min(1.0);
}

Array denormalize_intensity(const Array& normalized, const NormStats& stats) { return normalized * stats.intensity_cap; }

MultiSourceSample normalize(const MultiSourceSample& sample, const NormStats& stats) {
  MultiSourceSample out;
  out.time_index = sample.time_index;
  Tensor qr = zscore(sample.qpe_radar, stats.qpe_mean, stats.qpe_std, 1, false);
  const Index plane = qr.numel() / kQpeRadarChannels;
  qr.mutable_value().segment(0, plane) = normalize_intensity(sample.qpe_radar.value().segment(0, plane), stats);
  out.qpe_radar = qr;
  out.reanalysis = zscore(sample.reanalysis, stats.reanalysis_mean, stats.reanalysis_std, 0, false);
  if (sample.has_satellite()) {
    if (stats.satellite_mean.empty()) throw std::invalid_argument("normalize: stats carry no satellite channels");
    out.satellite = zscore(sample.satellite, stats.satellite_mean, stats.satellite_std, 0, false);
  }
  out.target = Tensor::from(sample.target.shape(), normalize_intensity(sample.target.value(), stats));
  return out;
}

MultiSourceSample denormalize(const MultiSourceSample& sample, const NormStats& stats) {
  MultiSourceSample out;
  out.time_index = sample.time_index;
  Tensor qr = zscore(sample.qpe_radar, stats.qpe_mean, stats.qpe_std, 1, true);
  const Index plane = qr.numel() / kQpeRadarChannels;
  qr.mutable_value().segment(0, plane) = denormalize_intensity(sample.qpe_radar.value().segment(0, plane), stats);
  out.qpe_radar = qr;
  out.reanalysis = zscore(sample.reanalysis, stats.reanalysis_mean, stats.reanalysis_std, 0, true);
  if (sample.has_satellite()) out.satellite = zscore(sample.satellite, stats.satellite_mean, stats.satellite_std, 0, true);
  out.target = Tensor::from(sample.target.shape(), denormalize_intensity(sample.target.value(), stats));
  return out;
}

MultiSourceSample add_noise(const MultiSourceSample& sample, double sigma, std::uint64_t seed) {
  if (sigma < 0) throw std::invalid_argument("add_noise: negative sigma");
  if (sigma == 0) return sample;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  auto perturb = [&](const Tensor& t) {
    Array v = t.value();
    for (Index i = 0; i < v.size(); ++i) v[i] += n(rng);
    return Tensor::from(t.shape(), std::move(v));
  };
  MultiSourceSample out = sample;
  out.qpe_radar = perturb(sample.qpe_radar);
  out.reanalysis = perturb(sample.reanalysis);
  if (sample.has_satellite()) out.satellite = perturb(sample.satellite);
  return out;
}

// ---- selection / diagnostics ---------------------------------------------------

std::vector<std::size_t> importance_filter_indices(std::span<const Sequence> sequences, double keep_fraction,
                                                   double event_threshold, std::uint64_t seed) {
  if (keep_fraction < 0 || keep_fraction > 1) throw std::invalid_argument("importance_filter: keep_fraction must be in [0,1]");
  std::vector<std::size_t> wet, dry;
  for (std::size_t i = 0; i < sequences.size(); ++i) (sequences[i].has_event(event_threshold) ? wet : dry).push_back(i);
  std::mt19937_64 rng(seed);
  std::shuffle(dry.begin(), dry.end(), rng);
  const auto keep = static_cast<std::size_t>(std::llround(keep_fraction * static_cast<double>(dry.size())));
  dry.resize(std::min(keep, dry.size()));
  std::vector<std::size_t> out = wet;
  out.insert(out.end(), dry.begin(), dry.end());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<Sequence> importance_filter(std::span<const Sequence> sequences, double keep_fraction,
                                        double event_threshold, std::uint64_t seed) {
  std::vector<Sequence> out;
  for (std::size_t i : importance_filter_indices(sequences, keep_fraction, event_threshold, seed)) out.push_back(sequences[i]);
  return out;
}

std::vector<double> bucket_distribution(std::span<const Tensor> grids, const std::vector<double>& edges) {
  if (!std::is_sorted(edges.begin(), edges.end())) throw std::invalid_argument("bucket_distribution: edges must ascend");
  std::vector<double> counts(edges.size() + 1, 0.0);
  double total = 0;
  for (const auto& g : grids) {
    for (Index i = 0; i < g.numel(); ++i) {
      const double v = g.value()[i];
      const auto b = static_cast<std::size_t>(std::lower_bound(edges.begin(), edges.end(), v) - edges.begin());
      counts[b] += 1.0;
    }
    total += static_cast<double>(g.numel());
  }
  if (total > 0)
    for (auto& c : counts) c /= total;
  return counts;
}

std::vector<double> bucket_distribution(std::span<const Sequence> sequences, const std::vector<double>& edges) {
  std::vector<Tensor> grids;
  for (const auto& s : sequences)
    for (const auto& x : s.samples) grids.push_back(x.target);
  return bucket_distribution(std::span<const Tensor>(grids), edges);
}

SplitIndices split_by_month(std::size_t count, std::size_t month_size) {
  if (month_size == 0) throw std::invalid_argument("split_by_month: month_size must be positive");
  SplitIndices out;
  for (std::size_t start = 0; start < count; start += month_size) {
    const std::size_t m = std::min(month_size, count - start);
    const auto n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(m)));
    const auto n_val = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(m)));
    for (std::size_t k = 0; k < m; ++k) {
      auto& dst = k < n_train ? out.train : (k < n_train + n_val ? out.val : out.test);
      dst.push_back(start + k);
    }
  }
  return out;
}

// ---- on-disk dataset -----------------------------------------------------------

std::string to_string(WindMode mode) { return mode == WindMode::constant ? "constant" : "field"; }

WindMode wind_mode_from_string(const std::string& s) {
  if (s == "field") return WindMode::field;
  if (s == "constant") return WindMode::constant;
  throw std::invalid_argument("unknown wind mode '" + s + "'");
}

namespace {

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

Tensor stack_member(const Sequence& seq, Tensor MultiSourceSample::*member) {
  const Tensor& first = seq.samples.front().*member;
  Shape shape{seq.size()};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  Array v(numel(shape));
  const Index n = first.numel();
  for (Index t = 0; t < seq.size(); ++t) v.segment(t * n, n) = (seq.samples[static_cast<std::size_t>(t)].*member).value();
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

std::map<std::string, std::string> sequence_metadata(const Sequence& seq) {
  const auto& c = seq.config;
  return {
      {"seed", std::to_string(seq.seed)},
      {"step_count", std::to_string(seq.size())},
      {"height", std::to_string(c.height)},
      {"width", std::to_string(c.width)},
      {"coarse_height", std::to_string(c.coarse_height)},
      {"coarse_width", std::to_string(c.coarse_width)},
      {"satellite", c.include_satellite ? "1" : "0"},
      {"wind_mode", to_string(c.wind_mode)},
      {"constant_u", format_double(c.constant_u)},
      {"constant_v", format_double(c.constant_v)},
      {"mean_wind_speed", format_double(c.mean_wind_speed)},
      {"wind_wave_amplitude", format_double(c.wind_wave_amplitude)},
      {"humidity_threshold", format_double(c.humidity_threshold)},
      {"birth_rate", format_double(c.birth_rate)},
      {"initial_cells", std::to_string(c.initial_cells)},
      {"decay_rate", format_double(c.decay_rate)},
      {"amplitude_log_mean", format_double(c.amplitude_log_mean)},
      {"amplitude_log_std", format_double(c.amplitude_log_std)},
      {"radius_min", format_double(c.radius_min)},
      {"radius_max", format_double(c.radius_max)},
      {"dry_fraction", format_double(c.dry_fraction)},
      {"radar_noise", format_double(c.radar_noise)},
  };
}

void write_sequence(const std::filesystem::path& stem, const Sequence& seq) {
  if (seq.samples.empty()) throw std::invalid_argument("write_sequence: empty sequence");
  NamedTensors tensors{{"qpe_radar", stack_member(seq, &MultiSourceSample::qpe_radar)},
                       {"reanalysis", stack_member(seq, &MultiSourceSample::reanalysis)}};
  if (seq.samples.front().has_satellite()) tensors.emplace_back("satellite", stack_member(seq, &MultiSourceSample::satellite));
  tensors.emplace_back("target", stack_member(seq, &MultiSourceSample::target));
  Array times(seq.size());
  for (Index t = 0; t < seq.size(); ++t) times[t] = static_cast<double>(seq.samples[static_cast<std::size_t>(t)].time_index);
  tensors.emplace_back("time_index", Tensor::from({seq.size()}, times));
  save_archive(std::filesystem::path(stem).replace_extension(".lpta"), tensors);

  std::ofstream meta(std::filesystem::path(stem).replace_extension(".meta"), std::ios::trunc);
  if (!meta) throw std::runtime_error("cannot write metadata for " + stem.string());
  for (const auto& [k, v] : sequence_metadata(seq)) meta << k << '=' << v << '\n';
}

Sequence read_sequence(const std::filesystem::path& stem) {
  std::map<std::string, std::string> meta;
  {
    std::ifstream in(std::filesystem::path(stem).replace_extension(".meta"));
    if (!in) throw std::runtime_error("missing metadata for " + stem.string());
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      meta[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  auto get = [&](const char* key) -> const std::string& {
    auto it = meta.find(key);
    if (it == meta.end()) throw std::runtime_error(std::string("metadata key missing: ") + key + " in " + stem.string());
    return it->second;
  };
  Sequence seq;
  seq.seed = std::stoull(get("seed"));
  auto& c = seq.config;
  c.height = std::stol(get("height"));
  c.width = std::stol(get("width"));
  c.coarse_height = std::stol(get("coarse_height"));
  c.coarse_width = std::stol(get("coarse_width"));
  c.steps = std::stol(get("step_count"));
  c.include_satellite = get("satellite") == "1";
  c.wind_mode = wind_mode_from_string(get("wind_mode"));
  c.constant_u = std::stod(get("constant_u"));
  c.constant_v = std::stod(get("constant_v"));
  c.mean_wind_speed = std::stod(get("mean_wind_speed"));
  c.wind_wave_amplitude = std::stod(get("wind_wave_amplitude"));
  c.humidity_threshold = std::stod(get("humidity_threshold"));
  c.birth_rate = std::stod(get("birth_rate"));
  c.initial_cells = std::stol(get("initial_cells"));
  c.decay_rate = std::stod(get("decay_rate"));
  c.amplitude_log_mean = std::stod(get("amplitude_log_mean"));
  c.amplitude_log_std = std::stod(get("amplitude_log_std"));
  c.radius_min = std::stod(get("radius_min"));
  c.radius_max = std::stod(get("radius_max"));
  c.dry_fraction = std::stod(get("dry_fraction"));
  c.radar_noise = std::stod(get("radar_noise"));

  const NamedTensors tensors = load_archive(std::filesystem::path(stem).replace_extension(".lpta"));
  auto unstack = [&](const std::string& name, Index t) {
    const Tensor& all = find_tensor(tensors, name);
    Shape shape(all.shape().begin() + 1, all.shape().end());
    const Index n = numel(shape);
    return Tensor::from(shape, all.value().segment(t * n, n));
  };
  const Tensor& times = find_tensor(tensors, "time_index");
  for (Index t = 0; t < c.steps; ++t) {
    MultiSourceSample s;
    s.time_index = static_cast<Index>(times.value()[t]);
    s.qpe_radar = unstack("qpe_radar", t);
    s.reanalysis = unstack("reanalysis", t);
    if (c.include_satellite) s.satellite = unstack("satellite", t);
    s.target = unstack("target", t);
    seq.samples.push_back(std::move(s));
  }
  return seq;
}

void write_split(const std::filesystem::path& dir, std::span<const Sequence> sequences, std::span<const std::size_t> indices) {
  std::filesystem::create_directories(dir);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    std::ostringstream name;
    name << "seq_" << std::setw(5) << std::setfill('0') << indices[k];
    write_sequence(dir / name.str(), sequences[indices[k]]);
  }
}

std::vector<Sequence> read_split(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("split directory not found: " + dir.string());
  std::vector<std::filesystem::path> stems;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.path().extension() == ".lpta") stems.push_back(std::filesystem::path(entry.path()).replace_extension());
  std::sort(stems.begin(), stems.end());
  std::vector<Sequence> out(stems.size());
  parallel_for(stems.size(), [&](std::size_t i) { out[i] = read_sequence(stems[i]); });
  return out;
}

}  // namespace stormlatent
