#include "stormlatent/train.hpp"

#include "stormlatent/parallel.hpp"
#include "stormlatent/physical.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>

namespace stormlatent {

namespace {

std::uint64_t mix(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x243f6a8885a308d3ULL;
  for (std::uint64_t p : parts) {
    std::uint64_t z = h + p + 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    h = z ^ (z >> 31);
  }
  return h;
}

void accumulate(Tensor& acc, const Tensor& t) {
  if (!t.defined()) return;
  acc = acc.defined() ? acc + t : t;
}

NamedTensors snapshot(const ParamStore& store) {
  NamedTensors out;
  out.reserve(store.size());
  for (const auto& [name, t] : store.entries()) out.emplace_back(name, t.detach());
  return out;
}

void check_finite(const LossBreakdown& b) {
  const std::pair<const char*, double> parts[] = {
      {"wmce_mae", b.wmce_mae},         {"wmce_ce_precip", b.wmce_ce_precip},
      {"wmce_ce_dry", b.wmce_ce_dry},   {"latent", b.latent},
      {"recon_fine", b.recon_fine},     {"recon_reanalysis", b.recon_reanalysis},
      {"recon_satellite", b.recon_satellite}, {"total", b.total}};
  for (const auto& [name, v] : parts)
    if (!std::isfinite(v)) throw NumericError("non-finite loss term " + std::string(name));
}

}  // namespace

std::vector<PreparedSequence> prepare(std::span<const Sequence> sequences, const NormStats& stats) {
  std::vector<PreparedSequence> out(sequences.size());
  parallel_for(sequences.size(), [&](std::size_t i) {
    auto& p = out[i];
    for (const auto& s : sequences[i].samples) {
      p.norm.push_back(normalize(s, stats));
      p.raw_target.push_back(s.target.value());
    }
  });
  return out;
}

std::vector<Array> Forecaster::forecast(const PreparedSequence& seq, Index origin, const HtaSchedule& schedule,
                                        const NormStats& stats) const {
  if (origin + kObservedFirst < 0 || origin >= seq.size())
    throw std::invalid_argument("forecast origin " + std::to_string(origin) + " outside the sequence");
  NoGradGuard no_grad;
  const std::span<const MultiSourceSample> observed(seq.norm.data() + origin + kObservedFirst, 1 - kObservedFirst);
  std::vector<Array> out;
  for (const auto& y : predict_intensity(observed, schedule))
    out.push_back(denormalize_intensity(y.value(), stats).max(0.0));
  return out;
}

// ---- latent forecaster -----------------------------------------------------------------

Tensor LatentForecaster::window_loss(const PreparedSequence& seq, const Window& w, const TrainConfig& cfg,
                                     const NormStats& stats, RunContext& ctx, LossBreakdown* breakdown) const {
  const Index o = w.origin;
  const int d = w.delta;
  const std::array<Index, 4> steps{o - d, o, o + d, o + 2 * d};
  if (steps.front() < 0 || steps.back() >= seq.size())
    throw std::invalid_argument("window at origin " + std::to_string(o) + " with interval " + std::to_string(d) +
                                " exceeds the sequence");

  std::map<Index, LatentState> enc;
  for (std::size_t k = 0; k < steps.size(); ++k) {
    const auto& clean = seq.norm[static_cast<std::size_t>(steps[k])];
    enc[steps[k]] = encode(params_, add_noise(clean, cfg.noise_sigma, mix({w.noise_seed, k})));
  }
  const TrainingRollout r = training_rollout(params_, enc, o, d, ctx);

  LossTerms terms;
  const std::pair<const LatentState*, Index> leads[] = {{&r.first, o + d}, {&r.second, o + 2 * d}};
  for (const auto& [pred, step] : leads) {
    const auto idx = static_cast<std::size_t>(step);
    PixelLossTerms p = pixel_loss(cfg.loss_variant, seq.norm[idx].target, project(params_, pred->value, ctx),
                                  seq.raw_target[idx], stats.tau_norm());
    accumulate(terms.pixel.mae, p.mae);
    accumulate(terms.pixel.ce_precip, p.ce_precip);
    accumulate(terms.pixel.ce_dry, p.ce_dry);
  }
  terms.latent = latent_loss({enc[o + d].value, enc[o + 2 * d].value}, {r.first.value, r.second.value});

  std::vector<Tensor> qpe_t, qpe_r, rea_t, rea_r, sat_t, sat_r;
  for (Index s : steps) {
    const auto& clean = seq.norm[static_cast<std::size_t>(s)];
    Reconstruction rc = reconstruct(params_, enc[s].value);
    qpe_t.push_back(clean.qpe_radar);
    qpe_r.push_back(rc.qpe_radar);
    rea_t.push_back(clean.reanalysis);
    rea_r.push_back(rc.reanalysis);
    if (rc.satellite.defined() && clean.has_satellite()) {
      sat_t.push_back(clean.satellite);
      sat_r.push_back(rc.satellite);
    }
  }
  terms.recon_fine = recon_loss(qpe_t, qpe_r);
  terms.recon_reanalysis = recon_loss(rea_t, rea_r);
  if (!sat_t.empty()) terms.recon_satellite = recon_loss(sat_t, sat_r);
  return overall_loss(terms, breakdown);
}

std::vector<Tensor> LatentForecaster::predict_intensity(std::span<const MultiSourceSample> observed,
                                                       const HtaSchedule& schedule, Index first_lead) const {
  RunContext ctx = RunContext::eval();
  std::vector<LatentState> latents;
  for (const auto& s : observed) latents.push_back(encode(params_, s));
  const auto predicted = rollout(params_, latents, schedule, ctx);
  std::vector<Tensor> out(predicted.size());
  for (std::size_t l = 0; l < predicted.size(); ++l)
    if (static_cast<Index>(l) + 1 >= first_lead) out[l] = project(params_, predicted[l].value, ctx);
  return out;
}

std::uint64_t LatentForecaster::step_macs() const {
  NoGradGuard no_grad;
  RunContext ctx = RunContext::eval();
  const ModelConfig& c = params_.config;
  LatentState a{Tensor::zeros({c.latent_channels, c.latent_height(), c.latent_width()}), 0};
  LatentState b{a.value, 1};
  MacCounter counter;
  LatentState h = lpm_predict(params_, 1, a, b, ctx);
  project(params_, h.value, ctx);
  return counter.count();
}

std::unique_ptr<Forecaster> make_forecaster(const RunConfig& cfg) {
  if (cfg.train.iteration_space == IterationSpace::physical)
    return std::make_unique<PhysicalForecaster>(cfg.model, cfg.train.seed);
  return std::make_unique<LatentForecaster>(ModelParams::init(cfg.model, cfg.train.seed));
}

// ---- optimization ------------------------------------------------------------------------

double lr_at(double epoch, const TrainConfig& cfg) {
  const double warm = cfg.warmup_epochs;
  const double total = static_cast<double>(cfg.epochs);
  if (warm > 0 && epoch < warm) return cfg.base_lr * std::max(0.0, epoch) / warm;
  const double span = total - warm;
  if (span <= 0) return cfg.base_lr;
  const double p = std::clamp((epoch - warm) / span, 0.0, 1.0);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

void AdamW::step(ParamStore& store, double lr) {
  auto& entries = store.entries();
  if (m_.empty()) {
    for (const auto& [name, t] : entries) {
      m_.push_back(Array::Zero(t.numel()));
      v_.push_back(Array::Zero(t.numel()));
    }
  }
  if (m_.size() != entries.size()) throw std::logic_error("AdamW: parameter set changed");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor& p = entries[i].second;
    Array& theta = p.mutable_value();
    const Array& g = p.node()->grad;
    if (weight_decay_ != 0) theta -= lr * weight_decay_ * theta;
    if (g.size() == 0) {
      m_[i] *= beta1_;
      v_[i] *= beta2_;
    } else {
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.square();
    }
    theta -= lr * (m_[i] / c1) / ((v_[i] / c2).sqrt() + eps_);
  }
}

double clip_grad_norm(ParamStore& store, double max_norm) {
  double sq = 0;
  for (const auto& [name, t] : store.entries()) {
    const Array& g = t.node()->grad;
    if (g.size()) sq += g.square().sum();
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [name, t] : store.entries()) {
      Array& g = t.node()->grad;
      if (g.size()) g *= s;
    }
  }
  return norm;
}

std::vector<std::vector<Window>> epoch_batches(const std::vector<PreparedSequence>& data, const TrainConfig& cfg,
                                               Index epoch) {
  std::vector<std::size_t> order;
  for (Index r = 0; r < cfg.windows_per_sequence; ++r)
    for (std::size_t i = 0; i < data.size(); ++i) order.push_back(i);
  std::mt19937_64 shuffle_rng(mix({cfg.seed, static_cast<std::uint64_t>(epoch), 1}));
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  std::vector<std::vector<Window>> batches;
  const auto B = static_cast<std::size_t>(cfg.batch_size);
  for (std::size_t start = 0, b = 0; start < order.size(); start += B, ++b) {
    std::mt19937_64 rng(mix({cfg.seed, static_cast<std::uint64_t>(epoch), 2, b}));
    const int delta = kIntervals[std::uniform_int_distribution<std::size_t>(0, kIntervals.size() - 1)(rng)];
    std::vector<Window> batch;
    for (std::size_t i = start; i < std::min(order.size(), start + B); ++i) {
      const Index T = data[order[i]].size();
      if (T < 1 + 3 * delta) throw std::invalid_argument("sequence too short for interval " + std::to_string(delta));
      Window w;
      w.sequence = order[i];
      w.delta = delta;
      w.origin = std::uniform_int_distribution<Index>(delta, T - 1 - 2 * delta)(rng);
      w.noise_seed = mix({cfg.seed, static_cast<std::uint64_t>(epoch), 3, b, i});
      batch.push_back(w);
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

LossBreakdown train_step(Forecaster& model, const std::vector<PreparedSequence>& data,
                         const std::vector<Window>& batch, const TrainConfig& cfg, const NormStats& stats,
                         AdamW& opt, double lr, std::uint64_t dropout_seed) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  ParamStore& store = model.store();
  store.zero_grad();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  LossBreakdown mean;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    RunContext ctx{true, cfg.dropout, mix({dropout_seed, i}), 0};
    LossBreakdown b;
    Tensor loss = model.window_loss(data.at(batch[i].sequence), batch[i], cfg, stats, ctx, &b);
    check_finite(b);
    scale(loss, inv_b).backward();
    mean += b.scaled(inv_b);
  }
  for (const auto& [name, t] : store.entries()) {
    const Array& g = t.node()->grad;
    if (g.size() && !g.allFinite()) throw NumericError("non-finite gradient in " + name);
  }
  clip_grad_norm(store, cfg.grad_clip);
  opt.step(store, lr);
  return mean;
}

// ---- fitting / evaluation ---------------------------------------------------------------

void forecast_all(const Forecaster& model, const std::vector<PreparedSequence>& data, const NormStats& stats,
                  Index horizon, std::vector<std::vector<Array>>& predictions,
                  std::vector<std::vector<Array>>& truths) {
  const HtaSchedule schedule = build_hta_schedule(horizon);
  predictions.assign(data.size(), {});
  truths.assign(data.size(), {});
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data[i].size() < kForecastOrigin + horizon + 1)
      throw std::invalid_argument("sequence " + std::to_string(i) + " too short for horizon " +
                                  std::to_string(horizon));
  parallel_for(data.size(), [&](std::size_t i) {
    predictions[i] = model.forecast(data[i], kForecastOrigin, schedule, stats);
    for (Index l = 1; l <= horizon; ++l) truths[i].push_back(data[i].raw_target[kForecastOrigin + l]);
  });
}

Evaluation evaluate(const Forecaster& model, const std::vector<PreparedSequence>& data, const NormStats& stats,
                    Index horizon, const std::vector<double>& thresholds, bool hss_standard) {
  std::vector<std::vector<Array>> pred, truth;
  forecast_all(model, data, stats, horizon, pred, truth);
  return evaluate_run(pred, truth, thresholds, hss_standard);
}

namespace {

void put_optional(std::ostream& os, const std::optional<double>& v) {
  if (v) {
    os << *v;
  } else {
    os << "NA";
  }
}

}  // namespace

FitResult fit(Forecaster& model, const std::vector<PreparedSequence>& train, const std::vector<PreparedSequence>& val,
              const NormStats& stats, const TrainConfig& cfg, const FitOptions& options) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("empty training split");
  if (val.empty()) throw std::invalid_argument("empty validation split");

  std::ofstream epoch_csv, loss_csv;
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    epoch_csv.open(options.out_dir / "epochs.csv");
    loss_csv.open(options.out_dir / "losses.csv");
    epoch_csv << "epoch,lr,total_loss,val_csi_0.2,val_pod_0.2\n" << std::setprecision(17);
    write_loss_csv_header(loss_csv);
  }

  FitResult result;
  AdamW opt(cfg);
  double best_csi = -1.0;
  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = epoch_batches(train, cfg, epoch);
    result.train_windows_per_epoch = 0;
    EpochLog log;
    log.epoch = epoch + 1;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const double position = static_cast<double>(epoch) + (static_cast<double>(b) + 0.5) / batches.size();
      const double lr = lr_at(position, cfg);
      const LossBreakdown lb = train_step(model, train, batches[b], cfg, stats, opt, lr,
                                          mix({cfg.seed, static_cast<std::uint64_t>(epoch), 4, b}));
      result.steps.push_back(lb);
      if (loss_csv.is_open()) write_loss_csv_row(loss_csv, static_cast<long>(result.steps.size()), lb);
      log.lr = lr;
      log.total_loss += lb.total / static_cast<double>(batches.size());
      result.train_windows_per_epoch += batches[b].size();
    }
    const Evaluation e = evaluate(model, val, stats, cfg.val_horizon, {0.2});
    log.val_csi = mean_score(e, 0.2, 1, cfg.val_horizon, &Scores::csi);
    log.val_pod = mean_score(e, 0.2, 1, cfg.val_horizon, &Scores::pod);
    const double csi = log.val_csi.value_or(0.0);
    if (csi >= best_csi) {  // ties go to the later epoch
      best_csi = csi;
      result.best_epoch = log.epoch;
      result.best = snapshot(model.store());
    }
    result.epochs.push_back(log);
    if (epoch_csv.is_open()) {
      epoch_csv << log.epoch << ',' << log.lr << ',' << log.total_loss << ',';
      put_optional(epoch_csv, log.val_csi);
      epoch_csv << ',';
      put_optional(epoch_csv, log.val_pod);
      epoch_csv << '\n' << std::flush;
    }
    if (options.on_epoch) options.on_epoch(log);
  }
  result.last = snapshot(model.store());
  if (!options.out_dir.empty()) {
    save_archive(options.out_dir / "best.lpta", result.best);
    save_archive(options.out_dir / "last.lpta", result.last);
  }
  return result;
}

// ---- statistics I/O -----------------------------------------------------------------------

namespace {

Tensor vec_tensor(const std::vector<double>& v) {
  Array a(static_cast<Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) a[static_cast<Index>(i)] = v[i];
  return Tensor::from({static_cast<Index>(v.size())}, a);
}

std::vector<double> tensor_vec(const Tensor& t) { return {t.value().data(), t.value().data() + t.numel()}; }

}  // namespace

NamedTensors stats_to_tensors(const NormStats& s) {
  NamedTensors out{{"stats.qpe_mean", vec_tensor(s.qpe_mean)},
                   {"stats.qpe_std", vec_tensor(s.qpe_std)},
                   {"stats.reanalysis_mean", vec_tensor(s.reanalysis_mean)},
                   {"stats.reanalysis_std", vec_tensor(s.reanalysis_std)},
                   {"stats.intensity_cap", Tensor::scalar(s.intensity_cap)},
                   {"stats.tau_raw", Tensor::scalar(s.tau_raw)}};
  if (!s.satellite_mean.empty()) {
    out.emplace_back("stats.satellite_mean", vec_tensor(s.satellite_mean));
    out.emplace_back("stats.satellite_std", vec_tensor(s.satellite_std));
  }
  return out;
}

NormStats stats_from_tensors(const NamedTensors& t) {
  NormStats s;
  s.qpe_mean = tensor_vec(find_tensor(t, "stats.qpe_mean"));
  s.qpe_std = tensor_vec(find_tensor(t, "stats.qpe_std"));
  s.reanalysis_mean = tensor_vec(find_tensor(t, "stats.reanalysis_mean"));
  s.reanalysis_std = tensor_vec(find_tensor(t, "stats.reanalysis_std"));
  s.intensity_cap = find_tensor(t, "stats.intensity_cap").item();
  s.tau_raw = find_tensor(t, "stats.tau_raw").item();
  if (has_tensor(t, "stats.satellite_mean")) {
    s.satellite_mean = tensor_vec(find_tensor(t, "stats.satellite_mean"));
    s.satellite_std = tensor_vec(find_tensor(t, "stats.satellite_std"));
  }
  s.validate();
  return s;
}

}  // namespace stormlatent

// ---- runs ---------------------------------------------------------------------------------

namespace stormlatent {

Splits generate_splits(const RunConfig& cfg) {
  cfg.validate();
  const auto all = generate_sequences(cfg.data.seed, cfg.data.sequences, cfg.generator);
  const SplitIndices idx = split_by_month(all.size(), static_cast<std::size_t>(cfg.data.month_size));
  Splits out;
  for (auto i : idx.train) out.train.push_back(all[i]);
  for (auto i : idx.val) out.val.push_back(all[i]);
  for (auto i : idx.test) out.test.push_back(all[i]);
  return out;
}

std::vector<Sequence> select_training(std::span<const Sequence> train, const RunConfig& cfg) {
  if (!cfg.train.importance_sampling) return {train.begin(), train.end()};
  return importance_filter(train, cfg.train.dry_keep_fraction, kEventThreshold, cfg.train.seed);
}

RunResult train_run(const RunConfig& cfg, const Splits& splits, const FitOptions& options) {
  cfg.validate();
  if (splits.train.empty()) throw std::invalid_argument("empty training split");
  RunResult r;
  r.trained.config = cfg;
  r.trained.stats = compute_stats(splits.train);
  const auto selected = select_training(splits.train, cfg);
  r.selected_sequences = selected.size();
  r.trained.model = make_forecaster(cfg);
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    std::ofstream os(options.out_dir / "config.txt");
    write_config(os, cfg);
    save_archive(options.out_dir / "stats.lpta", stats_to_tensors(r.trained.stats));
  }
  r.fit = fit(*r.trained.model, prepare(selected, r.trained.stats), prepare(splits.val, r.trained.stats),
              r.trained.stats, cfg.train, options);
  r.trained.model->store().assign(r.fit.best);
  return r;
}

TrainedModel load_run(const std::filesystem::path& dir, const std::string& checkpoint) {
  TrainedModel t;
  t.config = parse_config_file(dir / "config.txt");
  t.stats = stats_from_tensors(load_archive(dir / "stats.lpta"));
  t.model = make_forecaster(t.config);
  t.model->store().assign(load_archive(dir / checkpoint));
  return t;
}

}  // namespace stormlatent
