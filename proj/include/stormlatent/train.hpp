#pragma once

// Training loop: windows, AdamW, warmup + cosine schedule, checkpoint
// selection, and forecast evaluation for both iteration spaces.

#include "stormlatent/config.hpp"
#include "stormlatent/hta.hpp"
#include "stormlatent/losses.hpp"
#include "stormlatent/metrics.hpp"
#include "stormlatent/model.hpp"

#include <filesystem>
#include <functional>
#include <memory>
#include <stdexcept>

namespace stormlatent {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A sequence normalized once up front.
struct PreparedSequence {
  std::vector<MultiSourceSample> norm;
  std::vector<Array> raw_target;  // mm/h per step
  Index size() const { return static_cast<Index>(norm.size()); }
};
std::vector<PreparedSequence> prepare(std::span<const Sequence> sequences, const NormStats& stats);

// One training example: inputs at origin-delta and origin, targets at
// origin+delta and origin+2*delta.
struct Window {
  std::size_t sequence = 0;
  Index origin = 0;
  int delta = 1;
  std::uint64_t noise_seed = 0;
};

class Forecaster {
 public:
  virtual ~Forecaster() = default;
  virtual ParamStore& store() = 0;
  virtual const ParamStore& store() const = 0;
  // Differentiable loss for one window; fills `breakdown`.
  virtual Tensor window_loss(const PreparedSequence& seq, const Window& w, const TrainConfig& cfg,
                             const NormStats& stats, RunContext& ctx, LossBreakdown* breakdown) const = 0;
  // Normalized intensity [1,H,W] for leads first_lead..L from the five normalized
  // observed samples; earlier leads are left undefined. Differentiable.
  virtual std::vector<Tensor> predict_intensity(std::span<const MultiSourceSample> observed,
                                                const HtaSchedule& schedule, Index first_lead = 1) const = 0;
  // Intensity (mm/h, clamped at 0) for leads 1..L after the observed steps origin-4..origin.
  std::vector<Array> forecast(const PreparedSequence& seq, Index origin, const HtaSchedule& schedule,
                              const NormStats& stats) const;
  // Multiply-adds of one iteration step that yields an intensity field.
  virtual std::uint64_t step_macs() const = 0;
};

class LatentForecaster : public Forecaster {
 public:
  explicit LatentForecaster(ModelParams params) : params_(std::move(params)) {}
  ParamStore& store() override { return params_.store; }
  const ParamStore& store() const override { return params_.store; }
  const ModelParams& params() const { return params_; }
  Tensor window_loss(const PreparedSequence& seq, const Window& w, const TrainConfig& cfg, const NormStats& stats,
                     RunContext& ctx, LossBreakdown* breakdown) const override;
  std::vector<Tensor> predict_intensity(std::span<const MultiSourceSample> observed, const HtaSchedule& schedule,
                                        Index first_lead = 1) const override;
  std::uint64_t step_macs() const override;

 private:
  ModelParams params_;
};

std::unique_ptr<Forecaster> make_forecaster(const RunConfig& cfg);

// ---- optimization -------------------------------------------------------------------

// Linear warmup to base_lr over warmup_epochs, then cosine decay to 0 at `epochs`.
// `epoch` is fractional.
double lr_at(double epoch, const TrainConfig& cfg);

// Adam with decoupled weight decay: theta -= lr*wd*theta; theta -= lr*m_hat/(sqrt(v_hat)+eps).
class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}
  explicit AdamW(const TrainConfig& c) : AdamW(c.adam_beta1, c.adam_beta2, c.adam_eps, c.weight_decay) {}
  void step(ParamStore& store, double lr);
  long steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  long t_ = 0;
  std::vector<Array> m_, v_;
};

// Scales all gradients so their global L2 norm is at most max_norm. Returns the
// norm before clipping.
double clip_grad_norm(ParamStore& store, double max_norm);

// Windows for one epoch: shuffled sequence order, one interval per batch.
std::vector<std::vector<Window>> epoch_batches(const std::vector<PreparedSequence>& data, const TrainConfig& cfg,
                                               Index epoch);

// Forward + backward over the batch (each window scaled 1/B), clipping and one
// AdamW update. Returns the batch-mean breakdown.
LossBreakdown train_step(Forecaster& model, const std::vector<PreparedSequence>& data,
                         const std::vector<Window>& batch, const TrainConfig& cfg, const NormStats& stats,
                         AdamW& opt, double lr, std::uint64_t dropout_seed);

// ---- fitting / evaluation -------------------------------------------------------------

inline constexpr Index kForecastOrigin = 4;

struct EpochLog {
  Index epoch = 0;
  double lr = 0;
  double total_loss = 0;
  std::optional<double> val_csi, val_pod;
};

struct FitResult {
  std::vector<EpochLog> epochs;
  std::vector<LossBreakdown> steps;
  Index best_epoch = 0;
  NamedTensors best;
  NamedTensors last;
  std::size_t train_windows_per_epoch = 0;
};

struct FitOptions {
  std::filesystem::path out_dir;  // empty: write nothing
  std::function<void(const EpochLog&)> on_epoch;
};

FitResult fit(Forecaster& model, const std::vector<PreparedSequence>& train, const std::vector<PreparedSequence>& val,
              const NormStats& stats, const TrainConfig& cfg, const FitOptions& options = {});

// Forecasts from origin 4 for every sequence and scores them.
Evaluation evaluate(const Forecaster& model, const std::vector<PreparedSequence>& data, const NormStats& stats,
                    Index horizon, const std::vector<double>& thresholds, bool hss_standard = false);
// Raw forecasts [sequence][lead] and the matching truths.
void forecast_all(const Forecaster& model, const std::vector<PreparedSequence>& data, const NormStats& stats,
                  Index horizon, std::vector<std::vector<Array>>& predictions,
                  std::vector<std::vector<Array>>& truths);

NamedTensors stats_to_tensors(const NormStats& stats);
NormStats stats_from_tensors(const NamedTensors& tensors);

// ---- runs ---------------------------------------------------------------------------------

struct Splits {
  std::vector<Sequence> train, val, test;
};
// cfg.data.sequences sequences from cfg.data.seed, split 80/10/10 per month.
Splits generate_splits(const RunConfig& cfg);
// The training subset actually fitted: importance-filtered when enabled.
std::vector<Sequence> select_training(std::span<const Sequence> train, const RunConfig& cfg);

struct TrainedModel {
  RunConfig config;
  NormStats stats;
  std::unique_ptr<Forecaster> model;
};

struct RunResult {
  TrainedModel trained;  // holds the best-validation weights
  FitResult fit;
  std::size_t selected_sequences = 0;
};

// Stats from the full training split, selection, fit. With an output directory
// it also writes config.txt and stats.lpta next to the checkpoints.
RunResult train_run(const RunConfig& cfg, const Splits& splits, const FitOptions& options = {});
// Reads config.txt, stats.lpta and the named checkpoint from a run directory.
TrainedModel load_run(const std::filesystem::path& dir, const std::string& checkpoint = "best.lpta");

}  // namespace stormlatent
