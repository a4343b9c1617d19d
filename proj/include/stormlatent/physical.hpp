#pragma once

// Physical-space comparator: the same two-step predictor structure iterating
// on every raw input channel at full resolution, with no encoder.

#include "stormlatent/train.hpp"

namespace stormlatent {

// qpe_radar + reanalysis (+ satellite) channels.
Index physical_channels(const ModelConfig& c);
// Stacks all modalities on the fine grid; reanalysis is bilinearly upsampled and
// a missing satellite stack is zero-filled.
Tensor physical_state(const MultiSourceSample& normalized, const ModelConfig& c);
LpmShape physical_lpm_shape(const ModelConfig& c);

class PhysicalForecaster : public Forecaster {
 public:
  PhysicalForecaster(const ModelConfig& config, std::uint64_t seed);

  ParamStore& store() override { return store_; }
  const ParamStore& store() const override { return store_; }
  const ModelConfig& config() const { return config_; }

  // Next full-resolution state at b.time_index + delta.
  LatentState predict(int delta, const LatentState& a, const LatentState& b, RunContext& ctx) const;

  Tensor window_loss(const PreparedSequence& seq, const Window& w, const TrainConfig& cfg, const NormStats& stats,
                     RunContext& ctx, LossBreakdown* breakdown) const override;
  std::vector<Tensor> predict_intensity(std::span<const MultiSourceSample> observed, const HtaSchedule& schedule,
                                        Index first_lead = 1) const override;
  // Full-state rollout, one [C,H,W] tensor per lead.
  std::vector<LatentState> rollout_states(std::span<const MultiSourceSample> observed,
                                          const HtaSchedule& schedule) const;
  std::uint64_t step_macs() const override;

 private:
  ModelConfig config_;
  ParamStore store_;
};

}  // namespace stormlatent
