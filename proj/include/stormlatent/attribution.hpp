#pragma once

// Integrated gradients over the observed input channels and per-variable
// aggregation by lead-step group.

#include "stormlatent/gradcheck.hpp"
#include "stormlatent/train.hpp"

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace stormlatent {

using MultiInputFunction = std::function<Tensor(const std::vector<Tensor>& inputs)>;

// attr = (x - x') * (1/m) * sum_{k=1..m} dF/dx at x' + (k/m)(x - x').
std::vector<Array> integrated_gradients(const MultiInputFunction& f, const std::vector<Tensor>& x,
                                        const std::vector<Tensor>& baseline, Index m);
Array integrated_gradients(const ScalarFunction& f, const Tensor& x, const Tensor& baseline, Index m);

struct LeadGroup {
  Index first = 1;
  Index last = 8;
  std::string label() const;  // "1-8"
};
inline const std::vector<LeadGroup> kDefaultLeadGroups{{1, 8}, {9, 16}, {17, 24}};

// qpe, radar levels, reanalysis variables, then satellite channels if used.
std::vector<std::string> input_channel_names(const ModelConfig& c);

struct AttributionMap {
  LeadGroup group;
  Index path_steps = 0;
  std::vector<std::string> channel_names;
  std::vector<Array> channels;  // signed attribution per channel, [observed step][pixel] flattened
  double target = 0;            // F(x)
  double baseline_target = 0;   // F(baseline)

  double total() const;  // sum of all attributions
  // |sum attr - (F(x) - F(x'))| / |F(x) - F(x')|
  double completeness_error() const;
};

// Mean normalized forecast intensity over the group's leads, restricted to
// pixels the forecast at `observed` marks as precipitating (all pixels if none).
// The mask is fixed from the unperturbed input.
class ForecastTarget {
 public:
  ForecastTarget(const Forecaster& model, std::span<const MultiSourceSample> observed, LeadGroup group,
                 double tau_norm);
  // Inputs: for each observed step, qpe_radar, reanalysis and (if present) satellite.
  Tensor operator()(const std::vector<Tensor>& inputs) const;
  std::vector<Tensor> inputs() const;

 private:
  const Forecaster& model_;
  std::vector<MultiSourceSample> observed_;
  LeadGroup group_;
  HtaSchedule schedule_;
  std::vector<Tensor> masks_;  // per lead in the group
};

// Zero baseline in normalized space.
AttributionMap attribute(const Forecaster& model, std::span<const MultiSourceSample> observed, LeadGroup group,
                         const ModelConfig& config, double tau_norm, Index path_steps);

struct RankedAttribution {
  std::string channel;
  std::string lead_group;
  double mean_abs_attr = 0;
  Index rank = 0;  // 1 = largest within the group
};

// Per group and channel: mean over maps of sum |attr|, ranked within the group.
std::vector<RankedAttribution> aggregate_attribution(const std::vector<AttributionMap>& maps);

// channel_name,lead_group,mean_abs_attr,rank
void write_attribution_csv(std::ostream& os, const std::vector<RankedAttribution>& rows);

}  // namespace stormlatent
