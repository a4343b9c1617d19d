#pragma once

// Hierarchical temporal aggregation: which interval predictor produces each
// lead step and from which two earlier steps.

#include "stormlatent/model.hpp"

#include <functional>
#include <iosfwd>
#include <map>
#include <vector>

namespace stormlatent {

inline constexpr Index kObservedFirst = -4;
inline constexpr Index kObservedLast = 0;

struct HtaEntry {
  Index step;
  int delta;
  Index input_a;  // step - 2*delta
  Index input_b;  // step - delta
  bool operator==(const HtaEntry&) const = default;
};

struct HtaSchedule {
  std::vector<HtaEntry> entries;

  Index horizon() const { return static_cast<Index>(entries.size()); }
  // Throws std::logic_error on a broken invariant.
  void validate() const;
};

// 1 <- D1(-1,0); 2 <- D2(-2,0); 3 <- D1(1,2); k >= 4 <- D4(k-8,k-4).
HtaSchedule build_hta_schedule(Index horizon);
// Pure interval-1 chaining: k <- D1(k-2,k-1).
HtaSchedule build_chain_schedule(Index horizon);

// Longest chain of predictor calls from an observation to each step 1..L.
std::vector<Index> dependency_depths(const HtaSchedule& schedule);

// output_step,delta,input_a,input_b,depth
void write_schedule_csv(std::ostream& os, const HtaSchedule& schedule);

using Predictor = std::function<LatentState(int delta, const LatentState& a, const LatentState& b)>;

// `observed` holds steps -4..0 in order. Returns predictions for steps 1..L.
std::vector<LatentState> rollout(const Predictor& predict, const std::vector<LatentState>& observed,
                                 const HtaSchedule& schedule);
std::vector<LatentState> rollout(const ModelParams& params, const std::vector<LatentState>& observed,
                                 const HtaSchedule& schedule, RunContext& ctx);

struct TrainingRollout {
  LatentState first;   // origin + delta
  LatentState second;  // origin + 2*delta
};

// first = LPM(h[origin-delta], h[origin]); second = LPM(h[origin], first).
TrainingRollout training_rollout(const Predictor& predict, const std::map<Index, LatentState>& encoded, Index origin,
                                 int delta);
TrainingRollout training_rollout(const ModelParams& params, const std::map<Index, LatentState>& encoded, Index origin,
                                 int delta, RunContext& ctx);

}  // namespace stormlatent
