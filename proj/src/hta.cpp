#include "stormlatent/hta.hpp"

#include <algorithm>
#include <ostream>
#include <set>
#include <stdexcept>

namespace stormlatent {

namespace {

HtaEntry make_entry(Index step, int delta, Index a, Index b) {
  return {step, delta, a, b};
}

bool observed(Index step) { return step >= kObservedFirst && step <= kObservedLast; }

}  // namespace

void HtaSchedule::validate() const {
  std::set<Index> known;
  for (Index s = kObservedFirst; s <= kObservedLast; ++s) known.insert(s);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const HtaEntry& e = entries[i];
    const std::string where = "schedule entry for step " + std::to_string(e.step);
    if (e.step != static_cast<Index>(i) + 1) throw std::logic_error(where + ": steps must be 1..L in order");
    if (e.delta != 1 && e.delta != 2 && e.delta != 4) throw std::logic_error(where + ": unknown interval");
    if (e.input_b - e.input_a != e.delta || e.step - e.input_b != e.delta)
      throw std::logic_error(where + ": input spacing differs from interval");
    if (!known.count(e.input_a) || !known.count(e.input_b)) throw std::logic_error(where + ": unresolved input");
    known.insert(e.step);
  }
}

HtaSchedule build_hta_schedule(Index horizon) {
  if (horizon < 1) throw std::invalid_argument("horizon must be at least 1");
  HtaSchedule s;
  for (Index k = 1; k <= horizon; ++k) {
    if (k == 1) {
      s.entries.push_back(make_entry(1, 1, -1, 0));
    } else if (k == 2) {
      s.entries.push_back(make_entry(2, 2, -2, 0));
    } else if (k == 3) {
      s.entries.push_back(make_entry(3, 1, 1, 2));
    } else {
      s.entries.push_back(make_entry(k, 4, k - 8, k - 4));
    }
  }
  return s;
}

HtaSchedule build_chain_schedule(Index horizon) {
  if (horizon < 1) throw std::invalid_argument("horizon must be at least 1");
  HtaSchedule s;
  for (Index k = 1; k <= horizon; ++k) s.entries.push_back(make_entry(k, 1, k - 2, k - 1));
  return s;
}

std::vector<Index> dependency_depths(const HtaSchedule& schedule) {
  std::map<Index, Index> depth;
  auto lookup = [&depth](Index step) -> Index {
    if (observed(step)) return 0;
    auto it = depth.find(step);
    if (it == depth.end()) throw std::logic_error("step " + std::to_string(step) + " used before it is produced");
    return it->second;
  };
  std::vector<Index> out;
  for (const auto& e : schedule.entries) {
    const Index d = 1 + std::max(lookup(e.input_a), lookup(e.input_b));
    depth[e.step] = d;
    out.push_back(d);
  }
  return out;
}

void write_schedule_csv(std::ostream& os, const HtaSchedule& schedule) {
  const auto depths = dependency_depths(schedule);
  os << "output_step,delta,input_a,input_b,depth\n";
  for (std::size_t i = 0; i < schedule.entries.size(); ++i) {
    const auto& e = schedule.entries[i];
    os << e.step << ',' << e.delta << ',' << e.input_a << ',' << e.input_b << ',' << depths[i] << '\n';
  }
}

std::vector<LatentState> rollout(const Predictor& predict, const std::vector<LatentState>& observed_steps,
                                 const HtaSchedule& schedule) {
  if (observed_steps.size() != static_cast<std::size_t>(kObservedLast - kObservedFirst + 1))
    throw std::invalid_argument("rollout needs the five observed steps -4..0");
  std::map<Index, const LatentState*> known;
  for (Index s = kObservedFirst; s <= kObservedLast; ++s)
    known[s] = &observed_steps[static_cast<std::size_t>(s - kObservedFirst)];
  std::vector<LatentState> out;
  out.reserve(schedule.entries.size());
  for (const auto& e : schedule.entries) {
    auto a = known.find(e.input_a);
    auto b = known.find(e.input_b);
    if (a == known.end() || b == known.end())
      throw std::logic_error("rollout: unresolved input for step " + std::to_string(e.step));
    out.push_back(predict(e.delta, *a->second, *b->second));
    out.back().time_index = observed_steps.back().time_index + e.step;
    // `out` never reallocates: reserved above.
    known[e.step] = &out.back();
  }
  return out;
}

std::vector<LatentState> rollout(const ModelParams& params, const std::vector<LatentState>& observed_steps,
                                 const HtaSchedule& schedule, RunContext& ctx) {
  return rollout([&](int d, const LatentState& a, const LatentState& b) { return lpm_predict(params, d, a, b, ctx); },
                 observed_steps, schedule);
}

TrainingRollout training_rollout(const Predictor& predict, const std::map<Index, LatentState>& encoded, Index origin,
                                 int delta) {
  auto need = [&](Index step) -> const LatentState& {
    auto it = encoded.find(step);
    if (it == encoded.end()) throw std::invalid_argument("training_rollout: step " + std::to_string(step) + " not encoded");
    return it->second;
  };
  const LatentState& prev = need(origin - delta);
  const LatentState& now = need(origin);
  TrainingRollout r;
  r.first = predict(delta, prev, now);
  r.second = predict(delta, now, r.first);
  return r;
}

TrainingRollout training_rollout(const ModelParams& params, const std::map<Index, LatentState>& encoded, Index origin,
                                 int delta, RunContext& ctx) {
  return training_rollout(
      [&](int d, const LatentState& a, const LatentState& b) { return lpm_predict(params, d, a, b, ctx); }, encoded,
      origin, delta);
}

}  // namespace stormlatent
