#include "stormlatent/physical.hpp"

#include <random>

namespace stormlatent {

Index physical_channels(const ModelConfig& c) {
  return c.qpe_channels + c.reanalysis_channels + (c.use_satellite ? c.satellite_channels : 0);
}

Tensor physical_state(const MultiSourceSample& s, const ModelConfig& c) {
  std::vector<Tensor> parts{s.qpe_radar, resize_bilinear(s.reanalysis, c.height, c.width)};
  if (c.use_satellite)
    parts.push_back(s.has_satellite() ? s.satellite : Tensor::zeros({c.satellite_channels, c.height, c.width}));
  return concat(parts, 0);
}

LpmShape physical_lpm_shape(const ModelConfig& c) {
  const Index channels = physical_channels(c);
  const Index step_channels = channels + c.time_channels + c.const_channels;
  return {2 * step_channels,
          c.latent_channels,
          channels,
          c.lpm_blocks,
          {c.latent_channels, c.height, c.width, c.vit_patch, c.vit_width, c.vit_heads, c.vit_blocks}};
}

PhysicalForecaster::PhysicalForecaster(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Initializer init(seed);
  store_.add("physical.const_embed", init.uniform({config_.const_channels, config_.height, config_.width},
                                                  config_.const_channels));
  for (int d : kIntervals) add_lpm(store_, init, "physical." + lpm_prefix(d), physical_lpm_shape(config_));
}

LatentState PhysicalForecaster::predict(int delta, const LatentState& a, const LatentState& b,
                                        RunContext& ctx) const {
  const std::string prefix = "physical." + lpm_prefix(delta);
  if (b.time_index - a.time_index != delta)
    throw std::invalid_argument(prefix + ": inputs are not spaced by " + std::to_string(delta));
  const Tensor& ce = store_["physical.const_embed"];
  const Index h = config_.height, w = config_.width;
  Tensor stacked = concat({a.value, time_embedding(a.time_index, config_.time_channels, h, w), ce, b.value,
                           time_embedding(b.time_index, config_.time_channels, h, w), ce},
                          0);
  return {lpm_forward(store_, prefix, physical_lpm_shape(config_), stacked, ctx), b.time_index + delta};
}

namespace {

std::uint64_t noise_seed(std::uint64_t base, std::size_t k) {
  std::mt19937_64 rng(base ^ (0x9e3779b97f4a7c15ULL * (k + 1)));
  return rng();
}

}  // namespace

Tensor PhysicalForecaster::window_loss(const PreparedSequence& seq, const Window& w, const TrainConfig& cfg,
                                       const NormStats& stats, RunContext& ctx, LossBreakdown* breakdown) const {
  const Index o = w.origin;
  const int d = w.delta;
  if (o - d < 0 || o + 2 * d >= seq.size())
    throw std::invalid_argument("window at origin " + std::to_string(o) + " exceeds the sequence");
  auto state = [&](Index step, bool noisy, std::size_t k) {
    const auto& clean = seq.norm[static_cast<std::size_t>(step)];
    const MultiSourceSample in = noisy ? add_noise(clean, cfg.noise_sigma, noise_seed(w.noise_seed, k)) : clean;
    return LatentState{physical_state(in, config_), step};
  };
  const LatentState prev = state(o - d, true, 0);
  const LatentState now = state(o, true, 1);
  const LatentState p1 = predict(d, prev, now, ctx);
  const LatentState p2 = predict(d, now, p1, ctx);

  LossTerms terms;
  std::vector<Tensor> rest_true, rest_pred;
  const Index C = physical_channels(config_);
  for (const auto& [pred, step] : {std::pair{&p1, o + d}, std::pair{&p2, o + 2 * d}}) {
    const auto idx = static_cast<std::size_t>(step);
    PixelLossTerms p = pixel_loss(cfg.loss_variant, seq.norm[idx].target, slice(pred->value, 0, 0, 1),
                                  seq.raw_target[idx], stats.tau_norm());
    for (auto [acc, part] : {std::pair{&terms.pixel.mae, &p.mae}, std::pair{&terms.pixel.ce_precip, &p.ce_precip},
                             std::pair{&terms.pixel.ce_dry, &p.ce_dry}}) {
      if (part->defined()) *acc = acc->defined() ? *acc + *part : *part;
    }
    rest_true.push_back(slice(state(step, false, 0).value, 0, 1, C));
    rest_pred.push_back(slice(pred->value, 0, 1, C));
  }
  // The remaining channels stand in for the latent supervision.
  terms.latent = recon_loss(rest_true, rest_pred);
  return overall_loss(terms, breakdown);
}

std::vector<LatentState> PhysicalForecaster::rollout_states(std::span<const MultiSourceSample> observed,
                                                            const HtaSchedule& schedule) const {
  RunContext ctx = RunContext::eval();
  std::vector<LatentState> states;
  for (const auto& s : observed) states.push_back({physical_state(s, config_), s.time_index});
  return rollout([&](int d, const LatentState& a, const LatentState& b) { return predict(d, a, b, ctx); }, states,
                 schedule);
}

std::vector<Tensor> PhysicalForecaster::predict_intensity(std::span<const MultiSourceSample> observed,
                                                          const HtaSchedule& schedule, Index first_lead) const {
  const auto states = rollout_states(observed, schedule);
  std::vector<Tensor> out(states.size());
  for (std::size_t l = 0; l < states.size(); ++l)
    if (static_cast<Index>(l) + 1 >= first_lead) out[l] = slice(states[l].value, 0, 0, 1);
  return out;
}

std::uint64_t PhysicalForecaster::step_macs() const {
  NoGradGuard no_grad;
  RunContext ctx = RunContext::eval();
  LatentState a{Tensor::zeros({physical_channels(config_), config_.height, config_.width}), 0};
  LatentState b{a.value, 1};
  MacCounter counter;
  predict(1, a, b, ctx);
  return counter.count();
}

}  // namespace stormlatent
