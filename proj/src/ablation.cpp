#include "stormlatent/ablation.hpp"

#include "stormlatent/parallel.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace stormlatent {

std::vector<std::string> ablation_suites() { return {"loss", "space", "sampling"}; }

std::vector<AblationVariant> ablation_variants(const std::string& suite, const RunConfig& base) {
  std::vector<AblationVariant> out;
  if (suite == "loss") {
    for (auto v : {LossVariant::mae, LossVariant::weighted_mae, LossVariant::weighted_mae_plain_ce, LossVariant::wmce}) {
      RunConfig c = base;
      c.train.loss_variant = v;
      out.push_back({to_string(v), c});
    }
  } else if (suite == "space") {
    for (auto s : {IterationSpace::latent, IterationSpace::physical}) {
      RunConfig c = base;
      c.train.iteration_space = s;
      out.push_back({to_string(s), c});
    }
  } else if (suite == "sampling") {
    RunConfig full = base, is = base;
    full.train.importance_sampling = false;
    is.train.importance_sampling = true;
    out.push_back({"full", full});
    out.push_back({"importance", is});
  } else {
    throw ConfigError("unknown ablation suite '" + suite + "' (expected loss, space or sampling)", 0);
  }
  return out;
}

std::vector<Sequence> held_out_sequences(const RunConfig& cfg, Index n) {
  std::vector<Sequence> out(static_cast<std::size_t>(std::max<Index>(n, 0)));
  parallel_for(out.size(), [&](std::size_t i) {
    out[i] = generate_sequence(sequence_seed(cfg.data.seed, cfg.data.sequences + static_cast<Index>(i)), cfg.generator);
  });
  return out;
}

std::string to_string(CheckpointChoice c) { return c == CheckpointChoice::best ? "best" : "last"; }

CheckpointChoice checkpoint_choice_from_string(const std::string& s) {
  if (s == "best") return CheckpointChoice::best;
  if (s == "last") return CheckpointChoice::last;
  throw ConfigError("unknown checkpoint '" + s + "' (expected best or last)", 0);
}

VariantSummary run_variant(const AblationVariant& v, const Splits& splits, const std::vector<Sequence>& eval_set,
                           const std::filesystem::path& dir, const std::function<void(const EpochLog&)>& on_epoch) {
  const auto t0 = std::chrono::steady_clock::now();
  FitOptions options;
  options.out_dir = dir;
  options.on_epoch = on_epoch;
  RunResult r = train_run(v.config, splits, options);

  VariantSummary s;
  s.name = v.name;
  s.best_epoch = r.fit.best_epoch;
  s.train_sequences = r.selected_sequences;
  Forecaster& model = *r.trained.model;
  s.step_macs = model.step_macs();
  const auto data = prepare(eval_set, r.trained.stats);
  const EvalConfig& e = v.config.eval;
  model.store().assign(r.fit.last);
  s.last = evaluate(model, data, r.trained.stats, e.horizon, e.thresholds, e.hss_standard);
  model.store().assign(r.fit.best);
  s.best = evaluate(model, data, r.trained.stats, e.horizon, e.thresholds, e.hss_standard);
  s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return s;
}

double lead_mean(const Evaluation& e, std::optional<double> Scores::*which, Index first, Index last) {
  if (last > static_cast<Index>(e.tables.size())) return std::numeric_limits<double>::quiet_NaN();
  return mean_score(e, kEventThreshold, first, last, which).value_or(std::numeric_limits<double>::quiet_NaN());
}

namespace {

void put(std::ostream& os, const std::optional<double>& v) {
  if (v) {
    os << *v;
  } else {
    os << "NA";
  }
}

void put(std::ostream& os, double v) {
  if (std::isnan(v)) {
    os << "NA";
  } else {
    os << v;
  }
}

}  // namespace

void write_ablation_csv(std::ostream& os, const std::vector<VariantSummary>& runs, CheckpointChoice c) {
  os << "variant,lead_step,threshold,POD,CSI,HSS,FBI\n" << std::setprecision(10);
  for (const auto& run : runs) {
    const Evaluation& e = run.at(c);
    for (const auto& r : e.rows) {
      os << run.name << ',' << r.lead_step << ',' << r.threshold << ',';
      put(os, r.s.pod);
      os << ',';
      put(os, r.s.csi);
      os << ',';
      put(os, r.s.hss);
      os << ',';
      put(os, r.s.fbi);
      os << '\n';
    }
  }
}

void write_ablation_summary(std::ostream& os, const std::vector<VariantSummary>& runs) {
  os << "variant,checkpoint,best_epoch,train_sequences,step_macs,seconds,pod_1_6,csi_1_6,csi_24,pod_13_24\n"
     << std::setprecision(10);
  for (const auto& run : runs) {
    for (auto c : {CheckpointChoice::last, CheckpointChoice::best}) {
      const Evaluation& e = run.at(c);
      os << run.name << ',' << to_string(c) << ',' << run.best_epoch << ',' << run.train_sequences << ','
         << run.step_macs << ',' << run.seconds << ',';
      put(os, lead_mean(e, &Scores::pod, 1, 6));
      os << ',';
      put(os, lead_mean(e, &Scores::csi, 1, 6));
      os << ',';
      put(os, lead_mean(e, &Scores::csi, 24, 24));
      os << ',';
      put(os, lead_mean(e, &Scores::pod, 13, 24));
      os << '\n';
    }
  }
}

}  // namespace stormlatent
