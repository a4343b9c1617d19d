#pragma once

// Identical-seed comparison runs: loss variants, iteration space, and
// importance sampling.

#include "stormlatent/train.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace stormlatent {

struct AblationVariant {
  std::string name;
  RunConfig config;
};

// suite: "loss" (mae, weighted_mae, weighted_mae_plain_ce, wmce), "space"
// (latent, physical) or "sampling" (full, importance). Only the varied key differs.
std::vector<AblationVariant> ablation_variants(const std::string& suite, const RunConfig& base);
std::vector<std::string> ablation_suites();

// Sequences count..count+n-1 of the dataset seed stream: disjoint from the
// generated splits, drawn from the same generator.
std::vector<Sequence> held_out_sequences(const RunConfig& cfg, Index n);

enum class CheckpointChoice { best, last };
std::string to_string(CheckpointChoice c);
CheckpointChoice checkpoint_choice_from_string(const std::string& s);

struct VariantSummary {
  std::string name;
  Index best_epoch = 0;
  std::size_t train_sequences = 0;
  std::uint64_t step_macs = 0;
  double seconds = 0;
  Evaluation best, last;
  const Evaluation& at(CheckpointChoice c) const { return c == CheckpointChoice::best ? best : last; }
};

// Trains one variant (writing the run under `dir` if nonempty) and scores both
// checkpoints on `eval_set`.
VariantSummary run_variant(const AblationVariant& v, const Splits& splits, const std::vector<Sequence>& eval_set,
                           const std::filesystem::path& dir = {}, const std::function<void(const EpochLog&)>& on_epoch = {});

// Mean score over leads [first,last] at the event threshold; undefined gives NaN.
double lead_mean(const Evaluation& e, std::optional<double> Scores::*which, Index first, Index last);

// variant,lead_step,threshold,POD,CSI,HSS,FBI
void write_ablation_csv(std::ostream& os, const std::vector<VariantSummary>& runs, CheckpointChoice c);
// variant,checkpoint,best_epoch,train_sequences,step_macs,seconds,pod_1_6,csi_1_6,csi_24,pod_13_24
void write_ablation_summary(std::ostream& os, const std::vector<VariantSummary>& runs);

}  // namespace stormlatent
