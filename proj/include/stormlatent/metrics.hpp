#pragma once

// Thresholded verification: contingency tables and POD/CSI/HSS/FBI.

#include "stormlatent/tensor.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

namespace stormlatent {

struct Contingency {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::int64_t total() const { return tp + fp + fn + tn; }
  Contingency& operator+=(const Contingency& o);
  bool operator==(const Contingency&) const = default;
};

// Event rule: value >= threshold.
Contingency contingency(const Array& pred, const Array& truth, double threshold);
Contingency contingency(const Tensor& pred, const Tensor& truth, double threshold);

struct Scores {
  std::optional<double> pod, csi, hss, fbi;  // empty when undefined
};

// HSS as (TP*TN - FN*FP) / ((TP+FN)(FN+TN) + (TP+FP)(FP+TN)); `hss_standard`
// doubles it. A zero HSS denominator gives 0.
Scores scores(const Contingency& t, bool hss_standard = false);

struct ScoreRow {
  Index lead_step = 0;  // 0 marks the all-lead mean row
  double threshold = 0;
  Scores s;
};

inline const std::vector<double> kDefaultThresholds{0.2, 1.0, 2.0, 4.0, 8.0};

// predictions[seq][lead] and truths[seq][lead] are intensity grids in mm/h.
// Tables are pooled over sequences per (lead, threshold) and then scored.
struct Evaluation {
  std::vector<std::vector<Contingency>> tables;  // [lead][threshold]
  std::vector<double> thresholds;
  std::vector<ScoreRow> rows;   // one per (lead, threshold)
  std::vector<ScoreRow> means;  // per threshold, mean over leads of defined scores
};

Evaluation evaluate_run(const std::vector<std::vector<Array>>& predictions,
                        const std::vector<std::vector<Array>>& truths,
                        const std::vector<double>& thresholds = kDefaultThresholds, bool hss_standard = false);

// Mean of a score over leads [first,last] (1-based) at one threshold; undefined values skipped.
std::optional<double> mean_score(const Evaluation& e, double threshold, Index first, Index last,
                                 std::optional<double> Scores::*which);

// lead_step,threshold,POD,CSI,HSS,FBI  ("NA" for undefined). Mean rows use lead_step "mean".
void write_metrics_csv(std::ostream& os, const Evaluation& e);

}  // namespace stormlatent
