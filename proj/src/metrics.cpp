#include "stormlatent/metrics.hpp"

#include "stormlatent/parallel.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>
#include <stdexcept>

namespace stormlatent {

Contingency& Contingency::operator+=(const Contingency& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  tn += o.tn;
  return *this;
}

Contingency contingency(const Array& pred, const Array& truth, double threshold) {
  if (pred.size() != truth.size())
    throw std::invalid_argument("contingency: " + std::to_string(pred.size()) + " predictions vs " +
                                std::to_string(truth.size()) + " truths");
  Contingency t;
  for (Index i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= threshold;
    const bool o = truth[i] >= threshold;
    if (p && o) {
      ++t.tp;
    } else if (p) {
      ++t.fp;
    } else if (o) {
      ++t.fn;
    } else {
      ++t.tn;
    }
  }
  return t;
}

Contingency contingency(const Tensor& pred, const Tensor& truth, double threshold) {
  if (pred.shape() != truth.shape())
    throw std::invalid_argument("contingency: shape mismatch " + shape_string(pred.shape()) + " vs " +
                                shape_string(truth.shape()));
  return contingency(pred.value(), truth.value(), threshold);
}

Scores scores(const Contingency& t, bool hss_standard) {
  const double tp = static_cast<double>(t.tp), fp = static_cast<double>(t.fp);
  const double fn = static_cast<double>(t.fn), tn = static_cast<double>(t.tn);
  Scores s;
  if (t.tp + t.fn > 0) {
    s.pod = tp / (tp + fn);
    s.fbi = (tp + fp) / (tp + fn);
  }
  if (t.tp + t.fn + t.fp > 0) s.csi = tp / (tp + fn + fp);
  const double denom = (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn);
  const double hss = denom == 0.0 ? 0.0 : (tp * tn - fn * fp) / denom;
  s.hss = hss_standard ? 2.0 * hss : hss;
  return s;
}

Evaluation evaluate_run(const std::vector<std::vector<Array>>& predictions,
                        const std::vector<std::vector<Array>>& truths, const std::vector<double>& thresholds,
                        bool hss_standard) {
  if (predictions.size() != truths.size())
    throw std::invalid_argument("evaluate_run: sequence count mismatch");
  if (predictions.empty()) throw std::invalid_argument("evaluate_run: no sequences");
  const std::size_t leads = truths.front().size();
  for (std::size_t s = 0; s < truths.size(); ++s) {
    if (predictions[s].size() != leads || truths[s].size() != leads)
      throw std::invalid_argument("evaluate_run: horizon mismatch in sequence " + std::to_string(s));
  }
  Evaluation e;
  e.thresholds = thresholds;
  e.tables.assign(leads, std::vector<Contingency>(thresholds.size()));

  // Per-sequence tables in parallel, merged in sequence order.
  std::vector<std::vector<std::vector<Contingency>>> per_seq(predictions.size());
  parallel_for(static_cast<Index>(predictions.size()), [&](Index s) {
    auto& mine = per_seq[static_cast<std::size_t>(s)];
    mine.assign(leads, std::vector<Contingency>(thresholds.size()));
    for (std::size_t l = 0; l < leads; ++l)
      for (std::size_t k = 0; k < thresholds.size(); ++k)
        mine[l][k] = contingency(predictions[static_cast<std::size_t>(s)][l], truths[static_cast<std::size_t>(s)][l],
                                 thresholds[k]);
  });
  for (const auto& seq : per_seq)
    for (std::size_t l = 0; l < leads; ++l)
      for (std::size_t k = 0; k < thresholds.size(); ++k) e.tables[l][k] += seq[l][k];

  for (std::size_t l = 0; l < leads; ++l)
    for (std::size_t k = 0; k < thresholds.size(); ++k)
      e.rows.push_back({static_cast<Index>(l + 1), thresholds[k], scores(e.tables[l][k], hss_standard)});

  for (std::size_t k = 0; k < thresholds.size(); ++k) {
    ScoreRow m{0, thresholds[k], {}};
    for (auto field : {&Scores::pod, &Scores::csi, &Scores::hss, &Scores::fbi})
      m.s.*field = mean_score(e, thresholds[k], 1, static_cast<Index>(leads), field);
    e.means.push_back(m);
  }
  return e;
}

std::optional<double> mean_score(const Evaluation& e, double threshold, Index first, Index last,
                                 std::optional<double> Scores::*which) {
  double total = 0;
  int n = 0;
  for (const auto& r : e.rows) {
    if (r.threshold != threshold || r.lead_step < first || r.lead_step > last) continue;
    if (const auto& v = r.s.*which) {
      total += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return total / n;
}

namespace {

void put(std::ostream& os, const std::optional<double>& v) {
  if (v) {
    os << *v;
  } else {
    os << "NA";
  }
}

void put_row(std::ostream& os, const std::string& lead, const ScoreRow& r) {
  os << lead << ',' << r.threshold << ',';
  put(os, r.s.pod);
  os << ',';
  put(os, r.s.csi);
  os << ',';
  put(os, r.s.hss);
  os << ',';
  put(os, r.s.fbi);
  os << '\n';
}

}  // namespace

void write_metrics_csv(std::ostream& os, const Evaluation& e) {
  os << "lead_step,threshold,POD,CSI,HSS,FBI\n" << std::setprecision(10);
  for (const auto& r : e.rows) put_row(os, std::to_string(r.lead_step), r);
  for (const auto& r : e.means) put_row(os, "mean", r);
}

}  // namespace stormlatent
