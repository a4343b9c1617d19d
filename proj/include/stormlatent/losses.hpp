#pragma once

// Pixel losses, the weighted MAE + cross-entropy combination (WMCE), latent
// and reconstruction L1 terms, and the overall weighted sum.

#include "stormlatent/tensor.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace stormlatent {

enum class LossVariant { mae, weighted_mae, weighted_mae_plain_ce, wmce };
std::string to_string(LossVariant v);
LossVariant loss_variant_from_string(const std::string& s);

inline constexpr double kReanalysisReconWeight = 0.1;

// Mean absolute / squared error over all pixels. `y` is treated as data.
Tensor mae_loss(const Tensor& y, const Tensor& y_hat);
Tensor mse_loss(const Tensor& y, const Tensor& y_hat);
// Binary cross-entropy on sigmoid(y_hat - tau) with events y >= tau.
Tensor ce_loss(const Tensor& y, const Tensor& y_hat, double tau);

// w = ln(e + y_raw)
double intensity_weight(double y_raw);

struct PixelLossTerms {
  Tensor mae;        // regression term
  Tensor ce_precip;  // -(1/n) sum_precip w log sigma(y_hat - tau)
  Tensor ce_dry;     // -(1/n) sum_dry log(1 - sigma(y_hat - tau))
  Tensor total() const;
};

// Terms of the selected loss variant. y_norm/y_hat are normalized intensity,
// y_raw the same truth in mm/h (used only for weights).
PixelLossTerms pixel_loss(LossVariant variant, const Tensor& y_norm, const Tensor& y_hat, const Array& y_raw,
                          double tau_norm);
inline PixelLossTerms wmce_loss(const Tensor& y_norm, const Tensor& y_hat, const Array& y_raw, double tau_norm) {
  return pixel_loss(LossVariant::wmce, y_norm, y_hat, y_raw, tau_norm);
}

// Mean |h_true - h_pred| over every element of every step.
Tensor latent_loss(const std::vector<Tensor>& h_true, const std::vector<Tensor>& h_pred);
// Mean |x_true - x_recon| over every element of every step of one modality.
Tensor recon_loss(const std::vector<Tensor>& x_true, const std::vector<Tensor>& x_recon);

struct LossBreakdown {
  double wmce_mae = 0;
  double wmce_ce_precip = 0;
  double wmce_ce_dry = 0;
  double latent = 0;
  double recon_fine = 0;
  double recon_reanalysis = 0;
  double recon_satellite = 0;
  double total = 0;

  // All weights 1 except the reanalysis reconstruction.
  double weighted_total() const;
  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown scaled(double s) const;
  bool operator==(const LossBreakdown&) const = default;
};

// Graph-level components; undefined tensors count as zero.
struct LossTerms {
  PixelLossTerms pixel;
  Tensor latent;
  Tensor recon_fine;
  Tensor recon_reanalysis;
  Tensor recon_satellite;
};

// Weighted sum as a differentiable scalar; fills `breakdown` if given.
Tensor overall_loss(const LossTerms& terms, LossBreakdown* breakdown = nullptr);

void write_loss_csv_header(std::ostream& os);
void write_loss_csv_row(std::ostream& os, long step, const LossBreakdown& b);

}  // namespace stormlatent
