#include "stormlatent/losses.hpp"

#include <cmath>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <stdexcept>

namespace stormlatent {

std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::mae:
      return "mae";
    case LossVariant::weighted_mae:
      return "weighted_mae";
    case LossVariant::weighted_mae_plain_ce:
      return "weighted_mae_plain_ce";
    case LossVariant::wmce:
      return "wmce";
  }
  return "?";
}

LossVariant loss_variant_from_string(const std::string& s) {
  for (auto v : {LossVariant::mae, LossVariant::weighted_mae, LossVariant::weighted_mae_plain_ce, LossVariant::wmce})
    if (to_string(v) == s) return v;
  throw std::invalid_argument("unknown loss_variant '" + s + "'");
}

namespace {

void same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
}

Tensor constant_like(const Tensor& ref, Array v) { return Tensor::from(ref.shape(), std::move(v)); }

double as_double(const Tensor& t) { return t.defined() ? t.item() : 0.0; }

}  // namespace

Tensor mae_loss(const Tensor& y, const Tensor& y_hat) {
  same_shape(y, y_hat, "mae_loss");
  return mean(abs(y_hat - y.detach()));
}

Tensor mse_loss(const Tensor& y, const Tensor& y_hat) {
  same_shape(y, y_hat, "mse_loss");
  Tensor d = y_hat - y.detach();
  return mean(d * d);
}

Tensor ce_loss(const Tensor& y, const Tensor& y_hat, double tau) {
  same_shape(y, y_hat, "ce_loss");
  const Array event = (y.value() >= tau).cast<double>();
  const double n = static_cast<double>(y.numel());
  Tensor z = y_hat - tau;
  Tensor precip = sum(mul(constant_like(y, event), log_sigmoid(z)));
  Tensor dry = sum(mul(constant_like(y, 1.0 - event), log_sigmoid(-z)));
  return scale(precip + dry, -1.0 / n);
}

double intensity_weight(double y_raw) { return std::log(std::numbers::e + y_raw); }

Tensor PixelLossTerms::total() const {
  Tensor t;
  for (const Tensor* part : {&mae, &ce_precip, &ce_dry}) {
    if (!part->defined()) continue;
    t = t.defined() ? t + *part : *part;
  }
  return t.defined() ? t : Tensor::scalar(0.0);
}

PixelLossTerms pixel_loss(LossVariant variant, const Tensor& y_norm, const Tensor& y_hat, const Array& y_raw,
                          double tau_norm) {
  same_shape(y_norm, y_hat, "pixel_loss");
  if (y_raw.size() != y_norm.numel()) throw std::invalid_argument("pixel_loss: raw truth size mismatch");
  if ((y_raw < 0).any()) throw std::invalid_argument("pixel_loss: negative raw intensity");
  const double n = static_cast<double>(y_norm.numel());
  const Array event = (y_norm.value() >= tau_norm).cast<double>();
  const Array weight = (std::numbers::e + y_raw).log();
  Tensor err = abs(y_hat - y_norm.detach());
  Tensor z = y_hat - tau_norm;

  PixelLossTerms t;
  switch (variant) {
    case LossVariant::mae:
      t.mae = mean(err);
      break;
    case LossVariant::weighted_mae:
      t.mae = scale(sum(mul(constant_like(y_norm, weight), err)), 1.0 / n);
      break;
    case LossVariant::weighted_mae_plain_ce:
      t.mae = scale(sum(mul(constant_like(y_norm, weight), err)), 1.0 / n);
      t.ce_precip = scale(sum(mul(constant_like(y_norm, event), log_sigmoid(z))), -1.0 / n);
      t.ce_dry = scale(sum(mul(constant_like(y_norm, 1.0 - event), log_sigmoid(-z))), -1.0 / n);
      break;
    case LossVariant::wmce: {
      const Array precip_weight = event * weight;
      t.mae = scale(sum(mul(constant_like(y_norm, precip_weight), err)), 1.0 / n);
      t.ce_precip = scale(sum(mul(constant_like(y_norm, precip_weight), log_sigmoid(z))), -1.0 / n);
      t.ce_dry = scale(sum(mul(constant_like(y_norm, 1.0 - event), log_sigmoid(-z))), -1.0 / n);
      break;
    }
  }
  return t;
}

namespace {

Tensor mean_abs_over(const std::vector<Tensor>& a, const std::vector<Tensor>& b, const char* what) {
  if (a.size() != b.size())
    throw std::invalid_argument(std::string(what) + ": " + std::to_string(a.size()) + " targets vs " +
                                std::to_string(b.size()) + " predictions");
  if (a.empty()) throw std::invalid_argument(std::string(what) + ": empty input");
  Tensor total;
  Index count = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    same_shape(a[i], b[i], what);
    Tensor s = sum(abs(b[i] - a[i]));
    total = total.defined() ? total + s : s;
    count += a[i].numel();
  }
  return scale(total, 1.0 / static_cast<double>(count));
}

}  // namespace

Tensor latent_loss(const std::vector<Tensor>& h_true, const std::vector<Tensor>& h_pred) {
  return mean_abs_over(h_true, h_pred, "latent_loss");
}

Tensor recon_loss(const std::vector<Tensor>& x_true, const std::vector<Tensor>& x_recon) {
  std::vector<Tensor> truth;
  truth.reserve(x_true.size());
  for (const auto& t : x_true) truth.push_back(t.detach());
  return mean_abs_over(truth, x_recon, "recon_loss");
}

double LossBreakdown::weighted_total() const {
  return wmce_mae + wmce_ce_precip + wmce_ce_dry + latent + recon_fine + kReanalysisReconWeight * recon_reanalysis +
         recon_satellite;
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  wmce_mae += o.wmce_mae;
  wmce_ce_precip += o.wmce_ce_precip;
  wmce_ce_dry += o.wmce_ce_dry;
  latent += o.latent;
  recon_fine += o.recon_fine;
  recon_reanalysis += o.recon_reanalysis;
  recon_satellite += o.recon_satellite;
  total += o.total;
  return *this;
}

LossBreakdown LossBreakdown::scaled(double s) const {
  LossBreakdown b = *this;
  for (double* f : {&b.wmce_mae, &b.wmce_ce_precip, &b.wmce_ce_dry, &b.latent, &b.recon_fine, &b.recon_reanalysis,
                    &b.recon_satellite, &b.total})
    *f *= s;
  return b;
}

Tensor overall_loss(const LossTerms& terms, LossBreakdown* breakdown) {
  Tensor total = terms.pixel.total();
  auto add_term = [&total](const Tensor& t, double w) {
    if (t.defined()) total = total + (w == 1.0 ? t : scale(t, w));
  };
  add_term(terms.latent, 1.0);
  add_term(terms.recon_fine, 1.0);
  add_term(terms.recon_reanalysis, kReanalysisReconWeight);
  add_term(terms.recon_satellite, 1.0);
  if (breakdown) {
    breakdown->wmce_mae = as_double(terms.pixel.mae);
    breakdown->wmce_ce_precip = as_double(terms.pixel.ce_precip);
    breakdown->wmce_ce_dry = as_double(terms.pixel.ce_dry);
    breakdown->latent = as_double(terms.latent);
    breakdown->recon_fine = as_double(terms.recon_fine);
    breakdown->recon_reanalysis = as_double(terms.recon_reanalysis);
    breakdown->recon_satellite = as_double(terms.recon_satellite);
    breakdown->total = total.item();
  }
  return total;
}

void write_loss_csv_header(std::ostream& os) {
  os << "step,wmce_mae,wmce_ce_precip,wmce_ce_dry,latent,recon_fine,recon_reanalysis,recon_satellite,total\n";
}

void write_loss_csv_row(std::ostream& os, long step, const LossBreakdown& b) {
  os << step << std::setprecision(17) << ',' << b.wmce_mae << ',' << b.wmce_ce_precip << ',' << b.wmce_ce_dry << ','
     << b.latent << ',' << b.recon_fine << ',' << b.recon_reanalysis << ',' << b.recon_satellite << ',' << b.total
     << '\n';
}

}  // namespace stormlatent
