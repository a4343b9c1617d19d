#include "stormlatent/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <stdexcept>

namespace stormlatent {

std::vector<Array> integrated_gradients(const MultiInputFunction& f, const std::vector<Tensor>& x,
                                        const std::vector<Tensor>& baseline, Index m) {
  if (m < 1) throw std::invalid_argument("integrated_gradients: path steps must be >= 1");
  if (x.size() != baseline.size()) throw std::invalid_argument("integrated_gradients: input/baseline count mismatch");
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i].shape() != baseline[i].shape())
      throw std::invalid_argument("integrated_gradients: baseline shape " + shape_string(baseline[i].shape()) +
                                  " does not match input " + shape_string(x[i].shape()));
  std::vector<Array> diff, acc;
  for (std::size_t i = 0; i < x.size(); ++i) {
    diff.push_back(x[i].value() - baseline[i].value());
    acc.push_back(Array::Zero(x[i].numel()));
  }
  for (Index k = 1; k <= m; ++k) {
    const double alpha = static_cast<double>(k) / static_cast<double>(m);
    std::vector<Tensor> point;
    for (std::size_t i = 0; i < x.size(); ++i)
      point.push_back(Tensor::from(x[i].shape(), baseline[i].value() + alpha * diff[i], true));
    Tensor y = f(point);
    if (y.numel() != 1) throw std::invalid_argument("integrated_gradients: target must be scalar");
    y.backward();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const Array g = point[i].grad();
      if (g.size()) acc[i] += g;
    }
  }
  for (std::size_t i = 0; i < x.size(); ++i) acc[i] = diff[i] * acc[i] / static_cast<double>(m);
  return acc;
}

Array integrated_gradients(const ScalarFunction& f, const Tensor& x, const Tensor& baseline, Index m) {
  return integrated_gradients([&](const std::vector<Tensor>& in) { return f(in[0]); }, {x}, {baseline}, m)[0];
}

std::string LeadGroup::label() const { return std::to_string(first) + "-" + std::to_string(last); }

std::vector<std::string> input_channel_names(const ModelConfig& c) {
  std::vector<std::string> names{"qpe", "radar_low", "radar_mid", "radar_high", "u_wind", "v_wind", "humidity_low",
                                 "temperature_low", "humidity_mid", "temperature_mid", "geopotential",
                                 "vertical_velocity"};
  if (c.qpe_channels != kQpeRadarChannels || c.reanalysis_channels != kReanalysisChannels)
    throw std::invalid_argument("channel names assume the generator's channel layout");
  if (c.use_satellite) {
    if (c.satellite_channels != kSatelliteChannels)
      throw std::invalid_argument("channel names assume the generator's channel layout");
    for (const char* s : {"cloud_lead1", "cloud_lead2", "brightness"}) names.push_back(s);
  }
  return names;
}

double AttributionMap::total() const {
  double s = 0;
  for (const auto& c : channels) s += c.sum();
  return s;
}

double AttributionMap::completeness_error() const {
  const double delta = target - baseline_target;
  return std::abs(total() - delta) / std::abs(delta);
}

ForecastTarget::ForecastTarget(const Forecaster& model, std::span<const MultiSourceSample> observed, LeadGroup group,
                               double tau_norm)
    : model_(model), observed_(observed.begin(), observed.end()), group_(group) {
  if (group.first < 1 || group.last < group.first)
    throw std::invalid_argument("invalid lead group " + group.label());
  schedule_ = build_hta_schedule(group.last);
  NoGradGuard no_grad;
  const auto y = model_.predict_intensity(observed_, schedule_, group_.first);
  std::vector<Array> masks;
  double count = 0;
  for (Index l = group_.first; l <= group_.last; ++l) {
    const Array& v = y[static_cast<std::size_t>(l - 1)].value();
    masks.push_back((v >= tau_norm).cast<double>());
    count += masks.back().sum();
  }
  if (count == 0) {
    for (auto& m : masks) m.setOnes();
    count = static_cast<double>(masks.size() * static_cast<std::size_t>(masks[0].size()));
  }
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const Shape& shape = y[static_cast<std::size_t>(group_.first - 1) + i].shape();
    masks_.push_back(Tensor::from(shape, masks[i] / count));
  }
}

std::vector<Tensor> ForecastTarget::inputs() const {
  std::vector<Tensor> out;
  for (const auto& s : observed_) {
    out.push_back(s.qpe_radar);
    out.push_back(s.reanalysis);
    if (s.has_satellite()) out.push_back(s.satellite);
  }
  return out;
}

Tensor ForecastTarget::operator()(const std::vector<Tensor>& inputs) const {
  std::vector<MultiSourceSample> samples = observed_;
  std::size_t k = 0;
  for (auto& s : samples) {
    s.qpe_radar = inputs.at(k++);
    s.reanalysis = inputs.at(k++);
    if (s.has_satellite()) s.satellite = inputs.at(k++);
  }
  if (k != inputs.size()) throw std::invalid_argument("ForecastTarget: unexpected input count");
  const auto y = model_.predict_intensity(samples, schedule_, group_.first);
  Tensor total;
  for (std::size_t i = 0; i < masks_.size(); ++i) {
    Tensor part = sum(mul(y[static_cast<std::size_t>(group_.first - 1) + i], masks_[i]));
    total = total.defined() ? total + part : part;
  }
  return total;
}

AttributionMap attribute(const Forecaster& model, std::span<const MultiSourceSample> observed, LeadGroup group,
                         const ModelConfig& config, double tau_norm, Index path_steps) {
  ForecastTarget f(model, observed, group, tau_norm);
  const auto x = f.inputs();
  std::vector<Tensor> baseline;
  for (const auto& t : x) baseline.push_back(Tensor::zeros(t.shape()));
  const auto attr = integrated_gradients(std::cref(f), x, baseline, path_steps);

  AttributionMap map;
  map.group = group;
  map.path_steps = path_steps;
  map.channel_names = input_channel_names(config);
  {
    NoGradGuard no_grad;
    map.target = f(x).item();
    map.baseline_target = f(baseline).item();
  }
  const Index steps = static_cast<Index>(observed.size());
  const Index fine = config.height * config.width;
  const Index coarse = config.coarse_height * config.coarse_width;
  auto add_modality = [&](Index channels, Index plane, std::size_t offset, std::size_t stride) {
    for (Index c = 0; c < channels; ++c) {
      Array a = Array::Zero(steps * plane);
      for (Index s = 0; s < steps; ++s) {
        const std::size_t idx = static_cast<std::size_t>(s) * stride + offset;
        if (idx < attr.size() && attr[idx].size() == channels * plane)
          a.segment(s * plane, plane) = attr[idx].segment(c * plane, plane);
      }
      map.channels.push_back(std::move(a));
    }
  };
  const std::size_t stride = x.size() / observed.size();
  add_modality(config.qpe_channels, fine, 0, stride);
  add_modality(config.reanalysis_channels, coarse, 1, stride);
  if (config.use_satellite) {
    if (stride == 3) {
      add_modality(config.satellite_channels, fine, 2, stride);
    } else {
      for (Index c = 0; c < config.satellite_channels; ++c) map.channels.push_back(Array::Zero(steps * fine));
    }
  }
  return map;
}

std::vector<RankedAttribution> aggregate_attribution(const std::vector<AttributionMap>& maps) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const AttributionMap*>> by_group;
  for (const auto& m : maps) {
    const std::string g = m.group.label();
    if (!by_group.count(g)) order.push_back(g);
    by_group[g].push_back(&m);
  }
  std::vector<RankedAttribution> out;
  for (const auto& g : order) {
    const auto& members = by_group[g];
    const auto& names = members.front()->channel_names;
    std::vector<RankedAttribution> rows;
    for (std::size_t c = 0; c < names.size(); ++c) {
      double s = 0;
      for (const auto* m : members) {
        if (m->channels.size() != names.size()) throw std::invalid_argument("attribution maps disagree on channels");
        s += m->channels[c].abs().sum();
      }
      rows.push_back({names[c], g, s / static_cast<double>(members.size()), 0});
    }
    std::vector<std::size_t> idx(rows.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return rows[a].mean_abs_attr > rows[b].mean_abs_attr; });
    for (std::size_t r = 0; r < idx.size(); ++r) rows[idx[r]].rank = static_cast<Index>(r) + 1;
    for (std::size_t r = 0; r < idx.size(); ++r) out.push_back(rows[idx[r]]);
  }
  return out;
}

void write_attribution_csv(std::ostream& os, const std::vector<RankedAttribution>& rows) {
  os << "channel_name,lead_group,mean_abs_attr,rank\n";
  const auto precision = os.precision(10);
  for (const auto& r : rows) os << r.channel << ',' << r.lead_group << ',' << r.mean_abs_attr << ',' << r.rank << '\n';
  os.precision(precision);
}

}  // namespace stormlatent
