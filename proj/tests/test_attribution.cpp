#include "doctest.h"

#include "stormlatent/attribution.hpp"
#include "support.hpp"

#include <sstream>
#include <tuple>

using namespace stormlatent;
using testing::random_tensor;

namespace {

AttributionMap toy_map(const std::string& label, std::vector<Array> channels) {
  AttributionMap m;
  m.group = label == "1-8" ? LeadGroup{1, 8} : LeadGroup{9, 16};
  for (std::size_t i = 0; i < channels.size(); ++i) m.channel_names.push_back("c" + std::to_string(i));
  m.channels = std::move(channels);
  return m;
}

Array arr(std::initializer_list<double> v) {
  Array a(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) a[i++] = x;
  return a;
}

}  // namespace

TEST_CASE("integrated_gradients on simple functions") {
  std::mt19937_64 rng(1);
  const Tensor w = random_tensor({3, 4}, rng);
  const Tensor x = random_tensor({3, 4}, rng);
  auto linear = [&](const Tensor& in) { return sum(mul(in, w)); };

  SUBCASE("linear model with zero baseline gives w*x for any path length") {
    for (Index m : {1, 7, 64}) {
      const Array a = integrated_gradients(linear, x, Tensor::zeros(x.shape()), m);
      CHECK((a - w.value() * x.value()).abs().maxCoeff() < 1e-14);
    }
  }
  SUBCASE("input equal to baseline gives zero") {
    CHECK(integrated_gradients(linear, x, x, 16).abs().maxCoeff() == 0.0);
  }
  SUBCASE("right-endpoint error on a cubic matches its closed form") {
    // sum_k 3(k/m)^2 / m = (m+1)(2m+1) / (2m^2), so the relative excess is 3/(2m) + 1/(2m^2)
    auto cubic = [](const Tensor& in) { return sum(mul(in, mul(in, in))); };
    const Tensor zero = Tensor::zeros(x.shape());
    const double delta = cubic(x).item();
    for (Index m : {16, 32, 64, 128}) {
      const double excess = (integrated_gradients(cubic, x, zero, m).sum() - delta) / delta;
      const double md = static_cast<double>(m);
      CHECK(excess == doctest::Approx(1.5 / md + 0.5 / (md * md)).epsilon(1e-9));
    }
  }
  SUBCASE("several inputs") {
    const Tensor y = random_tensor({2}, rng), v = random_tensor({2}, rng);
    auto f = [&](const std::vector<Tensor>& in) { return sum(mul(in[0], w)) + sum(mul(in[1], v)); };
    auto a = integrated_gradients(f, {x, y}, {Tensor::zeros(x.shape()), Tensor::zeros(y.shape())}, 3);
    CHECK((a[1] - v.value() * y.value()).abs().maxCoeff() < 1e-14);
  }
  SUBCASE("invalid arguments") {
    CHECK_THROWS_AS(integrated_gradients(linear, x, Tensor::zeros({4, 3}), 8), std::invalid_argument);
    CHECK_THROWS_AS(integrated_gradients(linear, x, Tensor::zeros(x.shape()), 0), std::invalid_argument);
  }
}

TEST_CASE("attribution on the forecast model") {
  RunConfig cfg = RunConfig::toy_defaults();
  cfg.model = testing::tiny_config();
  cfg.generator.height = cfg.generator.width = 16;
  cfg.generator.coarse_height = cfg.generator.coarse_width = 8;
  cfg.generator.steps = 14;
  cfg.eval.horizon = 8;
  cfg.data.sequences = 10;
  const Splits splits = generate_splits(cfg);
  const NormStats stats = compute_stats(splits.train);
  const auto data = prepare(splits.train, stats);

  ModelParams p = ModelParams::init(cfg.model, 3);
  // move the zero-initialized output layer so the forecast depends on the inputs
  std::mt19937_64 rng(2);
  p.store.at("projector.out.w").mutable_value() = random_tensor(p["projector.out.w"].shape(), rng, -0.3, 0.3).value();
  const std::span<const MultiSourceSample> observed(data[0].norm.data(), 5);

  SUBCASE("channel maps equal input difference times mean path gradient") {
    LatentForecaster model(p);
    const LeadGroup group{1, 4};
    const Index m = 2;
    const AttributionMap map = attribute(model, observed, group, cfg.model, stats.tau_norm(), m);
    REQUIRE(map.channels.size() == 15);
    CHECK(map.channels[0].size() == 5 * 16 * 16);
    CHECK(map.channels[4].size() == 5 * 8 * 8);
    CHECK(map.path_steps == m);

    ForecastTarget f(model, observed, group, stats.tau_norm());
    const auto x = f.inputs();
    REQUIRE(x.size() == 15);
    // gradient of F at alpha*x with respect to input tensor i
    auto grad_at = [&](double alpha, std::size_t i) {
      std::vector<Tensor> pt;
      for (const auto& t : x) pt.push_back(Tensor::from(t.shape(), alpha * t.value()));
      return autodiff_gradient(
          [&](const Tensor& xi) {
            auto q = pt;
            q[i] = xi;
            return f(q);
          },
          pt[i]);
    };
    double worst = 0;
    for (Index step = 0; step < 5; ++step) {
      // qpe_radar channel 1 and reanalysis channel 6 of this observed step
      for (auto [tensor, channel, plane] : {std::tuple{0, 1, 256}, std::tuple{1, 6, 64}}) {
        const std::size_t i = static_cast<std::size_t>(step * 3 + tensor);
        const Array g = (grad_at(0.5, i) + grad_at(1.0, i)) / 2.0;
        const Array expected = (x[i].value() * g).segment(channel * plane, plane);
        const Index map_channel = tensor == 0 ? channel : 4 + channel;
        const Array got = map.channels[static_cast<std::size_t>(map_channel)].segment(step * plane, plane);
        worst = std::max(worst, (got - expected).abs().maxCoeff());
      }
    }
    CHECK(worst < 1e-12);
    CHECK(std::isfinite(map.completeness_error()));
  }
  SUBCASE("an ignored channel receives exactly zero attribution") {
    Tensor& w = p.store.at("encoder.satellite.stem.w");
    const Index out = w.dim(0), in = w.dim(1), kk = w.dim(2) * w.dim(3);
    for (Index o = 0; o < out; ++o) w.mutable_value().segment((o * in + 2) * kk, kk).setZero();
    LatentForecaster model(p);
    const AttributionMap m = attribute(model, observed, {1, 2}, cfg.model, stats.tau_norm(), 4);
    CHECK(m.channel_names[14] == "brightness");
    CHECK(m.channels[14].abs().maxCoeff() == 0.0);
    CHECK(m.channels[13].abs().maxCoeff() > 0.0);
  }
}

TEST_CASE("input_channel_names") {
  ModelConfig c;
  CHECK(input_channel_names(c).size() == 15);
  CHECK(input_channel_names(c).front() == "qpe");
  c.use_satellite = false;
  CHECK(input_channel_names(c).size() == 12);
}

TEST_CASE("aggregate_attribution") {
  SUBCASE("a single nonzero channel ranks first, the others are zero") {
    auto rows = aggregate_attribution({toy_map("1-8", {Array::Zero(4), arr({0.5, -0.5, 0, 0}), Array::Zero(4)})});
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].channel == "c1");
    CHECK(rows[0].rank == 1);
    CHECK(rows[0].mean_abs_attr == 1.0);
    CHECK(rows[1].mean_abs_attr == 0.0);
    CHECK(rows[2].mean_abs_attr == 0.0);
  }
  SUBCASE("2x2 map by hand") {
    // |1| + |-2| + |3| + |-4| = 10 and |0.5| * 4 = 2
    auto rows = aggregate_attribution({toy_map("1-8", {arr({1, -2, 3, -4}), Array::Constant(4, -0.5)})});
    CHECK(rows[0].mean_abs_attr == 10.0);
    CHECK(rows[1].mean_abs_attr == 2.0);
    CHECK(rows[1].rank == 2);
  }
  SUBCASE("two samples average their per-sample aggregates") {
    auto a = toy_map("1-8", {arr({1, 1}), arr({0, 2})});
    auto b = toy_map("1-8", {arr({3, -3}), arr({1, 0})});
    auto rows = aggregate_attribution({a, b});
    const auto ra = aggregate_attribution({a}), rb = aggregate_attribution({b});
    auto find = [](const std::vector<RankedAttribution>& r, const std::string& c) {
      for (const auto& x : r)
        if (x.channel == c) return x.mean_abs_attr;
      return -1.0;
    };
    for (const char* c : {"c0", "c1"}) CHECK(find(rows, c) == doctest::Approx((find(ra, c) + find(rb, c)) / 2));
  }
  SUBCASE("groups are ranked separately and written as csv") {
    auto rows = aggregate_attribution({toy_map("1-8", {arr({1}), arr({2})}), toy_map("9-16", {arr({5}), arr({1})})});
    REQUIRE(rows.size() == 4);
    std::ostringstream os;
    write_attribution_csv(os, rows);
    CHECK(os.str() == "channel_name,lead_group,mean_abs_attr,rank\nc1,1-8,2,1\nc0,1-8,1,2\nc0,9-16,5,1\nc1,9-16,1,2\n");
  }
}
