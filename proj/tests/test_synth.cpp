#include "doctest.h"

#include "stormlatent/synth.hpp"

#include <cmath>
#include <filesystem>
#include <random>

using namespace stormlatent;

namespace {

GeneratorConfig small_config() {
  GeneratorConfig cfg;
  cfg.steps = 12;
  return cfg;
}

bool same_tensor(const Tensor& a, const Tensor& b) {
  if (a.defined() != b.defined()) return false;
  if (!a.defined()) return true;
  return a.shape() == b.shape() && (a.value() == b.value()).all();
}

bool same_sequence(const Sequence& a, const Sequence& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t t = 0; t < a.samples.size(); ++t) {
    const auto& x = a.samples[t];
    const auto& y = b.samples[t];
    if (x.time_index != y.time_index || !same_tensor(x.qpe_radar, y.qpe_radar) ||
        !same_tensor(x.reanalysis, y.reanalysis) || !same_tensor(x.satellite, y.satellite) ||
        !same_tensor(x.target, y.target))
      return false;
  }
  return true;
}

std::pair<double, double> centroid(const Tensor& grid) {
  const Index H = grid.dim(1), W = grid.dim(2);
  double m = 0, mx = 0, my = 0;
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      const double v = grid.value()[y * W + x];
      m += v;
      mx += v * x;
      my += v * y;
    }
  return {mx / m, my / m};
}

}  // namespace

TEST_CASE("generate_sequence") {
  SUBCASE("same seed twice is bit-identical") {
    auto a = generate_sequence(42, small_config());
    auto b = generate_sequence(42, small_config());
    CHECK(same_sequence(a, b));
    auto c = generate_sequence(43, small_config());
    CHECK_FALSE(same_sequence(a, c));
  }
  SUBCASE("shapes, nonnegative intensity and finiteness") {
    auto s = generate_sequence(7, small_config());
    REQUIRE(s.size() == 12);
    for (const auto& x : s.samples) {
      CHECK(x.qpe_radar.shape() == Shape{4, 64, 64});
      CHECK(x.reanalysis.shape() == Shape{8, 16, 16});
      CHECK(x.satellite.shape() == Shape{3, 64, 64});
      CHECK(x.target.shape() == Shape{1, 64, 64});
      CHECK((x.target.value() >= 0).all());
      CHECK(x.qpe_radar.value().allFinite());
      CHECK(x.reanalysis.value().allFinite());
      CHECK(x.satellite.value().allFinite());
      CHECK((x.target.value() == x.qpe_radar.value().head(64 * 64)).all());
    }
    for (Index t = 0; t < s.size(); ++t) CHECK(s.samples[static_cast<std::size_t>(t)].time_index == t);
  }
  SUBCASE("satellite stack is optional") {
    auto cfg = small_config();
    cfg.include_satellite = false;
    auto s = generate_sequence(7, cfg);
    CHECK_FALSE(s.samples[0].has_satellite());
  }
  SUBCASE("grid not divisible by 4 is rejected") {
    auto cfg = small_config();
    cfg.height = 62;
    CHECK_THROWS_AS(generate_sequence(1, cfg), std::invalid_argument);
  }
  SUBCASE("constant eastward wind moves a blob by u per step") {
    GeneratorConfig cfg = small_config();
    cfg.steps = 30;
    cfg.wind_mode = WindMode::constant;
    cfg.constant_u = 1.5;
    cfg.constant_v = 0.0;
    cfg.birth_rate = 0.0;
    cfg.initial_cells = 1;
    cfg.dry_fraction = 0.0;
    int checked_pairs = 0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      auto s = generate_sequence(seed, cfg);
      for (std::size_t t = 0; t + 1 < s.samples.size(); ++t) {
        if (s.samples[t].target.value().sum() < 1e-3 || s.samples[t + 1].target.value().sum() < 1e-3) continue;
        auto [x0, y0] = centroid(s.samples[t].target);
        auto [x1, y1] = centroid(s.samples[t + 1].target);
        if (x0 < 14 || x1 > 50) continue;  // keep the blob clear of the edges
        CHECK(std::abs((x1 - x0) - 1.5) < 0.5);
        CHECK(std::abs(y1 - y0) < 0.5);
        ++checked_pairs;
      }
    }
    CHECK(checked_pairs > 20);
  }
  SUBCASE("temporal coherence: consecutive steps differ less than random pairs") {
    std::uint64_t seed = 11;
    while (!generate_sequence(seed, GeneratorConfig{}).has_event(1.0)) ++seed;
    auto s = generate_sequence(seed, GeneratorConfig{});
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<std::size_t> pick(0, s.samples.size() - 1);
    for (auto member : {&MultiSourceSample::target, &MultiSourceSample::reanalysis, &MultiSourceSample::satellite}) {
      double step = 0, random = 0;
      for (std::size_t t = 0; t + 1 < s.samples.size(); ++t)
        step += ((s.samples[t + 1].*member).value() - (s.samples[t].*member).value()).abs().mean();
      step /= static_cast<double>(s.samples.size() - 1);
      for (int k = 0; k < 200; ++k)
        random += ((s.samples[pick(rng)].*member).value() - (s.samples[pick(rng)].*member).value()).abs().mean();
      random /= 200;
      CHECK(step < random);
    }
  }
}

TEST_CASE("default generator reproduces the dry-pixel imbalance") {
  auto seqs = generate_sequences(2024, 100, GeneratorConfig{});
  auto buckets = bucket_distribution(std::span<const Sequence>(seqs), {0.2, 1, 2, 4, 8});
  const double wet = 1.0 - buckets[0];
  MESSAGE("wet fraction " << wet << ", buckets " << buckets[0] << " " << buckets[1] << " " << buckets[2] << " "
                          << buckets[3] << " " << buckets[4] << " " << buckets[5]);
  CHECK(wet >= 0.02);
  CHECK(wet <= 0.12);
}

TEST_CASE("bucket_distribution") {
  SUBCASE("all-zero data lands in the first bucket") {
    std::vector<Tensor> g{Tensor::zeros({1, 10, 10})};
    auto b = bucket_distribution(std::span<const Tensor>(g), {0.2, 1, 2, 4, 8});
    CHECK(b[0] == 1.0);
    CHECK(b.size() == 6);
  }
  SUBCASE("direct count") {
    Array v = Array::Zero(100);
    v.head(3) = 1.5;
    std::vector<Tensor> g{Tensor::from({100}, v)};
    auto b = bucket_distribution(std::span<const Tensor>(g), {0.2, 1, 2, 4, 8});
    CHECK(b[2] == doctest::Approx(0.03));
    double total = 0;
    for (double x : b) total += x;
    CHECK(total == doctest::Approx(1.0));
  }
  SUBCASE("descending edges rejected") {
    std::vector<Tensor> g{Tensor::zeros({4})};
    CHECK_THROWS(bucket_distribution(std::span<const Tensor>(g), {1.0, 0.5}));
  }
}

namespace {

Sequence constant_sequence(double channel_value, double first_pixel) {
  Sequence s;
  MultiSourceSample x;
  x.qpe_radar = Tensor::full({4, 1, 2}, channel_value);
  x.reanalysis = Tensor::full({8, 1, 2}, channel_value);
  for (Index c = 1; c < 4; ++c) x.qpe_radar.mutable_value()[c * 2] = first_pixel;
  for (Index c = 0; c < 8; ++c) x.reanalysis.mutable_value()[c * 2] = first_pixel;
  x.target = Tensor::zeros({1, 1, 2});
  s.samples.push_back(x);
  return s;
}

}  // namespace

TEST_CASE("compute_stats") {
  SUBCASE("two-pixel channel {1,3} gives mean 2 and std 1") {
    std::vector<Sequence> seqs{constant_sequence(3.0, 1.0)};
    NormStats st = compute_stats(seqs);
    CHECK(st.reanalysis_mean[0] == 2.0);
    CHECK(st.reanalysis_std[0] == 1.0);
    CHECK(st.qpe_mean[1] == 2.0);
    CHECK(st.qpe_std[1] == 1.0);
    CHECK(st.intensity_cap == 64.0);
    CHECK(st.tau_norm() == doctest::Approx(0.003125));
  }
  SUBCASE("constant channel raises a zero-variance error naming it") {
    std::vector<Sequence> seqs{constant_sequence(5.0, 5.0)};
    try {
      compute_stats(seqs);
      FAIL("expected throw");
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find("qpe_radar[1]") != std::string::npos);
    }
  }
  SUBCASE("empty split rejected") {
    std::vector<Sequence> none;
    CHECK_THROWS(compute_stats(none));
  }
  SUBCASE("training-split stats are applied unchanged to validation") {
    auto seqs = generate_sequences(5, 10, small_config());
    auto split = split_by_month(seqs.size(), 10);
    std::vector<Sequence> train;
    for (auto i : split.train) train.push_back(seqs[i]);
    NormStats a = compute_stats(train);
    NormStats b = compute_stats(train);
    CHECK(a == b);
    auto val = normalize(seqs[split.val[0]].samples[0], a);
    auto val_again = normalize(seqs[split.val[0]].samples[0], b);
    CHECK((val.reanalysis.value() == val_again.reanalysis.value()).all());
  }
}

TEST_CASE("normalize / denormalize") {
  auto seqs = generate_sequences(9, 3, small_config());
  NormStats st = compute_stats(seqs);
  const auto& raw = seqs[0].samples[3];

  SUBCASE("intensity mapping endpoints") {
    Array r(3);
    r << 0.0, 64.0, 128.0;
    Array n = normalize_intensity(r, st);
    CHECK(n[0] == 0.0);
    CHECK(n[1] == 1.0);
    CHECK(n[2] == 1.0);
  }
  SUBCASE("a z-channel equal to its mean maps to zero") {
    MultiSourceSample s = raw;
    s.reanalysis = Tensor::full(raw.reanalysis.shape(), 0.0);
    for (Index c = 0; c < 8; ++c) s.reanalysis.mutable_value().segment(c * 256, 256) = st.reanalysis_mean[c];
    auto n = normalize(s, st);
    CHECK(n.reanalysis.value().abs().maxCoeff() < 1e-12);
  }
  SUBCASE("round trip is the identity for in-range values") {
    auto back = denormalize(normalize(raw, st), st);
    CHECK((back.qpe_radar.value() - raw.qpe_radar.value()).abs().maxCoeff() < 1e-9);
    CHECK((back.reanalysis.value() - raw.reanalysis.value()).abs().maxCoeff() < 1e-9);
    CHECK((back.satellite.value() - raw.satellite.value()).abs().maxCoeff() < 1e-9);
    CHECK((back.target.value() - raw.target.value()).abs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("add_noise") {
  MultiSourceSample s;
  s.qpe_radar = Tensor::zeros({4, 500, 500});
  s.reanalysis = Tensor::zeros({8, 2, 2});
  s.target = Tensor::full({1, 500, 500}, 0.5);

  SUBCASE("sigma 0 is bit-identical") {
    auto n = add_noise(s, 0.0, 1);
    CHECK((n.qpe_radar.value() == s.qpe_radar.value()).all());
  }
  SUBCASE("10^6 draws have std 0.02 and mean 0") {
    auto n = add_noise(s, 0.02, 12345);
    const Array& v = n.qpe_radar.value();
    REQUIRE(v.size() == 1000000);
    const double mu = v.mean();
    const double sd = std::sqrt((v - mu).square().mean());
    CHECK(std::abs(sd - 0.02) < 0.0005);
    CHECK(std::abs(mu) < 3e-4);
    CHECK((n.target.value() == 0.5).all());
    CHECK((n.reanalysis.value() != 0.0).any());
  }
  SUBCASE("negative sigma rejected") { CHECK_THROWS(add_noise(s, -0.1, 1)); }
}

TEST_CASE("importance_filter") {
  std::vector<Sequence> seqs(10);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    MultiSourceSample x;
    x.target = Tensor::zeros({1, 2, 2});
    if (i % 5 == 0 || i % 5 == 3) x.target.mutable_value()[1] = 0.5;  // 4 wet sequences
    seqs[i].samples.push_back(x);
  }
  SUBCASE("keep 1 is the identity") { CHECK(importance_filter_indices(seqs, 1.0, 0.2, 3).size() == 10); }
  SUBCASE("4 wet + half of 6 dry = 7") {
    auto kept = importance_filter_indices(seqs, 0.5, 0.2, 3);
    CHECK(kept.size() == 7);
    for (std::size_t i : {0u, 3u, 5u, 8u}) CHECK(std::find(kept.begin(), kept.end(), i) != kept.end());
    CHECK(kept == importance_filter_indices(seqs, 0.5, 0.2, 3));
  }
  SUBCASE("all-dry set with keep 0 is empty") {
    std::vector<Sequence> dry(seqs.begin() + 1, seqs.begin() + 3);
    CHECK(importance_filter(dry, 0.0, 0.2, 1).empty());
  }
  SUBCASE("keep fraction outside [0,1] rejected") { CHECK_THROWS(importance_filter_indices(seqs, 1.5, 0.2, 1)); }
}

TEST_CASE("split_by_month is sequential 80/10/10") {
  auto s = split_by_month(20, 10);
  CHECK(s.train == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 10, 11, 12, 13, 14, 15, 16, 17});
  CHECK(s.val == std::vector<std::size_t>{8, 18});
  CHECK(s.test == std::vector<std::size_t>{9, 19});
}

TEST_CASE("dataset write/read round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "stormlatent_test_synth";
  std::filesystem::remove_all(dir);
  auto seqs = generate_sequences(77, 3, small_config());
  std::vector<std::size_t> idx{0, 2};
  write_split(dir / "train", seqs, idx);
  auto back = read_split(dir / "train");
  REQUIRE(back.size() == 2);
  CHECK(same_sequence(back[0], seqs[0]));
  CHECK(same_sequence(back[1], seqs[2]));
  CHECK(back[1].seed == seqs[2].seed);
  CHECK(back[1].config.humidity_threshold == seqs[2].config.humidity_threshold);
  std::filesystem::remove_all(dir);
}
