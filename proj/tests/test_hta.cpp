#include "doctest.h"

#include "stormlatent/hta.hpp"
#include "support.hpp"

#include <set>
#include <sstream>

using namespace stormlatent;
using testing::random_tensor;

namespace {

// Independent depth computation: plain recursion over the entry list.
Index depth_of(const HtaSchedule& s, Index step) {
  if (step <= 0) return 0;
  for (const auto& e : s.entries)
    if (e.step == step) return 1 + std::max(depth_of(s, e.input_a), depth_of(s, e.input_b));
  throw std::logic_error("unscheduled step");
}

std::vector<LatentState> observed_latents(std::mt19937_64& rng, Shape shape = {2, 3, 3}) {
  std::vector<LatentState> out;
  for (Index s = -4; s <= 0; ++s) out.push_back({random_tensor(shape, rng), s});
  return out;
}

// Deterministic stand-in predictor with distinct per-interval behaviour.
LatentState toy_predict(int d, const LatentState& a, const LatentState& b) {
  return {Tensor::from(b.value.shape(), 0.5 * a.value.value() + 0.25 * b.value.value() + 0.1 * d), b.time_index + d};
}

}  // namespace

TEST_CASE("build_hta_schedule") {
  SUBCASE("horizon 1") {
    auto s = build_hta_schedule(1);
    REQUIRE(s.entries.size() == 1);
    CHECK(s.entries[0] == HtaEntry{1, 1, -1, 0});
  }
  SUBCASE("horizon 4") {
    auto s = build_hta_schedule(4);
    const std::vector<HtaEntry> expected{{1, 1, -1, 0}, {2, 2, -2, 0}, {3, 1, 1, 2}, {4, 4, -4, 0}};
    CHECK(s.entries == expected);
  }
  SUBCASE("step 24 is six predictor calls deep, pure chaining is 24") {
    CHECK(depth_of(build_hta_schedule(24), 24) == 6);
    CHECK(depth_of(build_chain_schedule(24), 24) == 24);
    CHECK(dependency_depths(build_hta_schedule(24)).back() == 6);
  }
  SUBCASE("totality, spacing, causality and depth bound up to 48") {
    for (Index L = 1; L <= 48; ++L) {
      auto s = build_hta_schedule(L);
      CHECK_NOTHROW(s.validate());
      std::set<Index> seen;
      for (const auto& e : s.entries) {
        CHECK(seen.insert(e.step).second);
        CHECK(e.input_b - e.input_a == e.delta);
        CHECK(e.step - e.input_b == e.delta);
        CHECK((e.delta == 1 || e.delta == 2 || e.delta == 4));
        for (Index in : {e.input_a, e.input_b}) CHECK((in >= -4 && (in <= 0 || seen.count(in))));
      }
      CHECK(seen.size() == static_cast<std::size_t>(L));
      const auto depths = dependency_depths(s);
      for (Index k = 1; k <= L; ++k) {
        CHECK(depths[k - 1] == depth_of(s, k));
        CHECK(depths[k - 1] <= (k + 3) / 4 + 2);
      }
    }
    const auto chain = dependency_depths(build_chain_schedule(48));
    for (Index k = 1; k <= 48; ++k) CHECK(chain[k - 1] == k);
  }
  SUBCASE("horizon below 1 is an error") { CHECK_THROWS_AS(build_hta_schedule(0), std::invalid_argument); }
  SUBCASE("validate rejects broken schedules") {
    HtaSchedule gap{{{1, 1, -1, 0}, {3, 1, 1, 2}}};
    CHECK_THROWS_AS(gap.validate(), std::logic_error);
    HtaSchedule spacing{{{1, 2, -1, 0}}};
    CHECK_THROWS_AS(spacing.validate(), std::logic_error);
    HtaSchedule future{{{1, 1, -1, 0}, {2, 4, -6, -2}, {3, 1, 2, 4}}};
    CHECK_THROWS_AS(future.validate(), std::logic_error);
  }
  SUBCASE("schedule csv") {
    std::ostringstream os;
    write_schedule_csv(os, build_hta_schedule(4));
    CHECK(os.str() == "output_step,delta,input_a,input_b,depth\n1,1,-1,0,1\n2,2,-2,0,1\n3,1,1,2,2\n4,4,-4,0,1\n");
  }
}

TEST_CASE("rollout") {
  std::mt19937_64 rng(1);
  auto obs = observed_latents(rng);

  SUBCASE("a predictor returning its later input reproduces the last observation") {
    auto out = rollout([](int d, const LatentState&, const LatentState& b) { return LatentState{b.value, b.time_index + d}; },
                       obs, build_hta_schedule(24));
    REQUIRE(out.size() == 24);
    for (const auto& s : out) CHECK((s.value.value() == obs.back().value.value()).all());
  }
  SUBCASE("horizon 3 matches a hand-unrolled trace") {
    auto out = rollout(toy_predict, obs, build_hta_schedule(3));
    const LatentState h1 = toy_predict(1, obs[3], obs[4]);
    const LatentState h2 = toy_predict(2, obs[2], obs[4]);
    const LatentState h3 = toy_predict(1, h1, h2);
    REQUIRE(out.size() == 3);
    CHECK((out[0].value.value() == h1.value.value()).all());
    CHECK((out[1].value.value() == h2.value.value()).all());
    CHECK((out[2].value.value() == h3.value.value()).all());
    CHECK(out[2].time_index == 3);
  }
  SUBCASE("step 8 comes from observation 0 and step 4") {
    auto out = rollout(toy_predict, obs, build_hta_schedule(8));
    const LatentState h4 = toy_predict(4, obs[0], obs[4]);
    CHECK((out[7].value.value() == toy_predict(4, obs[4], h4).value.value()).all());
  }
  SUBCASE("observation window must hold five steps") {
    obs.pop_back();
    CHECK_THROWS_AS(rollout(toy_predict, obs, build_hta_schedule(2)), std::invalid_argument);
  }
  SUBCASE("unresolvable input is an error") {
    HtaSchedule bad{{{1, 1, -1, 0}, {3, 1, 1, 2}}};
    CHECK_THROWS(rollout(toy_predict, obs, bad));
  }
  SUBCASE("model rollout is deterministic and indexed by lead") {
    const auto c = testing::tiny_config();
    auto p = ModelParams::init(c, 4);
    auto lat = observed_latents(rng, {c.latent_channels, c.latent_height(), c.latent_width()});
    RunContext a, b;
    auto r1 = rollout(p, lat, build_hta_schedule(5), a);
    auto r2 = rollout(p, lat, build_hta_schedule(5), b);
    for (std::size_t i = 0; i < r1.size(); ++i) {
      CHECK((r1[i].value.value() == r2[i].value.value()).all());
      CHECK(r1[i].time_index == static_cast<Index>(i) + 1);
    }
  }
}

TEST_CASE("training_rollout") {
  std::mt19937_64 rng(2);
  std::map<Index, LatentState> enc;
  for (Index s = 0; s <= 12; ++s) enc[s] = {random_tensor({2, 3, 3}, rng), s};

  SUBCASE("interval 1 consumes origin-1 and origin") {
    auto r = training_rollout(toy_predict, enc, 5, 1);
    const LatentState f = toy_predict(1, enc[4], enc[5]);
    CHECK((r.first.value.value() == f.value.value()).all());
    CHECK((r.second.value.value() == toy_predict(1, enc[5], f).value.value()).all());
    CHECK(r.first.time_index == 6);
    CHECK(r.second.time_index == 7);
  }
  SUBCASE("interval 4 consumes origin-4 and origin, targets +4 and +8") {
    auto r = training_rollout(toy_predict, enc, 4, 4);
    CHECK((r.first.value.value() == toy_predict(4, enc[0], enc[4]).value.value()).all());
    CHECK(r.first.time_index == 8);
    CHECK(r.second.time_index == 12);
  }
  SUBCASE("missing encoded step is an error") {
    CHECK_THROWS_AS(training_rollout(toy_predict, enc, 2, 4), std::invalid_argument);
  }
  SUBCASE("the earliest input gets gradient through both predictions") {
    const auto c = testing::tiny_config();
    auto p = ModelParams::init(c, 5);
    std::map<Index, LatentState> lat;
    for (Index s = 0; s <= 2; ++s)
      lat[s] = {random_tensor({c.latent_channels, c.latent_height(), c.latent_width()}, rng).set_requires_grad(true), s};
    RunContext ctx;
    // loss on the second prediction only: h_{-1} reaches it solely via the first
    auto r = training_rollout(p, lat, 1, 1, ctx);
    testing::probe(r.second.value, 3).backward();
    CHECK(lat[0].value.grad().abs().maxCoeff() > 0);
    CHECK(lat[1].value.grad().abs().maxCoeff() > 0);
  }
}
