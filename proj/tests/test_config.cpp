#include "doctest.h"

#include "stormlatent/config.hpp"

#include <sstream>

using namespace stormlatent;

namespace {

RunConfig parse(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is);
}

}  // namespace

TEST_CASE("empty config gives the toy defaults") {
  const RunConfig c = parse("");
  CHECK(c == RunConfig::toy_defaults());
  CHECK(c.train.epochs == 30);
  CHECK(c.train.base_lr == 1e-5);
  CHECK(c.train.warmup_epochs == 20);
  CHECK(c.train.weight_decay == 1.0);
  CHECK(c.train.dropout == 0.15);
  CHECK(c.train.loss_variant == LossVariant::wmce);
  CHECK(c.model.height == 64);
  CHECK(c.model.latent_channels == 16);
}

TEST_CASE("struct defaults follow the full training recipe") {
  TrainConfig t;
  CHECK(t.epochs == 200);
  CHECK(t.adam_beta1 == 0.9);
  CHECK(t.adam_beta2 == 0.999);
}

TEST_CASE("parse_config") {
  SUBCASE("values, comments and whitespace") {
    const RunConfig c = parse(
        "# comment line\n"
        "epochs = 12\n"
        "warmup_epochs = 2\n"
        "  base_lr=0.001   # trailing comment\n"
        "\n"
        "loss_variant = weighted_mae\n"
        "iteration_space = physical\n"
        "importance_sampling = true\n"
        "thresholds = 0.5, 2\n");
    CHECK(c.train.epochs == 12);
    CHECK(c.train.base_lr == 0.001);
    CHECK(c.train.loss_variant == LossVariant::weighted_mae);
    CHECK(c.train.iteration_space == IterationSpace::physical);
    CHECK(c.train.importance_sampling);
    CHECK(c.eval.thresholds == std::vector<double>{0.5, 2.0});
  }
  SUBCASE("grid keys set generator and model together") {
    const RunConfig c = parse("height = 128\nwidth = 128\ncoarse_height = 32\ncoarse_width = 32\n");
    CHECK(c.model.height == 128);
    CHECK(c.generator.height == 128);
    CHECK(c.model.coarse_width == 32);
    CHECK(c.generator.coarse_width == 32);
  }
  SUBCASE("unknown key names its line") {
    try {
      parse("epochs = 3\nepoch = 4\n");
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(e.line() == 2);
      CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    }
  }
  SUBCASE("malformed values are errors") {
    CHECK_THROWS_AS(parse("epochs = three\n"), ConfigError);
    CHECK_THROWS_AS(parse("epochs = 3.5\n"), ConfigError);
    CHECK_THROWS_AS(parse("importance_sampling = maybe\n"), ConfigError);
    CHECK_THROWS_AS(parse("loss_variant = focal\n"), ConfigError);
    CHECK_THROWS_AS(parse("epochs\n"), ConfigError);
  }
  SUBCASE("invariants are checked") {
    CHECK_THROWS_AS(parse("epochs = 10\nwarmup_epochs = 20\n"), ConfigError);
    CHECK_THROWS_AS(parse("base_lr = 0\n"), ConfigError);
  }
}

TEST_CASE("write_config round trip") {
  RunConfig c = RunConfig::toy_defaults();
  set_config_value(c, "base_lr", "0.000123456789");
  set_config_value(c, "seed", "42");
  set_config_value(c, "hss_standard", "true");
  set_config_value(c, "include_satellite", "false");
  std::ostringstream os;
  write_config(os, c);
  CHECK(parse(os.str()) == c);

  const std::string text = "\n" + os.str();
  for (const auto& key : config_keys()) CHECK(text.find("\n" + key + " = ") != std::string::npos);
  CHECK_THROWS_AS(set_config_value(c, "nope", "1"), ConfigError);
}
