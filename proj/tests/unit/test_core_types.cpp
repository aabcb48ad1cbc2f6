#include "bvit/core_types.hpp"
#include "bvit/error.hpp"
#include "doctest.h"

using namespace bvit;

namespace {

FundusSample good_sample() {
  FundusSample s;
  s.id = "a";
  s.image = Image(100, 80, 3, 0.5f);
  s.fovea = {50, 40};
  s.disc_radius = 38;
  return s;
}

}  // namespace

TEST_CASE("validate_sample") {
  auto s = good_sample();
  CHECK(validate_sample(s).empty());

  s.fovea.x = 100;
  CHECK(validate_sample(s) == std::vector<std::string>{"fovea_x out of bounds"});

  s = good_sample();
  s.fovea.y = -0.5;
  CHECK(validate_sample(s) == std::vector<std::string>{"fovea_y out of bounds"});

  s = good_sample();
  s.disc_radius = 0;
  CHECK(validate_sample(s) == std::vector<std::string>{"R must be positive"});

  s = good_sample();
  s.image = Image(100, 80, 1);
  CHECK(validate_sample(s).size() == 1);

  s = good_sample();
  s.id.clear();
  s.disc_radius = -1;
  CHECK(validate_sample(s).size() == 2);
}

TEST_CASE("disease status names round trip") {
  for (auto d : {DiseaseStatus::normal, DiseaseStatus::diseased}) CHECK(parse_disease_status(to_string(d)) == d);
  CHECK_THROWS_AS(parse_disease_status("sick"), DataError);
}

TEST_CASE("transform forward/inverse arithmetic") {
  const auto id = PreprocessTransform::identity(512);
  CHECK(id.forward({123.4, 56.7}) == Point2{123.4, 56.7});

  PreprocessTransform t = PreprocessTransform::identity(512);
  t.scale = 2.0;
  CHECK(t.forward({10, 10}) == Point2{20, 20});
  CHECK(t.inverse({256, 256}) == Point2{128, 128});

  t.crop = {7, 3, 307, 403};
  t.pad = {50, 0, 50, 0};
  t.scale = 1.28;
  const Point2 p{123.4, 56.7};
  const Point2 q = t.inverse(t.forward(p));
  CHECK(q.x == doctest::Approx(p.x).epsilon(1e-12));
  CHECK(q.y == doctest::Approx(p.y).epsilon(1e-12));
  CHECK(t.apply(p, Direction::forward) == t.forward(p));
}

TEST_CASE("transform validation and fingerprint") {
  auto t = PreprocessTransform::identity(64);
  CHECK_NOTHROW(t.validate());
  auto bad = t;
  bad.crop.x1 = bad.crop.x0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = t;
  bad.scale = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  auto other = t;
  other.pad.top = 1;
  CHECK(t.fingerprint() == PreprocessTransform::identity(64).fingerprint());
  CHECK(t.fingerprint() != other.fingerprint());
}

TEST_CASE("variants") {
  CHECK(all_variants().size() == 4);
  for (Variant v : all_variants()) CHECK(parse_variant(to_string(v)) == v);
  CHECK_FALSE(has_vessel_branch(Variant::vit_plain));
  CHECK(vessel_input_channels(Variant::vit_vb_mff) == 1);
  CHECK(vessel_input_channels(Variant::vit_vbfundus_mff) == 3);
  CHECK_FALSE(has_mff_decoder(Variant::vit_vb_plain));
  try {
    parse_variant("unet");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (Variant v : all_variants()) CHECK(msg.find(std::string(to_string(v))) != std::string::npos);
  }
}

TEST_CASE("network config validation") {
  CHECK(NetworkConfig::defaults().problems().empty());
  CHECK(NetworkConfig::toy().problems().empty());
  auto c = NetworkConfig::toy();
  c.input_size = 72;
  CHECK_FALSE(c.problems().empty());
  CHECK_THROWS_AS(c.validate(), ConfigError);

  c = NetworkConfig::defaults();
  CHECK(c.mff_mid_channels == std::array<int, 3>{128, 64, 32});
  CHECK(c.patch_grid == 32);
  c.transformer_hidden_dim = 100;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("network config json round trip") {
  for (auto c : {NetworkConfig::defaults(Variant::vit_plain), NetworkConfig::toy(Variant::vit_vbfundus_mff, 128)}) {
    nlohmann::json j = c;
    CHECK(j.get<NetworkConfig>() == c);
  }
  const auto partial = nlohmann::json{{"toy_mode", true}, {"input_size", 128}}.get<NetworkConfig>();
  CHECK(partial == NetworkConfig::toy(Variant::vit_vb_mff, 128));
  CHECK_THROWS_AS((nlohmann::json{{"variant", "nope"}}.get<NetworkConfig>()), ConfigError);
}

TEST_CASE("threshold presets") {
  auto labels = [](const EvalThresholds& t) {
    std::vector<std::string> out;
    for (const auto& m : t.multipliers) out.push_back(m.label());
    return out;
  };
  CHECK(labels(EvalThresholds::messidor()) == std::vector<std::string>{"1/8R", "1/4R", "1/2R", "1R", "2R"});
  CHECK(labels(EvalThresholds::palm()) == std::vector<std::string>{"1/8R", "1/4R", "1/2R", "2/3R", "1R"});
  CHECK_NOTHROW(EvalThresholds::messidor().validate());
  CHECK_NOTHROW(EvalThresholds::palm().validate());
  CHECK_THROWS_AS(EvalThresholds::preset("drive"), ConfigError);

  EvalThresholds t{"x", {{1, 2}, {1, 2}}};
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t.multipliers = {{-1, 2}};
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("report accuracy") {
  EvalReport r;
  r.totals = {4, 2, 2};
  r.results.push_back({{1, 1}, {3, 2, 1}});
  CHECK(r.accuracy(0, Stratum::overall) == 75.0);
  CHECK(r.accuracy(0, Stratum::diseased) == 50.0);
  r.totals.diseased = 0;
  CHECK(r.accuracy(0, Stratum::diseased) == 0.0);
  for (Stratum s : kStrata) CHECK(parse_stratum(to_string(s)) == s);
}

TEST_CASE("distance") { CHECK(distance({0, 0}, {3, 4}) == 5.0); }
