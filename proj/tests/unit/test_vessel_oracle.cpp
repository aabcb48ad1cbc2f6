#include <cstdlib>
#include <cstdio>

#include "bvit/datasets.hpp"
#include "bvit/error.hpp"
#include "bvit/image.hpp"
#include "bvit/vessel_oracle.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace bvit;

namespace {

double mean_of(const Image& im) {
  double s = 0;
  for (float v : im.pixels) s += v;
  return s / static_cast<double>(im.pixels.size());
}

double foreground(const Image& im) {
  double n = 0;
  for (float v : im.pixels) n += v > 0.5f;
  return n / static_cast<double>(im.pixels.size());
}

}  // namespace

TEST_CASE("synthetic vessel trees") {
  CHECK(synth_vessels(64, 3).map == synth_vessels(64, 3).map);
  CHECK(synth_vessels(64, 3).map != synth_vessels(64, 4).map);
  CHECK(synth_vessels(64, 1).map.width == 64);
  CHECK(synth_vessels(64, 1).map.height == 64);
  CHECK_THROWS_AS(synth_vessels(0, 1), ConfigError);

  double lo = 1.0, hi = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const double f = foreground(synth_vessels(512, seed).map);
    lo = std::min(lo, f);
    hi = std::max(hi, f);
  }
  MESSAGE("foreground fraction at 512 over 100 seeds: [" << lo << ", " << hi << "]");
  CHECK(lo >= 0.02);
  CHECK(hi <= 0.20);
}

TEST_CASE("vessel source names and cache locations") {
  for (auto s : {VesselSource::model, VesselSource::cache, VesselSource::synthetic})
    CHECK(parse_vessel_source(to_string(s)) == s);
  CHECK_THROWS_AS(parse_vessel_source("oracle"), ConfigError);
  CHECK(cache_path("/c", "messidor", "img7") == std::filesystem::path("/c/messidor/img7.png"));

  const char* saved = std::getenv("BILATERAL_CACHE");
  const std::string previous = saved ? saved : "";
  ::setenv("BILATERAL_CACHE", "/env/cache", 1);
  CHECK(resolve_cache_dir("/fallback") == std::filesystem::path("/env/cache"));
  ::unsetenv("BILATERAL_CACHE");
  CHECK(resolve_cache_dir("/fallback") == std::filesystem::path("/fallback"));
  if (saved) ::setenv("BILATERAL_CACHE", previous.c_str(), 1);
}

TEST_CASE("synthetic oracle") {
  const Image net(64, 64, 3, 0.5f);
  const auto a = VesselOracle::synthetic(1);
  CHECK(a.source() == VesselSource::synthetic);
  const auto m1 = a.get("d", "x", net), m2 = a.get("d", "x", net);
  CHECK(m1.map == m2.map);
  CHECK(m1.map.width == 64);
  CHECK(a.get("d", "y", net).map != m1.map);
  CHECK(VesselOracle::synthetic(2).get("d", "x", net).map != m1.map);
  CHECK_THROWS_AS(a.get("d", "x", Image()), ShapeError);
}

TEST_CASE("cache oracle") {
  testing::TempDir dir;
  Image m(32, 32, 1);
  for (int i = 0; i < 32; ++i) m.at(i, i) = 1.0f, m.at(i, 31 - i) = 0.4f;
  m = quantize_8bit(m);
  VesselOracle::store(dir.path(), "ds", "s1", {m}, "fp-1");
  CHECK(std::filesystem::exists(dir / "ds" / "s1.png"));
  CHECK(std::filesystem::exists(dir / "ds" / "s1.json"));

  const auto cache = VesselOracle::cache(dir.path());
  const Image net(32, 32, 3, 0.5f);
  CHECK(cache.get("ds", "s1", net, "fp-1").map == m);
  CHECK(cache.get("ds", "s1", net).map == m);
  CHECK_THROWS_WITH_AS(cache.get("ds", "s2", net), doctest::Contains("s2"), DataError);
  CHECK_THROWS_WITH_AS(cache.get("ds", "s1", net, "fp-2"), doctest::Contains("preprocessing"), DataError);
  CHECK_THROWS_AS(cache.get("ds", "s1", Image(64, 64, 3, 0.5f)), DataError);

  VesselOracle::Options bin;
  bin.binarize = true;
  const auto binary = VesselOracle::cache(dir.path(), bin).get("ds", "s1", net);
  for (float v : binary.map.pixels) CHECK((v == 0.0f || v == 1.0f));
  CHECK(binary.map.at(0, 31) == 0.0f);
  CHECK(binary.map.at(0, 0) == 1.0f);

  VesselOracle::Options write;
  write.write_cache = true;
  auto synth = VesselOracle::synthetic(5, write);
  synth.set_cache_dir(dir / "w");
  const auto fresh = synth.get("ds", "k", net, "fp");
  CHECK(VesselOracle::cache(dir / "w").get("ds", "k", net, "fp").map == quantize_8bit(fresh.map));
}

TEST_CASE("field-of-view mask") {
  VesselMap m{Image(4, 1, 1, 0.7f)};
  Image im(4, 1, 3);
  im.at(1, 0, 2) = 0.5f;
  im.at(3, 0, 0) = kDarknessThreshold;
  apply_fov_mask(m, im);
  CHECK(m.map.pixels == std::vector<float>{0.0f, 0.7f, 0.0f, 0.0f});
  CHECK_THROWS_AS(apply_fov_mask(m, Image(5, 1, 3)), ShapeError);
}

TEST_CASE("vessel model training and the model source") {
  testing::TempDir dir;
  const auto ds = synth_dataset(4, 64, 3, dir / "data");
  const auto pairs = load_vessel_pairs(dir / "data", ds.vessel_pairs, 64);
  std::vector<const Image*> fundus;
  for (const auto& p : pairs) fundus.push_back(&p.fundus);
  const Normalization norm = compute_channel_stats(fundus);

  BilateralViT model(NetworkConfig::toy(Variant::vit_plain));
  init_weights(model, 1);
  TrainConfig cfg;
  cfg.epochs = 1000;
  cfg.max_iterations = 200;
  cfg.seed = 1;
  TrainOptions opt;
  opt.normalization = norm;
  opt.run_dir = dir / "run";
  const auto res = train_vessel_model(model, pairs, cfg, opt);
  CHECK(res.iterations == 200);
  const double dice = vessel_dice(model, pairs, norm);
  MESSAGE("vessel model training dice after 200 iterations: " << dice);
  CHECK(dice >= 0.6);

  const auto ck = load_checkpoint(res.last_checkpoint);
  CHECK(ck.meta["kind"] == "vessel");
  const auto oracle = VesselOracle::model(ck);
  CHECK(oracle.source() == VesselSource::model);

  const Image black(64, 64, 3);
  const double raw = mean_of(run_vessel_model(model, black, norm).map);
  const double masked = mean_of(oracle.get("synth", "black", black).map);
  MESSAGE("all-black input: raw model mean " << raw << ", oracle mean " << masked);
  CHECK(masked < 0.05);

  // Resampled when the requested size differs from the model input.
  CHECK(oracle.get("synth", "big", Image(128, 128, 3, 0.4f)).map.width == 128);

  VesselOracle::Options write;
  write.write_cache = true;
  auto caching = VesselOracle::model(ck, write);
  caching.set_cache_dir(dir / "cache");
  const auto first = caching.get("synth", "s0", pairs[0].fundus, "fp");
  CHECK(std::filesystem::exists(dir / "cache" / "synth" / "s0.png"));
  const auto again = caching.get("synth", "s0", pairs[0].fundus, "fp");
  CHECK(again.map == quantize_8bit(first.map));

  BilateralViT wrong(NetworkConfig::toy(Variant::vit_vb_mff));
  CHECK_THROWS_AS(VesselOracle::model(make_checkpoint(wrong)), DataError);
}

TEST_CASE("vessel training errors") {
  BilateralViT plain(NetworkConfig::toy(Variant::vit_plain));
  CHECK_THROWS_AS(train_vessel_model(plain, {}, TrainConfig{}, {}), ConfigError);
  BilateralViT proposed(NetworkConfig::toy(Variant::vit_vb_mff));
  VesselPair p{"x", Image(64, 64, 3), Image(64, 64, 1)};
  CHECK_THROWS_AS(train_vessel_model(proposed, {p}, TrainConfig{}, {}), ConfigError);
  auto bad = NetworkConfig::toy(Variant::vit_plain);
  bad.input_size = 72;
  CHECK_THROWS_AS(BilateralViT{bad}, ConfigError);
}
