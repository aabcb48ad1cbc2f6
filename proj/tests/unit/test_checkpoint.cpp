#include <cstring>
#include <random>

#include "bvit/checkpoint.hpp"
#include "bvit/error.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace bvit;

namespace {

BilateralViT make(Variant v, std::uint64_t seed) {
  BilateralViT m(NetworkConfig::toy(v));
  init_weights(m, seed);
  return m;
}

}  // namespace

TEST_CASE("checkpoint round trip restores config, metadata and outputs") {
  testing::TempDir dir;
  const auto model = make(Variant::vit_vb_mff, 5);
  auto ck = make_checkpoint(model, {{"epoch", 7}, {"note", "x"}});
  ck.tensors.push_back({"extra", {2, 2}, {1, 2, 3, 4}});
  save_checkpoint(dir / "a.bvit", ck);
  CHECK_FALSE(std::filesystem::exists(dir / "a.bvit.tmp"));

  const auto back = load_checkpoint(dir / "a.bvit");
  CHECK(back.format_version == kCheckpointFormatVersion);
  CHECK(back.config == model.config());
  CHECK(back.meta["epoch"] == 7);
  REQUIRE(back.find("extra") != nullptr);
  CHECK(back.find("extra")->values == std::vector<float>{1, 2, 3, 4});
  CHECK(back.find("missing") == nullptr);

  const auto restored = model_from_checkpoint(back);
  nn::NoGradGuard guard;
  std::mt19937_64 rng(1);
  const auto x = testing::random_tensor({1, 3, 64, 64}, rng, false);
  const auto v = testing::random_tensor({1, 1, 64, 64}, rng, false);
  const auto a = model.forward(x, v), b = restored.forward(x, v);
  CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
}

TEST_CASE("checkpoint errors") {
  testing::TempDir dir;
  CHECK_THROWS_AS(load_checkpoint(dir / "nope.bvit"), DataError);

  testing::write_file(dir / "junk.bvit", "definitely not a checkpoint");
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.bvit"), DataError);

  save_checkpoint(dir / "ok.bvit", make_checkpoint(make(Variant::vit_plain, 1)));
  std::string bytes = testing::read_file(dir / "ok.bvit");

  auto versioned = bytes;
  const std::uint32_t v2 = 2;
  std::memcpy(versioned.data() + 8, &v2, sizeof(v2));
  testing::write_file(dir / "v2.bvit", versioned);
  CHECK_THROWS_WITH_AS(load_checkpoint(dir / "v2.bvit"), doctest::Contains("version"), DataError);

  testing::write_file(dir / "cut.bvit", bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(dir / "cut.bvit"), DataError);

  // Parameters of one variant do not fit another.
  auto proposed = make(Variant::vit_vb_mff, 1);
  CHECK_THROWS_AS(load_parameters(proposed, load_checkpoint(dir / "ok.bvit")), DataError);
}
