#include <chrono>
#include <map>
#include <set>

#include "bvit/datasets.hpp"
#include "bvit/error.hpp"
#include "bvit/image.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace bvit;

namespace {

std::map<std::string, std::string> snapshot(const std::filesystem::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[std::filesystem::relative(e.path(), root).string()] = testing::read_file(e.path());
  }
  return out;
}

std::vector<FundusSample> fake_samples(int normal, int diseased) {
  std::vector<FundusSample> out;
  for (int i = 0; i < normal + diseased; ++i) {
    FundusSample s;
    s.id = "s" + std::to_string(i);
    s.disease = i < normal ? DiseaseStatus::normal : DiseaseStatus::diseased;
    out.push_back(s);
  }
  return out;
}

void write_images(const std::filesystem::path& root, int n) {
  std::filesystem::create_directories(root / "img");
  for (int i = 0; i < n; ++i) save_image(root / "img" / (std::to_string(i) + ".png"), Image(40, 30, 3, 0.5f));
}

}  // namespace

TEST_CASE("manifest round trip") {
  testing::TempDir dir;
  std::vector<ManifestRow> rows{
      {"a", "img/a.png", 12.5, 7.25, 38, DiseaseStatus::normal, "train"},
      {"b,\"quoted\"", "img/b c.png", 0.1 + 0.2, 1e-3, 1.0 / 3.0, DiseaseStatus::diseased, "test"},
  };
  write_manifest(dir / "m.csv", rows);
  CHECK(read_manifest(dir / "m.csv") == rows);
  CHECK(testing::read_file(dir / "m.csv").rfind(kManifestHeader, 0) == 0);
}

TEST_CASE("manifest problems") {
  testing::TempDir dir;
  testing::write_file(dir / "bad_header.csv", "id,path\n");
  CHECK_THROWS_AS(read_manifest(dir / "bad_header.csv"), DataError);
  CHECK_THROWS_AS(read_manifest(dir / "none.csv"), DataError);

  testing::write_file(dir / "m.csv", std::string(kManifestHeader) +
                                         "\nok,a.png,1,2,3,normal,train\nshort,a.png,1\nnan,a.png,x,2,3,normal,train\n"
                                         "sick,a.png,1,2,3,unwell,train\n");
  std::vector<std::string> problems;
  const auto rows = read_manifest(dir / "m.csv", &problems);
  CHECK(rows.size() == 1);
  REQUIRE(problems.size() == 3);
  CHECK(problems[0].find("line 3") != std::string::npos);
}

TEST_CASE("loading a dataset") {
  testing::TempDir dir;
  write_images(dir.path(), 3);
  std::vector<ManifestRow> rows;
  for (int i = 0; i < 3; ++i)
    rows.push_back({"id" + std::to_string(i), "img/" + std::to_string(i) + ".png", 10, 10, 5, DiseaseStatus::normal,
                    i == 2 ? "test" : "train"});
  write_manifest(dir / "manifest.csv", rows);
  const auto all = load_dataset(dir.path(), dir / "manifest.csv");
  CHECK(all.samples.size() == 3);
  CHECK(all.report.skipped == 0);
  CHECK(all.samples[0].image.width == 40);
  CHECK(all.samples[0].dataset_tag == dir.path().filename().string());

  const auto train_only = load_dataset(dir.path(), dir / "manifest.csv", {std::string("train"), "tagged"});
  CHECK(train_only.samples.size() == 2);
  CHECK(train_only.samples[0].dataset_tag == "tagged");

  rows[1].fovea_x = -1;
  rows.push_back({"ghost", "img/ghost.png", 1, 1, 1, DiseaseStatus::normal, "train"});
  rows.push_back(rows[0]);
  write_manifest(dir / "manifest.csv", rows);
  const auto partial = load_dataset(dir.path(), dir / "manifest.csv");
  CHECK(partial.samples.size() == 2);
  CHECK(partial.report.skipped == 3);
  CHECK(partial.report.rows == 5);
  bool saw_bounds = false, saw_missing = false, saw_dup = false;
  for (const auto& p : partial.report.problems) {
    saw_bounds |= p.find("id1") != std::string::npos && p.find("fovea_x") != std::string::npos;
    saw_missing |= p.find("ghost") != std::string::npos;
    saw_dup |= p.find("duplicate") != std::string::npos;
  }
  CHECK(saw_bounds);
  CHECK(saw_missing);
  CHECK(saw_dup);

  CHECK_THROWS_AS(load_dataset(dir.path(), dir / "manifest.csv", {std::string("validation"), ""}), DataError);
}

TEST_CASE("splits") {
  const auto samples = fake_samples(5, 5);
  const auto a = make_split(samples, SplitScheme::ratio(7, 0.8));
  CHECK(a.train.size() == 8);
  CHECK(a.test.size() == 2);
  const auto b = make_split(samples, SplitScheme::ratio(7, 0.8));
  for (std::size_t i = 0; i < a.train.size(); ++i) CHECK(a.train[i].id == b.train[i].id);

  std::set<std::string> ids;
  for (const auto& s : a.train) ids.insert(s.id);
  for (const auto& s : a.test) ids.insert(s.id);
  CHECK(ids.size() == 10);

  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto all = fake_samples(13, 24);
    const auto sp = make_split(all, SplitScheme::ratio(seed, 0.7));
    int diseased = 0;
    for (const auto& s : sp.train) diseased += s.disease == DiseaseStatus::diseased;
    const double expected = 24.0 / 37.0 * static_cast<double>(sp.train.size());
    CHECK(std::abs(diseased - expected) <= 1.0);
  }

  auto manifest = fake_samples(2, 1);
  manifest[0].split = "train";
  manifest[1].split = "test";
  manifest[2].split = "validation";
  const auto m = make_split(manifest, SplitScheme::from_manifest());
  CHECK(m.train.size() == 1);
  CHECK(m.test.size() == 2);

  for (auto& s : manifest) s.split = "train";
  CHECK_THROWS_AS(make_split(manifest, SplitScheme::from_manifest()), DataError);
  CHECK_THROWS_AS(make_split(fake_samples(1, 0), SplitScheme::ratio(0, 0.8)), DataError);
  CHECK_THROWS_AS(make_split(samples, SplitScheme::ratio(0, 1.0)), ConfigError);
}

TEST_CASE("channel statistics") {
  Image a(2, 1, 3), b(2, 1, 3);
  a.pixels = {0, 1, 0.5f, 0, 1, 0.5f};
  b.pixels = {1, 1, 0.5f, 1, 1, 0.5f};
  const auto n = compute_channel_stats({&a, &b});
  CHECK(n.mean[0] == doctest::Approx(0.5));
  CHECK(n.std[0] == doctest::Approx(0.5));
  CHECK(n.mean[1] == doctest::Approx(1.0));
  CHECK(n.std[1] > 0.0f);
  CHECK_THROWS_AS(compute_channel_stats({}), DataError);
}

TEST_CASE("synthetic generator") {
  const auto t0 = std::chrono::steady_clock::now();
  const auto a = generate_synthetic(8, 64, 1);
  CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 5.0);
  const auto b = generate_synthetic(8, 64, 1);
  REQUIRE(a.size() == 8);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].sample.image == b[i].sample.image);
    CHECK(a[i].sample.fovea == b[i].sample.fovea);
    CHECK(validate_sample(a[i].sample).empty());
    CHECK(a[i].sample.disc_radius >= 0.075 * 64);
    CHECK(a[i].sample.disc_radius <= 0.095 * 64);
    CHECK(a[i].vessels.width == 64);
  }
  CHECK(generate_synthetic(8, 64, 2)[0].sample.image != a[0].sample.image);

  const auto many = generate_synthetic(100, 64, 3);
  int diseased = 0, covered = 0, train = 0;
  for (const auto& s : many) {
    if (s.sample.disease == DiseaseStatus::diseased) {
      ++diseased;
      covered += s.lesion_covers_fovea;
      CHECK_FALSE(s.lesions.empty());
    } else {
      CHECK(s.lesions.empty());
    }
    train += s.sample.split == "train";
  }
  CHECK(diseased == 50);
  CHECK(covered * 2 >= diseased);
  CHECK(train == 80);

  CHECK_THROWS_AS(generate_synthetic(0, 64, 1), ConfigError);
  CHECK_THROWS_AS(generate_synthetic(2, 60, 1), ConfigError);
}

TEST_CASE("synthetic dataset on disk is byte-identical and loadable") {
  testing::TempDir dir;
  const auto ds = synth_dataset(6, 64, 9, dir / "a");
  synth_dataset(6, 64, 9, dir / "b");
  const auto sa = snapshot(dir / "a"), sb = snapshot(dir / "b");
  CHECK(sa == sb);
  CHECK(sa.count("manifest.csv") == 1);
  CHECK(sa.count("vessel_cache/synth/synth_0000.png") == 1);
  CHECK(sa.count("images/synth_0005.png") == 1);

  const auto loaded = load_dataset(dir / "a", ds.manifest);
  CHECK(loaded.samples.size() == 6);
  CHECK(loaded.samples[0].dataset_tag == "synth");
  CHECK(loaded.samples[2].image == ds.samples[2].sample.image);
  CHECK(loaded.samples[2].fovea == ds.samples[2].sample.fovea);

  const auto pairs = load_vessel_pairs(dir / "a", ds.vessel_pairs, 64);
  REQUIRE(pairs.size() == 6);
  CHECK(pairs[0].fundus.width == 64);
  CHECK(pairs[0].vessels.channels == 1);
  testing::write_file(dir / "bad.csv", "id,image_path,vessel_path\nx,images/nope.png,vessels/nope.png\n");
  CHECK_THROWS_AS(load_vessel_pairs(dir / "a", dir / "bad.csv", 64), DataError);
}
