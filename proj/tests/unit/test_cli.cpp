#include <sys/wait.h>

#include <cstdio>
#include <fstream>

#include "bvit/datasets.hpp"
#include "bvit/evaluation.hpp"
#include "bvit/inference.hpp"
#include "doctest.h"
#include "json.hpp"
#include "support.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int status = -1;
  std::string output;
};

Run cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + std::string(BVIT_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof(buf), pipe)) r.output.append(buf, n);
  const int raw = ::pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

fs::path only_run_dir(const fs::path& out, const std::string& prefix = "run-") {
  fs::path found;
  int count = 0;
  for (const auto& e : fs::directory_iterator(out)) {
    if (e.is_directory() && e.path().filename().string().rfind(prefix, 0) == 0) found = e.path(), ++count;
  }
  REQUIRE(count == 1);
  return found;
}

int count_lines(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

const std::string kToy = "--toy --input-size 64 --seed 1";

}  // namespace

TEST_CASE("make-synth") {
  testing::TempDir dir;
  auto r = cli("make-synth --n 8 --size 64 --seed 1 --out " + q(dir / "d"));
  REQUIRE(r.status == 0);
  int images = 0;
  for (const auto& e : fs::directory_iterator(dir / "d" / "images")) images += e.path().extension() == ".png";
  CHECK(images == 8);
  CHECK(bvit::read_manifest(dir / "d" / "manifest.csv").size() == 8);

  REQUIRE(cli("make-synth --n 8 --size 64 --seed 1 --out " + q(dir / "e")).status == 0);
  for (const auto& e : fs::recursive_directory_iterator(dir / "d")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir / "d");
    CHECK(testing::read_file(e.path()) == testing::read_file(dir / "e" / rel));
  }

  r = cli("make-synth --n 0 --size 64 --out " + q(dir / "z"));
  CHECK(r.status == 2);
  CHECK(r.output.find("usage error") != std::string::npos);
  CHECK(count_lines(r.output) == 1);
  CHECK(cli("make-synth --n 4 --size 60 --out " + q(dir / "z")).status == 1);
}

TEST_CASE("show-config prints the resolved configuration") {
  const auto r = cli("show-config");
  REQUIRE(r.status == 0);
  const auto j = nlohmann::json::parse(r.output);
  CHECK(j["training"]["epochs"] == 200);
  CHECK(j["training"]["batch_size"] == 2);
  CHECK(j["training"]["lr0"] == 1e-3);
  CHECK(j["network"]["input_size"] == 512);

  testing::TempDir dir;
  testing::write_file(dir / "bad.json", R"({"training": {"epochs": 5, "speed": 1}})");
  const auto bad = cli("show-config --config " + q(dir / "bad.json"));
  CHECK(bad.status == 1);
  CHECK(bad.output.find("speed") != std::string::npos);
}

TEST_CASE("train, predict, eval and resume") {
  testing::TempDir dir;
  REQUIRE(cli("make-synth --n 8 --size 64 --seed 2 --out " + q(dir / "A")).status == 0);

  auto r = cli("train --data " + q(dir / "A") + " --out " + q(dir / "bad") + " --variant unet " + kToy);
  CHECK(r.status == 1);
  CHECK(count_lines(r.output) == 1);
  for (const char* v : {"vit_plain", "vit_vb_plain", "vit_vb_mff", "vit_vbfundus_mff"})
    CHECK(r.output.find(v) != std::string::npos);

  r = cli("train --data " + q(dir / "A") + " --out " + q(dir / "runs") + " --epochs 2 " + kToy);
  REQUIRE_MESSAGE(r.status == 0, r.output);
  const fs::path run = only_run_dir(dir / "runs");
  for (const char* f : {"checkpoint_best.bvit", "checkpoint_last.bvit", "metrics.jsonl", "config.json", "split.json"})
    CHECK(fs::exists(run / f));
  CHECK(count_lines(testing::read_file(run / "metrics.jsonl")) == 2);

  // Same seed, same metrics.
  REQUIRE(cli("train --data " + q(dir / "A") + " --out " + q(dir / "runs2") + " --epochs 2 " + kToy).status == 0);
  CHECK(testing::read_file(run / "metrics.jsonl") == testing::read_file(only_run_dir(dir / "runs2") / "metrics.jsonl"));

  r = cli("train --data " + q(dir / "A") + " --out " + q(dir / "runs") + " --epochs 3 --resume " + q(run));
  REQUIRE_MESSAGE(r.status == 0, r.output);
  CHECK(count_lines(testing::read_file(run / "metrics.jsonl")) == 3);

  const fs::path ckpt = run / "checkpoint_best.bvit";
  r = cli("predict --checkpoint " + q(ckpt) + " --data " + q(dir / "A") + " --out " + q(dir / "p.jsonl"));
  REQUIRE_MESSAGE(r.status == 0, r.output);
  CHECK(bvit::read_predictions(dir / "p.jsonl").size() == 8);

  // Evaluate on a second dataset with its own name.
  REQUIRE(cli("make-synth --n 4 --size 64 --seed 3 --out " + q(dir / "B")).status == 0);
  auto meta = nlohmann::json::parse(testing::read_file(dir / "B" / "dataset.json"));
  meta["name"] = "synthB";
  testing::write_file(dir / "B" / "dataset.json", meta.dump());
  fs::rename(dir / "B" / "vessel_cache" / "synth", dir / "B" / "vessel_cache" / "synthB");
  r = cli("eval --checkpoint " + q(ckpt) + " --data " + q(dir / "B") + " --thresholds palm --report-dir " +
          q(dir / "rep"));
  REQUIRE_MESSAGE(r.status == 0, r.output);
  CHECK(r.output.find("2/3R") != std::string::npos);
  for (const char* f : {"report.txt", "report.csv", "report.png", "report.json", "predictions.jsonl"})
    CHECK(fs::exists(dir / "rep" / f));
  const auto rep = nlohmann::json::parse(testing::read_file(dir / "rep" / "report.json")).get<bvit::EvalReport>();
  CHECK(rep.train_dataset == "synth");
  CHECK(rep.test_dataset == "synthB");
  CHECK(rep.results.size() == 5);

  // BILATERAL_CACHE redirects the vessel cache; an empty one is a miss.
  r = cli("eval --checkpoint " + q(ckpt) + " --data " + q(dir / "A") + " --report-dir " + q(dir / "rep2"),
          "BILATERAL_CACHE=" + q(dir / "empty_cache"));
  CHECK(r.status == 1);
  CHECK(r.output.find("cache miss") != std::string::npos);

  r = cli("eval --checkpoint " + q(dir / "nope.bvit") + " --data " + q(dir / "A") + " --report-dir " + q(dir / "x"));
  CHECK(r.status == 1);
  CHECK(count_lines(r.output) == 1);
  CHECK(r.output.find("checkpoint") != std::string::npos);
}

TEST_CASE("a perfect predictor scores 100 percent") {
  testing::TempDir dir;
  REQUIRE(cli("make-synth --n 6 --size 64 --seed 4 --out " + q(dir / "d")).status == 0);
  std::vector<bvit::Prediction> perfect;
  for (const auto& row : bvit::read_manifest(dir / "d" / "manifest.csv")) {
    bvit::Prediction p;
    p.id = row.id;
    p.position = {row.fovea_x, row.fovea_y};
    perfect.push_back(p);
  }
  bvit::write_predictions(dir / "perfect.jsonl", perfect);
  const auto r = cli("eval --predictions " + q(dir / "perfect.jsonl") + " --data " + q(dir / "d") +
                     " --report-dir " + q(dir / "rep"));
  REQUIRE_MESSAGE(r.status == 0, r.output);
  const auto rep = nlohmann::json::parse(testing::read_file(dir / "rep" / "report.json")).get<bvit::EvalReport>();
  for (std::size_t i = 0; i < rep.results.size(); ++i)
    for (auto s : bvit::kStrata) CHECK(rep.accuracy(i, s) == 100.0);
  CHECK(r.output.find("100.00") != std::string::npos);

  CHECK(cli("eval --data " + q(dir / "d") + " --report-dir " + q(dir / "rep")).status == 1);
}

TEST_CASE("ablation runs all variants on one split and resumes") {
  testing::TempDir dir;
  REQUIRE(cli("make-synth --n 8 --size 64 --seed 5 --out " + q(dir / "d")).status == 0);
  const std::string base = "ablate --data " + q(dir / "d") + " --out " + q(dir / "abl") + " --epochs 1 " + kToy;
  auto r = cli(base + " --stop-after 2");
  REQUIRE_MESSAGE(r.status == 0, r.output);
  CHECK_FALSE(fs::exists(dir / "abl" / "ablation.txt"));
  const std::string split_before = testing::read_file(dir / "abl" / "split.json");

  r = cli(base);
  REQUIRE_MESSAGE(r.status == 0, r.output);
  CHECK(testing::read_file(dir / "abl" / "split.json") == split_before);
  const std::string table = testing::read_file(dir / "abl" / "ablation.txt");
  for (const char* label : {"ViT+plain decoder (TransUNet)", "ViT+VB+plain decoder", "ViT+VB+MFF (Proposed)",
                            "ViT+VB (fundus as the input)+MFF"})
    CHECK(table.find(label) != std::string::npos);
  CHECK(count_lines(testing::read_file(dir / "abl" / "ablation.csv")) == 1 + 4 * 5);  // header + variant x threshold
  for (const char* v : {"vit_plain", "vit_vb_plain", "vit_vb_mff", "vit_vbfundus_mff"})
    CHECK(fs::exists(dir / "abl" / v / "report" / "report.json"));
}

TEST_CASE("vessel model training command") {
  testing::TempDir dir;
  REQUIRE(cli("make-synth --n 4 --size 64 --seed 6 --out " + q(dir / "d")).status == 0);
  const auto r = cli("train-vessel --data " + q(dir / "d") + " --out " + q(dir / "v") + " --epochs 2 " + kToy);
  REQUIRE_MESSAGE(r.status == 0, r.output);
  const fs::path run = only_run_dir(dir / "v", "vessel-");
  CHECK(fs::exists(run / "checkpoint_last.bvit"));
  CHECK(r.output.find("dice") != std::string::npos);

  const auto t = cli("train --data " + q(dir / "d") + " --out " + q(dir / "runs") + " --epochs 1 " + kToy +
                     " --vessel-source model --vessel-model " + q(run / "checkpoint_last.bvit"));
  CHECK_MESSAGE(t.status == 0, t.output);
}
