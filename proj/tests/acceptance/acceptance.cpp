// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//
// Criterion 10 (full-scale accuracy on the real Messidor/PALM data with GPU
// training) is optional and is not run here or in CI.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "bvit/datasets.hpp"
#include "bvit/error.hpp"
#include "bvit/evaluation.hpp"
#include "bvit/inference.hpp"
#include "bvit/network.hpp"
#include "bvit/preprocessing.hpp"
#include "bvit/training.hpp"
#include "bvit/vessel_oracle.hpp"
#include "support.hpp"

using namespace bvit;
using nn::Shape;
using nn::Tensor;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail << "first failure: " << what << "; ";
    pass = pass && ok;
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Tensor random_input(int n, int c, int s, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  return testing::random_tensor({n, c, s, s}, rng, false, lo, hi);
}

std::optional<Tensor> vessel_for(Variant v, int n, int s, std::uint64_t seed) {
  if (!has_vessel_branch(v)) return std::nullopt;
  return random_input(n, vessel_input_channels(v), s, seed, 0.0f, 1.0f);
}

BilateralViT toy_model(Variant v, int s, std::uint64_t seed) {
  BilateralViT m(NetworkConfig::toy(v, s));
  init_weights(m, seed);
  return m;
}

void evaluation_oracle(Outcome& o) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1000);
  std::uniform_real_distribution<double> u(0, 1000), rr(5, 80), jitter(-120, 120);
  std::vector<GroundTruth> truth;
  std::vector<Prediction> preds;
  for (int i = 0; i < 1000; ++i) {
    const std::string id = "t" + std::to_string(i);
    const Point2 g{u(rng), u(rng)};
    truth.push_back({id, g, rr(rng), i % 4 ? DiseaseStatus::normal : DiseaseStatus::diseased});
    Prediction p;
    p.id = id;
    p.position = {g.x + jitter(rng), g.y + jitter(rng)};
    preds.push_back(p);
  }
  int compared = 0;
  for (const auto& th : {EvalThresholds::messidor(), EvalThresholds::palm()}) {
    const auto report = evaluate(preds, truth, th);
    for (std::size_t k = 0; k < th.multipliers.size(); ++k) {
      const double m = static_cast<double>(th.multipliers[k].num) / th.multipliers[k].den;
      int hits[3] = {0, 0, 0}, totals[3] = {0, 0, 0};
      for (int i = 0; i < 1000; ++i) {
        const int stratum = truth[i].disease == DiseaseStatus::normal ? 1 : 2;
        ++totals[0], ++totals[stratum];
        const double dx = preds[i].position.x - truth[i].fovea.x, dy = preds[i].position.y - truth[i].fovea.y;
        if (std::sqrt(dx * dx + dy * dy) <= m * truth[i].disc_radius) ++hits[0], ++hits[stratum];
      }
      for (int s = 0; s < 3; ++s) {
        const double expect = 100.0 * hits[s] / totals[s];
        o.require(report.accuracy(k, kStrata[s]) == expect, th.name + " " + th.multipliers[k].label());
        ++compared;
      }
    }
  }
  const double secs = seconds_since(t0);
  o.require(secs < 5.0, "runtime");
  o.detail << compared << " accuracies compared, " << secs << " s";
}

void inclusive_boundary(Outcome& o) {
  o.require(is_hit({0, 0}, {3, 4}, 5.0, 1.0), "3-4-5 at 1R");
  o.require(is_hit({10, 10}, {10, 17.5}, 7.5, 1.0), "axis-aligned at 1R");
  o.require(!is_hit({0, 0}, {3, 4}, 5.0, 0.5), "3-4-5 at 1/2R");
  const auto r = evaluate({[] {
                            Prediction p;
                            p.id = "b";
                            p.position = {6, 8};
                            return p;
                          }()},
                          std::vector<GroundTruth>{{"b", {0, 0}, 10.0, DiseaseStatus::normal}},
                          EvalThresholds::messidor());
  const auto& ms = EvalThresholds::messidor().multipliers;
  const auto one = std::find_if(ms.begin(), ms.end(), [](const Multiplier& m) { return m.num == m.den; });
  o.require(one != ms.end(), "messidor has no 1R");
  if (one != ms.end()) {
    const auto k = static_cast<std::size_t>(one - ms.begin());
    o.require(r.accuracy(k, Stratum::overall) == 100.0 && r.accuracy(k - 1, Stratum::overall) == 0.0, "report at 1R");
  }
  o.detail << "distance 5 with R 5 is a hit at 1R";
}

void shape_suite(Outcome& o) {
  const auto t0 = Clock::now();
  nn::NoGradGuard guard;
  int checked = 0;
  for (Variant v : all_variants()) {
    for (int s : {64, 128}) {
      const auto m = toy_model(v, s, 3);
      for (int n : {1, 2}) {
        const std::string tag = std::string(to_string(v)) + " S=" + std::to_string(s) + " N=" + std::to_string(n);
        const Tensor x = random_input(n, 3, s, 10 + n);
        const Tensor out = m.forward(x, vessel_for(v, n, s, 20 + n));
        o.require(out.shape() == Shape{n, 1, s, s}, tag + " output");
        const auto pyr = m.encode(x);
        o.require(pyr.bottleneck.dim(0) == n && pyr.bottleneck.dim(2) == s / 16 && pyr.bottleneck.dim(3) == s / 16,
                  tag + " bottleneck");
        if (has_vessel_branch(v)) {
          const auto sig = m.vessel_branch(*vessel_for(v, n, s, 30 + n));
          o.require(sig.maps.size() == 4, tag + " SIG count");
          for (std::size_t i = 0; i < sig.maps.size(); ++i) {
            const int want = s / (16 >> i);
            o.require(sig.maps[i].dim(0) == n && sig.maps[i].dim(2) == want && sig.maps[i].dim(3) == want,
                      tag + " SIG " + std::to_string(i));
          }
        }
        ++checked;
      }
    }
  }
  const double secs = seconds_since(t0);
  o.require(secs < 120.0, "runtime");
  o.detail << checked << " configurations, " << secs << " s";
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// Independent double-precision dice + BCE for a single 1 x 1 x H x W plane.
double reference_loss(const std::vector<double>& z, const std::vector<double>& t) {
  double inter = 0, sp = 0, st = 0, bce = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-z[i]));
    inter += p * t[i], sp += p, st += t[i];
    bce += softplus(z[i]) - t[i] * z[i];
  }
  return 1.0 - (2.0 * inter + 1.0) / (sp + st + 1.0) + bce / static_cast<double>(z.size());
}

void gradient_flow(Outcome& o) {
  const auto t0 = Clock::now();
  std::size_t params = 0;
  for (Variant v : all_variants()) {
    auto m = toy_model(v, 64, 41);
    const Tensor out = m.forward(random_input(2, 3, 64, 42), vessel_for(v, 2, 64, 43));
    nn::mean(out).backward();
    for (const auto& p : m.parameters()) {
      const auto g = p.tensor.grad();
      const bool nonzero = p.tensor.has_grad() && std::any_of(g.begin(), g.end(), [](float x) { return x != 0.0f; });
      o.require(nonzero, std::string(to_string(v)) + " " + p.name);
      ++params;
    }
  }

  std::mt19937_64 rng(44);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto zf = testing::random_values(64, rng, -3.0f, 3.0f);
    std::vector<float> tf(64);
    for (auto& v : tf) v = rng() % 3 == 0 ? 1.0f : 0.0f;
    auto logits = Tensor::from_data({1, 1, 8, 8}, zf, true);
    combined_loss(logits, Tensor::from_data({1, 1, 8, 8}, tf)).backward();
    const std::vector<double> z(zf.begin(), zf.end()), t(tf.begin(), tf.end());
    double err = 0.0, ref = 0.0;
    for (int i = 0; i < 64; ++i) {
      const double h = 1e-5;
      auto up = z, down = z;
      up[i] += h, down[i] -= h;
      const double fd = (reference_loss(up, t) - reference_loss(down, t)) / (2 * h);
      err = std::max(err, std::abs(fd - logits.grad()[i]));
      ref = std::max(ref, std::abs(fd));
    }
    worst = std::max(worst, err / ref);
  }
  o.require(worst <= 1e-4, "combined loss finite differences");
  const double secs = seconds_since(t0);
  o.require(secs < 120.0, "runtime");
  o.detail << params << " parameters with gradient, loss gradient rel err " << worst << ", " << secs << " s";
}

void toy_overfit(Outcome& o) {
  const auto t0 = Clock::now();
  testing::TempDir dir("bvit-acceptance");
  const auto ds = synth_dataset(8, 64, 1, dir / "data");
  const auto loaded = load_dataset(dir / "data", ds.manifest);
  const auto oracle = VesselOracle::cache(ds.vessel_cache);
  const auto cfg = NetworkConfig::toy(Variant::vit_vb_mff, 64);
  BilateralViT model(cfg);
  init_weights(model, 1);
  const auto examples = make_fovea_examples(loaded.samples, cfg, &oracle, 0.25);

  TrainConfig tc;
  tc.epochs = 1000;
  tc.max_iterations = 200;
  tc.augment = false;
  tc.seed = 1;
  TrainOptions opts;
  std::vector<const Image*> images;
  for (const auto& e : examples) images.push_back(&e.image);
  opts.normalization = compute_channel_stats(images);
  const auto result = train(model, examples, {}, tc, opts);
  o.require(result.iterations == 200, "iteration count");

  const double loss = evaluate_loss(model, examples, opts.normalization, tc.batch_size);
  o.require(loss < 0.3, "final combined loss");

  PredictOptions po;
  po.normalization = opts.normalization;
  int hits = 0;
  for (const auto& s : loaded.samples) {
    const auto p = predict(model, s, &oracle, po);
    hits += is_hit(s.fovea, p.position, s.disc_radius, 0.25);
  }
  o.require(hits >= 7, "hits within R/4");
  const double secs = seconds_since(t0);
  o.require(secs < 600.0, "runtime");
  o.detail << "loss " << loss << " (last batch " << result.iteration_losses.back() << "), " << hits
           << "/8 within R/4, " << secs << " s";
}

void schedule_endpoints(Outcome& o) {
  const double first = lr_at(0), last = lr_at(200);
  o.require(std::abs(first - 1e-3) <= 1e-9 * 1e-3, "lr_at(0)");
  o.require(std::abs(last - 1e-7) <= 1e-9 * 1e-7, "lr_at(200)");
  for (int e = 1; e <= 200; ++e) o.require(lr_at(e) <= lr_at(e - 1), "monotone at epoch " + std::to_string(e));
  o.detail << "lr_at(0)=" << first << " lr_at(200)=" << last;
}

void coordinate_round_trip(Outcome& o) {
  std::mt19937_64 rng(7007);
  std::uniform_int_distribution<int> side(1, 900), off(0, 400), target(1, 32);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const int x0 = off(rng), y0 = off(rng), w = side(rng), h = side(rng);
    const auto t = pad_and_resize(Image(w, h, 1), {x0, y0, x0 + w, y0 + h}, 16 * target(rng)).transform;
    const Point2 p{x0 + u(rng) * w, y0 + u(rng) * h};
    const Point2 q = transform_point(t, transform_point(t, p, Direction::forward), Direction::inverse);
    worst = std::max({worst, std::abs(q.x - p.x), std::abs(q.y - p.y)});
  }
  o.require(worst <= 1e-6, "round trip");

  double worst_centroid = 0.0;
  std::uniform_real_distribution<double> pos(16.0, 48.0);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Point2 fovea{pos(rng), pos(rng)};
    const auto out = augment(Image(64, 64, 3), make_fovea_mask(fovea, 6, 64).mask, Image(), seed);
    const Point2 expect = out.geometry.map(fovea);
    double sx = 0, sy = 0, n = 0;
    for (int y = 0; y < out.mask.height; ++y)
      for (int x = 0; x < out.mask.width; ++x)
        if (out.mask.at(x, y) > 0.5f) sx += x, sy += y, ++n;
    o.require(n > 0, "augmented mask is empty");
    if (n > 0) worst_centroid = std::max(worst_centroid, distance({sx / n, sy / n}, expect));
  }
  o.require(worst_centroid <= 1.0, "augmented mask centroid");
  o.detail << "round trip max err " << worst << ", centroid max offset " << worst_centroid << " px";
}

double sorted_median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

void median_extractor(Outcome& o) {
  std::mt19937_64 rng(8008);
  std::uniform_int_distribution<int> coord(0, 95), count(1, 200);
  std::uniform_real_distribution<float> above(0.51f, 1.0f);
  for (int trial = 0; trial < 500; ++trial) {
    ProbabilityMap map{Image(96, 96, 1, 0.0f)};
    std::vector<double> xs, ys;
    const int n = count(rng);
    for (int i = 0; i < n; ++i) {
      const int x = coord(rng), y = coord(rng);
      if (map.scores.at(x, y) > 0) continue;
      map.scores.at(x, y) = above(rng);
      xs.push_back(x), ys.push_back(y);
    }
    const auto e = extract_fovea(map);
    o.require(!e.empty_set && e.position == Point2{sorted_median(xs), sorted_median(ys)},
              "trial " + std::to_string(trial));
  }

  ProbabilityMap low{Image(40, 30, 1, 0.2f)};
  low.scores.at(31, 7) = 0.45f;
  const auto e = extract_fovea(low);
  o.require(e.empty_set && e.position == Point2{31, 7}, "empty-set argmax");
  o.detail << "500 candidate sets matched, empty set falls back to the argmax";
}

void vessel_sensitivity(Outcome& o) {
  nn::NoGradGuard guard;
  const auto m = toy_model(Variant::vit_vb_mff, 64, 51);
  const Tensor x = random_input(1, 3, 64, 52);
  const Tensor a = m.forward(x, vessel_for(Variant::vit_vb_mff, 1, 64, 53));
  const Tensor b = m.forward(x, vessel_for(Variant::vit_vb_mff, 1, 64, 54));
  float diff = 0.0f;
  for (std::int64_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::abs(a.values()[i] - b.values()[i]));
  o.require(diff > 1e-6f, "vit_vb_mff output unchanged");

  const auto plain = toy_model(Variant::vit_plain, 64, 55);
  bool rejected = false;
  try {
    plain.forward(x, Tensor::zeros({1, 1, 64, 64}));
  } catch (const ConfigError&) {
    rejected = true;
  }
  o.require(rejected, "vit_plain accepted a vessel input");
  o.detail << "max abs diff " << diff << ", vit_plain rejects vessel input";
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria = {
      {"evaluation matches brute-force scorer", evaluation_oracle},
      {"hit boundary is inclusive", inclusive_boundary},
      {"network shapes", shape_suite},
      {"gradient flow", gradient_flow},
      {"toy overfit", toy_overfit},
      {"learning-rate schedule", schedule_endpoints},
      {"coordinate round trip", coordinate_round_trip},
      {"median extractor", median_extractor},
      {"vessel-branch sensitivity", vessel_sensitivity},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "exception: " << e.what();
    }
    failures += !o.pass;
    std::printf("%s  %zu  %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.str().c_str());
    std::fflush(stdout);
  }
  std::printf("SKIP  10  full-scale accuracy on Messidor/PALM: optional, needs the licensed data and a GPU\n");
  return failures == 0 ? 0 : 1;
}
