#include "bvit/datasets.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "bvit/error.hpp"
#include "bvit/image.hpp"
#include "bvit/seed.hpp"
#include "bvit/vessel_oracle.hpp"

namespace bvit {

// ----------------------------------------------------------------- csv

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + '"';
}

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_number(const std::string& s, const char* field) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  while (b < e && *b == ' ') ++b;
  while (e > b && (e[-1] == ' ' || e[-1] == '\r')) --e;
  const auto res = std::from_chars(b, e, v);
  if (res.ec != std::errc() || res.ptr != e || b == e) {
    throw DataError(std::string("malformed ") + field + " '" + s + "'");
  }
  return v;
}

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && s[i] == ' ') ++i;
  return s.substr(i);
}

}  // namespace

std::vector<ManifestRow> read_manifest(const std::filesystem::path& path, std::vector<std::string>* problems) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read manifest '" + path.string() + "'");
  std::string line;
  if (!std::getline(is, line) || trim(line) != kManifestHeader) {
    throw DataError("manifest '" + path.string() + "' must start with the header " + kManifestHeader);
  }
  std::vector<ManifestRow> rows;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto f = split_csv_line(line);
    try {
      if (f.size() != 7) {
        throw DataError("expected 7 fields, found " + std::to_string(f.size()));
      }
      ManifestRow r;
      r.id = trim(f[0]);
      r.image_path = trim(f[1]);
      r.fovea_x = parse_number(f[2], "fovea_x");
      r.fovea_y = parse_number(f[3], "fovea_y");
      r.disc_radius = parse_number(f[4], "disc_radius_R");
      r.disease = parse_disease_status(trim(f[5]));
      r.split = trim(f[6]);
      rows.push_back(std::move(r));
    } catch (const DataError& e) {
      if (problems) problems->push_back("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw DataError("cannot write manifest '" + path.string() + "'");
  os << kManifestHeader << '\n';
  for (const auto& r : rows) {
    os << csv_field(r.id) << ',' << csv_field(r.image_path) << ',' << format_number(r.fovea_x) << ','
       << format_number(r.fovea_y) << ',' << format_number(r.disc_radius) << ',' << to_string(r.disease) << ','
       << csv_field(r.split) << '\n';
  }
  if (!os) throw DataError("error while writing manifest '" + path.string() + "'");
}

// ----------------------------------------------------------------- loading

namespace {

std::string default_tag(const std::filesystem::path& root) {
  if (std::ifstream is(root / "dataset.json"); is) {
    const auto j = nlohmann::json::parse(is, nullptr, false);
    if (!j.is_discarded() && j.contains("name") && j["name"].is_string()) return j["name"].get<std::string>();
  }
  auto name = std::filesystem::weakly_canonical(root).filename().string();
  return name.empty() ? "dataset" : name;
}

}  // namespace

LoadedDataset load_dataset(const std::filesystem::path& root_dir, const std::filesystem::path& manifest_csv,
                           const LoadOptions& options) {
  LoadedDataset out;
  auto& rep = out.report;
  const auto rows = read_manifest(manifest_csv, &rep.problems);
  rep.skipped = rep.problems.size();
  rep.rows = rows.size() + rep.skipped;
  const std::string tag = options.dataset_tag.empty() ? default_tag(root_dir) : options.dataset_tag;

  std::set<std::string> seen;
  for (const auto& r : rows) {
    if (options.split && r.split != *options.split) continue;
    auto skip = [&](const std::string& why) {
      rep.problems.push_back("sample '" + r.id + "': " + why);
      ++rep.skipped;
    };
    if (!seen.insert(r.id).second) {
      skip("duplicate id");
      continue;
    }
    std::filesystem::path image_path = r.image_path;
    if (image_path.is_relative()) image_path = root_dir / image_path;
    if (!std::filesystem::exists(image_path)) {
      skip("image not found: " + image_path.string());
      continue;
    }
    FundusSample s;
    try {
      s.image = load_image(image_path);
    } catch (const DataError& e) {
      skip(e.what());
      continue;
    }
    s.id = r.id;
    s.fovea = {r.fovea_x, r.fovea_y};
    s.disc_radius = r.disc_radius;
    s.disease = r.disease;
    s.dataset_tag = tag;
    s.split = r.split;
    const auto bad = validate_sample(s);
    if (!bad.empty()) {
      std::string msg;
      for (const auto& b : bad) msg += (msg.empty() ? "" : "; ") + b;
      skip(msg);
      continue;
    }
    out.samples.push_back(std::move(s));
  }
  rep.loaded = out.samples.size();
  if (out.samples.empty()) {
    std::string msg = "no usable samples in '" + manifest_csv.string() + "'";
    if (options.split) msg += " for split '" + *options.split + "'";
    if (!rep.problems.empty()) msg += " (first problem: " + rep.problems.front() + ")";
    throw DataError(msg);
  }
  return out;
}

// ----------------------------------------------------------------- splits

Split make_split(const std::vector<FundusSample>& samples, const SplitScheme& scheme) {
  Split out;
  if (scheme.kind == SplitScheme::Kind::manifest) {
    for (const auto& s : samples) (s.split == "train" ? out.train : out.test).push_back(s);
  } else {
    if (!(scheme.train_fraction > 0.0 && scheme.train_fraction < 1.0)) {
      throw ConfigError("train fraction must lie in (0, 1)");
    }
    std::array<std::vector<std::size_t>, 2> strata;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      strata[samples[i].disease == DiseaseStatus::normal ? 0 : 1].push_back(i);
    }
    const auto target = static_cast<std::size_t>(std::llround(scheme.train_fraction * samples.size()));
    std::array<std::size_t, 2> quota{};
    std::array<double, 2> remainder{};
    std::size_t assigned = 0;
    for (int k = 0; k < 2; ++k) {
      const double exact = scheme.train_fraction * static_cast<double>(strata[k].size());
      quota[k] = static_cast<std::size_t>(std::floor(exact));
      remainder[k] = exact - std::floor(exact);
      assigned += quota[k];
    }
    while (assigned < target) {
      const int k = remainder[1] > remainder[0] ? 1 : 0;
      if (quota[k] < strata[k].size()) ++quota[k];
      else ++quota[1 - k];
      remainder[k] = -1.0;
      ++assigned;
    }
    std::vector<bool> in_train(samples.size(), false);
    for (int k = 0; k < 2; ++k) {
      std::mt19937_64 rng(mix_seed({scheme.seed, static_cast<std::uint64_t>(k)}));
      auto idx = strata[k];
      std::shuffle(idx.begin(), idx.end(), rng);
      for (std::size_t j = 0; j < quota[k]; ++j) in_train[idx[j]] = true;
    }
    for (std::size_t i = 0; i < samples.size(); ++i) (in_train[i] ? out.train : out.test).push_back(samples[i]);
  }
  if (out.train.empty()) throw DataError("split leaves the training partition empty");
  if (out.test.empty()) throw DataError("split leaves the test partition empty");
  return out;
}

Normalization compute_channel_stats(const std::vector<const Image*>& images) {
  if (images.empty()) throw DataError("no images for channel statistics");
  std::array<double, 3> sum{}, sq{};
  double count = 0.0;
  for (const Image* im : images) {
    if (im->channels != 3) throw ShapeError("channel statistics need 3-channel images");
    for (std::size_t i = 0; i < im->pixels.size(); i += 3) {
      for (int c = 0; c < 3; ++c) {
        const double v = im->pixels[i + c];
        sum[c] += v;
        sq[c] += v * v;
      }
    }
    count += static_cast<double>(im->pixels.size() / 3);
  }
  Normalization n;
  for (int c = 0; c < 3; ++c) {
    const double mean = sum[c] / count;
    const double var = std::max(0.0, sq[c] / count - mean * mean);
    n.mean[c] = static_cast<float>(mean);
    n.std[c] = static_cast<float>(std::max(std::sqrt(var), 1e-6));
  }
  return n;
}

// ----------------------------------------------------------------- vessel pairs

std::vector<VesselPair> load_vessel_pairs(const std::filesystem::path& root_dir,
                                          const std::filesystem::path& pairs_csv, int network_size) {
  std::ifstream is(pairs_csv);
  if (!is) throw DataError("cannot read vessel pair list '" + pairs_csv.string() + "'");
  std::string line;
  if (!std::getline(is, line) || trim(line) != "id,image_path,vessel_path") {
    throw DataError("'" + pairs_csv.string() + "' must start with the header id,image_path,vessel_path");
  }
  std::vector<VesselPair> out;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 3) {
      throw DataError(pairs_csv.string() + " line " + std::to_string(line_no) + ": expected 3 fields");
    }
    auto resolve = [&](const std::string& p) {
      std::filesystem::path path = trim(p);
      return path.is_relative() ? root_dir / path : path;
    };
    const Image fundus = load_image(resolve(f[1]));
    const Image vessels = load_image(resolve(f[2]), true);
    if (vessels.width != fundus.width || vessels.height != fundus.height) {
      throw DataError("vessel pair '" + trim(f[0]) + "': image and vessel map sizes differ");
    }
    const Preprocessed pre = preprocess(fundus, network_size);
    out.push_back({trim(f[0]), pre.image, warp_to_network(vessels, pre.transform, Interpolation::nearest)});
  }
  if (out.empty()) throw DataError("no vessel pairs in '" + pairs_csv.string() + "'");
  return out;
}

// ----------------------------------------------------------------- synthetic

namespace {

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

struct Rgb {
  double r, g, b;
};

Rgb mix(const Rgb& a, const Rgb& b, double t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

SynthSample make_one(int index, int size, std::uint64_t seed, const SynthOptions& opt) {
  std::mt19937_64 rng(mix_seed({seed, static_cast<std::uint64_t>(index)}));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uniform = [&](double a, double b) { return a + (b - a) * u(rng); };
  const double S = size;
  const double pi = std::acos(-1.0);

  SynthSample out;
  FundusSample& s = out.sample;
  char id[32];
  std::snprintf(id, sizeof(id), "synth_%04d", index);
  s.id = id;
  s.dataset_tag = opt.dataset_tag;
  s.disease = index % 2 == 1 ? DiseaseStatus::diseased : DiseaseStatus::normal;

  const Point2 c{(S - 1.0) / 2.0, (S - 1.0) / 2.0};
  const double fov = 0.47 * S;
  const double R = S * uniform(opt.disc_radius_min, opt.disc_radius_max);
  const double side = u(rng) < 0.5 ? -1.0 : 1.0;
  const Point2 disc{c.x + side * S * uniform(0.19, 0.23), c.y + S * uniform(-0.05, 0.05)};
  const Point2 fovea{disc.x - side * R * uniform(4.6, 5.2), disc.y + R * uniform(-0.3, 0.6)};
  s.fovea = fovea;
  s.disc_radius = R;

  out.vessels = Image(size, size, 1);
  draw_vessel_tree(out.vessels, disc, fovea, rng);

  if (s.disease == DiseaseStatus::diseased) {
    const int count = 1 + static_cast<int>(u(rng) * 3.0);
    for (int k = 0; k < count; ++k) {
      Lesion l;
      l.bright = u(rng) < 0.5;
      l.radius = R * uniform(0.8, 1.5);
      if (k == 0 && u(rng) < opt.fovea_overlap_probability) {
        const double a = uniform(-pi, pi), d = l.radius * uniform(0.0, 0.5);
        l.center = {fovea.x + d * std::cos(a), fovea.y + d * std::sin(a)};
      } else {
        const double a = uniform(-pi, pi), d = fov * std::sqrt(u(rng)) * 0.8;
        l.center = {c.x + d * std::cos(a), c.y + d * std::sin(a)};
      }
      out.lesions.push_back(l);
      if (distance(l.center, fovea) <= l.radius) out.lesion_covers_fovea = true;
    }
  }

  // Low-frequency illumination variation.
  std::array<double, 6> wave{};
  for (auto& w : wave) w = u(rng);
  std::normal_distribution<double> noise(0.0, opt.noise_sigma);

  const Rgb base{0.78, 0.36, 0.17}, disc_color{0.98, 0.88, 0.62}, vessel_color{0.42, 0.09, 0.05};
  const Rgb bright_lesion{0.93, 0.83, 0.64}, dark_lesion{0.33, 0.06, 0.04};
  s.image = Image(size, size, 3);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const Point2 p{static_cast<double>(x), static_cast<double>(y)};
      const double dc = distance(p, c) / fov;
      if (dc > 1.0) continue;
      const double illum = (1.0 - 0.3 * dc * dc) *
                           (1.0 + 0.04 * std::sin(2 * pi * (wave[0] + x / S * (1 + wave[1]))) +
                            0.04 * std::sin(2 * pi * (wave[2] + y / S * (1 + wave[3]))));
      Rgb col{base.r * illum, base.g * illum, base.b * illum};

      const double df = distance(p, fovea);
      const double macula = std::exp(-df * df / (2.0 * (1.6 * R) * (1.6 * R)));
      const double pit = std::exp(-df * df / (2.0 * (0.4 * R) * (0.4 * R)));
      const double shade = (1.0 - 0.35 * macula) * (1.0 - 0.3 * pit);
      col = {col.r * shade, col.g * shade, col.b * shade};

      const double dd = distance(p, disc);
      col = mix(col, disc_color, 0.9 * (1.0 - smoothstep(0.85 * R, 1.15 * R, dd)));

      if (out.vessels.at(x, y) > 0.5f) col = mix(col, {vessel_color.r * illum, vessel_color.g * illum, vessel_color.b * illum}, 0.8);

      for (const auto& l : out.lesions) {
        const double a = 1.0 - smoothstep(0.8 * l.radius, 1.1 * l.radius, distance(p, l.center));
        if (a > 0.0) col = mix(col, l.bright ? bright_lesion : dark_lesion, 0.85 * a);
      }

      const double n0 = noise(rng), n1 = noise(rng), n2 = noise(rng);
      // red floor keeps the whole FOV above the black-border crop threshold
      s.image.at(x, y, 0) = static_cast<float>(std::clamp(col.r + n0, 0.08, 1.0));
      s.image.at(x, y, 1) = static_cast<float>(std::clamp(col.g + n1, 0.0, 1.0));
      s.image.at(x, y, 2) = static_cast<float>(std::clamp(col.b + n2, 0.0, 1.0));
    }
  }
  s.image = quantize_8bit(s.image);

  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      if (distance({static_cast<double>(x), static_cast<double>(y)}, c) > fov) out.vessels.at(x, y) = 0.0f;
    }
  }
  return out;
}

}  // namespace

std::vector<SynthSample> generate_synthetic(int n, int size, std::uint64_t seed, const SynthOptions& options) {
  if (n <= 0) throw ConfigError("sample count must be positive");
  if (size <= 0 || size % 16 != 0) throw ConfigError("image size must be a positive multiple of 16");
  std::vector<SynthSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(make_one(i, size, seed, options));

  if (n >= 5) {
    std::vector<FundusSample> all;
    for (const auto& s : out) all.push_back(s.sample);
    const Split split = make_split(all, SplitScheme::ratio(seed, 0.8));
    std::set<std::string> train_ids;
    for (const auto& s : split.train) train_ids.insert(s.id);
    for (auto& s : out) s.sample.split = train_ids.count(s.sample.id) ? "train" : "test";
  } else {
    for (auto& s : out) s.sample.split = "train";
  }
  return out;
}

SynthDataset synth_dataset(int n, int size, std::uint64_t seed, const std::filesystem::path& out,
                           const SynthOptions& options) {
  SynthDataset ds;
  ds.samples = generate_synthetic(n, size, seed, options);
  std::error_code ec;
  std::filesystem::create_directories(out / "images", ec);
  if (ec) throw DataError("cannot create '" + (out / "images").string() + "': " + ec.message());
  ds.vessel_cache = out / "vessel_cache";

  std::filesystem::create_directories(out / "vessels");
  std::ostringstream pairs;
  pairs << "id,image_path,vessel_path\n";
  std::vector<ManifestRow> rows;
  for (const auto& s : ds.samples) {
    const std::string rel = "images/" + s.sample.id + ".png";
    save_image(out / rel, s.sample.image);
    const std::string vrel = "vessels/" + s.sample.id + ".png";
    save_image(out / vrel, s.vessels);
    pairs << s.sample.id << ',' << rel << ',' << vrel << '\n';
    const Preprocessed pre = preprocess(s.sample.image, size);
    Image net = warp_to_network(s.vessels, pre.transform, Interpolation::bilinear);
    VesselOracle::store(ds.vessel_cache, options.dataset_tag, s.sample.id, {net}, pre.transform.fingerprint());
    rows.push_back({s.sample.id, rel, s.sample.fovea.x, s.sample.fovea.y, s.sample.disc_radius, s.sample.disease,
                    s.sample.split});
  }
  ds.manifest = out / "manifest.csv";
  write_manifest(ds.manifest, rows);
  ds.vessel_pairs = out / "vessels.csv";
  {
    std::ofstream os(ds.vessel_pairs, std::ios::trunc | std::ios::binary);
    if (!(os << pairs.str())) throw DataError("cannot write '" + ds.vessel_pairs.string() + "'");
  }
  std::ofstream meta(out / "dataset.json", std::ios::trunc);
  meta << nlohmann::json{{"name", options.dataset_tag}, {"size", size}, {"seed", seed}, {"count", n}}.dump(2)
       << '\n';
  if (!meta) throw DataError("cannot write '" + (out / "dataset.json").string() + "'");
  return ds;
}

}  // namespace bvit
