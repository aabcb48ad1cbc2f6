#include "bvit/evaluation.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "bvit/error.hpp"

namespace bvit {

bool is_hit(const Point2& gt, const Point2& pred, double R, double multiplier) {
  if (!(R > 0.0)) throw ConfigError("disc radius R must be positive");
  return distance(gt, pred) <= multiplier * R;
}

Multiplier parse_multiplier(std::string_view text) {
  std::string_view t = text;
  if (!t.empty() && (t.back() == 'R' || t.back() == 'r')) t.remove_suffix(1);
  Multiplier m{0, 1};
  const auto slash = t.find('/');
  auto parse_int = [&](std::string_view s, int& out) {
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && ptr == s.data() + s.size();
  };
  bool ok = slash == std::string_view::npos ? parse_int(t, m.num)
                                            : parse_int(t.substr(0, slash), m.num) &&
                                                  parse_int(t.substr(slash + 1), m.den);
  if (!ok || m.num <= 0 || m.den <= 0) {
    throw ConfigError("malformed multiplier '" + std::string(text) + "' (expected e.g. 1/8R or 2R)");
  }
  return m;
}

std::vector<GroundTruth> ground_truth_of(const std::vector<FundusSample>& samples) {
  std::vector<GroundTruth> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({s.id, s.fovea, s.disc_radius, s.disease});
  return out;
}

EvalReport evaluate(const std::vector<Prediction>& predictions, const std::vector<GroundTruth>& truth,
                    const EvalThresholds& thresholds) {
  thresholds.validate();
  std::map<std::string, const Prediction*> by_id;
  for (const auto& p : predictions) by_id[p.id] = &p;

  std::vector<std::string> missing;
  for (const auto& t : truth) {
    if (!by_id.count(t.id)) missing.push_back(t.id);
  }
  if (!missing.empty()) {
    std::string msg = "missing predictions for " + std::to_string(missing.size()) + " sample(s):";
    for (const auto& id : missing) msg += " " + id;
    throw DataError(msg);
  }

  EvalReport r;
  r.preset = thresholds.name;
  for (const auto& m : thresholds.multipliers) r.results.push_back({m, {}});
  double error_sum = 0.0;
  for (const auto& t : truth) {
    if (!(t.disc_radius > 0.0)) throw ConfigError("sample '" + t.id + "' has non-positive R");
    const Prediction& p = *by_id[t.id];
    const Stratum s = t.disease == DiseaseStatus::normal ? Stratum::normal : Stratum::diseased;
    ++r.totals.overall;
    ++r.totals.get(s);
    error_sum += distance(t.fovea, p.position);
    for (auto& res : r.results) {
      if (is_hit(t.fovea, p.position, t.disc_radius, res.multiplier)) {
        ++res.hits.overall;
        ++res.hits.get(s);
      }
    }
  }
  r.mean_pixel_error = truth.empty() ? 0.0 : error_sum / static_cast<double>(truth.size());
  return r;
}

EvalReport evaluate(const std::vector<Prediction>& predictions, const std::vector<FundusSample>& samples,
                    const EvalThresholds& thresholds) {
  return evaluate(predictions, ground_truth_of(samples), thresholds);
}

EvalRun cross_dataset_eval(const BilateralViT& model, const std::vector<FundusSample>& samples,
                           const VesselOracle* vessels, const PredictOptions& options,
                           const EvalThresholds& thresholds, const std::string& train_dataset,
                           const std::string& test_dataset) {
  EvalRun run;
  for (const auto& s : samples) run.predictions.push_back(predict(model, s, vessels, options));
  run.report = evaluate(run.predictions, samples, thresholds);
  run.report.train_dataset = train_dataset;
  run.report.test_dataset = test_dataset;
  return run;
}

// ----------------------------------------------------------------- text

namespace {

std::string stratum_title(Stratum s) {
  switch (s) {
    case Stratum::overall: return "Overall";
    case Stratum::normal: return "Normal";
    case Stratum::diseased: return "Diseased";
  }
  return "?";
}

std::string format_pct(double v, const std::string& preset) {
  std::ostringstream os;
  if (preset == "palm") os << std::llround(v);
  else os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

}  // namespace

std::string format_report_text(const EvalReport& report) {
  std::ostringstream os;
  os << "Fovea localization accuracy";
  if (!report.preset.empty()) os << " (" << report.preset << " thresholds)";
  os << '\n';
  if (!report.train_dataset.empty() || !report.test_dataset.empty()) {
    os << "trained on: " << (report.train_dataset.empty() ? "?" : report.train_dataset)
       << "   tested on: " << (report.test_dataset.empty() ? "?" : report.test_dataset) << '\n';
  }

  std::vector<std::string> header{"Stratum", "N"};
  for (const auto& res : report.results) header.push_back(res.multiplier.label() + " (%)");
  std::vector<std::vector<std::string>> rows{header};
  for (std::size_t k = 0; k < kStrata.size(); ++k) {
    const Stratum s = kStrata[k];
    std::vector<std::string> row{stratum_title(s), std::to_string(report.totals.get(s))};
    for (std::size_t i = 0; i < report.results.size(); ++i) {
      row.push_back(format_pct(report.accuracy(i, s), report.preset));
    }
    rows.push_back(row);
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c == 0) os << std::left << std::setw(static_cast<int>(width[c])) << row[c];
      else os << "  " << std::right << std::setw(static_cast<int>(width[c])) << row[c];
    }
    os << '\n';
  }
  os << "Mean error: " << std::fixed << std::setprecision(2) << report.mean_pixel_error << " px\n";
  return os.str();
}

// ----------------------------------------------------------------- csv

std::string format_report_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "multiplier,stratum,hits,total,accuracy_pct\n";
  os << std::setprecision(17);
  for (std::size_t i = 0; i < report.results.size(); ++i) {
    for (Stratum s : kStrata) {
      os << report.results[i].multiplier.label() << ',' << to_string(s) << ','
         << report.results[i].hits.get(s) << ',' << report.totals.get(s) << ',' << report.accuracy(i, s)
         << '\n';
    }
  }
  return os.str();
}

EvalReport parse_report_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "multiplier,stratum,hits,total,accuracy_pct") {
    throw DataError("report CSV lacks the expected header");
  }
  EvalReport r;
  std::set<Stratum> total_seen;
  int line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 5) throw DataError("report CSV line " + std::to_string(line_no) + ": expected 5 fields");
    try {
      const Multiplier m = parse_multiplier(f[0]);
      const Stratum s = parse_stratum(f[1]);
      const int hits = std::stoi(f[2]);
      const int total = std::stoi(f[3]);
      if (r.results.empty() || !(r.results.back().multiplier == m)) r.results.push_back({m, {}});
      r.results.back().hits.get(s) = hits;
      if (total_seen.insert(s).second) r.totals.get(s) = total;
      else if (r.totals.get(s) != total) throw DataError("inconsistent totals for stratum " + f[1]);
    } catch (const DataError&) {
      throw;
    } catch (const std::exception& e) {
      throw DataError("report CSV line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  for (const auto* preset : {"messidor", "palm"}) {
    const auto t = EvalThresholds::preset(preset);
    if (t.multipliers.size() != r.results.size()) continue;
    bool same = true;
    for (std::size_t i = 0; i < r.results.size(); ++i) same = same && t.multipliers[i] == r.results[i].multiplier;
    if (same) r.preset = preset;
  }
  return r;
}

// ----------------------------------------------------------------- json

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"preset", r.preset},
       {"train_dataset", r.train_dataset},
       {"test_dataset", r.test_dataset},
       {"mean_pixel_error", r.mean_pixel_error},
       {"totals", {{"overall", r.totals.overall}, {"normal", r.totals.normal}, {"diseased", r.totals.diseased}}}};
  auto results = nlohmann::json::array();
  for (std::size_t i = 0; i < r.results.size(); ++i) {
    nlohmann::json row{{"multiplier", r.results[i].multiplier.label()}};
    for (Stratum s : kStrata) {
      row[std::string(to_string(s))] = {{"hits", r.results[i].hits.get(s)}, {"accuracy_pct", r.accuracy(i, s)}};
    }
    results.push_back(row);
  }
  j["results"] = results;
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  r = EvalReport{};
  r.preset = j.value("preset", "");
  r.train_dataset = j.value("train_dataset", "");
  r.test_dataset = j.value("test_dataset", "");
  r.mean_pixel_error = j.value("mean_pixel_error", 0.0);
  for (Stratum s : kStrata) r.totals.get(s) = j.at("totals").at(std::string(to_string(s))).get<int>();
  for (const auto& row : j.at("results")) {
    ThresholdResult res{parse_multiplier(row.at("multiplier").get<std::string>()), {}};
    for (Stratum s : kStrata) res.hits.get(s) = row.at(std::string(to_string(s))).at("hits").get<int>();
    r.results.push_back(res);
  }
}

// ----------------------------------------------------------------- plot

void plot_report(const EvalReport& report, const std::filesystem::path& path) {
  const int w = 720, h = 480, left = 70, right = 170, top = 50, bottom = 60;
  cv::Mat canvas(h, w, CV_8UC3, cv::Scalar(255, 255, 255));
  const int pw = w - left - right, ph = h - top - bottom;
  const auto n = report.results.size();
  auto px = [&](std::size_t i) {
    return n <= 1 ? left + pw / 2 : left + static_cast<int>(std::lround(pw * static_cast<double>(i) / (n - 1)));
  };
  auto py = [&](double pct) { return top + static_cast<int>(std::lround(ph * (1.0 - pct / 100.0))); };

  const auto font = cv::FONT_HERSHEY_SIMPLEX;
  const cv::Scalar axis(60, 60, 60), grid(225, 225, 225);
  for (int pct = 0; pct <= 100; pct += 20) {
    cv::line(canvas, {left, py(pct)}, {left + pw, py(pct)}, grid, 1);
    cv::putText(canvas, std::to_string(pct), {left - 40, py(pct) + 5}, font, 0.45, axis, 1, cv::LINE_AA);
  }
  cv::line(canvas, {left, top}, {left, top + ph}, axis, 1);
  cv::line(canvas, {left, top + ph}, {left + pw, top + ph}, axis, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::string label = report.results[i].multiplier.label();
    cv::line(canvas, {px(i), top + ph}, {px(i), top + ph + 5}, axis, 1);
    cv::putText(canvas, label, {px(i) - 14, top + ph + 22}, font, 0.45, axis, 1, cv::LINE_AA);
  }
  cv::putText(canvas, "threshold (multiple of disc radius R)", {left + pw / 2 - 150, h - 15}, font, 0.5, axis, 1,
              cv::LINE_AA);
  cv::putText(canvas, "accuracy (%)", {8, top - 15}, font, 0.5, axis, 1, cv::LINE_AA);
  std::string title = "Localization accuracy";
  if (!report.test_dataset.empty()) title += " - " + report.test_dataset;
  cv::putText(canvas, title, {left, 28}, font, 0.6, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);

  const std::array<cv::Scalar, 3> colors{cv::Scalar(40, 40, 40), cv::Scalar(60, 160, 60), cv::Scalar(50, 50, 210)};
  for (std::size_t k = 0; k < kStrata.size(); ++k) {
    const Stratum s = kStrata[k];
    if (report.totals.get(s) == 0) continue;
    std::vector<cv::Point> pts;
    for (std::size_t i = 0; i < n; ++i) pts.emplace_back(px(i), py(report.accuracy(i, s)));
    if (pts.size() > 1) cv::polylines(canvas, pts, false, colors[k], 2, cv::LINE_AA);
    for (const auto& p : pts) cv::circle(canvas, p, 4, colors[k], cv::FILLED, cv::LINE_AA);
    const int ly = top + 20 + static_cast<int>(k) * 24;
    cv::line(canvas, {w - right + 20, ly}, {w - right + 50, ly}, colors[k], 2, cv::LINE_AA);
    cv::putText(canvas, stratum_title(s), {w - right + 58, ly + 5}, font, 0.5, colors[k], 1, cv::LINE_AA);
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), canvas);
  } catch (const cv::Exception&) {
    ok = false;
  }
  if (!ok) throw DataError("cannot write plot '" + path.string() + "'");
}

std::vector<std::filesystem::path> emit_report(const EvalReport& report, const std::filesystem::path& dir,
                                               const std::vector<ReportFormat>& formats) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw DataError("cannot create report directory '" + dir.string() + "'");
  }
  auto write_text = [](const std::filesystem::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::trunc);
    if (!os || !(os << text)) throw DataError("cannot write '" + p.string() + "'");
  };
  std::vector<std::filesystem::path> written;
  for (ReportFormat f : formats) {
    switch (f) {
      case ReportFormat::text:
        written.push_back(dir / "report.txt");
        write_text(written.back(), format_report_text(report));
        break;
      case ReportFormat::csv:
        written.push_back(dir / "report.csv");
        write_text(written.back(), format_report_csv(report));
        break;
      case ReportFormat::plot:
        written.push_back(dir / "report.png");
        plot_report(report, written.back());
        break;
      case ReportFormat::json:
        written.push_back(dir / "report.json");
        write_text(written.back(), nlohmann::json(report).dump(2) + "\n");
        break;
    }
  }
  return written;
}

}  // namespace bvit
