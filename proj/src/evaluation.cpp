#include "fishpose/evaluation.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace fishpose {

double EvalRecord::mean_abs_error() const {
  return (std::abs(predicted.yaw - truth.yaw) + std::abs(predicted.pitch - truth.pitch) +
          std::abs(predicted.roll - truth.roll)) /
         3.0;
}

MaeSummary mae(const std::vector<EvalRecord>& records) {
  if (records.empty()) throw std::invalid_argument("mae: no records");
  MaeSummary s;
  for (const auto& r : records) {
    s.yaw += std::abs(r.predicted.yaw - r.truth.yaw);
    s.pitch += std::abs(r.predicted.pitch - r.truth.pitch);
    s.roll += std::abs(r.predicted.roll - r.truth.roll);
  }
  const double n = static_cast<double>(records.size());
  s.yaw /= n;
  s.pitch /= n;
  s.roll /= n;
  s.mae = (s.yaw + s.pitch + s.roll) / 3.0;
  return s;
}

std::vector<RadialBin> radial_error_curve(const std::vector<EvalRecord>& records, int n_bins, double max_rho) {
  if (n_bins < 1 || !(max_rho > 0.0)) throw std::invalid_argument("radial_error_curve: bad binning");
  const double width = max_rho / n_bins;
  std::vector<double> sums(n_bins, 0.0);
  std::vector<std::size_t> counts(n_bins, 0);
  for (const auto& r : records) {
    if (r.location.rho < 0.0) throw std::invalid_argument("radial_error_curve: negative rho for " + r.id);
    const int b = std::min(n_bins - 1, static_cast<int>(r.location.rho / width));
    sums[b] += r.mean_abs_error();
    ++counts[b];
  }
  std::vector<RadialBin> out;
  for (int b = 0; b < n_bins; ++b) {
    if (counts[b] == 0) continue;
    out.push_back({width * (b + 0.5), sums[b] / static_cast<double>(counts[b]), counts[b]});
  }
  return out;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman: need two equal-length series of >= 2");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const Eigen::Map<const Eigen::VectorXd> a(rx.data(), static_cast<Index>(rx.size()));
  const Eigen::Map<const Eigen::VectorXd> b(ry.data(), static_cast<Index>(ry.size()));
  const Eigen::VectorXd da = a.array() - a.mean(), db = b.array() - b.mean();
  const double denom = std::sqrt(da.squaredNorm() * db.squaredNorm());
  if (denom == 0.0) return 0.0;
  return da.dot(db) / denom;
}

std::vector<EvalRecord> predict(const ModelParams& params, const std::vector<const FisheyeSample*>& samples) {
  std::vector<EvalRecord> out;
  out.reserve(samples.size());
  for (const auto* s : samples) {
    const PredictionBundle b = forward(params, normalize_image(s->image), ForwardOptions{false});
    out.push_back({s->source_id, s->pose, {b.pose.pitch.item(), b.pose.yaw.item(), b.pose.roll.item()}, s->location});
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string AblationVariant::name() const {
  std::string n = location_module ? "module" : "no_module";
  n += supervise_rho ? "+rho" : "";
  n += supervise_theta ? "+theta" : "";
  return n;
}

std::vector<AblationVariant> all_ablation_variants() {
  std::vector<AblationVariant> out;
  for (int m = 0; m < 2; ++m) {
    for (int r = 0; r < 2; ++r) {
      for (int t = 0; t < 2; ++t) out.push_back({m == 1, r == 1, t == 1});
    }
  }
  return out;
}

TrainConfig apply_variant(const TrainConfig& base, const AblationVariant& v) {
  TrainConfig cfg = base;
  cfg.network.location_module = v.location_module;
  if (!v.supervise_rho) cfg.loss.lambda1 = 0.0;
  if (!v.supervise_theta) cfg.loss.lambda2 = 0.0;
  return cfg;
}

AblationReport ablation_run(const std::vector<FisheyeSample>& samples, const std::vector<AblationVariant>& variants,
                            const std::vector<std::uint64_t>& seeds, const TrainConfig& base,
                            const std::function<void(const std::string&)>& progress) {
  if (seeds.empty()) throw std::invalid_argument("ablation_run: no seeds");
  const std::vector<const FisheyeSample*> usable = filter_pose_range(samples, base.pose_limit);
  if (usable.size() < 2) throw std::invalid_argument("ablation_run: fewer than two usable samples");

  AblationReport report;
  std::vector<std::vector<EvalRecord>> pooled(variants.size());
  for (const auto& v : variants) report.rows.push_back({v, {}, {}, {}, {}, {}});

  for (const std::uint64_t seed : seeds) {
    const auto [train_idx, test_idx] = split_indices(usable.size(), base.holdout_fraction, seed);
    std::vector<const FisheyeSample*> train, test;
    for (auto i : train_idx) train.push_back(usable[i]);
    for (auto i : test_idx) test.push_back(usable[i]);

    for (std::size_t k = 0; k < variants.size(); ++k) {
      AblationRow& row = report.rows[k];
      if (!row.error.empty()) continue;
      TrainConfig cfg = apply_variant(base, variants[k]);
      cfg.seed = seed;
      cfg.eval_each_epoch = false;
      try {
        const TrainResult result = run_training(train, test, cfg);
        std::vector<EvalRecord> records = predict(result.params, test);
        row.seeds.push_back(seed);
        row.per_seed.push_back(mae(records));
        pooled[k].insert(pooled[k].end(), records.begin(), records.end());
        if (progress) {
          char buf[160];
          std::snprintf(buf, sizeof buf, "%s seed %llu: mae %.4f", variants[k].name().c_str(),
                        static_cast<unsigned long long>(seed), row.per_seed.back().mae);
          progress(buf);
        }
      } catch (const NonFiniteLossError& e) {
        row.error = e.what();
        if (progress) progress(variants[k].name() + " aborted: " + row.error);
      }
    }
  }

  for (std::size_t k = 0; k < report.rows.size(); ++k) {
    AblationRow& row = report.rows[k];
    if (!row.error.empty() || row.per_seed.empty()) continue;
    const double n = static_cast<double>(row.per_seed.size());
    for (const auto& m : row.per_seed) {
      row.mean.yaw += m.yaw / n;
      row.mean.pitch += m.pitch / n;
      row.mean.roll += m.roll / n;
      row.mean.mae += m.mae / n;
    }
    row.radial_curve = radial_error_curve(pooled[k]);
  }
  return report;
}

// ---------------------------------------------------------------------------

void write_text(const std::string& text, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ReportError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw ReportError("write failed: " + path.string());
}

namespace {

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

void write_ablation_csv(const AblationReport& report, const std::filesystem::path& path) {
  std::ostringstream os;
  os << "location_module,supervise_rho,supervise_theta,yaw,pitch,roll,mae\n";
  for (const auto& row : report.rows) {
    os << int(row.variant.location_module) << ',' << int(row.variant.supervise_rho) << ','
       << int(row.variant.supervise_theta) << ',';
    if (!row.error.empty() || row.per_seed.empty()) {
      os << "nan,nan,nan,nan\n";
    } else {
      os << fixed(row.mean.yaw) << ',' << fixed(row.mean.pitch) << ',' << fixed(row.mean.roll) << ','
         << fixed(row.mean.mae) << '\n';
    }
  }
  write_text(os.str(), path);
}

std::vector<std::pair<AblationVariant, MaeSummary>> read_ablation_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ReportError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "location_module,supervise_rho,supervise_theta,yaw,pitch,roll,mae") {
    throw ReportError(path.string() + ": unexpected header");
  }
  std::vector<std::pair<AblationVariant, MaeSummary>> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (cells.size() != 7) throw ReportError(path.string() + ":" + std::to_string(line_no) + ": expected 7 columns");
    try {
      AblationVariant v{cells[0] == "1", cells[1] == "1", cells[2] == "1"};
      MaeSummary m{std::stod(cells[3]), std::stod(cells[4]), std::stod(cells[5]), std::stod(cells[6])};
      out.emplace_back(v, m);
    } catch (const std::exception&) {
      throw ReportError(path.string() + ":" + std::to_string(line_no) + ": malformed number");
    }
  }
  return out;
}

void write_ablation_json(const AblationReport& report, const std::filesystem::path& path) {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& row : report.rows) {
    nlohmann::ordered_json r;
    r["variant"] = row.variant.name();
    r["location_module"] = row.variant.location_module;
    r["supervise_rho"] = row.variant.supervise_rho;
    r["supervise_theta"] = row.variant.supervise_theta;
    r["seeds"] = row.seeds;
    nlohmann::ordered_json per_seed = nlohmann::ordered_json::array();
    for (const auto& m : row.per_seed) {
      per_seed.push_back({{"yaw", m.yaw}, {"pitch", m.pitch}, {"roll", m.roll}, {"mae", m.mae}});
    }
    r["per_seed"] = per_seed;
    if (row.error.empty()) {
      r["mean"] = {{"yaw", row.mean.yaw}, {"pitch", row.mean.pitch}, {"roll", row.mean.roll}, {"mae", row.mean.mae}};
    } else {
      r["error"] = row.error;
    }
    nlohmann::ordered_json curve = nlohmann::ordered_json::array();
    for (const auto& b : row.radial_curve) {
      curve.push_back({{"rho", b.center}, {"mae", b.mean_error}, {"count", b.count}});
    }
    r["radial_curve"] = curve;
    rows.push_back(r);
  }
  write_text(rows.dump(2) + "\n", path);
}

std::string radial_curve_svg(const std::vector<RadialBin>& curve, double max_rho) {
  constexpr double W = 800, H = 500, left = 70, right = 20, top = 20, bottom = 60;
  double ymax = 1.0;
  for (const auto& b : curve) ymax = std::max(ymax, b.mean_error);
  ymax *= 1.1;
  auto px = [&](double rho) { return left + (W - left - right) * rho / max_rho; };
  auto py = [&](double e) { return top + (H - top - bottom) * (1.0 - e / ymax); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"500\" viewBox=\"0 0 800 500\">\n";
  os << "<rect width=\"800\" height=\"500\" fill=\"white\"/>\n";
  os << "<line x1=\"" << fixed(left, 1) << "\" y1=\"" << fixed(H - bottom, 1) << "\" x2=\"" << fixed(W - right, 1)
     << "\" y2=\"" << fixed(H - bottom, 1) << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << fixed(left, 1) << "\" y1=\"" << fixed(top, 1) << "\" x2=\"" << fixed(left, 1) << "\" y2=\""
     << fixed(H - bottom, 1) << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double rho = max_rho * i / 4.0, e = ymax * i / 4.0;
    os << "<text x=\"" << fixed(px(rho), 1) << "\" y=\"" << fixed(H - bottom + 20, 1)
       << "\" font-size=\"12\" text-anchor=\"middle\">" << fixed(rho, 2) << "</text>\n";
    os << "<text x=\"" << fixed(left - 8, 1) << "\" y=\"" << fixed(py(e) + 4, 1)
       << "\" font-size=\"12\" text-anchor=\"end\">" << fixed(e, 1) << "</text>\n";
  }
  os << "<text x=\"" << fixed((left + W - right) / 2, 1) << "\" y=\"" << fixed(H - 15, 1)
     << "\" font-size=\"14\" text-anchor=\"middle\">rho</text>\n";
  os << "<text x=\"18\" y=\"" << fixed((top + H - bottom) / 2, 1)
     << "\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 18 " << fixed((top + H - bottom) / 2, 1)
     << ")\">MAE (deg)</text>\n";
  if (!curve.empty()) {
    os << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < curve.size(); ++i) {
      os << (i ? " " : "") << fixed(px(curve[i].center), 1) << ',' << fixed(py(curve[i].mean_error), 1);
    }
    os << "\"/>\n";
    for (const auto& b : curve) {
      os << "<circle cx=\"" << fixed(px(b.center), 1) << "\" cy=\"" << fixed(py(b.mean_error), 1)
         << "\" r=\"4\" fill=\"steelblue\"/>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace fishpose
