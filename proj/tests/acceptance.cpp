// Acceptance run: one PASS/FAIL line per criterion, details indented below it.

#include "fishpose/commands.hpp"
#include "fishpose/evaluation.hpp"
#include "fishpose/geometry.hpp"
#include "fishpose/synthesis.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace fishpose;
namespace fs = std::filesystem;

namespace {

enum class Verdict { kPass, kFail, kWarn };

struct Outcome {
  Verdict verdict = Verdict::kFail;
  std::string summary;
  std::vector<std::string> details;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double ks_uniform(std::vector<double> xs, double lo, double hi) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = (xs[i] - lo) / (hi - lo);
    d = std::max({d, (i + 1) / n - f, f - i / n});
  }
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------

Outcome geometry_exactness() {
  Outcome o;
  const Eigen::Vector2d rim = fisheye_forward(Eigen::Vector2d(1.0, 0.0));
  const double rim_err = std::max(std::abs(rim.x() - std::exp(-0.5)), std::abs(rim.y()));

  // 40-digit evaluation of x sqrt(1 - y^2/2) exp(-(x'^2 + y'^2)/2) at (0.5, 0.5)
  const double reference = 0.37581327166041034210;
  const Eigen::Vector2d q = fisheye_forward(Eigen::Vector2d(0.5, 0.5));
  const double mid_err = std::max(std::abs(q.x() - reference), std::abs(q.y() - reference));

  o.verdict = rim_err < 1e-9 && mid_err < 1e-9 ? Verdict::kPass : Verdict::kFail;
  o.summary = fmt("|f(1,0) - (e^-1/2, 0)| = %.2e, |f(0.5,0.5) - reference| = %.2e (tol 1e-9)", rim_err, mid_err);
  o.details.push_back(fmt("f(0.5, 0.5) = (%.17f, %.17f)", q.x(), q.y()));
  return o;
}

Outcome inversion_round_trip() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(20240601);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double worst = 0.0;
  int failures = 0, n = 0;
  Eigen::Vector2d worst_p = Eigen::Vector2d::Zero();
  while (n < 10000) {
    const Eigen::Vector2d p(u(rng), u(rng));
    if (p.squaredNorm() >= 1.0) continue;
    ++n;
    const auto back = fisheye_inverse(fisheye_forward(p));
    if (!back) {
      ++failures;
      continue;
    }
    const double err = (*back - p).cwiseAbs().maxCoeff();
    if (err > worst) {
      worst = err;
      worst_p = p;
    }
  }
  const double elapsed = seconds_since(t0);
  o.verdict = failures == 0 && worst < 1e-6 && elapsed < 10.0 ? Verdict::kPass : Verdict::kFail;
  o.summary = fmt("10000 points, max inf-norm error %.2e (tol 1e-6), %d not inverted, %.2f s (limit 10 s)", worst,
                  failures, elapsed);
  o.details.push_back(fmt("worst point (%.6f, %.6f)", worst_p.x(), worst_p.y()));
  return o;
}

Outcome gradient_suite_check() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const auto entries = cli::gradient_suite(1);
  const double elapsed = seconds_since(t0);
  double worst = 0.0;
  std::string worst_name;
  int failing = 0;
  for (const auto& e : entries) {
    if (e.result.max_rel_error >= 1e-4) ++failing;
    if (e.result.max_rel_error > worst) {
      worst = e.result.max_rel_error;
      worst_name = e.name;
    }
    o.details.push_back(fmt("%-30s rel %.3e  abs %.3e  n=%lld", e.name.c_str(), e.result.max_rel_error,
                            e.result.max_abs_error, static_cast<long long>(e.result.checked)));
  }
  o.verdict = failing == 0 && elapsed < 300.0 ? Verdict::kPass : Verdict::kFail;
  o.summary = fmt("%zu checks, %d above 1e-4; worst %s at %.3e (eps 1e-5), %.1f s (limit 300 s)", entries.size(),
                  failing, worst_name.c_str(), worst, elapsed);

  // Diagnostics for the full-network check: step-size sensitivity and gradient coverage.
  const cli::NetworkCheckCase c = cli::network_check_case(1, true);
  const auto fn = [&c](const std::vector<Tensor>& x) { return c.loss_of(x); };
  const double loss_value = fn(c.inputs()).item();
  for (double eps : {1e-5, 1e-4}) {
    const GradCheckResult r = grad_check(fn, c.inputs(), eps);
    o.details.push_back(fmt("diagnostic: full loss (value %.1f, candidate %d) at eps %.0e: rel %.3e abs %.3e",
                            loss_value, c.candidate, eps, r.max_rel_error, r.max_abs_error));
  }
  int dead = 0;
  for (const auto& e : entries) {
    for (const auto& name : e.zero_gradient) {
      {
        o.details.push_back("diagnostic: no gradient reached " + name + " in " + e.name);
        ++dead;
      }
    }
  }
  if (dead == 0) o.details.push_back("diagnostic: every parameter the loss depends on receives a non-zero gradient");
  if (dead != 0) o.verdict = Verdict::kFail;
  return o;
}

Outcome decoding_oracle() {
  Outcome o;
  double worst = 0.0;
  int mismatched = 0, checked = 0;
  auto literal = [](const Eigen::VectorXd& p, const BinningSpec& s) {
    long double acc = 0.0L;
    for (int i = 0; i < s.n_bins; ++i) {
      acc += static_cast<long double>(p[i]) * (static_cast<long double>(s.range_min) +
                                               static_cast<long double>(s.bin_width) * (i + 0.5L));
    }
    return static_cast<double>(acc);
  };
  auto expect = [&](double got, double want) {
    const double e = std::abs(got - want);
    worst = std::max(worst, e);
    ++checked;
    if (!(e <= 1e-12)) ++mismatched;
  };
  const struct {
    const char* name;
    BinningSpec spec;
    double uniform;
  } specs[] = {{"pose", BinningSpec::pose(), 0.0}, {"theta", BinningSpec::theta(), 0.0}, {"rho", BinningSpec::rho(), 0.495}};
  for (const auto& s : specs) {
    for (int i = 0; i < s.spec.n_bins; ++i) {
      const Eigen::VectorXd p = Eigen::VectorXd::Unit(s.spec.n_bins, i);
      const double d = decode_expectation(p, s.spec);
      expect(d, literal(p, s.spec));
      expect(d, s.spec.midpoint(i));
    }
    const Eigen::VectorXd u = Eigen::VectorXd::Constant(s.spec.n_bins, 1.0 / s.spec.n_bins);
    expect(decode_expectation(u, s.spec), literal(u, s.spec));
    expect(decode_expectation(u, s.spec), s.uniform);
  }
  expect(decode_expectation(Eigen::VectorXd::Unit(66, 0), BinningSpec::pose()), -97.5);
  expect(decode_expectation(Eigen::VectorXd::Unit(72, 35), BinningSpec::theta()), -2.5);
  expect(decode_expectation(Eigen::VectorXd::Unit(66, 0), BinningSpec::rho()), 0.0075);
  o.verdict = mismatched == 0 ? Verdict::kPass : Verdict::kFail;
  o.summary = fmt("%d comparisons, %d beyond 1e-12, max deviation %.2e", checked, mismatched, worst);
  return o;
}

struct AblationOutcome {
  Outcome ablation;
  Outcome radial;
};

AblationOutcome toy_ablation() {
  AblationOutcome out;
  Outcome& o = out.ablation;
  const auto t0 = std::chrono::steady_clock::now();
  const auto sources = generate_marker_dataset(2000, MarkerSpec{}, 7);
  const SynthesisResult synth = synthesize_dataset(sources, CanvasSpec{}, 7);
  o.details.push_back(fmt("synthesized %zu samples (%zu rejected) in %.1f s", synth.samples.size(),
                          synth.rejected.size(), seconds_since(t0)));

  const auto variants = all_ablation_variants();
  const std::vector<AblationVariant> pair = {variants.front(), variants.back()};
  const TrainConfig base;
  const AblationReport rep = ablation_run(synth.samples, pair, {1, 2, 3}, base, [&](const std::string& line) {
    o.details.push_back(line + fmt(" (%.0f s elapsed)", seconds_since(t0)));
    std::cerr << "  " << o.details.back() << std::endl;
  });
  const double elapsed = seconds_since(t0);
  const AblationRow& baseline = rep.rows[0];
  const AblationRow& full = rep.rows[1];
  const bool ok = baseline.error.empty() && full.error.empty();
  o.verdict = ok && full.mean.mae <= baseline.mean.mae && elapsed <= 1800.0 ? Verdict::kPass : Verdict::kFail;
  o.summary = fmt("seed-averaged test MAE: full %.4f vs baseline %.4f (%+.2f%%), %.0f s (limit 1800 s)", full.mean.mae,
                  baseline.mean.mae, 100.0 * (full.mean.mae - baseline.mean.mae) / baseline.mean.mae, elapsed);
  for (const AblationRow* r : {&baseline, &full}) {
    o.details.push_back(fmt("%-18s yaw %.3f pitch %.3f roll %.3f mae %.4f%s", r->variant.name().c_str(), r->mean.yaw,
                            r->mean.pitch, r->mean.roll, r->mean.mae, r->error.empty() ? "" : "  ABORTED"));
  }

  Outcome& rad = out.radial;
  std::vector<double> idx, err;
  for (const auto& b : baseline.radial_curve) {
    idx.push_back(std::floor(b.center / 0.1));
    err.push_back(b.mean_error);
    rad.details.push_back(fmt("rho bin %.2f: MAE %.3f over %zu records", b.center, b.mean_error, b.count));
  }
  const double rs = idx.size() >= 2 ? spearman(idx, err) : 0.0;
  rad.verdict = rs > 0.5 ? Verdict::kPass : Verdict::kWarn;
  rad.summary = fmt("baseline Spearman(bin index, MAE) = %.3f over %zu bins (threshold 0.5)", rs, idx.size());
  if (rad.verdict == Verdict::kWarn) {
    rad.details.push_back("warning: radial trend below threshold at toy scale; soft criterion, not a gate");
  }
  return out;
}

Outcome determinism() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / fmt("fishpose_acceptance_%llu",
                                                        static_cast<unsigned long long>(std::random_device{}()));
  std::ostringstream sink;
  cli::cmd_gen_markers({120, MarkerSpec{}, 3, root / "markers"}, sink);
  cli::SynthOptions so;
  so.sources = root / "markers" / "manifest.jsonl";
  so.seed = 4;
  so.out = root / "fisheye";
  cli::cmd_synth(so, sink);

  TrainConfig cfg;
  cfg.dataset = (root / "fisheye" / "manifest.jsonl").string();
  cfg.schedule.epochs = 3;
  cfg.schedule.decay_epochs = {1};
  cfg.schedule.batch_size = 16;
  cfg.seed = 11;
  cli::cmd_train(cfg, root / "a", sink);
  cli::cmd_train(cfg, root / "b", sink);

  bool same = true;
  for (const char* f : {"checkpoint.bin", "train_log.jsonl", "config.json"}) {
    const std::string a = slurp(root / "a" / f), b = slurp(root / "b" / f);
    const bool eq = !a.empty() && a == b;
    same = same && eq;
    o.details.push_back(fmt("%-16s %zu bytes, %s", f, a.size(), eq ? "identical" : "DIFFERENT"));
  }
  std::error_code ec;
  fs::remove_all(root, ec);
  o.verdict = same ? Verdict::kPass : Verdict::kFail;
  o.summary = same ? "two cmd_train runs produced byte-identical checkpoint, log and config"
                   : "outputs of two identical cmd_train runs differ";
  return o;
}

Outcome placement_statistics() {
  Outcome o;
  std::mt19937_64 rng(8);
  std::vector<double> rho, theta;
  bool in_range = true;
  for (int i = 0; i < 10000; ++i) {
    const PolarLocation l = sample_placement(rng);
    rho.push_back(l.rho);
    theta.push_back(l.theta);
    in_range = in_range && l.rho >= 0.0 && l.rho < 0.8 && l.theta >= -180.0 && l.theta <= 180.0;
  }
  const double ks_rho = ks_uniform(rho, 0.0, 0.8);
  const double ks_theta = ks_uniform(theta, -180.0, 180.0);
  o.verdict = in_range && ks_rho < 0.02 && ks_theta < 0.02 ? Verdict::kPass : Verdict::kFail;
  o.summary = fmt("10000 draws, ranges %s, KS rho %.4f, KS theta %.4f (tol 0.02)", in_range ? "ok" : "VIOLATED", ks_rho,
                  ks_theta);
  return o;
}

void report(int id, const char* title, const Outcome& o) {
  const char* tag = o.verdict == Verdict::kPass ? "PASS" : o.verdict == Verdict::kWarn ? "WARN" : "FAIL";
  std::cout << "[" << tag << "] " << id << ". " << title << ": " << o.summary << "\n";
  for (const auto& d : o.details) std::cout << "       " << d << "\n";
  std::cout.flush();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> only;
  app.add_option("criteria", only, "criterion numbers to run (default: all)")->check(CLI::Range(1, 8));
  CLI11_PARSE(app, argc, argv);
  const auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  int hard_failures = 0;
  auto run = [&](int id, const char* title, const std::function<Outcome()>& fn) {
    if (!wanted(id)) return;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.verdict = Verdict::kFail;
      o.summary = std::string("threw: ") + e.what();
    }
    if (o.verdict == Verdict::kFail) ++hard_failures;
    report(id, title, o);
  };

  run(1, "geometry exactness", geometry_exactness);
  run(2, "inversion round trip", inversion_round_trip);
  run(3, "gradient suite", gradient_suite_check);
  run(4, "decoding oracle", decoding_oracle);
  if (wanted(5) || wanted(6)) {
    AblationOutcome ab;
    try {
      ab = toy_ablation();
    } catch (const std::exception& e) {
      ab.ablation = {Verdict::kFail, std::string("threw: ") + e.what(), {}};
      ab.radial = {Verdict::kWarn, "not computed", {}};
    }
    if (wanted(5)) {
      if (ab.ablation.verdict == Verdict::kFail) ++hard_failures;
      report(5, "toy ablation", ab.ablation);
    }
    if (wanted(6)) report(6, "radial trend", ab.radial);
  }
  run(7, "determinism", determinism);
  run(8, "placement statistics", placement_statistics);

  std::cout << (hard_failures == 0 ? "ALL HARD CRITERIA PASSED" : fmt("%d HARD CRITERIA FAILED", hard_failures))
            << "\n";
  return hard_failures == 0 ? 0 : 1;
}
