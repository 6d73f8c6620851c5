#include "fishpose/commands.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

namespace fishpose::cli {

namespace {

using json = nlohmann::ordered_json;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CommandError(kMissingInput, "cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void require_file(const fs::path& path, const char* what) {
  if (!fs::is_regular_file(path)) throw CommandError(kMissingInput, std::string(what) + " not found: " + path.string());
}

json parse_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw CommandError(kMalformedInput, path.string() + ": " + e.what());
  }
}

void write_config(const json& j, const fs::path& out) { write_text(j.dump(2) + "\n", out / "config.json"); }

std::vector<FisheyeSample> load_samples(const fs::path& manifest) {
  require_file(manifest, "manifest");
  try {
    return load_fisheye_dataset(manifest);
  } catch (const ManifestError& e) {
    throw CommandError(kMalformedInput, e.what());
  } catch (const ImageError& e) {
    throw CommandError(kMissingInput, e.what());
  }
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------
// Gradient suite

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double margin = 0.0) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::VectorXd v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) {
    double x = u(rng);
    // keep entries off the kink of piecewise-linear ops
    if (margin > 0.0 && std::abs(x) < margin) x = std::copysign(margin + std::abs(x), x);
    v[i] = x;
  }
  return Tensor(std::move(shape), std::move(v), true);
}

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

}  // namespace

Tensor NetworkCheckCase::loss_of(const std::vector<Tensor>& x) const {
  return total_loss(forward(params, x[0], {loss.supervises_location()}), pose, loc, loss).total;
}

std::vector<Tensor> NetworkCheckCase::inputs() const {
  std::vector<Tensor> in{image};
  for (const auto& [name, t] : params.named()) in.push_back(t);
  return in;
}

std::vector<std::string> NetworkCheckCase::zero_gradient() const {
  ModelParams probe = params.clone();
  probe.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(total_loss(forward(probe, Tensor(image.shape(), image.values()), {loss.supervises_location()}),
                             pose, loc, loss)
                      .total);
  }
  std::vector<std::string> dead;
  for (const auto& [name, t] : probe.named()) {
    // without location supervision the location heads are not part of the loss
    const bool unused = !loss.supervises_location() && (name.rfind("head.theta", 0) == 0 || name.rfind("head.rho", 0) == 0);
    if (!unused && (!t.has_grad() || t.grad().isZero(0.0))) dead.push_back(name);
  }
  return dead;
}

NetworkCheckCase network_check_case(std::uint64_t seed, bool location_module) {
  NetworkConfig cfg = NetworkConfig::reduced();
  cfg.location_module = location_module;
  LossConfig loss;
  if (!location_module) loss.lambda1 = loss.lambda2 = 0.0;
  constexpr int kCandidates = 64;
  for (int k = 0;; ++k) {
    const std::uint64_t s = derive_seed(seed, static_cast<std::uint64_t>(k));
    std::mt19937_64 rng(s);
    std::normal_distribution<double> n01;
    Eigen::VectorXd px(3 * 16 * 16);
    for (Index i = 0; i < px.size(); ++i) px[i] = n01(rng);
    NetworkCheckCase c{ModelParams::init(cfg, s), Tensor(Shape{3, 16, 16}, px, true), {12.3, -40.1, 7.7},
                       {-63.0, 0.41}, loss, k};
    if (c.zero_gradient().empty() || k + 1 == kCandidates) return c;
  }
}

std::vector<GradCheckEntry> gradient_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckEntry> out;
  auto check = [&](const std::string& name, const Fn& fn, std::vector<Tensor> inputs) {
    out.push_back({name, grad_check(fn, std::move(inputs))});
  };
  auto r = [&](Shape s, double margin = 0.0) { return random_tensor(std::move(s), rng, margin); };

  check("add", [](const auto& x) { return add(x[0], x[1]); }, {r({3, 4}), r({3, 4})});
  check("add_scalar_broadcast", [](const auto& x) { return add(x[0], x[1]); }, {r({5}), r({})});
  check("sub", [](const auto& x) { return sub(x[0], x[1]); }, {r({3, 4}), r({3, 4})});
  check("mul", [](const auto& x) { return mul(x[0], x[1]); }, {r({6}), r({6})});
  check("mul_scalar_broadcast", [](const auto& x) { return mul(x[1], x[0]); }, {r({6}), r({1})});
  check("scale", [](const auto& x) { return scale(x[0], -2.5); }, {r({4})});
  check("matmul", [](const auto& x) { return matmul(x[0], x[1]); }, {r({3, 4}), r({4, 2})});
  check("matvec", [](const auto& x) { return matmul(x[0], x[1]); }, {r({3, 4}), r({4})});
  check("linear", [](const auto& x) { return linear(x[0], x[1], x[2]); }, {r({5}), r({3, 5}), r({3})});
  check("conv2d_k3_s1_p1", [](const auto& x) { return conv2d(x[0], x[1], x[2], 1, 1); },
        {r({2, 5, 5}), r({3, 2, 3, 3}), r({3})});
  check("conv2d_k3_s2_p1", [](const auto& x) { return conv2d(x[0], x[1], x[2], 2, 1); },
        {r({2, 6, 6}), r({2, 2, 3, 3}), r({2})});
  check("conv2d_k4_s4_p0", [](const auto& x) { return conv2d(x[0], x[1], x[2], 4, 0); },
        {r({3, 8, 8}), r({2, 3, 4, 4}), r({2})});
  check("conv2d_k7_p3_nobias", [](const auto& x) { return conv2d(x[0], x[1], Tensor(), 1, 3); },
        {r({2, 4, 4}), r({1, 2, 7, 7})});
  check("relu", [](const auto& x) { return relu(x[0]); }, {r({10}, 0.05)});
  check("sigmoid", [](const auto& x) { return sigmoid(x[0]); }, {r({10})});
  check("softmax", [](const auto& x) { return softmax(x[0]); }, {r({7})});
  check("concat_axis0", [](const auto& x) { return concat({x[0], x[1]}, 0); }, {r({1, 3, 3}), r({2, 3, 3})});
  check("concat_axis1", [](const auto& x) { return concat({x[0], x[1]}, 1); }, {r({2, 2}), r({2, 3})});
  check("reshape", [](const auto& x) { return reshape(x[0], Shape{6}); }, {r({2, 3})});
  check("scale_by_channel", [](const auto& x) { return scale_by_channel(x[0], x[1]); }, {r({3, 2, 2}), r({3})});
  check("scale_by_map", [](const auto& x) { return scale_by_map(x[0], x[1]); }, {r({3, 2, 2}), r({1, 2, 2})});
  check("global_avg_pool", [](const auto& x) { return global_avg_pool(x[0]); }, {r({3, 3, 3})});
  check("global_max_pool", [](const auto& x) { return global_max_pool(x[0]); }, {r({3, 3, 3})});
  check("channel_mean_map", [](const auto& x) { return channel_mean_map(x[0]); }, {r({3, 3, 3})});
  check("channel_max_map", [](const auto& x) { return channel_max_map(x[0]); }, {r({3, 3, 3})});
  check("sum", [](const auto& x) { return sum(x[0]); }, {r({2, 3})});
  check("dot", [](const auto& x) { return dot(x[0], x[1]); }, {r({5}), r({5})});
  check("cross_entropy", [](const auto& x) { return cross_entropy(x[0], 2); }, {r({6})});
  check("mse", [](const auto& x) { return mse(x[0], x[1]); }, {r({4}), r({4})});
  check("expectation_pose", [](const auto& x) { return expectation(softmax(x[0]), BinningSpec::pose()); },
        {r({66})});
  check("channel_attention", [](const auto& x) { return channel_attention(x[0], x[1], x[2]).weighted; },
        {r({4, 3, 3}), r({2, 4}), r({4, 2})});
  check("spatial_attention", [](const auto& x) { return spatial_attention(x[0], x[1], x[2]).weighted; },
        {r({3, 4, 4}), r({1, 2, 7, 7}), r({1})});
  check("fuse", [](const auto& x) { return fuse(x[0], x[1]); }, {r({2, 3, 3}), r({2, 3, 3})});

  for (bool module : {true, false}) {
    const NetworkCheckCase c = network_check_case(seed, module);
    check(module ? "network_loss_reduced" : "network_loss_reduced_baseline",
          [&c](const std::vector<Tensor>& x) { return c.loss_of(x); }, c.inputs());
    out.back().zero_gradient = c.zero_gradient();
  }
  return out;
}

// ---------------------------------------------------------------------------

void cmd_gen_markers(const GenMarkersOptions& opts, std::ostream& log) {
  if (opts.count < 1) throw CommandError(kUsage, "count must be >= 1");
  const auto sources = generate_marker_dataset(opts.count, opts.marker, opts.seed);
  save_source_dataset(sources, opts.out);
  write_config({{"command", "gen-markers"},
                {"count", opts.count},
                {"seed", opts.seed},
                {"render_size", opts.marker.render_size},
                {"pitch_limit", opts.marker.pitch_limit},
                {"yaw_limit", opts.marker.yaw_limit},
                {"roll_limit", opts.marker.roll_limit},
                {"out", opts.out.string()}},
               opts.out);
  log << "wrote " << sources.size() << " marker images to " << opts.out.string() << "\n";
}

void cmd_synth(const SynthOptions& opts, std::ostream& log) {
  require_file(opts.sources, "source manifest");
  std::vector<SourceSample> sources;
  try {
    sources = load_source_dataset(opts.sources);
  } catch (const ManifestError& e) {
    throw CommandError(kMalformedInput, e.what());
  } catch (const ImageError& e) {
    throw CommandError(kMissingInput, e.what());
  }
  const SynthesisResult result = synthesize_dataset(sources, opts.canvas, opts.seed);
  save_fisheye_dataset(result.samples, opts.out);
  write_config({{"command", "synth"},
                {"sources", opts.sources.string()},
                {"seed", opts.seed},
                {"scale", opts.canvas.scale},
                {"crop_margin", opts.canvas.crop_margin},
                {"output_size", opts.canvas.output_size},
                {"max_retries", opts.canvas.max_retries},
                {"fill", opts.canvas.fill},
                {"rejected", result.rejected},
                {"out", opts.out.string()}},
               opts.out);
  log << "synthesized " << result.samples.size() << " samples (" << result.rejected.size() << " rejected) into "
      << opts.out.string() << "\n";
}

void cmd_train(const TrainConfig& cfg, const fs::path& out, std::ostream& log) {
  const auto samples = load_samples(cfg.dataset);
  const auto usable = filter_pose_range(samples, cfg.pose_limit);
  if (usable.empty()) throw CommandError(kMalformedInput, "no samples within the pose range in " + cfg.dataset);
  const auto [train_idx, test_idx] = split_indices(usable.size(), cfg.holdout_fraction, cfg.seed);
  std::vector<const FisheyeSample*> train, test;
  for (auto i : train_idx) train.push_back(usable[i]);
  for (auto i : test_idx) test.push_back(usable[i]);
  if (train.empty()) throw CommandError(kMalformedInput, "holdout leaves no training samples");

  fs::create_directories(out);
  write_text(to_json(cfg) + "\n", out / "config.json");
  std::ofstream log_file(out / "train_log.jsonl", std::ios::binary);
  if (!log_file) throw CommandError(kFailure, "cannot write " + (out / "train_log.jsonl").string());

  TrainResult result;
  try {
    result = run_training(train, test, cfg, [&](const EpochLog& e) {
      log_file << to_json_line(e) << "\n";
      log << "epoch " << e.epoch << " " << e.split << " loss " << fmt("%.4f", e.loss) << " mae "
          << fmt("%.3f", e.mae) << "\n";
    });
  } catch (const NonFiniteLossError& e) {
    throw CommandError(kNonFiniteLoss, e.what());
  } catch (const std::invalid_argument& e) {
    throw CommandError(kMalformedInput, e.what());
  }
  write_checkpoint(result.params.named(), out / "checkpoint.bin");
  log << "checkpoint written to " << (out / "checkpoint.bin").string() << "\n";
}

void cmd_eval(const EvalOptions& opts, std::ostream& log) {
  require_file(opts.checkpoint, "checkpoint");
  const fs::path cfg_path = opts.network_config.value_or(opts.checkpoint.parent_path() / "config.json");
  require_file(cfg_path, "network config");
  const json cfg_json = parse_json(cfg_path);

  NetworkConfig net;
  try {
    net = cfg_json.contains("network") ? network_config_from_json(cfg_json["network"].dump())
                                       : network_config_from_json(cfg_json.dump());
  } catch (const std::exception& e) {
    throw CommandError(kMalformedInput, cfg_path.string() + ": " + e.what());
  }
  ModelParams params = ModelParams::init(net, 0);
  try {
    params.load(read_checkpoint(opts.checkpoint));
  } catch (const std::exception& e) {
    throw CommandError(kMalformedInput, opts.checkpoint.string() + ": " + e.what());
  }

  const auto samples = load_samples(opts.manifest);
  std::vector<const FisheyeSample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  if (ptrs.empty()) throw CommandError(kMalformedInput, "empty manifest " + opts.manifest.string());
  const auto records = predict(params, ptrs);
  const MaeSummary m = mae(records);
  const auto curve = radial_error_curve(records, opts.radial_bins);

  json result{{"count", records.size()}, {"yaw", m.yaw}, {"pitch", m.pitch}, {"roll", m.roll}, {"mae", m.mae}};
  json bins = json::array();
  for (const auto& b : curve) bins.push_back({{"rho", b.center}, {"mae", b.mean_error}, {"count", b.count}});
  result["radial_curve"] = bins;
  write_text(result.dump(2) + "\n", opts.out / "eval.json");

  std::ostringstream preds;
  preds << "id,pitch,yaw,roll,pred_pitch,pred_yaw,pred_roll,theta,rho\n";
  for (const auto& r : records) {
    preds << r.id << ',' << fmt("%.6f", r.truth.pitch) << ',' << fmt("%.6f", r.truth.yaw) << ','
          << fmt("%.6f", r.truth.roll) << ',' << fmt("%.6f", r.predicted.pitch) << ','
          << fmt("%.6f", r.predicted.yaw) << ',' << fmt("%.6f", r.predicted.roll) << ','
          << fmt("%.6f", r.location.theta) << ',' << fmt("%.6f", r.location.rho) << '\n';
  }
  write_text(preds.str(), opts.out / "predictions.csv");
  write_text(radial_curve_svg(curve), opts.out / "radial_curve.svg");
  write_config({{"command", "eval"},
                {"checkpoint", opts.checkpoint.string()},
                {"manifest", opts.manifest.string()},
                {"network_config", cfg_path.string()},
                {"radial_bins", opts.radial_bins},
                {"out", opts.out.string()}},
               opts.out);
  log << "yaw " << fmt("%.3f", m.yaw) << "  pitch " << fmt("%.3f", m.pitch) << "  roll " << fmt("%.3f", m.roll)
      << "  MAE " << fmt("%.3f", m.mae) << " over " << records.size() << " samples\n";
}

void cmd_ablate(const AblateOptions& opts, std::ostream& log) {
  if (opts.seeds.empty()) throw CommandError(kUsage, "at least one seed is required");
  const auto samples = load_samples(opts.base.dataset);
  std::vector<AblationVariant> variants = all_ablation_variants();
  if (!opts.all_variants) variants = {variants.front(), variants.back()};

  AblationReport report;
  try {
    report = ablation_run(samples, variants, opts.seeds, opts.base, [&](const std::string& s) { log << s << "\n"; });
  } catch (const std::invalid_argument& e) {
    throw CommandError(kMalformedInput, e.what());
  }
  fs::create_directories(opts.out);
  write_ablation_csv(report, opts.out / "ablation.csv");
  write_ablation_json(report, opts.out / "ablation.json");
  for (const auto& row : report.rows) {
    write_text(radial_curve_svg(row.radial_curve), opts.out / ("radial_" + row.variant.name() + ".svg"));
  }
  json cfg = json::parse(to_json(opts.base));
  cfg["command"] = "ablate";
  cfg["seeds"] = opts.seeds;
  cfg["all_variants"] = opts.all_variants;
  write_config(cfg, opts.out);
  for (const auto& row : report.rows) {
    log << row.variant.name() << ": " << (row.error.empty() ? "MAE " + fmt("%.3f", row.mean.mae) : row.error) << "\n";
  }
}

void cmd_sweep(const SweepOptions& opts, std::ostream& log) {
  const auto samples = load_samples(opts.base.dataset);
  const auto usable = filter_pose_range(samples, opts.base.pose_limit);
  const auto [train_idx, test_idx] = split_indices(usable.size(), opts.base.holdout_fraction, opts.base.seed);
  std::vector<const FisheyeSample*> train, test;
  for (auto i : train_idx) train.push_back(usable[i]);
  for (auto i : test_idx) test.push_back(usable[i]);
  if (train.empty() || test.empty()) throw CommandError(kMalformedInput, "sweep needs non-empty train and test splits");

  std::ostringstream csv;
  csv << "lambda1,lambda2,yaw,pitch,roll,mae\n";
  json rows = json::array();
  for (double l1 : opts.lambda1) {
    for (double l2 : opts.lambda2) {
      TrainConfig cfg = opts.base;
      cfg.loss.lambda1 = l1;
      cfg.loss.lambda2 = l2;
      cfg.eval_each_epoch = false;
      std::string cells;
      try {
        const TrainResult result = run_training(train, test, cfg);
        const MaeSummary m = mae(predict(result.params, test));
        cells = fmt("%.4f", m.yaw) + "," + fmt("%.4f", m.pitch) + "," + fmt("%.4f", m.roll) + "," + fmt("%.4f", m.mae);
        rows.push_back({{"lambda1", l1}, {"lambda2", l2}, {"yaw", m.yaw}, {"pitch", m.pitch}, {"roll", m.roll},
                        {"mae", m.mae}});
      } catch (const NonFiniteLossError& e) {
        cells = "nan,nan,nan,nan";
        rows.push_back({{"lambda1", l1}, {"lambda2", l2}, {"error", e.what()}});
      }
      csv << fmt("%g", l1) << ',' << fmt("%g", l2) << ',' << cells << '\n';
      log << "lambda1 " << fmt("%g", l1) << " lambda2 " << fmt("%g", l2) << ": " << cells << "\n";
    }
  }
  write_text(csv.str(), opts.out / "sweep.csv");
  write_text(rows.dump(2) + "\n", opts.out / "sweep.json");
  json cfg = json::parse(to_json(opts.base));
  cfg["command"] = "sweep";
  cfg["lambda1_values"] = opts.lambda1;
  cfg["lambda2_values"] = opts.lambda2;
  write_config(cfg, opts.out);
}

void cmd_gradcheck(double tolerance, std::uint64_t seed, const fs::path& out, std::ostream& log) {
  const auto entries = gradient_suite(seed);
  double worst = 0.0;
  json rows = json::array();
  for (const auto& e : entries) {
    worst = std::max(worst, e.result.max_rel_error);
    char line[160];
    std::snprintf(line, sizeof line, "%-32s rel %.3e  abs %.3e  (%lld values)\n", e.name.c_str(),
                  e.result.max_rel_error, e.result.max_abs_error, static_cast<long long>(e.result.checked));
    log << line;
    rows.push_back({{"op", e.name}, {"max_rel_error", e.result.max_rel_error},
                    {"max_abs_error", e.result.max_abs_error}, {"checked", e.result.checked}});
  }
  const bool pass = worst < tolerance;
  log << (pass ? "PASS" : "FAIL") << " max relative error " << fmt("%.3e", worst) << " (tolerance "
      << fmt("%.1e", tolerance) << ")\n";
  fs::create_directories(out);
  write_text(rows.dump(2) + "\n", out / "gradcheck.json");
  write_config({{"command", "gradcheck"}, {"seed", seed}, {"tolerance", tolerance}, {"out", out.string()}}, out);
  if (!pass) throw CommandError(kGradCheckFailed, "gradient check exceeded tolerance");
}

void cmd_warp(const WarpOptions& opts, std::ostream& log) {
  require_file(opts.input, "input image");
  Image src;
  try {
    src = read_png(opts.input);
  } catch (const ImageError& e) {
    throw CommandError(kMalformedInput, e.what());
  }
  // non-square inputs are centered on a square canvas and cropped back afterwards
  const int side = std::max(src.width(), src.height());
  const int ox = (side - src.width()) / 2, oy = (side - src.height()) / 2;
  Image canvas(side, side, opts.fill);
  for (int r = 0; r < src.height(); ++r) {
    for (int c = 0; c < src.width(); ++c) canvas.set_pixel(c + ox, r + oy, src.pixel(c, r));
  }
  const Image warped = warp_canvas(canvas, opts.fill);
  Image result(src.width(), src.height());
  for (int r = 0; r < src.height(); ++r) {
    for (int c = 0; c < src.width(); ++c) result.set_pixel(c, r, warped.pixel(c + ox, r + oy));
  }
  if (opts.output.has_parent_path()) fs::create_directories(opts.output.parent_path());
  write_png(result, opts.output);
  const fs::path cfg_dir = opts.output.has_parent_path() ? opts.output.parent_path() : fs::path(".");
  write_text(json{{"command", "warp"}, {"input", opts.input.string()}, {"output", opts.output.string()},
                  {"fill", opts.fill}}
                     .dump(2) +
                 "\n",
             cfg_dir / (opts.output.stem().string() + ".config.json"));
  log << "warped " << opts.input.string() << " -> " << opts.output.string() << "\n";
}

// ---------------------------------------------------------------------------

namespace {

TrainConfig load_train_config(const std::string& path) {
  TrainConfig cfg;
  cfg.dataset = "fisheye/manifest.jsonl";
  if (path.empty()) return cfg;
  require_file(path, "config");
  try {
    return train_config_from_json(read_file(path), cfg);
  } catch (const std::exception& e) {
    throw CommandError(kMalformedInput, path + ": " + e.what());
  }
}

struct TrainFlags {
  std::string config;
  std::string dataset;
  std::uint64_t seed = 1;
  int epochs = 25;
  int batch_size = 32;
  double lr = 1e-4;
  double lambda1 = 10.0;
  double lambda2 = 0.001;
  bool no_location_module = false;
  double holdout = 0.3;
};

void add_train_flags(CLI::App* app, TrainFlags& f) {
  app->add_option("--config", f.config, "JSON training config");
  app->add_option("--dataset", f.dataset, "fisheye manifest");
  app->add_option("--seed", f.seed, "master seed");
  app->add_option("--epochs", f.epochs);
  app->add_option("--batch-size", f.batch_size);
  app->add_option("--lr", f.lr, "base learning rate");
  app->add_option("--lambda1", f.lambda1, "weight of the rho task");
  app->add_option("--lambda2", f.lambda2, "weight of the theta task");
  app->add_flag("--no-location-module", f.no_location_module);
  app->add_option("--holdout", f.holdout, "held-out fraction");
}

TrainConfig resolve_train(CLI::App* app, const TrainFlags& f) {
  TrainConfig cfg = load_train_config(f.config);
  if (app->count("--dataset")) cfg.dataset = f.dataset;
  if (app->count("--seed")) cfg.seed = f.seed;
  if (app->count("--epochs")) {
    cfg.schedule.epochs = f.epochs;
    std::erase_if(cfg.schedule.decay_epochs, [&](int e) { return e >= f.epochs; });
  }
  if (app->count("--batch-size")) cfg.schedule.batch_size = f.batch_size;
  if (app->count("--lr")) cfg.adam.lr = f.lr;
  if (app->count("--lambda1")) cfg.loss.lambda1 = f.lambda1;
  if (app->count("--lambda2")) cfg.loss.lambda2 = f.lambda2;
  if (f.no_location_module) cfg.network.location_module = false;
  if (app->count("--holdout")) cfg.holdout_fraction = f.holdout;
  try {
    return train_config_from_json(to_json(cfg), cfg);
  } catch (const std::exception& e) {
    throw CommandError(kUsage, e.what());
  }
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"fisheye head-pose dataset synthesis and training"};
  app.require_subcommand(1);

  GenMarkersOptions gen;
  std::string gen_config;
  auto* gen_cmd = app.add_subcommand("gen-markers", "render synthetic marker source images");
  gen_cmd->add_option("-n,--count", gen.count, "number of samples");
  gen_cmd->add_option("--seed", gen.seed);
  gen_cmd->add_option("--config", gen_config);
  gen_cmd->add_option("--out", gen.out);

  SynthOptions synth;
  synth.sources = "markers/manifest.jsonl";
  std::string synth_config;
  auto* synth_cmd = app.add_subcommand("synth", "build a fisheye dataset from a source manifest");
  synth_cmd->add_option("--sources", synth.sources, "source manifest");
  synth_cmd->add_option("--seed", synth.seed);
  synth_cmd->add_option("--config", synth_config);
  synth_cmd->add_option("--out", synth.out);

  TrainFlags train_flags;
  std::string train_out = "run";
  auto* train_cmd = app.add_subcommand("train", "train the pose network");
  add_train_flags(train_cmd, train_flags);
  train_cmd->add_option("--out", train_out);

  EvalOptions eval;
  eval.checkpoint = "run/checkpoint.bin";
  eval.manifest = "fisheye/manifest.jsonl";
  std::string eval_config;
  std::uint64_t eval_seed = 0;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  eval_cmd->add_option("--checkpoint", eval.checkpoint);
  eval_cmd->add_option("--manifest", eval.manifest);
  eval_cmd->add_option("--config", eval_config, "training config holding the network layout");
  eval_cmd->add_option("--bins", eval.radial_bins, "radial error bins");
  eval_cmd->add_option("--seed", eval_seed, "unused; accepted for uniformity");
  eval_cmd->add_option("--out", eval.out);

  TrainFlags ablate_flags;
  AblateOptions ablate;
  bool ablate_pair = false;
  auto* ablate_cmd = app.add_subcommand("ablate", "train the module/supervision ablation grid");
  add_train_flags(ablate_cmd, ablate_flags);
  ablate_cmd->add_option("--seeds", ablate.seeds, "training seeds");
  ablate_cmd->add_flag("--pair", ablate_pair, "baseline and full model only");
  ablate_cmd->add_option("--out", ablate.out);

  TrainFlags sweep_flags;
  SweepOptions sweep;
  auto* sweep_cmd = app.add_subcommand("sweep", "grid over the location-task weights");
  add_train_flags(sweep_cmd, sweep_flags);
  sweep_cmd->add_option("--lambda1-values", sweep.lambda1);
  sweep_cmd->add_option("--lambda2-values", sweep.lambda2);
  sweep_cmd->add_option("--out", sweep.out);

  double tolerance = 1e-4;
  std::uint64_t grad_seed = 1;
  std::string grad_out = "gradcheck";
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  grad_cmd->add_option("--tolerance", tolerance);
  grad_cmd->add_option("--seed", grad_seed);
  grad_cmd->add_option("--out", grad_out);

  WarpOptions warp;
  auto* warp_cmd = app.add_subcommand("warp", "apply the fisheye warp to one PNG");
  warp_cmd->add_option("input", warp.input)->required();
  warp_cmd->add_option("output", warp.output)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*gen_cmd) {
      if (!gen_config.empty()) {
        const json j = parse_json(gen_config);
        if (!gen_cmd->count("--count")) gen.count = j.value("count", gen.count);
        if (!gen_cmd->count("--seed")) gen.seed = j.value("seed", gen.seed);
        gen.marker.render_size = j.value("render_size", gen.marker.render_size);
        gen.marker.pitch_limit = j.value("pitch_limit", gen.marker.pitch_limit);
        gen.marker.yaw_limit = j.value("yaw_limit", gen.marker.yaw_limit);
        gen.marker.roll_limit = j.value("roll_limit", gen.marker.roll_limit);
      }
      cmd_gen_markers(gen, std::cout);
    } else if (*synth_cmd) {
      if (!synth_config.empty()) {
        const json j = parse_json(synth_config);
        if (!synth_cmd->count("--seed")) synth.seed = j.value("seed", synth.seed);
        if (!synth_cmd->count("--sources")) synth.sources = j.value("sources", synth.sources.string());
        synth.canvas.scale = j.value("scale", synth.canvas.scale);
        synth.canvas.crop_margin = j.value("crop_margin", synth.canvas.crop_margin);
        synth.canvas.output_size = j.value("output_size", synth.canvas.output_size);
        synth.canvas.max_retries = j.value("max_retries", synth.canvas.max_retries);
        synth.canvas.fill = j.value("fill", synth.canvas.fill);
      }
      cmd_synth(synth, std::cout);
    } else if (*train_cmd) {
      cmd_train(resolve_train(train_cmd, train_flags), train_out, std::cout);
    } else if (*eval_cmd) {
      if (!eval_config.empty()) eval.network_config = eval_config;
      cmd_eval(eval, std::cout);
    } else if (*ablate_cmd) {
      ablate.base = resolve_train(ablate_cmd, ablate_flags);
      ablate.all_variants = !ablate_pair;
      cmd_ablate(ablate, std::cout);
    } else if (*sweep_cmd) {
      sweep.base = resolve_train(sweep_cmd, sweep_flags);
      cmd_sweep(sweep, std::cout);
    } else if (*grad_cmd) {
      cmd_gradcheck(tolerance, grad_seed, grad_out, std::cout);
    } else if (*warp_cmd) {
      cmd_warp(warp, std::cout);
    }
  } catch (const CommandError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed config: " << e.what() << "\n";
    return kMalformedInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}

}  // namespace fishpose::cli
