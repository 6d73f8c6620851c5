#pragma once

#include "fishpose/evaluation.hpp"
#include "fishpose/training.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace fishpose::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kMissingInput = 3,
  kMalformedInput = 4,
  kNonFiniteLoss = 5,
  kGradCheckFailed = 6,
};

/// Carries the exit code a failing command should report.
struct CommandError : std::runtime_error {
  CommandError(ExitCode code, const std::string& what) : std::runtime_error(what), code(code) {}
  ExitCode code;
};

namespace fs = std::filesystem;

struct GenMarkersOptions {
  int count = 200;
  MarkerSpec marker;
  std::uint64_t seed = 1;
  fs::path out = "markers";
};

struct SynthOptions {
  fs::path sources;  // source manifest
  CanvasSpec canvas;
  std::uint64_t seed = 1;
  fs::path out = "fisheye";
};

struct EvalOptions {
  fs::path checkpoint;
  fs::path manifest;
  std::optional<fs::path> network_config;  // defaults to config.json beside the checkpoint
  int radial_bins = 8;
  fs::path out = "eval";
};

struct AblateOptions {
  TrainConfig base;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  bool all_variants = true;  // otherwise baseline and full model only
  fs::path out = "ablation";
};

struct SweepOptions {
  TrainConfig base;
  std::vector<double> lambda1 = {0.1, 1.0, 10.0, 100.0};
  std::vector<double> lambda2 = {0.0001, 0.001, 0.01, 0.1};
  fs::path out = "sweep";
};

struct WarpOptions {
  fs::path input;
  fs::path output;
  Rgb fill = {128, 128, 128};
};

/// Reduced network, input and targets used by the full-loss gradient check.
/// The first candidate draw where every parameter the loss depends on gets a
/// non-zero gradient is used, so no part of the check is vacuous.
struct NetworkCheckCase {
  ModelParams params;
  Tensor image;
  EulerAngles pose;
  PolarLocation loc;
  LossConfig loss;
  int candidate = 0;

  Tensor loss_of(const std::vector<Tensor>& inputs) const;
  /// Image first, then every named parameter.
  std::vector<Tensor> inputs() const;
  /// Parameters the loss depends on whose analytic gradient is exactly zero.
  std::vector<std::string> zero_gradient() const;
};

NetworkCheckCase network_check_case(std::uint64_t seed, bool location_module);

struct GradCheckEntry {
  std::string name;
  GradCheckResult result;
  /// Network checks only: parameters whose analytic gradient is exactly zero.
  std::vector<std::string> zero_gradient;
};

/// Finite-difference checks of every differentiable op plus the full loss of
/// the reduced network.
std::vector<GradCheckEntry> gradient_suite(std::uint64_t seed = 1);

void cmd_gen_markers(const GenMarkersOptions& opts, std::ostream& log);
void cmd_synth(const SynthOptions& opts, std::ostream& log);
/// Writes checkpoint.bin, train_log.jsonl and config.json into out.
void cmd_train(const TrainConfig& cfg, const fs::path& out, std::ostream& log);
void cmd_eval(const EvalOptions& opts, std::ostream& log);
void cmd_ablate(const AblateOptions& opts, std::ostream& log);
void cmd_sweep(const SweepOptions& opts, std::ostream& log);
/// Throws CommandError(kGradCheckFailed) if any check exceeds tolerance.
void cmd_gradcheck(double tolerance, std::uint64_t seed, const fs::path& out, std::ostream& log);
void cmd_warp(const WarpOptions& opts, std::ostream& log);

/// Parses argv, dispatches, and maps failures to exit codes.
int run(int argc, char** argv);

}  // namespace fishpose::cli
