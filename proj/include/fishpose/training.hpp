#pragma once

#include "fishpose/binning.hpp"
#include "fishpose/network.hpp"
#include "fishpose/synthesis.hpp"

#include <functional>
#include <string>
#include <vector>

namespace fishpose {

// ---------------------------------------------------------------------------
// Image normalization with the ImageNet channel statistics.

inline constexpr std::array<double, 3> kChannelMean = {0.485, 0.456, 0.406};
inline constexpr std::array<double, 3> kChannelStd = {0.229, 0.224, 0.225};

/// RGB raster -> 3 x H x W tensor of (x / 255 - mean_c) / std_c.
Tensor normalize_image(const Image& image);
/// Inverse of normalize_image, rounded to 8 bits.
Image denormalize_image(const Tensor& t);

// ---------------------------------------------------------------------------
// Losses

struct LossConfig {
  double alpha_pitch = 1.0;
  double alpha_yaw = 1.0;
  double alpha_roll = 1.0;
  double alpha_theta = 1.0;
  double alpha_rho = 100.0;
  double lambda1 = 10.0;   // weight of the rho task
  double lambda2 = 0.001;  // weight of the theta task

  bool supervises_location() const { return lambda1 != 0.0 || lambda2 != 0.0; }
};

/// Cross entropy of logits against the bin of gt plus alpha times the
/// squared error between the decoded estimate and gt.
Tensor task_loss(const Tensor& logits, const Tensor& decoded, double gt, const BinningSpec& spec, double alpha);

struct LossBreakdown {
  Tensor total;
  double pitch = 0.0, yaw = 0.0, roll = 0.0, rho = 0.0, theta = 0.0;
};

/// L_pitch + L_yaw + L_roll + lambda1 L_rho + lambda2 L_theta. Location terms
/// with zero weight are skipped entirely.
LossBreakdown total_loss(const PredictionBundle& bundle, const EulerAngles& pose, const PolarLocation& location,
                         const LossConfig& cfg);

// ---------------------------------------------------------------------------
// Optimization

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.9;
  double epsilon = 1e-8;
};

struct OptimizerState {
  std::vector<Eigen::VectorXd> first_moment;
  std::vector<Eigen::VectorXd> second_moment;
  long step = 0;
  double lr = 1e-4;
};

OptimizerState make_optimizer_state(const NamedTensors& params, double lr);

/// One bias-corrected Adam update using each tensor's accumulated gradient
/// (tensors without a gradient count as zero).
void adam_step(const NamedTensors& params, OptimizerState& state, const AdamConfig& cfg);

struct Schedule {
  int epochs = 25;
  std::vector<int> decay_epochs = {10, 20};  // 0-based epochs at which lr is multiplied by decay_factor
  double decay_factor = 0.5;
  int batch_size = 32;

  double lr_at(int epoch, double base_lr) const;
};

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  std::string dataset;  // manifest path (CLI use)
  NetworkConfig network;
  LossConfig loss;
  AdamConfig adam;
  Schedule schedule;
  std::uint64_t seed = 1;
  double holdout_fraction = 0.3;
  bool eval_each_epoch = true;
  double pose_limit = 99.0;
};

std::string to_json(const TrainConfig& cfg);
/// Overlays the keys present in text onto base.
TrainConfig train_config_from_json(const std::string& text, TrainConfig base = {});

struct EpochLog {
  int epoch = 0;
  std::string split;  // "train" or "test"
  double lr = 0.0;
  double loss = 0.0;
  double loss_pitch = 0.0, loss_yaw = 0.0, loss_roll = 0.0, loss_rho = 0.0, loss_theta = 0.0;
  double pitch_err = 0.0, yaw_err = 0.0, roll_err = 0.0, mae = 0.0;
};

std::string to_json_line(const EpochLog& log);

struct NonFiniteLossError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochLog> log;
};

/// Samples whose pose lies within +-limit degrees on every axis.
std::vector<const FisheyeSample*> filter_pose_range(const std::vector<FisheyeSample>& samples, double limit);

/// Seeded split of [0, n) into (train, test) index lists; test holds
/// round(n * holdout_fraction) entries.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double holdout_fraction,
                                                                            std::uint64_t seed);

/// Fisher-Yates over [0, n) driven by seed.
std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed);

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains from ModelParams::init(cfg.network, cfg.seed). test may be empty.
TrainResult run_training(const std::vector<const FisheyeSample*>& train, const std::vector<const FisheyeSample*>& test,
                         const TrainConfig& cfg, const EpochCallback& on_epoch = {});

}  // namespace fishpose
