#pragma once

#include "fishpose/binning.hpp"
#include "fishpose/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace fishpose {

struct ConvStage {
  int out_channels = 8;
  int kernel = 3;
  int stride = 2;
  int padding = 1;

  bool operator==(const ConvStage&) const = default;
};

/// Plain CNN: each stage is conv + ReLU.
struct BackboneConfig {
  int in_channels = 3;
  int input_size = 224;
  std::vector<ConvStage> stages = {{8, 4, 4, 0}, {16, 3, 2, 1}, {32, 3, 2, 1}, {64, 3, 2, 1}};

  int output_channels() const { return stages.empty() ? in_channels : stages.back().out_channels; }
  int output_size() const;

  bool operator==(const BackboneConfig&) const = default;
};

struct NetworkConfig {
  BackboneConfig backbone;
  int reduction = 16;       // channel-attention MLP hidden width is C / reduction
  int spatial_kernel = 7;   // zero-padded so the spatial map keeps H x W
  bool location_module = true;

  /// C = 8 channels on a 16 x 16 input; used for finite-difference checks.
  static NetworkConfig reduced();

  void validate() const;
  bool operator==(const NetworkConfig&) const = default;
};

std::string to_json(const NetworkConfig& cfg);
NetworkConfig network_config_from_json(const std::string& text);

struct ConvParams {
  Tensor weight;  // O x C x K x K
  Tensor bias;    // O
};

struct DenseParams {
  Tensor weight;  // out x in
  Tensor bias;    // out
};

struct LocationFeatureParams {
  Tensor w1;              // (C / r) x C
  Tensor w2;              // C x (C / r)
  Tensor spatial_weight;  // 1 x 2 x K x K
  Tensor spatial_bias;    // 1
};

struct HeadParams {
  DenseParams theta;  // C -> 72
  DenseParams rho;    // C -> 66
  DenseParams pitch;  // C -> 66
  DenseParams yaw;
  DenseParams roll;
};

/// All learnable weights. Location-feature weights exist only when the
/// configuration enables the module.
struct ModelParams {
  NetworkConfig config;
  std::vector<ConvParams> backbone;
  std::optional<LocationFeatureParams> location;
  HeadParams heads;

  /// Fan-in scaled centered uniform weights, zero biases.
  static ModelParams init(const NetworkConfig& config, std::uint64_t seed);

  /// Stable, fully qualified parameter list (checkpoint order).
  NamedTensors named() const;
  /// Copies values from a checkpoint; names and shapes must match exactly.
  void load(const NamedTensors& tensors);

  ModelParams clone() const;
  void zero_grad();
  bool all_finite() const;
  Index parameter_count() const;
};

// ---------------------------------------------------------------------------
// Forward pieces

/// image: 3 x S x S normalized -> C x 7 x 7 (for the default configuration).
Tensor backbone_forward(const ModelParams& params, const Tensor& image);

struct ChannelAttention {
  Tensor map;       // length C, entries in (0, 1)
  Tensor weighted;  // C x H x W
};
ChannelAttention channel_attention(const Tensor& features, const Tensor& w1, const Tensor& w2);

struct SpatialAttention {
  Tensor map;       // 1 x H x W, entries in (0, 1)
  Tensor weighted;  // C x H x W
};
SpatialAttention spatial_attention(const Tensor& features, const Tensor& weight, const Tensor& bias);

Tensor fuse(const Tensor& basic, const Tensor& location);

struct LocationEstimate {
  Tensor theta;  // degrees
  Tensor rho;
  Tensor theta_logits;
  Tensor rho_logits;
};
LocationEstimate location_head(const Tensor& features, const HeadParams& heads);

struct PoseEstimate {
  Tensor pitch, yaw, roll;  // degrees
  Tensor pitch_logits, yaw_logits, roll_logits;
};
PoseEstimate pose_head(const Tensor& features, const HeadParams& heads);

struct PredictionBundle {
  Tensor basic;
  std::optional<ChannelAttention> channel;
  std::optional<SpatialAttention> spatial;
  Tensor location_feature;  // undefined without the location module
  Tensor fused;
  std::optional<LocationEstimate> location;
  PoseEstimate pose;
};

struct ForwardOptions {
  /// Run the location head. Without the location module it reads the
  /// backbone features directly.
  bool decode_location = true;
};

PredictionBundle forward(const ModelParams& params, const Tensor& image, const ForwardOptions& opts = {});

}  // namespace fishpose
