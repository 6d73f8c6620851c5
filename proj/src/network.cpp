#include "fishpose/network.hpp"

#include "json.hpp"

#include <cmath>
#include <map>
#include <random>

namespace fishpose {

int BackboneConfig::output_size() const {
  int size = input_size;
  for (const auto& s : stages) size = (size + 2 * s.padding - s.kernel) / s.stride + 1;
  return size;
}

NetworkConfig NetworkConfig::reduced() {
  NetworkConfig cfg;
  cfg.backbone.input_size = 16;
  cfg.backbone.stages = {{4, 3, 2, 1}, {8, 3, 2, 1}};
  cfg.reduction = 4;
  return cfg;
}

void NetworkConfig::validate() const {
  if (backbone.in_channels < 1 || backbone.input_size < 1) throw std::invalid_argument("network config: bad input size");
  int size = backbone.input_size;
  for (const auto& s : backbone.stages) {
    if (s.out_channels < 1 || s.kernel < 1 || s.stride < 1 || s.padding < 0) {
      throw std::invalid_argument("network config: bad conv stage");
    }
    if (size + 2 * s.padding < s.kernel) throw std::invalid_argument("network config: stage kernel exceeds input");
    size = (size + 2 * s.padding - s.kernel) / s.stride + 1;
  }
  const int c = backbone.output_channels();
  if (reduction < 1 || c % reduction != 0) {
    throw std::invalid_argument("network config: channels (" + std::to_string(c) + ") not divisible by reduction (" +
                                std::to_string(reduction) + ")");
  }
  if (spatial_kernel < 1 || spatial_kernel % 2 == 0) throw std::invalid_argument("network config: spatial kernel must be odd");
}

std::string to_json(const NetworkConfig& cfg) {
  nlohmann::ordered_json j;
  j["in_channels"] = cfg.backbone.in_channels;
  j["input_size"] = cfg.backbone.input_size;
  auto stages = nlohmann::ordered_json::array();
  for (const auto& s : cfg.backbone.stages) {
    stages.push_back({{"out_channels", s.out_channels}, {"kernel", s.kernel}, {"stride", s.stride}, {"padding", s.padding}});
  }
  j["stages"] = stages;
  j["reduction"] = cfg.reduction;
  j["spatial_kernel"] = cfg.spatial_kernel;
  j["location_module"] = cfg.location_module;
  return j.dump(2);
}

NetworkConfig network_config_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  NetworkConfig cfg;
  cfg.backbone.in_channels = j.value("in_channels", cfg.backbone.in_channels);
  cfg.backbone.input_size = j.value("input_size", cfg.backbone.input_size);
  if (j.contains("stages")) {
    cfg.backbone.stages.clear();
    for (const auto& s : j.at("stages")) {
      cfg.backbone.stages.push_back(
          {s.at("out_channels").get<int>(), s.at("kernel").get<int>(), s.at("stride").get<int>(), s.at("padding").get<int>()});
    }
  }
  cfg.reduction = j.value("reduction", cfg.reduction);
  cfg.spatial_kernel = j.value("spatial_kernel", cfg.spatial_kernel);
  cfg.location_module = j.value("location_module", cfg.location_module);
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  Eigen::VectorXd v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) {
    v[i] = bound * (2.0 * static_cast<double>(rng() >> 11) * 0x1.0p-53 - 1.0);
  }
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor zeros(Shape shape) { return Tensor(std::move(shape), true); }

DenseParams dense(int in, int out, std::mt19937_64& rng) {
  return {uniform_tensor({out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng), zeros({out})};
}

}  // namespace

ModelParams ModelParams::init(const NetworkConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  ModelParams p;
  p.config = config;

  int in = config.backbone.in_channels;
  for (const auto& s : config.backbone.stages) {
    const double fan_in = static_cast<double>(in) * s.kernel * s.kernel;
    p.backbone.push_back({uniform_tensor({s.out_channels, in, s.kernel, s.kernel}, std::sqrt(6.0 / fan_in), rng),
                          zeros({s.out_channels})});
    in = s.out_channels;
  }

  const int c = config.backbone.output_channels();
  if (config.location_module) {
    const int hidden = c / config.reduction;
    const int k = config.spatial_kernel;
    LocationFeatureParams loc;
    loc.w1 = uniform_tensor({hidden, c}, std::sqrt(6.0 / c), rng);
    loc.w2 = uniform_tensor({c, hidden}, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
    loc.spatial_weight = uniform_tensor({1, 2, k, k}, 1.0 / std::sqrt(2.0 * k * k), rng);
    loc.spatial_bias = zeros({1});
    p.location = std::move(loc);
  }

  const BinningSpec pose = BinningSpec::pose();
  p.heads.theta = dense(c, BinningSpec::theta().n_bins, rng);
  p.heads.rho = dense(c, BinningSpec::rho().n_bins, rng);
  p.heads.pitch = dense(c, pose.n_bins, rng);
  p.heads.yaw = dense(c, pose.n_bins, rng);
  p.heads.roll = dense(c, pose.n_bins, rng);
  return p;
}

NamedTensors ModelParams::named() const {
  NamedTensors out;
  for (std::size_t i = 0; i < backbone.size(); ++i) {
    out.emplace_back("backbone." + std::to_string(i) + ".weight", backbone[i].weight);
    out.emplace_back("backbone." + std::to_string(i) + ".bias", backbone[i].bias);
  }
  if (location) {
    out.emplace_back("location_feature.mlp.w1", location->w1);
    out.emplace_back("location_feature.mlp.w2", location->w2);
    out.emplace_back("location_feature.spatial.weight", location->spatial_weight);
    out.emplace_back("location_feature.spatial.bias", location->spatial_bias);
  }
  const std::pair<const char*, const DenseParams*> heads_list[] = {
      {"head.theta", &heads.theta}, {"head.rho", &heads.rho}, {"head.pitch", &heads.pitch},
      {"head.yaw", &heads.yaw},     {"head.roll", &heads.roll}};
  for (const auto& [name, d] : heads_list) {
    out.emplace_back(std::string(name) + ".weight", d->weight);
    out.emplace_back(std::string(name) + ".bias", d->bias);
  }
  return out;
}

void ModelParams::load(const NamedTensors& tensors) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : tensors) by_name[name] = &t;
  const NamedTensors mine = named();
  if (by_name.size() != mine.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(by_name.size()) + " tensors, model expects " +
                          std::to_string(mine.size()));
  }
  for (const auto& [name, t] : mine) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks " + name);
    if (it->second->shape() != t.shape()) {
      throw CheckpointError("shape mismatch for " + name + ": " + to_string(it->second->shape()) + " vs " +
                            to_string(t.shape()));
    }
    // Tensor handles alias, so this writes into the model.
    Tensor target = t;
    target.values() = it->second->values();
  }
}

ModelParams ModelParams::clone() const {
  ModelParams p = init(config, 0);
  p.load(named());
  return p;
}

void ModelParams::zero_grad() {
  for (auto& [name, t] : named()) {
    Tensor h = t;
    h.zero_grad();
  }
}

bool ModelParams::all_finite() const {
  for (const auto& [name, t] : named()) {
    if (!t.values().allFinite()) return false;
  }
  return true;
}

Index ModelParams::parameter_count() const {
  Index n = 0;
  for (const auto& [name, t] : named()) n += t.size();
  return n;
}

// ---------------------------------------------------------------------------
// Forward

Tensor backbone_forward(const ModelParams& params, const Tensor& image) {
  const BackboneConfig& cfg = params.config.backbone;
  if (image.rank() != 3 || image.dim(0) != cfg.in_channels || image.dim(1) != cfg.input_size ||
      image.dim(2) != cfg.input_size) {
    throw DimensionError("backbone_forward: expected [" + std::to_string(cfg.in_channels) + "x" +
                         std::to_string(cfg.input_size) + "x" + std::to_string(cfg.input_size) + "], got " +
                         to_string(image.shape()));
  }
  Tensor x = image;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const auto& s = cfg.stages[i];
    x = relu(conv2d(x, params.backbone[i].weight, params.backbone[i].bias, s.stride, s.padding));
  }
  return x;
}

ChannelAttention channel_attention(const Tensor& features, const Tensor& w1, const Tensor& w2) {
  const Tensor avg = global_avg_pool(features);
  const Tensor max = global_max_pool(features);
  const Tensor none;
  const Tensor from_avg = linear(relu(linear(avg, w1, none)), w2, none);
  const Tensor from_max = linear(relu(linear(max, w1, none)), w2, none);
  Tensor map = sigmoid(from_avg + from_max);
  Tensor weighted = scale_by_channel(features, map);
  return {std::move(map), std::move(weighted)};
}

SpatialAttention spatial_attention(const Tensor& features, const Tensor& weight, const Tensor& bias) {
  const Tensor pooled = concat({channel_mean_map(features), channel_max_map(features)}, 0);
  const int pad = static_cast<int>(weight.dim(2) / 2);
  Tensor map = sigmoid(conv2d(pooled, weight, bias, 1, pad));
  Tensor weighted = scale_by_map(features, map);
  return {std::move(map), std::move(weighted)};
}

Tensor fuse(const Tensor& basic, const Tensor& location) {
  if (basic.shape() != location.shape()) {
    throw DimensionError("fuse: " + to_string(basic.shape()) + " vs " + to_string(location.shape()));
  }
  return basic + location;
}

LocationEstimate location_head(const Tensor& features, const HeadParams& heads) {
  const Tensor pooled = global_avg_pool(features);
  LocationEstimate est;
  est.theta_logits = linear(pooled, heads.theta.weight, heads.theta.bias);
  est.rho_logits = linear(pooled, heads.rho.weight, heads.rho.bias);
  est.theta = expectation(softmax(est.theta_logits), BinningSpec::theta());
  est.rho = expectation(softmax(est.rho_logits), BinningSpec::rho());
  return est;
}

PoseEstimate pose_head(const Tensor& features, const HeadParams& heads) {
  const Tensor pooled = global_avg_pool(features);
  const BinningSpec bins = BinningSpec::pose();
  PoseEstimate est;
  est.pitch_logits = linear(pooled, heads.pitch.weight, heads.pitch.bias);
  est.yaw_logits = linear(pooled, heads.yaw.weight, heads.yaw.bias);
  est.roll_logits = linear(pooled, heads.roll.weight, heads.roll.bias);
  est.pitch = expectation(softmax(est.pitch_logits), bins);
  est.yaw = expectation(softmax(est.yaw_logits), bins);
  est.roll = expectation(softmax(est.roll_logits), bins);
  return est;
}

PredictionBundle forward(const ModelParams& params, const Tensor& image, const ForwardOptions& opts) {
  PredictionBundle out;
  out.basic = backbone_forward(params, image);
  if (params.config.location_module) {
    if (!params.location) throw std::logic_error("forward: location module enabled but weights missing");
    out.channel = channel_attention(out.basic, params.location->w1, params.location->w2);
    out.spatial = spatial_attention(out.channel->weighted, params.location->spatial_weight,
                                    params.location->spatial_bias);
    out.location_feature = out.spatial->weighted;
    out.fused = fuse(out.basic, out.location_feature);
  } else {
    out.fused = out.basic;
  }
  if (opts.decode_location) {
    out.location = location_head(out.location_feature.defined() ? out.location_feature : out.basic, params.heads);
  }
  out.pose = pose_head(out.fused, params.heads);
  return out;
}

}  // namespace fishpose
