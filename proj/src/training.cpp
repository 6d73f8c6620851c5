#include "fishpose/training.hpp"

#include "fishpose/evaluation.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace fishpose {

Tensor normalize_image(const Image& image) {
  const Index h = image.height(), w = image.width(), plane = h * w;
  Eigen::VectorXd v(3 * plane);
  const auto& px = image.data();
  for (int c = 0; c < 3; ++c) {
    const double mean = kChannelMean[c], inv_std = 1.0 / kChannelStd[c];
    for (Index i = 0; i < plane; ++i) v[c * plane + i] = (px[i * 3 + c] / 255.0 - mean) * inv_std;
  }
  return Tensor(Shape{3, h, w}, std::move(v));
}

Image denormalize_image(const Tensor& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw DimensionError("denormalize_image: expected 3 x H x W, got " + to_string(t.shape()));
  const Index h = t.dim(1), w = t.dim(2), plane = h * w;
  Image out(static_cast<int>(w), static_cast<int>(h));
  for (int c = 0; c < 3; ++c) {
    for (Index i = 0; i < plane; ++i) {
      const double x = (t[c * plane + i] * kChannelStd[c] + kChannelMean[c]) * 255.0;
      out.data()[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(x), 0L, 255L));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

Tensor task_loss(const Tensor& logits, const Tensor& decoded, double gt, const BinningSpec& spec, double alpha) {
  Tensor ce = cross_entropy(logits, spec.label(gt));
  if (alpha == 0.0) return ce;
  return ce + alpha * mse(decoded, Tensor::scalar(gt));
}

LossBreakdown total_loss(const PredictionBundle& bundle, const EulerAngles& pose, const PolarLocation& location,
                         const LossConfig& cfg) {
  const BinningSpec pose_bins = BinningSpec::pose();
  const PoseEstimate& p = bundle.pose;
  const Tensor lp = task_loss(p.pitch_logits, p.pitch, pose.pitch, pose_bins, cfg.alpha_pitch);
  const Tensor ly = task_loss(p.yaw_logits, p.yaw, pose.yaw, pose_bins, cfg.alpha_yaw);
  const Tensor lr = task_loss(p.roll_logits, p.roll, pose.roll, pose_bins, cfg.alpha_roll);

  LossBreakdown out;
  out.pitch = lp.item();
  out.yaw = ly.item();
  out.roll = lr.item();
  out.total = lp + ly + lr;

  if (cfg.supervises_location()) {
    if (!bundle.location) throw std::logic_error("total_loss: location supervision needs a decoded location");
    const LocationEstimate& l = *bundle.location;
    if (cfg.lambda1 != 0.0) {
      const Tensor lrho = task_loss(l.rho_logits, l.rho, location.rho, BinningSpec::rho(), cfg.alpha_rho);
      out.rho = lrho.item();
      out.total = out.total + cfg.lambda1 * lrho;
    }
    if (cfg.lambda2 != 0.0) {
      const Tensor ltheta = task_loss(l.theta_logits, l.theta, location.theta, BinningSpec::theta(), cfg.alpha_theta);
      out.theta = ltheta.item();
      out.total = out.total + cfg.lambda2 * ltheta;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

OptimizerState make_optimizer_state(const NamedTensors& params, double lr) {
  OptimizerState s;
  s.lr = lr;
  for (const auto& [name, t] : params) {
    s.first_moment.push_back(Eigen::VectorXd::Zero(t.size()));
    s.second_moment.push_back(Eigen::VectorXd::Zero(t.size()));
  }
  return s;
}

void adam_step(const NamedTensors& params, OptimizerState& state, const AdamConfig& cfg) {
  if (state.first_moment.size() != params.size()) throw std::invalid_argument("adam_step: state/parameter count mismatch");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].second;
    Eigen::VectorXd& m = state.first_moment[i];
    Eigen::VectorXd& v = state.second_moment[i];
    if (m.size() != p.size()) throw std::invalid_argument("adam_step: moment shape mismatch for " + params[i].first);
    if (p.has_grad()) {
      const Eigen::VectorXd& g = p.grad();
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseAbs2();
    } else {
      m *= cfg.beta1;
      v *= cfg.beta2;
    }
    p.values().array() -= state.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.epsilon);
  }
}

double Schedule::lr_at(int epoch, double base_lr) const {
  double lr = base_lr;
  for (int e : decay_epochs) {
    if (epoch >= e) lr *= decay_factor;
  }
  return lr;
}

// ---------------------------------------------------------------------------

std::string to_json(const TrainConfig& cfg) {
  nlohmann::ordered_json j;
  j["dataset"] = cfg.dataset;
  j["seed"] = cfg.seed;
  j["epochs"] = cfg.schedule.epochs;
  j["batch_size"] = cfg.schedule.batch_size;
  j["lr"] = cfg.adam.lr;
  j["lr_decay_epochs"] = cfg.schedule.decay_epochs;
  j["lr_decay_factor"] = cfg.schedule.decay_factor;
  j["beta1"] = cfg.adam.beta1;
  j["beta2"] = cfg.adam.beta2;
  j["adam_epsilon"] = cfg.adam.epsilon;
  j["lambda1"] = cfg.loss.lambda1;
  j["lambda2"] = cfg.loss.lambda2;
  j["alphas"] = {{"pitch", cfg.loss.alpha_pitch},
                 {"yaw", cfg.loss.alpha_yaw},
                 {"roll", cfg.loss.alpha_roll},
                 {"theta", cfg.loss.alpha_theta},
                 {"rho", cfg.loss.alpha_rho}};
  j["holdout_fraction"] = cfg.holdout_fraction;
  j["eval_each_epoch"] = cfg.eval_each_epoch;
  j["pose_limit"] = cfg.pose_limit;
  j["network"] = nlohmann::ordered_json::parse(to_json(cfg.network));
  return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text, TrainConfig cfg) {
  const auto j = nlohmann::json::parse(text);
  if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
  cfg.dataset = j.value("dataset", cfg.dataset);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.schedule.epochs = j.value("epochs", cfg.schedule.epochs);
  cfg.schedule.batch_size = j.value("batch_size", cfg.schedule.batch_size);
  cfg.adam.lr = j.value("lr", cfg.adam.lr);
  cfg.schedule.decay_epochs = j.value("lr_decay_epochs", cfg.schedule.decay_epochs);
  cfg.schedule.decay_factor = j.value("lr_decay_factor", cfg.schedule.decay_factor);
  cfg.adam.beta1 = j.value("beta1", cfg.adam.beta1);
  cfg.adam.beta2 = j.value("beta2", cfg.adam.beta2);
  cfg.adam.epsilon = j.value("adam_epsilon", cfg.adam.epsilon);
  cfg.loss.lambda1 = j.value("lambda1", cfg.loss.lambda1);
  cfg.loss.lambda2 = j.value("lambda2", cfg.loss.lambda2);
  if (j.contains("alphas")) {
    const auto& a = j["alphas"];
    cfg.loss.alpha_pitch = a.value("pitch", cfg.loss.alpha_pitch);
    cfg.loss.alpha_yaw = a.value("yaw", cfg.loss.alpha_yaw);
    cfg.loss.alpha_roll = a.value("roll", cfg.loss.alpha_roll);
    cfg.loss.alpha_theta = a.value("theta", cfg.loss.alpha_theta);
    cfg.loss.alpha_rho = a.value("rho", cfg.loss.alpha_rho);
  }
  cfg.holdout_fraction = j.value("holdout_fraction", cfg.holdout_fraction);
  cfg.eval_each_epoch = j.value("eval_each_epoch", cfg.eval_each_epoch);
  cfg.pose_limit = j.value("pose_limit", cfg.pose_limit);
  if (j.contains("network")) cfg.network = network_config_from_json(j["network"].dump());

  if (cfg.schedule.epochs < 1 || cfg.schedule.batch_size < 1) throw std::invalid_argument("epochs and batch_size must be >= 1");
  if (!(cfg.holdout_fraction >= 0.0 && cfg.holdout_fraction < 1.0)) throw std::invalid_argument("holdout_fraction must be in [0, 1)");
  if (cfg.loss.lambda1 < 0 || cfg.loss.lambda2 < 0 || cfg.loss.alpha_pitch < 0 || cfg.loss.alpha_yaw < 0 ||
      cfg.loss.alpha_roll < 0 || cfg.loss.alpha_theta < 0 || cfg.loss.alpha_rho < 0) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
  for (int e : cfg.schedule.decay_epochs) {
    if (e < 0 || e >= cfg.schedule.epochs) throw std::invalid_argument("lr decay epochs must lie within the run");
  }
  return cfg;
}

std::string to_json_line(const EpochLog& log) {
  nlohmann::ordered_json j;
  j["epoch"] = log.epoch;
  j["split"] = log.split;
  j["lr"] = log.lr;
  j["loss"] = log.loss;
  j["loss_pitch"] = log.loss_pitch;
  j["loss_yaw"] = log.loss_yaw;
  j["loss_roll"] = log.loss_roll;
  j["loss_rho"] = log.loss_rho;
  j["loss_theta"] = log.loss_theta;
  j["pitch_err"] = log.pitch_err;
  j["yaw_err"] = log.yaw_err;
  j["roll_err"] = log.roll_err;
  j["mae"] = log.mae;
  return j.dump();
}

// ---------------------------------------------------------------------------

std::vector<const FisheyeSample*> filter_pose_range(const std::vector<FisheyeSample>& samples, double limit) {
  std::vector<const FisheyeSample*> out;
  for (const auto& s : samples) {
    if (within_pose_range(s.pose, limit)) out.push_back(&s);
  }
  return out;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(idx[i - 1], idx[std::min(j, i - 1)]);
  }
  return idx;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double holdout_fraction,
                                                                            std::uint64_t seed) {
  std::vector<std::size_t> idx = shuffled_indices(n, derive_seed(seed, 0x5117));
  const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * holdout_fraction));
  std::vector<std::size_t> test(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  return {std::move(train), std::move(test)};
}

namespace {

void check_location_targets(const std::vector<const FisheyeSample*>& samples) {
  for (const auto* s : samples) {
    if (!BinningSpec::rho().contains(s->location.rho) || !BinningSpec::theta().contains(s->location.theta)) {
      throw std::invalid_argument("sample " + s->source_id + " has a location outside the binning ranges");
    }
  }
}

EpochLog summarize(int epoch, const char* split, double lr, const std::vector<EvalRecord>& records) {
  EpochLog log;
  log.epoch = epoch;
  log.split = split;
  log.lr = lr;
  if (!records.empty()) {
    const MaeSummary m = mae(records);
    log.pitch_err = m.pitch;
    log.yaw_err = m.yaw;
    log.roll_err = m.roll;
    log.mae = m.mae;
  }
  return log;
}

struct LossSums {
  double total = 0.0, pitch = 0.0, yaw = 0.0, roll = 0.0, rho = 0.0, theta = 0.0;

  void add(const LossBreakdown& l) {
    total += l.total.item();
    pitch += l.pitch;
    yaw += l.yaw;
    roll += l.roll;
    rho += l.rho;
    theta += l.theta;
  }

  void write_means(EpochLog& log, std::size_t n) const {
    const double d = static_cast<double>(n);
    log.loss = total / d;
    log.loss_pitch = pitch / d;
    log.loss_yaw = yaw / d;
    log.loss_roll = roll / d;
    log.loss_rho = rho / d;
    log.loss_theta = theta / d;
  }
};

EpochLog evaluate_split(const ModelParams& params, const std::vector<const FisheyeSample*>& samples, int epoch,
                        double lr, const LossConfig& loss_cfg) {
  LossSums sums;
  std::vector<EvalRecord> records;
  records.reserve(samples.size());
  for (const auto* s : samples) {
    const PredictionBundle b = forward(params, normalize_image(s->image), {loss_cfg.supervises_location()});
    sums.add(total_loss(b, s->pose, s->location, loss_cfg));
    records.push_back({s->source_id, s->pose, {b.pose.pitch.item(), b.pose.yaw.item(), b.pose.roll.item()},
                       s->location});
  }
  EpochLog log = summarize(epoch, "test", lr, records);
  sums.write_means(log, samples.size());
  return log;
}

}  // namespace

TrainResult run_training(const std::vector<const FisheyeSample*>& train, const std::vector<const FisheyeSample*>& test,
                         const TrainConfig& cfg, const EpochCallback& on_epoch) {
  if (train.empty()) throw std::invalid_argument("run_training: empty training set");
  if (cfg.loss.supervises_location()) check_location_targets(train);
  for (const auto* s : train) {
    if (!within_pose_range(s->pose, cfg.pose_limit)) {
      throw std::invalid_argument("run_training: sample " + s->source_id + " outside the pose range");
    }
  }

  TrainResult result{ModelParams::init(cfg.network, cfg.seed), {}};
  ModelParams& params = result.params;
  const NamedTensors named = params.named();
  OptimizerState opt = make_optimizer_state(named, cfg.adam.lr);
  const ForwardOptions fwd{cfg.loss.supervises_location()};
  const std::size_t batch_size = static_cast<std::size_t>(cfg.schedule.batch_size);

  for (int epoch = 0; epoch < cfg.schedule.epochs; ++epoch) {
    opt.lr = cfg.schedule.lr_at(epoch, cfg.adam.lr);
    const std::vector<std::size_t> order = shuffled_indices(train.size(), derive_seed(cfg.seed, 1000 + epoch));

    LossSums sums;
    std::vector<EvalRecord> seen;
    seen.reserve(train.size());
    for (std::size_t start = 0, batch = 0; start < order.size(); start += batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      const double weight = 1.0 / static_cast<double>(end - start);
      params.zero_grad();
      for (std::size_t k = start; k < end; ++k) {
        const FisheyeSample& s = *train[order[k]];
        Tape tape;
        TapeScope scope(tape);
        const PredictionBundle bundle = forward(params, normalize_image(s.image), fwd);
        const LossBreakdown loss = total_loss(bundle, s.pose, s.location, cfg.loss);
        if (!std::isfinite(loss.total.item())) {
          throw NonFiniteLossError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(batch) + " (sample " + s.source_id + ")");
        }
        tape.backward(weight * loss.total);

        sums.add(loss);
        seen.push_back({s.source_id, s.pose,
                        {bundle.pose.pitch.item(), bundle.pose.yaw.item(), bundle.pose.roll.item()},
                        s.location});
      }
      adam_step(named, opt, cfg.adam);
    }
    if (!params.all_finite()) {
      throw NonFiniteLossError("non-finite parameters after epoch " + std::to_string(epoch));
    }

    EpochLog log = summarize(epoch, "train", opt.lr, seen);
    sums.write_means(log, train.size());
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);

    if (!test.empty() && (cfg.eval_each_epoch || epoch + 1 == cfg.schedule.epochs)) {
      EpochLog test_log = evaluate_split(params, test, epoch, opt.lr, cfg.loss);
      result.log.push_back(test_log);
      if (on_epoch) on_epoch(test_log);
    }
  }
  return result;
}

}  // namespace fishpose
