#include "doctest.h"

#include "fishpose/network.hpp"
#include "support.hpp"

#include <cmath>
#include <cstring>
#include <random>

using namespace fishpose;

namespace {

Tensor random_image(const NetworkConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  const Index s = cfg.backbone.input_size;
  Tensor t(Shape{cfg.backbone.in_channels, s, s});
  for (Index i = 0; i < t.size(); ++i) t.values()[i] = n(rng);
  return t;
}

Tensor random_features(Index c, Index h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(Shape{c, h, h});
  for (Index i = 0; i < t.size(); ++i) t.values()[i] = n(rng);
  return t;
}

std::uint64_t hash_doubles(const Eigen::VectorXd& v, std::uint64_t h = 1469598103934665603ULL) {
  return test_support::fnv1a(reinterpret_cast<const std::uint8_t*>(v.data()), sizeof(double) * v.size(), h);
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("configuration") {
  NetworkConfig cfg;
  CHECK(cfg.backbone.output_size() == 7);
  CHECK(cfg.backbone.output_channels() == 64);
  CHECK_NOTHROW(cfg.validate());
  CHECK(NetworkConfig::reduced().backbone.output_channels() == 8);
  CHECK(NetworkConfig::reduced().backbone.input_size == 16);

  NetworkConfig bad = cfg;
  bad.reduction = 5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.spatial_kernel = 4;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  NetworkConfig custom = NetworkConfig::reduced();
  custom.location_module = false;
  custom.spatial_kernel = 3;
  CHECK(network_config_from_json(to_json(custom)) == custom);
  CHECK(network_config_from_json(to_json(cfg)) == cfg);
  CHECK(network_config_from_json("{\"reduction\": 8}").reduction == 8);
  CHECK_THROWS(network_config_from_json("{\"reduction\": 7}"));
}

TEST_CASE("parameter initialization") {
  const NetworkConfig cfg;
  const ModelParams a = ModelParams::init(cfg, 5);
  const ModelParams b = ModelParams::init(cfg, 5);
  const ModelParams c = ModelParams::init(cfg, 6);
  const NamedTensors na = a.named(), nb = b.named(), nc = c.named();
  REQUIRE(na.size() == nb.size());
  bool any_differs = false;
  for (std::size_t i = 0; i < na.size(); ++i) {
    CHECK(na[i].first == nb[i].first);
    CHECK(na[i].second.values() == nb[i].second.values());
    CHECK(na[i].second.requires_grad());
    if (na[i].second.values() != nc[i].second.values()) any_differs = true;
  }
  CHECK(any_differs);
  CHECK(a.location.has_value());
  CHECK(a.heads.theta.weight.shape() == Shape{72, 64});
  CHECK(a.heads.rho.weight.shape() == Shape{66, 64});
  CHECK(a.heads.yaw.weight.shape() == Shape{66, 64});
  CHECK(a.location->w1.shape() == Shape{4, 64});
  CHECK(a.location->spatial_weight.shape() == Shape{1, 2, 7, 7});
  CHECK(a.heads.pitch.bias.values().isZero());
  CHECK(a.all_finite());

  NetworkConfig plain = cfg;
  plain.location_module = false;
  const ModelParams p = ModelParams::init(plain, 5);
  CHECK_FALSE(p.location.has_value());
  CHECK(p.parameter_count() == a.parameter_count() - (4 * 64 * 2 + 2 * 49 + 1));
}

TEST_CASE("load, clone and checkpoint agree") {
  const NetworkConfig cfg = NetworkConfig::reduced();
  const ModelParams a = ModelParams::init(cfg, 1);
  ModelParams b = ModelParams::init(cfg, 2);
  b.load(a.named());
  for (std::size_t i = 0; i < a.named().size(); ++i) CHECK(a.named()[i].second.values() == b.named()[i].second.values());

  ModelParams c = a.clone();
  Tensor w = c.heads.yaw.weight;
  w.values()[0] += 1.0;
  CHECK(a.heads.yaw.weight[0] != c.heads.yaw.weight[0]);

  test_support::TempDir dir("net");
  write_checkpoint(a.named(), dir / "m.bin");
  ModelParams d = ModelParams::init(cfg, 3);
  d.load(read_checkpoint(dir / "m.bin"));
  const Tensor img = random_image(cfg, 1);
  CHECK(forward(d, img).pose.yaw.item() == forward(a, img).pose.yaw.item());

  NamedTensors missing = a.named();
  missing.pop_back();
  CHECK_THROWS_AS(b.load(missing), CheckpointError);
  NamedTensors renamed = a.named();
  renamed.back().first = "head.nose.bias";
  CHECK_THROWS_AS(b.load(renamed), CheckpointError);
  NamedTensors reshaped = a.named();
  reshaped.back().second = Tensor(Shape{3});
  CHECK_THROWS_AS(b.load(reshaped), CheckpointError);

  NetworkConfig plain = cfg;
  plain.location_module = false;
  ModelParams e = ModelParams::init(plain, 1);
  CHECK_THROWS_AS(e.load(a.named()), CheckpointError);
}

TEST_CASE("forward shapes") {
  const NetworkConfig cfg;
  const ModelParams p = ModelParams::init(cfg, 1);
  const Tensor img = random_image(cfg, 2);
  const PredictionBundle out = forward(p, img);
  CHECK(out.basic.shape() == Shape{64, 7, 7});
  CHECK(out.location_feature.shape() == Shape{64, 7, 7});
  CHECK(out.fused.shape() == Shape{64, 7, 7});
  REQUIRE(out.channel.has_value());
  REQUIRE(out.spatial.has_value());
  CHECK(out.channel->map.shape() == Shape{64});
  CHECK(out.spatial->map.shape() == Shape{1, 7, 7});
  REQUIRE(out.location.has_value());
  CHECK(out.location->theta_logits.shape() == Shape{72});
  CHECK(out.location->rho_logits.shape() == Shape{66});
  CHECK(out.pose.yaw_logits.shape() == Shape{66});
  CHECK(std::abs(out.pose.yaw.item()) <= 97.5);
  CHECK(out.location->rho.item() >= 0.0);
  CHECK(out.location->rho.item() <= 0.99);

  CHECK_FALSE(forward(p, img, {.decode_location = false}).location.has_value());
  CHECK_THROWS_AS(forward(p, Tensor(Shape{3, 200, 200})), DimensionError);
}

TEST_CASE("channel attention") {
  SUBCASE("zero weights give one half everywhere") {
    const Tensor f = random_features(8, 5, 3);
    const ChannelAttention ca = channel_attention(f, Tensor(Shape{2, 8}), Tensor(Shape{8, 2}));
    for (Index i = 0; i < 8; ++i) CHECK(ca.map[i] == 0.5);
    CHECK((ca.weighted.values() - 0.5 * f.values()).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("matches a direct evaluation") {
    const Index C = 8, H = 5;
    const Tensor f = random_features(C, H, 4);
    std::mt19937_64 rng(9);
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::MatrixXd W1(2, C), W2(C, 2);
    for (Index i = 0; i < W1.size(); ++i) W1.data()[i] = n(rng);
    for (Index i = 0; i < W2.size(); ++i) W2.data()[i] = n(rng);
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> W1r = W1, W2r = W2;
    const Tensor t1(Shape{2, C}, Eigen::Map<Eigen::VectorXd>(W1r.data(), W1r.size()));
    const Tensor t2(Shape{C, 2}, Eigen::Map<Eigen::VectorXd>(W2r.data(), W2r.size()));
    const ChannelAttention ca = channel_attention(f, t1, t2);

    Eigen::VectorXd avg(C), max(C);
    for (Index c = 0; c < C; ++c) {
      const auto block = f.values().segment(c * H * H, H * H);
      avg[c] = block.mean();
      max[c] = block.maxCoeff();
    }
    const Eigen::VectorXd logits = W2 * (W1 * avg).cwiseMax(0.0) + W2 * (W1 * max).cwiseMax(0.0);
    for (Index c = 0; c < C; ++c) {
      CHECK(ca.map[c] == doctest::Approx(sig(logits[c])).epsilon(1e-13));
      CHECK(ca.map[c] > 0.0);
      CHECK(ca.map[c] < 1.0);
    }
  }
  SUBCASE("constant input") {
    Tensor f(Shape{8, 4, 4}, Eigen::VectorXd::Constant(128, 0.7));
    const ModelParams p = ModelParams::init(NetworkConfig::reduced(), 1);
    const ChannelAttention ca = channel_attention(f, p.location->w1, p.location->w2);
    // average and max pooling coincide, so both MLP branches see the same vector
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> W1 =
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            p.location->w1.values().data(), 2, 8);
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> W2 =
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            p.location->w2.values().data(), 8, 2);
    const Eigen::VectorXd hidden = (W1 * Eigen::VectorXd::Constant(8, 0.7)).cwiseMax(0.0);
    const Eigen::VectorXd logits = 2.0 * W2 * hidden;
    for (Index c = 0; c < 8; ++c) {
      CHECK(ca.map[c] == doctest::Approx(sig(logits[c])).epsilon(1e-13));
      for (Index i = 0; i < 16; ++i) CHECK(ca.weighted[c * 16 + i] == doctest::Approx(0.7 * ca.map[c]));
    }
  }
}

TEST_CASE("spatial attention") {
  SUBCASE("zero weights give one half") {
    const Tensor f = random_features(4, 6, 5);
    const SpatialAttention sa = spatial_attention(f, Tensor(Shape{1, 2, 3, 3}), Tensor(Shape{1}));
    CHECK(sa.map.shape() == Shape{1, 6, 6});
    for (Index i = 0; i < 36; ++i) CHECK(sa.map[i] == 0.5);
  }
  SUBCASE("constant input is constant away from the zero padding") {
    Tensor f(Shape{4, 9, 9}, Eigen::VectorXd::Constant(4 * 81, 1.3));
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.1, 1.0);
    Tensor w(Shape{1, 2, 3, 3});
    for (Index i = 0; i < w.size(); ++i) w.values()[i] = u(rng);
    const SpatialAttention sa = spatial_attention(f, w, Tensor(Shape{1}, Eigen::VectorXd::Constant(1, 0.2)));
    const double interior = sa.map[1 * 9 + 1];
    const double expected = sig(0.2 + 1.3 * w.values().sum());
    for (Index r = 1; r < 8; ++r)
      for (Index c = 1; c < 8; ++c) CHECK(sa.map[r * 9 + c] == doctest::Approx(expected).epsilon(1e-14));
    CHECK(sa.map[0] < interior);
    CHECK(sa.map[4] < interior);
  }
  SUBCASE("uses channel mean and max") {
    // Only the max-pool input channel carries weight.
    Tensor f(Shape{2, 1, 1}, (Eigen::VectorXd(2) << -3.0, 2.0).finished());
    Tensor w(Shape{1, 2, 1, 1}, (Eigen::VectorXd(2) << 0.0, 1.0).finished());
    CHECK(spatial_attention(f, w, Tensor(Shape{1})).map.item() == doctest::Approx(sig(2.0)));
    Tensor w2(Shape{1, 2, 1, 1}, (Eigen::VectorXd(2) << 1.0, 0.0).finished());
    CHECK(spatial_attention(f, w2, Tensor(Shape{1})).map.item() == doctest::Approx(sig(-0.5)));
  }
}

TEST_CASE("fuse adds") {
  const Tensor a = random_features(3, 2, 1);
  const Tensor b = random_features(3, 2, 2);
  CHECK(fuse(a, b).values() == a.values() + b.values());
  CHECK_THROWS_AS(fuse(a, random_features(3, 3, 1)), DimensionError);
}

TEST_CASE("head decoding is the expectation of the softmax") {
  ModelParams p = ModelParams::init(NetworkConfig::reduced(), 3);
  const Tensor feat = random_features(8, 4, 6);
  const PoseEstimate pe = pose_head(feat, p.heads);
  Eigen::VectorXd logits = pe.yaw_logits.values();
  Eigen::VectorXd probs = (logits.array() - logits.maxCoeff()).exp();
  probs /= probs.sum();
  CHECK(pe.yaw.item() == doctest::Approx(decode_expectation(probs, BinningSpec::pose())).epsilon(1e-13));

  // Adding a constant to every logit leaves the estimate unchanged.
  Tensor bias = p.heads.yaw.bias;
  const double before = pe.yaw.item();
  bias.values().array() += 17.0;
  CHECK(pose_head(feat, p.heads).yaw.item() == doctest::Approx(before).epsilon(1e-12));

  // A dominant bias pins the estimate to a bin midpoint.
  Tensor wb = p.heads.pitch.bias;
  wb.values().setZero();
  wb.values()[33] = 1000.0;
  CHECK(pose_head(feat, p.heads).pitch.item() == doctest::Approx(1.5).epsilon(1e-12));
  wb.values()[33] = 0.0;
  wb.values()[0] = 1000.0;
  CHECK(pose_head(feat, p.heads).pitch.item() == doctest::Approx(-97.5).epsilon(1e-12));
  Tensor tb = p.heads.theta.bias;
  tb.values().setZero();
  tb.values()[35] = 1000.0;
  CHECK(location_head(feat, p.heads).theta.item() == doctest::Approx(-2.5).epsilon(1e-12));
  Tensor rb = p.heads.rho.bias;
  rb.values().setZero();
  rb.values()[0] = 1000.0;
  CHECK(location_head(feat, p.heads).rho.item() == doctest::Approx(0.0075).epsilon(1e-12));

  // With zero head weights the logits are uniform and the estimate is the range centre.
  Tensor(p.heads.roll.weight).values().setZero();
  Tensor(p.heads.roll.bias).values().setZero();
  CHECK(std::abs(pose_head(feat, p.heads).roll.item()) < 1e-12);
}

TEST_CASE("without the module the network is backbone plus pose head") {
  NetworkConfig cfg = NetworkConfig::reduced();
  cfg.location_module = false;
  const ModelParams p = ModelParams::init(cfg, 4);
  const Tensor img = random_image(cfg, 5);
  const PredictionBundle out = forward(p, img);
  CHECK_FALSE(out.location_feature.defined());
  CHECK_FALSE(out.channel.has_value());
  const Tensor basic = backbone_forward(p, img);
  CHECK(out.fused.values() == basic.values());
  const PoseEstimate direct = pose_head(basic, p.heads);
  CHECK(out.pose.yaw.item() == direct.yaw.item());
  CHECK(out.pose.pitch.item() == direct.pitch.item());
  CHECK(out.pose.roll.item() == direct.roll.item());
  REQUIRE(out.location.has_value());
  CHECK(out.location->rho.item() == location_head(basic, p.heads).rho.item());
}

TEST_CASE("golden forward output") {
  const NetworkConfig cfg;
  const ModelParams p = ModelParams::init(cfg, 42);
  const Tensor img = random_image(cfg, 7);
  const PredictionBundle out = forward(p, img);
  Eigen::VectorXd v(5);
  v << out.pose.pitch.item(), out.pose.yaw.item(), out.pose.roll.item(), out.location->theta.item(),
      out.location->rho.item();
  const std::uint64_t h = hash_doubles(out.fused.values(), hash_doubles(v));
  CHECK(h == 11080219687051179180ULL);
}
