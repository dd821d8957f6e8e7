#include <cmath>
#include <sstream>

#include "doctest.h"
#include "geofuse/gradient_suite.hpp"
#include "geofuse/network.hpp"

using namespace geofuse;

namespace {

struct World {
  std::vector<std::vector<GroundObservation>> obs;
  std::vector<Scene<double>> scenes;
  std::vector<std::vector<int>> pixels;
};

World make_world(const NetworkConfig& cfg, int batch, int n_obs, Rng& rng) {
  World w;
  const int hw = cfg.input_size;
  const double pixel = 0.125;
  w.obs.resize(batch);
  w.scenes.resize(batch);
  w.pixels.resize(batch);
  for (int b = 0; b < batch; ++b) {
    for (int i = 0; i < n_obs; ++i) {
      GroundObservation o;
      o.id = b * 100 + i;
      o.location = {b * hw * pixel + rng.uniform(0.0, hw * pixel), rng.uniform(0.0, hw * pixel)};
      for (auto& c : o.cutouts) {
        c.resize(cfg.cutout_dim);
        for (auto& v : c) v = static_cast<float>(rng.normal());
      }
      w.obs[b].push_back(o);
    }
    w.scenes[b].overhead = random_tensor({hw, hw, 3}, rng);
    w.scenes[b].grid.height = hw;
    w.scenes[b].grid.width = hw;
    w.scenes[b].grid.transform.a = {b * hw * pixel, pixel, 0.0, 0.0, 0.0, pixel};
    for (const auto& o : w.obs[b]) w.scenes[b].observations.push_back(&o);
    for (int i = 0; i < 7; ++i) w.pixels[b].push_back(static_cast<int>(rng.below(hw * hw)));
  }
  return w;
}

}  // namespace

TEST_CASE("shape arithmetic at full scale") {
  const auto cfg = NetworkConfig::full_scale(Variant::kUnifiedAdaptive, 13);
  CHECK(cfg.fusion_input_channels() == 179);
  CHECK(pooled_ground_shape(cfg) == Shape{32, 32, 51});
  CHECK(hypercolumn_length(cfg) == 1043);
  CHECK(hypercolumn_length(NetworkConfig::full_scale(Variant::kRemote, 13)) == 992);
  CHECK(hypercolumn_length(NetworkConfig::full_scale(Variant::kProximate, 13)) == 50);
  CHECK(hypercolumn_length(NetworkConfig::full_scale(Variant::kGrid, 13)) == 256 + 512 + 51);
}

TEST_CASE("shape arithmetic at desk scale") {
  NetworkConfig cfg;
  cfg.variant = Variant::kUnifiedUniform;
  CHECK(hypercolumn_length(cfg) == 257);
  CHECK(cfg.fusion_input_channels() == 32 + 9);
  CHECK(pooled_ground_shape(cfg) == Shape{8, 8, 9});
}

TEST_CASE("variant names round-trip") {
  for (Variant v : all_variants()) CHECK(parse_variant(variant_name(v)) == v);
  CHECK_THROWS_AS(parse_variant("satellite"), ConfigError);
}

TEST_CASE("hypercolumn length matches the extracted width for random configs") {
  Rng rng(42);
  for (int trial = 0; trial < 12; ++trial) {
    auto cfg = toy_network_config(all_variants()[1 + trial % 5]);
    for (auto& c : cfg.channels) c = 1 + static_cast<int>(rng.below(4));
    cfg.ground_dim = 1 + static_cast<int>(rng.below(3));
    auto params = init_network<double>(cfg, trial);
    auto world = make_world(cfg, 1, 2, rng);
    ModelCache<double> cache;
    model_forward(cfg, params, world.scenes, world.pixels, Mode::kTrain, &cache);
    CHECK(cache.mlp.input.dim(1) == hypercolumn_length(cfg));
  }
}

TEST_CASE("backbone taps at desk scale") {
  NetworkConfig cfg;
  cfg.variant = Variant::kUnifiedUniform;
  auto params = init_network<float>(cfg, 1);
  Tensor<float> overhead({2, 64, 64, 3}, 0.5f);
  Tensor<float> ground({2, 64, 64, 9}, 0.25f);
  auto r = backbone_forward(cfg, params, overhead, ground, Mode::kTrain);
  REQUIRE(r.taps.size() == 5);
  CHECK(r.taps[0].shape() == Shape{2, 64, 64, 8});
  CHECK(r.taps[1].shape() == Shape{2, 32, 32, 16});
  CHECK(r.taps[2].shape() == Shape{2, 8, 8, 32});
  CHECK(r.taps[3].shape() == Shape{2, 8, 8, 64});
  CHECK(r.taps[4].shape() == Shape{2, 8, 8, 128});
  CHECK(r.pooled_ground.shape() == Shape{2, 8, 8, 9});

  CHECK_THROWS_AS(backbone_forward(cfg, params, overhead, Tensor<float>(), Mode::kTrain),
                  ConfigError);

  cfg.variant = Variant::kRemote;
  auto remote = init_network<float>(cfg, 1);
  auto rr = backbone_forward(cfg, remote, overhead, Tensor<float>(), Mode::kTrain);
  CHECK(rr.taps.size() == 5);
  CHECK(rr.pooled_ground.empty());

  cfg.variant = Variant::kGrid;
  auto grid = init_network<float>(cfg, 1);
  auto rg = backbone_forward(cfg, grid, Tensor<float>(), ground, Mode::kTrain);
  REQUIRE(rg.taps.size() == 2);
  CHECK(rg.taps[0].shape() == Shape{2, 8, 8, 64});
}

TEST_CASE("variant parameter sets are structural ablations") {
  NetworkConfig cfg;
  auto has_prefix = [](const ModelParams<float>& p, const std::string& prefix) {
    for (const auto& n : p.names())
      if (n.rfind(prefix, 0) == 0) return true;
    return false;
  };
  cfg.variant = Variant::kRemote;
  auto remote = init_network<float>(cfg, 3);
  CHECK_FALSE(has_prefix(remote, "ground."));
  CHECK_FALSE(has_prefix(remote, "kernel."));
  CHECK_FALSE(has_prefix(remote, "head."));
  CHECK(has_prefix(remote, "conv1_1"));

  cfg.variant = Variant::kProximate;
  auto prox = init_network<float>(cfg, 3);
  CHECK_FALSE(has_prefix(prox, "conv"));
  CHECK(has_prefix(prox, "ground."));

  cfg.variant = Variant::kGrid;
  auto grid = init_network<float>(cfg, 3);
  CHECK_FALSE(has_prefix(grid, "conv1_"));
  CHECK(has_prefix(grid, "conv4_1"));
  CHECK(grid.get("conv4_1.w").value.dim(2) == 9);

  cfg.variant = Variant::kUnifiedAdaptive;
  auto adaptive = init_network<float>(cfg, 3);
  CHECK(has_prefix(adaptive, "head.up3"));
  CHECK_FALSE(has_prefix(adaptive, "kernel."));

  cfg.variant = Variant::kRandom;
  CHECK(init_network<float>(cfg, 3).count() == 0);
}

TEST_CASE("fusion variants without observations are the remote model") {
  NetworkConfig cfg;
  cfg.variant = Variant::kUnifiedAdaptive;
  cfg.n_nearest = 0;
  CHECK(cfg.effective_variant() == Variant::kRemote);
  auto zero_n = init_network<float>(cfg, 9);
  cfg.variant = Variant::kRemote;
  cfg.n_nearest = 20;
  auto remote = init_network<float>(cfg, 9);
  REQUIRE(zero_n.names() == remote.names());
  for (const auto& n : remote.names()) CHECK(zero_n.get(n).value == remote.get(n).value);
}

TEST_CASE("adaptive head") {
  auto cfg = toy_network_config(Variant::kUnifiedAdaptive);
  auto params = init_network<double>(cfg, 5);
  Rng rng(5);
  const auto trunk = random_tensor({2, 2, 2, cfg.channels[2]}, rng);
  const auto raw = adaptive_head(cfg, params, trunk, nullptr);
  CHECK(raw.shape() == Shape{2, 16, 16, 2});
  const auto sigma = softplus(raw);
  for (double s : sigma.storage()) CHECK(s > 0.0);

  params.get("head.up3.w").value.zero();
  const auto flat = softplus(adaptive_head(cfg, params, trunk, nullptr));
  for (double s : flat.storage()) CHECK(s == doctest::Approx(softplus(1.0)).epsilon(1e-15));

  cfg.head_dims = {3, 2, 3};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("hypercolumn sampling matches dense resizing") {
  Rng rng(17);
  const auto a = random_tensor({2, 2, 2, 3}, rng);
  const auto b = random_tensor({2, 4, 4, 2}, rng);
  const auto c = random_tensor({2, 8, 8, 1}, rng);
  std::vector<std::vector<int>> all(2);
  for (auto& p : all)
    for (int i = 0; i < 64; ++i) p.push_back(i);
  const auto h = extract_hypercolumn<double>({&a, &b, &c}, all, 8, 8);
  REQUIRE(h.shape() == Shape{128, 6});
  const auto ra = bilinear_resize(a, 8, 8), rb = bilinear_resize(b, 8, 8);
  for (int s = 0; s < 2; ++s)
    for (int p = 0; p < 64; ++p) {
      const int row = s * 64 + p;
      for (int k = 0; k < 3; ++k) CHECK(h(row, k) == ra[(s * 64 + p) * 3 + k]);
      for (int k = 0; k < 2; ++k) CHECK(h(row, 3 + k) == rb[(s * 64 + p) * 2 + k]);
      CHECK(h(row, 5) == c[s * 64 + p]);
    }
  std::vector<std::vector<int>> bad{{64}, {0}};
  CHECK_THROWS_AS(extract_hypercolumn<double>({&a}, bad, 8, 8), ShapeError);
}

TEST_CASE("mlp head") {
  NetworkConfig cfg;
  cfg.variant = Variant::kProximate;
  cfg.num_classes = 13;
  cfg.ground_dim = 3;
  cfg.mlp_hidden = {2, 2};
  auto params = init_network<double>(cfg, 1);
  Rng rng(1);
  const auto h = random_tensor({4, 3}, rng);
  CHECK(mlp_head(cfg, params, h, Mode::kInfer, nullptr).shape() == Shape{4, 13});

  params.get("mlp.out.w").value.zero();
  const auto zero = mlp_head(cfg, params, h, Mode::kInfer, nullptr);
  for (double v : zero.storage()) CHECK(v == 0.0);

  // hand computation with identity-like weights and fresh moving statistics
  cfg.num_classes = 2;
  auto p2 = init_network<double>(cfg, 2);
  p2.get("mlp.fc1.w").value = Tensor<double>({3, 2}, std::vector<double>{1, 0, 0, 1, 1, -1});
  p2.get("mlp.fc2.w").value = Tensor<double>({2, 2}, std::vector<double>{2, 0, 0, 1});
  p2.get("mlp.out.w").value = Tensor<double>({2, 2}, std::vector<double>{1, 1, 1, -1});
  p2.get("mlp.out.b").value = Tensor<double>({2}, std::vector<double>{0.5, 0.0});
  const Tensor<double> x({1, 3}, std::vector<double>{1.0, 2.0, 3.0});
  const double s = 1.0 / std::sqrt(1.0 + 1e-5);
  auto act = [](double v) { return v >= 0 ? v : 0.2 * v; };
  const double a1 = act(s * (1 + 3)), a2 = act(s * (2 - 3));
  const double b1 = act(s * 2 * a1), b2 = act(s * a2);
  const auto y = mlp_head(cfg, p2, x, Mode::kInfer, nullptr);
  CHECK(y[0] == doctest::Approx(b1 + b2 + 0.5).epsilon(1e-12));
  CHECK(y[1] == doctest::Approx(b1 - b2).epsilon(1e-12));
}

TEST_CASE("model forward") {
  Rng rng(23);
  SUBCASE("deterministic") {
    auto cfg = toy_network_config(Variant::kUnifiedAdaptive);
    auto world = make_world(cfg, 2, 3, rng);
    auto p1 = init_network<double>(cfg, 4);
    auto p2 = init_network<double>(cfg, 4);
    const auto a = model_forward(cfg, p1, world.scenes, world.pixels, Mode::kTrain, nullptr);
    const auto b = model_forward(cfg, p2, world.scenes, world.pixels, Mode::kTrain, nullptr);
    CHECK(a.logits == b.logits);
    CHECK(a.logits.shape() == Shape{14, 3});
    for (double s : a.bandwidth.storage()) CHECK(s > 0.0);
  }
  SUBCASE("a single observation gives constant ground feature channels") {
    auto cfg = toy_network_config(Variant::kUnifiedUniform);
    cfg.n_nearest = 1;
    auto world = make_world(cfg, 1, 1, rng);
    auto params = init_network<double>(cfg, 4);
    ModelCache<double> cache;
    model_forward(cfg, params, world.scenes, world.pixels, Mode::kTrain, &cache);
    const auto& g = cache.ground_maps;
    // widen the kernel so that every pixel sees the observation
    params.get("kernel.raw").value.fill(40.0);
    model_forward(cfg, params, world.scenes, world.pixels, Mode::kTrain, &cache);
    for (int p = 0; p < 256; ++p)
      for (int k = 0; k < cfg.ground_dim; ++k)
        CHECK(std::abs(cache.ground_maps[p * 3 + k] - cache.ground_maps[k]) < 1e-9);
    CHECK(g.shape() == Shape{1, 16, 16, 3});
  }
  SUBCASE("random variant has no forward pass; its prior drives predictions") {
    auto cfg = toy_network_config(Variant::kRandom);
    ModelParams<double> params;
    auto world = make_world(cfg, 1, 2, rng);
    CHECK_THROWS_AS(model_forward(cfg, params, world.scenes, world.pixels, Mode::kTrain, nullptr),
                    ConfigError);
    const std::vector<double> prior{0.7, 0.2, 0.1};
    const auto logits = prior_logits(prior, 3);
    CHECK(logits(1, 0) == doctest::Approx(std::log(0.7)));
    Rng r(1);
    const auto labels = sample_from_prior(prior, 20000, r);
    double zeros = 0;
    for (int l : labels) zeros += l == 0;
    CHECK(zeros / 20000 == doctest::Approx(0.7).epsilon(0.03));
  }
}

TEST_CASE("end-to-end gradients on the toy model") {
  std::ostringstream log;
  const auto results = run_gradient_suite(3, 1e-4, "", &log);
  for (const auto& r : results) CHECK_MESSAGE(r.failures == 0, r.name << "\n" << r.first_failure);
  MESSAGE(log.str());
}
