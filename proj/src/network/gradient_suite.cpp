#include "geofuse/gradient_suite.hpp"

#include <algorithm>
#include <sstream>

#include "geofuse/error.hpp"

namespace geofuse {

namespace {

constexpr std::size_t kMaxProbes = 12;

using TensorD = Tensor<double>;

GradCheckInput probe(const std::string& name, TensorD& value, TensorD analytic, Rng& rng) {
  return {name, &value, std::move(analytic), sample_indices(value.size(), kMaxProbes, rng)};
}

/// Every parameter of `params` as a probed input; analytic gradients are
/// taken from the accumulated .grad fields.
std::vector<GradCheckInput> param_inputs(ModelParams<double>& params, Rng& rng) {
  std::vector<GradCheckInput> out;
  for (auto& [name, p] : params.all()) out.push_back(probe(name, p.value, p.grad, rng));
  return out;
}

std::vector<GroundObservation> toy_observations(int n, int cutout_dim, GeoPoint origin,
                                                double extent, Rng& rng) {
  std::vector<GroundObservation> obs(n);
  for (int i = 0; i < n; ++i) {
    obs[i].id = i;
    obs[i].location = {origin.x + rng.uniform(0.0, extent), origin.y + rng.uniform(0.0, extent)};
    for (auto& c : obs[i].cutouts) {
      c.resize(cutout_dim);
      for (auto& v : c) v = static_cast<float>(rng.normal());
    }
  }
  return obs;
}

PixelGrid toy_grid(int size, double pixel, GeoPoint origin) {
  PixelGrid g;
  g.height = size;
  g.width = size;
  g.transform.a = {origin.x, pixel, 0.0, origin.y, 0.0, pixel};
  return g;
}

// ---- op cases -------------------------------------------------------------

GradCheckReport check_conv2d(std::uint64_t seed, double tol) {
  Rng rng(seed);
  const int stride = 1 + static_cast<int>(seed % 2);
  auto x = random_tensor({2, 5, 5, 2}, rng);
  auto w = random_tensor({3, 3, 2, 3}, rng);
  auto b = random_tensor({3}, rng);
  const auto cot = random_tensor(conv2d(x, w, b, stride).shape(), rng);
  auto g = conv2d_backward(x, w, true, stride, cot);
  return grad_check([&] { return dot(conv2d(x, w, b, stride), cot); },
                    {{"x", &x, g.dx, {}}, {"w", &w, g.dw, {}}, {"b", &b, g.db, {}}}, tol);
}

GradCheckReport check_conv_transpose2d(std::uint64_t seed, double tol) {
  Rng rng(seed);
  auto x = random_tensor({2, 3, 3, 2}, rng);
  auto w = random_tensor({3, 3, 2, 3}, rng);
  auto b = random_tensor({3}, rng);
  const auto cot = random_tensor({2, 6, 6, 3}, rng);
  auto g = conv_transpose2d_backward(x, w, true, 2, cot);
  return grad_check([&] { return dot(conv_transpose2d(x, w, b, 2), cot); },
                    {{"x", &x, g.dx, {}}, {"w", &w, g.dw, {}}, {"b", &b, g.db, {}}}, tol);
}

GradCheckReport check_avg_pool2d(std::uint64_t seed, double tol) {
  Rng rng(seed);
  auto x = random_tensor({1, 8, 8, 2}, rng);
  const auto cot = random_tensor(avg_pool2d(x, 3, 2, 1).shape(), rng);
  auto dx = avg_pool2d_backward(x.shape(), 3, 2, 1, cot);
  return grad_check([&] { return dot(avg_pool2d(x, 3, 2, 1), cot); }, {{"x", &x, dx, {}}}, tol);
}

GradCheckReport check_max_pool2d(std::uint64_t seed, double tol) {
  Rng rng(seed);
  auto x = random_tensor({2, 4, 6, 2}, rng);
  const auto r = max_pool2d(x);
  const auto cot = random_tensor(r.out.shape(), rng);
  auto dx = max_pool2d_backward(x.shape(), r.argmax, cot);
  return grad_check([&] { return dot(max_pool2d(x).out, cot); }, {{"x", &x, dx, {}}}, tol);
}

GradCheckReport check_bilinear_resize(std::uint64_t seed, double tol) {
  Rng rng(seed);
  auto x = random_tensor({2, 3, 4, 2}, rng);
  const auto cot = random_tensor({2, 7, 5, 2}, rng);
  auto dx = bilinear_resize_backward(x.shape(), cot);
  return grad_check([&] { return dot(bilinear_resize(x, 7, 5), cot); }, {{"x", &x, dx, {}}},
                    tol);
}

GradCheckReport check_leaky_relu(std::uint64_t seed, double tol) {
  Rng rng(seed);
  auto x = random_tensor({24}, rng);
  const auto cot = random_tensor({24}, rng);
  auto dx = leaky_relu_backward(x, cot);
  return grad_check([&] { return dot(leaky_relu(x), cot); }, {{"x", &x, dx, {}}}, tol);
}

GradCheckReport check_softplus(std::uint64_t seed, double tol) {
  Rng rng(seed);
  auto x = random_tensor({24}, rng, 4.0);
  const auto cot = random_tensor({24}, rng);
  auto dx = softplus_backward(x, cot);
  return grad_check([&] { return dot(softplus(x), cot); }, {{"x", &x, dx, {}}}, tol);
}

GradCheckReport check_batch_norm(std::uint64_t seed, double tol) {
  Rng rng(seed);
  auto x = random_tensor({2, 3, 3, 4}, rng, 2.0);
  auto gamma = random_tensor({4}, rng);
  auto beta = random_tensor({4}, rng);
  TensorD mean({4}), var({4}, 1.0);
  const auto cot = random_tensor(x.shape(), rng);
  BatchNormCache<double> cache;
  batch_norm(x, gamma, beta, mean, var, Mode::kTrain, &cache);
  auto g = batch_norm_backward(cache, gamma, cot);
  return grad_check(
      [&] { return dot(batch_norm(x, gamma, beta, mean, var, Mode::kTrain), cot); },
      {{"x", &x, g.dx, {}}, {"gamma", &gamma, g.dgamma, {}}, {"beta", &beta, g.dbeta, {}}}, tol);
}

GradCheckReport check_linear(std::uint64_t seed, double tol) {
  Rng rng(seed);
  auto x = random_tensor({5, 4}, rng);
  auto w = random_tensor({4, 3}, rng);
  auto b = random_tensor({3}, rng);
  const auto cot = random_tensor({5, 3}, rng);
  auto g = linear_backward(x, w, true, cot);
  return grad_check([&] { return dot(linear(x, w, b), cot); },
                    {{"x", &x, g.dx, {}}, {"w", &w, g.dw, {}}, {"b", &b, g.db, {}}}, tol);
}

GradCheckReport check_concat(std::uint64_t seed, double tol) {
  Rng rng(seed);
  auto a = random_tensor({2, 3, 3, 2}, rng);
  auto b = random_tensor({2, 3, 3, 3}, rng);
  const auto cot = random_tensor({2, 3, 3, 5}, rng);
  auto parts = split_channels(cot, {2, 3});
  return grad_check([&] { return dot(concat_channels<double>({&a, &b}), cot); },
                    {{"a", &a, parts[0], {}}, {"b", &b, parts[1], {}}}, tol);
}

GradCheckReport check_cross_entropy(std::uint64_t seed, double tol) {
  Rng rng(seed);
  auto z = random_tensor({6, 4}, rng, 2.0);
  std::vector<int> labels(6);
  for (auto& l : labels) l = static_cast<int>(rng.below(4));
  labels[2] = 3;
  const std::set<int> ignore{3};
  if (std::all_of(labels.begin(), labels.end(), [](int l) { return l == 3; })) labels[0] = 0;
  auto r = cross_entropy_ignore(z, labels, ignore);
  return grad_check([&] { return cross_entropy_ignore(z, labels, ignore).loss; },
                    {{"logits", &z, r.dlogits, {}}}, tol);
}

GradCheckReport check_kernel_field(std::uint64_t seed, double tol, bool adaptive) {
  Rng rng(seed);
  const auto grid = toy_grid(5, 0.5, {0.0, 0.0});
  const int n = 4, m = 3;
  std::vector<GeoPoint> loc(n);
  for (auto& l : loc) l = {rng.uniform(0.0, 2.5), rng.uniform(0.0, 2.5)};
  auto f = random_tensor({n, m}, rng);
  auto raw = adaptive ? random_tensor({5, 5, 2}, rng, 0.5) : random_tensor({2}, rng, 0.5);
  const auto ci = random_tensor({5, 5, m}, rng);
  const auto cd = random_tensor({5, 5, 1}, rng);
  auto field = [&] {
    return adaptive ? BandwidthField<double>::adaptive(raw)
                    : BandwidthField<double>::uniform(raw[0], raw[1]);
  };
  auto g = kernel_field_backward(f, loc, grid, field(), ci, cd);
  return grad_check(
      [&] {
        const auto bw = field();
        return dot(interpolate(f, loc, grid, bw), ci) +
               dot(density(std::span<const GeoPoint>(loc), grid, bw), cd);
      },
      {{"features", &f, g.d_features, {}}, {"raw", &raw, g.d_raw, {}}}, tol);
}

GradCheckReport check_ground_map(std::uint64_t seed, double tol) {
  Rng rng(seed);
  ModelParams<double> params;
  PanoramaEncoderDims dims{3, 2, 2};
  PanoramaEncoder<double>::init_params(params, dims, rng);
  const auto grid = toy_grid(4, 0.5, {0.0, 0.0});
  auto obs = toy_observations(3, 3, {0.0, 0.0}, 2.0, rng);
  std::vector<const GroundObservation*> ptrs;
  for (const auto& o : obs) ptrs.push_back(&o);
  const std::vector<int> shifts{0, 1, 3};
  auto raw = random_tensor({2}, rng, 0.5);
  const auto cot = random_tensor({4, 4, 3}, rng);
  GroundMapCache<double> cache;
  build_ground_map(params, grid, ptrs, shifts, BandwidthField<double>::uniform(raw[0], raw[1]),
                   &cache);
  auto d_raw = build_ground_map_backward(params, cache, cot);
  auto inputs = param_inputs(params, rng);
  inputs.push_back({"kernel.raw", &raw, d_raw, {}});
  return grad_check(
      [&] {
        const auto bw = BandwidthField<double>::uniform(raw[0], raw[1]);
        return dot(build_ground_map(params, grid, ptrs, shifts, bw, nullptr).combined, cot);
      },
      inputs, tol);
}

GradCheckReport check_hypercolumn(std::uint64_t seed, double tol) {
  Rng rng(seed);
  auto a = random_tensor({2, 2, 2, 3}, rng);
  auto b = random_tensor({2, 4, 4, 2}, rng);
  auto c = random_tensor({2, 8, 8, 1}, rng);
  std::vector<std::vector<int>> pixels(2);
  for (auto& p : pixels)
    for (int i = 0; i < 5; ++i) p.push_back(static_cast<int>(rng.below(64)));
  const auto cot = random_tensor({10, 6}, rng);
  auto g = extract_hypercolumn_backward<double>({a.shape(), b.shape(), c.shape()}, pixels, 8, 8,
                                                cot);
  return grad_check(
      [&] { return dot(extract_hypercolumn<double>({&a, &b, &c}, pixels, 8, 8), cot); },
      {{"a", &a, g[0], {}}, {"b", &b, g[1], {}}, {"c", &c, g[2], {}}}, tol);
}

GradCheckReport check_mlp_head(std::uint64_t seed, double tol) {
  Rng rng(seed);
  auto cfg = toy_network_config(Variant::kRemote);
  auto params = init_network<double>(cfg, seed);
  params.get("mlp.out.w").value = random_tensor(params.get("mlp.out.w").value.shape(), rng);
  const int d = hypercolumn_length(cfg);
  auto h = random_tensor({8, d}, rng);
  const auto cot = random_tensor({8, cfg.num_classes}, rng);
  MlpCache<double> cache;
  mlp_head(cfg, params, h, Mode::kTrain, &cache);
  params.zero_grad();
  auto dh = mlp_head_backward(cfg, params, cache, cot);
  std::vector<GradCheckInput> inputs{probe("h", h, dh, rng)};
  for (const auto& name : {"mlp.fc1.w", "mlp.fc1.bn.gamma", "mlp.fc1.bn.beta", "mlp.fc2.w",
                           "mlp.fc2.bn.gamma", "mlp.fc2.bn.beta", "mlp.out.w", "mlp.out.b"}) {
    auto& p = params.get(name);
    inputs.push_back(probe(name, p.value, p.grad, rng));
  }
  return grad_check([&] { return dot(mlp_head(cfg, params, h, Mode::kTrain, nullptr), cot); },
                    inputs, tol);
}

GradCheckReport check_adaptive_head(std::uint64_t seed, double tol) {
  Rng rng(seed);
  auto cfg = toy_network_config(Variant::kUnifiedAdaptive);
  auto params = init_network<double>(cfg, seed);
  params.get("head.up3.w").value = random_tensor(params.get("head.up3.w").value.shape(), rng);
  auto trunk = random_tensor({2, 2, 2, cfg.channels[2]}, rng);
  const auto cot = random_tensor({2, 16, 16, 2}, rng);
  AdaptiveHeadCache<double> cache;
  adaptive_head(cfg, params, trunk, &cache);
  params.zero_grad();
  auto dt = adaptive_head_backward(cfg, params, cache, cot);
  std::vector<GradCheckInput> inputs{probe("trunk", trunk, dt, rng)};
  for (int i = 1; i <= 3; ++i) {
    for (const char* s : {".w", ".b"}) {
      const std::string name = "head.up" + std::to_string(i) + s;
      auto& p = params.get(name);
      inputs.push_back(probe(name, p.value, p.grad, rng));
    }
  }
  return grad_check(
      [&] { return dot(adaptive_head<double>(cfg, params, trunk, nullptr), cot); }, inputs, tol);
}

GradCheckReport check_end_to_end(Variant v, std::uint64_t seed, double tol) {
  Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(v)).next_u64());
  const auto cfg = toy_network_config(v);
  auto params = init_network<double>(cfg, seed);
  // Undo the small output-layer init so every group receives a gradient of
  // ordinary magnitude.
  for (const char* name : {"mlp.out.w", "head.up3.w"}) {
    if (params.contains(name)) {
      auto& w = params.get(name).value;
      w = random_tensor(w.shape(), rng, 0.5);
    }
  }
  const int batch = 2, hw = cfg.input_size;
  const double pixel = 0.125;
  std::vector<std::vector<GroundObservation>> obs(batch);
  std::vector<Scene<double>> scenes(batch);
  std::vector<std::vector<int>> pixels(batch);
  std::vector<int> labels;
  for (int b = 0; b < batch; ++b) {
    const GeoPoint origin{b * hw * pixel, 0.0};
    obs[b] = toy_observations(cfg.n_nearest, cfg.cutout_dim, origin, hw * pixel, rng);
    scenes[b].overhead = random_tensor({hw, hw, 3}, rng);
    scenes[b].grid = toy_grid(hw, pixel, origin);
    for (const auto& o : obs[b]) scenes[b].observations.push_back(&o);
    scenes[b].shifts = {b, 2 * b + 1};
    for (int i = 0; i < 5; ++i) {
      pixels[b].push_back(static_cast<int>(rng.below(hw * hw)));
      labels.push_back(static_cast<int>(rng.below(cfg.num_classes)));
    }
  }
  auto loss = [&] {
    const auto out = model_forward(cfg, params, scenes, pixels, Mode::kTrain, nullptr);
    return cross_entropy_ignore(out.logits, labels, {}).loss;
  };
  ModelCache<double> cache;
  const auto out = model_forward(cfg, params, scenes, pixels, Mode::kTrain, &cache);
  const auto ce = cross_entropy_ignore(out.logits, labels, {});
  params.zero_grad();
  model_backward(cfg, params, cache, ce.dlogits);
  return grad_check(loss, param_inputs(params, rng), tol);
}

}  // namespace

NetworkConfig toy_network_config(Variant v) {
  NetworkConfig c;
  c.variant = v;
  c.input_size = 16;
  c.channels = {2, 3, 3, 4, 4};
  c.num_classes = 3;
  c.ground_dim = 2;
  c.cutout_dim = 3;
  c.ground_enc_dim = 2;
  c.n_nearest = 2;
  c.mlp_hidden = {5, 4};
  c.head_dims = {3, 2, 2};
  return c;
}

std::vector<GradSuiteCase> gradient_suite() {
  std::vector<GradSuiteCase> cases{
      {"conv2d", check_conv2d},
      {"conv_transpose2d", check_conv_transpose2d},
      {"avg_pool2d", check_avg_pool2d},
      {"max_pool2d", check_max_pool2d},
      {"bilinear_resize", check_bilinear_resize},
      {"leaky_relu", check_leaky_relu},
      {"softplus", check_softplus},
      {"batch_norm", check_batch_norm},
      {"linear", check_linear},
      {"concat_channels", check_concat},
      {"cross_entropy", check_cross_entropy},
      {"kernel_field_uniform", [](std::uint64_t s, double t) { return check_kernel_field(s, t, false); }},
      {"kernel_field_adaptive", [](std::uint64_t s, double t) { return check_kernel_field(s, t, true); }},
      {"ground_map", check_ground_map},
      {"hypercolumn", check_hypercolumn},
      {"mlp_head", check_mlp_head},
      {"adaptive_head", check_adaptive_head},
  };
  for (Variant v : all_variants()) {
    if (v == Variant::kRandom) continue;
    cases.push_back({"model_" + variant_name(v),
                     [v](std::uint64_t s, double t) { return check_end_to_end(v, s, t); }});
  }
  return cases;
}

std::vector<GradSuiteResult> run_gradient_suite(int seeds, double tolerance,
                                                const std::string& filter, std::ostream* log) {
  std::vector<GradSuiteResult> results;
  for (const auto& c : gradient_suite()) {
    if (!filter.empty() && c.name.find(filter) == std::string::npos) continue;
    GradSuiteResult r;
    r.name = c.name;
    for (int s = 0; s < seeds; ++s) {
      const auto report = c.run(static_cast<std::uint64_t>(s), tolerance);
      ++r.seeds;
      r.worst = std::max(r.worst, report.max_rel_error());
      if (!report.passed) {
        if (r.failures == 0) r.first_failure = "seed " + std::to_string(s) + "\n" + report.summary();
        ++r.failures;
      }
    }
    if (log) {
      *log << (r.failures == 0 ? "ok   " : "FAIL ") << r.name << " seeds=" << r.seeds
           << " worst_rel=" << r.worst << "\n";
      if (r.failures) *log << r.first_failure;
    }
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace geofuse
