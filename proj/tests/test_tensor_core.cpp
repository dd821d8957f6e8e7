#include <cmath>
#include <numbers>

#include "doctest.h"
#include "geofuse/gradcheck.hpp"
#include "geofuse/ops.hpp"
#include "support/oracles.hpp"

using namespace geofuse;

namespace {

Tensor<double> ramp(const Shape& s) {
  Tensor<double> t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i);
  return t;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("tensor rejects mismatched data and non-positive dims") {
  CHECK_THROWS_AS(Tensor<double>({2, 2}, std::vector<double>(3)), ShapeError);
  CHECK_THROWS_AS(Tensor<double>({2, 0}), ShapeError);
}

TEST_CASE("conv2d: 1x1 identity kernel passes input through") {
  Rng rng(1);
  const auto x = random_tensor({4, 5, 3}, rng);
  Tensor<double> w({1, 1, 3, 3});
  for (int c = 0; c < 3; ++c) w(0, 0, c, c) = 1.0;
  const auto y = conv2d(x, w, Tensor<double>({3}), 1);
  CHECK(y == x);
}

TEST_CASE("conv2d matches a brute-force sliding window") {
  for (int stride : {1, 2}) {
    Rng rng(7 + stride);
    const auto x = random_tensor({5, 5, 1}, rng);
    const auto w = random_tensor({3, 3, 1, 1}, rng);
    const auto b = random_tensor({1}, rng);
    const auto y = conv2d(x, w, b, stride);
    const auto ref = oracle::conv2d(x, w, {b[0]}, stride);
    CHECK(max_abs_diff(y, ref) < 1e-12);
  }
  Rng rng(3);
  const auto x = random_tensor({2, 6, 7, 3}, rng);  // batched, odd width
  const auto w = random_tensor({3, 3, 3, 4}, rng);
  const auto y = conv2d(x, w, Tensor<double>(), 2);
  CHECK(y.shape() == Shape{2, 3, 4, 4});
  for (int b = 0; b < 2; ++b) {
    Tensor<double> img({6, 7, 3});
    std::copy(x.data() + b * 126, x.data() + (b + 1) * 126, img.data());
    const auto ref = oracle::conv2d(img, w, {}, 2);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(y[b * ref.size() + i] - ref[i]) < 1e-12);
  }
}

TEST_CASE("conv2d: fusion-resolution shape 32x32x179 -> 32x32x256") {
  Tensor<float> x({32, 32, 179}, 0.1f);
  Tensor<float> w({3, 3, 179, 256}, 0.01f);
  const auto y = conv2d(x, w, Tensor<float>(), 1);
  CHECK(y.shape() == Shape{32, 32, 256});
}

TEST_CASE("conv2d: channel mismatch is a shape error") {
  Tensor<double> x({4, 4, 2});
  Tensor<double> w({3, 3, 3, 1});
  CHECK_THROWS_AS(conv2d(x, w, Tensor<double>(), 1), ShapeError);
}

TEST_CASE("conv_transpose2d doubles spatial dims") {
  Tensor<float> x({32, 32, 4}, 1.0f);
  Tensor<float> w({3, 3, 4, 6}, 0.1f);
  CHECK(conv_transpose2d(x, w, Tensor<float>(), 2).shape() == Shape{64, 64, 6});

  // Three stages with 32, 16 and 2 output channels take 32x32 to 256x256x2.
  Rng rng(5);
  Tensor<float> h = random_tensor({32, 32, 8}, rng).cast<float>();
  for (int out_c : {32, 16, 2}) {
    Tensor<float> k = random_tensor({3, 3, h.dim(2), out_c}, rng, 0.1).cast<float>();
    h = conv_transpose2d(h, k, Tensor<float>(), 2);
  }
  CHECK(h.shape() == Shape{256, 256, 2});
  CHECK_THROWS_AS(conv_transpose2d(x, Tensor<float>({3, 3, 5, 6}), Tensor<float>(), 2),
                  ShapeError);
}

TEST_CASE("conv_transpose2d is the adjoint of a stride-2 conv2d") {
  Rng rng(11);
  const auto x = random_tensor({4, 4, 3}, rng);
  const auto w = random_tensor({3, 3, 3, 2}, rng);  // 3 -> 2 channels, transposed
  const auto y = conv_transpose2d(x, w, Tensor<double>(), 2);
  CHECK(max_abs_diff(y, oracle::conv_transpose2d(x, w, 2)) < 1e-12);

  // <convT(x), z> == <x, conv2d(z, W^T)> where W^T swaps the channel axes.
  const auto z = random_tensor({8, 8, 2}, rng);
  Tensor<double> wt({3, 3, 2, 3});
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      for (int ci = 0; ci < 3; ++ci)
        for (int co = 0; co < 2; ++co) wt(a, b, co, ci) = w(a, b, ci, co);
  const auto cz = oracle::conv2d(z, wt, {}, 2);
  CHECK(std::abs(dot(y, z) - dot(x, cz)) < 1e-10);
}

TEST_CASE("avg_pool2d") {
  SUBCASE("constant input stays constant without padding") {
    Tensor<double> x({6, 6, 2}, 3.5);
    const auto y = avg_pool2d(x, 3, 1, 0);
    for (double v : y.storage()) CHECK(v == doctest::Approx(3.5).epsilon(1e-15));
  }
  SUBCASE("fusion geometry: 256x256x51 kernel 6 stride 8 pad 1 -> 32x32x51") {
    Tensor<float> x({256, 256, 51}, 1.0f);
    CHECK(avg_pool2d(x, 6, 8, 1).shape() == Shape{32, 32, 51});
  }
  SUBCASE("2x2 block means") {
    const auto x = ramp({4, 4, 1});
    const auto y = avg_pool2d(x, 2, 2, 0);
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 2; ++c) {
        const double mean = (x(2 * r, 2 * c, 0) + x(2 * r, 2 * c + 1, 0) +
                             x(2 * r + 1, 2 * c, 0) + x(2 * r + 1, 2 * c + 1, 0)) / 4.0;
        CHECK(y(r, c, 0) == mean);
      }
  }
  SUBCASE("padding counts toward the divisor") {
    Tensor<double> x({2, 2, 1}, 1.0);
    const auto y = avg_pool2d(x, 2, 2, 1);
    CHECK(y(0, 0, 0) == doctest::Approx(0.25));
  }
  SUBCASE("empty output is a shape error") {
    CHECK_THROWS_AS(avg_pool2d(Tensor<double>({2, 2, 1}), 5, 1, 0), ShapeError);
  }
}

TEST_CASE("max_pool2d") {
  Tensor<double> c({4, 4, 1}, 2.0);
  const auto r = max_pool2d(c);
  for (double v : r.out.storage()) CHECK(v == 2.0);
  // ties route to the first element of each window
  const auto dx = max_pool2d_backward(c.shape(), r.argmax, Tensor<double>({2, 2, 1}, 1.0));
  CHECK(dx(0, 0, 0) == 1.0);
  CHECK(dx(0, 1, 0) == 0.0);
  CHECK(dx(1, 1, 0) == 0.0);
  CHECK(dx(2, 2, 0) == 1.0);

  Rng rng(4);
  const auto x = random_tensor({4, 4, 2}, rng);
  const auto y = max_pool2d(x).out;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      for (int ch = 0; ch < 2; ++ch) {
        const double m = std::max({x(2 * i, 2 * j, ch), x(2 * i, 2 * j + 1, ch),
                                   x(2 * i + 1, 2 * j, ch), x(2 * i + 1, 2 * j + 1, ch)});
        CHECK(y(i, j, ch) == m);
      }
  CHECK_THROWS_AS(max_pool2d(Tensor<double>({3, 4, 1})), ShapeError);
}

TEST_CASE("bilinear_resize") {
  Rng rng(9);
  const auto x = random_tensor({3, 5, 2}, rng);
  CHECK(bilinear_resize(x, 3, 5) == x);

  const Tensor<double> sq({2, 2, 1}, std::vector<double>{0, 1, 2, 3});
  const auto up = bilinear_resize(sq, 4, 4);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      CHECK(up(r, c, 0) >= 0.0);
      CHECK(up(r, c, 0) <= 3.0);
      if (c > 0) CHECK(up(r, c, 0) >= up(r, c - 1, 0));
      if (r > 0) CHECK(up(r, c, 0) >= up(r - 1, c, 0));
    }

  // Half-pixel centers: 2 -> 3 samples source rows {0, 0.5, 1} after clamping.
  const auto y = bilinear_resize(sq, 3, 3);
  const double src[3] = {0.0, 0.5, 1.0};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      const double fy = src[r], fx = src[c];
      const double expect = (1 - fy) * ((1 - fx) * 0 + fx * 1) + fy * ((1 - fx) * 2 + fx * 3);
      CHECK(y(r, c, 0) == doctest::Approx(expect).epsilon(1e-15));
    }
}

TEST_CASE("leaky_relu") {
  const Tensor<double> x({3}, std::vector<double>{0.0, -1.0, 2.0});
  const auto y = leaky_relu(x, 0.2);
  CHECK(y[0] == 0.0);
  CHECK(y[1] == doctest::Approx(-0.2));
  CHECK(y[2] == 2.0);
  const auto v = leaky_relu(Tensor<double>({2}, std::vector<double>{-2.0, 3.0}), 0.2);
  CHECK(v[0] == doctest::Approx(-0.4));
  CHECK(v[1] == 3.0);
}

TEST_CASE("softplus") {
  CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(std::abs(softplus(50.0) - 50.0) < 1e-9);
  CHECK(std::abs(softplus(-50.0) - std::exp(-50.0)) / std::exp(-50.0) < 1e-6);
  double prev = 0.0;
  for (double x = -700.0; x <= 700.0; x += 0.37) {
    const double y = softplus(x);
    CHECK(y > 0.0);
    CHECK(y >= prev);
    prev = y;
  }
  CHECK(softplus(-30.0f) > 0.0f);
}

TEST_CASE("batch_norm") {
  SUBCASE("train mode normalizes per channel") {
    Rng rng(2);
    const auto x = random_tensor({2, 3, 3, 4}, rng, 3.0);
    Tensor<double> g({4}, 1.0), b({4}), mm({4}), mv({4}, 1.0);
    const auto y = batch_norm(x, g, b, mm, mv, Mode::kTrain);
    for (int c = 0; c < 4; ++c) {
      double s = 0, s2 = 0;
      const std::size_t rows = y.size() / 4;
      for (std::size_t r = 0; r < rows; ++r) s += y[r * 4 + c];
      for (std::size_t r = 0; r < rows; ++r) s2 += y[r * 4 + c] * y[r * 4 + c];
      CHECK(std::abs(s / rows) < 1e-5);
      CHECK(std::abs(s2 / rows - 1.0) < 1e-5);
    }
  }
  SUBCASE("moving statistics decay by 0.99") {
    Tensor<double> x({3, 1}, std::vector<double>{1, 2, 3});
    Tensor<double> g({1}, 1.0), b({1}), mm({1}, 5.0), mv({1}, 1.0);
    const auto y = batch_norm(x, g, b, mm, mv, Mode::kTrain);
    CHECK(mm[0] == doctest::Approx(0.99 * 5.0 + 0.01 * 2.0));
    CHECK(mv[0] == doctest::Approx(0.99 * 1.0 + 0.01 * (2.0 / 3.0)));
    CHECK(y[0] == doctest::Approx(-1.2247).epsilon(1e-3));
    CHECK(y[1] == doctest::Approx(0.0));
    CHECK(y[2] == doctest::Approx(1.2247).epsilon(1e-3));
  }
  SUBCASE("infer mode uses moving statistics") {
    Tensor<double> x({2, 1}, std::vector<double>{1, 3});
    Tensor<double> g({1}, 2.0), b({1}, 0.5), mm({1}, 1.0), mv({1}, 4.0);
    const auto y = batch_norm(x, g, b, mm, mv, Mode::kInfer);
    CHECK(y[1] == doctest::Approx(2.0 * (3.0 - 1.0) / std::sqrt(4.0 + 1e-5) + 0.5));
    CHECK(mm[0] == 1.0);
  }
}

TEST_CASE("linear") {
  Rng rng(6);
  const auto x = random_tensor({3, 4}, rng);
  Tensor<double> eye({4, 4});
  for (int i = 0; i < 4; ++i) eye(i, i) = 1.0;
  CHECK(linear(x, eye, Tensor<double>({4})) == x);

  Tensor<float> h({5, 1043}, 0.5f);
  CHECK(linear(h, Tensor<float>({1043, 512}), Tensor<float>({512})).shape() == Shape{5, 512});

  const Tensor<double> a({1, 2}, std::vector<double>{1, 2});
  const Tensor<double> w({2, 2}, std::vector<double>{3, 4, 5, 6});
  const Tensor<double> bias({2}, std::vector<double>{0.5, -1});
  const auto y = linear(a, w, bias);
  CHECK(y[0] == 1 * 3 + 2 * 5 + 0.5);
  CHECK(y[1] == 1 * 4 + 2 * 6 - 1);
  CHECK_THROWS_AS(linear(a, Tensor<double>({3, 2}), bias), ShapeError);
}

TEST_CASE("cross_entropy_ignore") {
  SUBCASE("uniform logits give ln K") {
    const Tensor<double> z({4, 5}, 0.3);
    const auto r = cross_entropy_ignore(z, {0, 1, 2, 4}, {});
    CHECK(r.loss == doctest::Approx(std::log(5.0)).epsilon(1e-14));
  }
  SUBCASE("loss vanishes as the margin grows") {
    double prev = 1e9;
    for (double margin : {1.0, 5.0, 20.0, 50.0}) {
      Tensor<double> z({1, 3});
      z[1] = margin;
      const double l = cross_entropy_ignore(z, {1}, {}).loss;
      CHECK(l < prev);
      prev = l;
    }
    CHECK(prev < 1e-20);
  }
  SUBCASE("P=2 K=2 against the direct formula, ignored pixel gets zero grad") {
    const Tensor<double> z({3, 2}, std::vector<double>{1.0, -0.5, 0.2, 0.7, 4.0, 4.0});
    const auto r = cross_entropy_ignore(z, {0, 1, 9}, {9});
    auto nll = [](double a, double b, int y) {
      const double lse = std::log(std::exp(a) + std::exp(b));
      return lse - (y == 0 ? a : b);
    };
    CHECK(r.loss == doctest::Approx((nll(1.0, -0.5, 0) + nll(0.2, 0.7, 1)) / 2.0).epsilon(1e-14));
    CHECK(r.counted == 2);
    CHECK(r.dlogits(2, 0) == 0.0);
    CHECK(r.dlogits(2, 1) == 0.0);
  }
  SUBCASE("invariant to a per-pixel logit shift") {
    Rng rng(12);
    auto z = random_tensor({6, 4}, rng);
    const std::vector<int> y{0, 3, 2, 1, 1, 0};
    const double base = cross_entropy_ignore(z, y, {}).loss;
    for (int p = 0; p < 6; ++p)
      for (int k = 0; k < 4; ++k) z(p, k) += 10.0 * (p + 1);
    CHECK(std::abs(cross_entropy_ignore(z, y, {}).loss - base) < 1e-9);
  }
  SUBCASE("all pixels ignored") {
    CHECK_THROWS_AS(cross_entropy_ignore(Tensor<double>({2, 3}), {5, 5}, {5}), EmptyBatchError);
  }
}

TEST_CASE("adam_step") {
  SUBCASE("zero gradient and no decay leave parameters unchanged") {
    ModelParams<double> p;
    p.add("w", Tensor<double>({3}, std::vector<double>{1, -2, 3}));
    const auto before = p.get("w").value;
    adam_step(p, AdamConfig{});
    CHECK(p.get("w").value == before);
    CHECK(p.step == 1);
  }
  SUBCASE("first step moves each element by about lr") {
    ModelParams<double> p;
    auto& w = p.add("w", Tensor<double>({4}, 1.0));
    w.grad.fill(0.37);
    AdamConfig cfg;
    cfg.lr = 1e-3;
    adam_step(p, cfg);
    for (double v : p.get("w").value.storage()) CHECK(1.0 - v == doctest::Approx(1e-3).epsilon(1e-6));
  }
  SUBCASE("weight decay is folded into the gradient for decayed params only") {
    ModelParams<double> p;
    p.add("w", Tensor<double>({1}, 2.0));
    p.add("b", Tensor<double>({1}, 2.0), false);
    AdamConfig cfg;
    cfg.weight_decay = 5e-4;
    adam_step(p, cfg);
    CHECK(p.get("w").value[0] < 2.0);
    CHECK(p.get("b").value[0] == 2.0);
  }
  SUBCASE("non-finite gradient aborts and names the parameter") {
    ModelParams<double> p;
    p.add("alpha", Tensor<double>({2}, 1.0));
    auto& bad = p.add("beta", Tensor<double>({2}, 1.0));
    bad.grad[1] = NAN;
    try {
      adam_step(p, AdamConfig{});
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("beta") != std::string::npos);
    }
    CHECK(p.get("alpha").value[0] == 1.0);
    CHECK(p.step == 0);
  }
  SUBCASE("bit-reproducible") {
    auto run = [] {
      ModelParams<float> p;
      Rng rng(99);
      auto& w = p.add("w", random_tensor({16}, rng).cast<float>());
      for (int s = 0; s < 5; ++s) {
        for (auto& g : w.grad.storage()) g = static_cast<float>(rng.normal());
        adam_step(p, AdamConfig{1e-3, 0.9, 0.999, 1e-8, 5e-4});
      }
      return p.get("w").value;
    };
    CHECK(run() == run());
  }
  SUBCASE("learning-rate schedule halves every 7500 mini-batches") {
    CHECK(step_decay_lr(1e-3, 0, 7500) == 1e-3);
    CHECK(step_decay_lr(1e-3, 7499, 7500) == 1e-3);
    CHECK(step_decay_lr(1e-3, 7500, 7500) == doctest::Approx(5e-4));
    CHECK(step_decay_lr(1e-3, 15000, 7500) == doctest::Approx(2.5e-4));
  }
}

TEST_CASE("grad_check: softplus at zero has slope one half") {
  Tensor<double> x({1}, 0.0);
  Tensor<double> analytic = softplus_backward(x, Tensor<double>({1}, 1.0));
  CHECK(analytic[0] == doctest::Approx(0.5).epsilon(1e-15));
  auto report = grad_check([&] { return softplus(x)[0]; }, {{"x", &x, analytic, {}}}, 1e-8);
  CHECK(report.passed);
}

TEST_CASE("grad_check: a gradient off by 1e-3 relative is rejected") {
  Rng rng(22);
  auto x = random_tensor({4, 3}, rng);
  const auto cot = random_tensor({4, 3}, rng);
  auto analytic = leaky_relu_backward(x, cot);
  analytic[5] *= 1.001;
  auto report = grad_check([&] { return dot(leaky_relu(x), cot); }, {{"x", &x, analytic, {}}}, 1e-4);
  CHECK_FALSE(report.passed);
}

TEST_CASE("grad_check: a step straddling a kink is refined, not failed") {
  Tensor<double> x({3}, std::vector<double>{3e-6, -7e-6, 0.5});
  const Tensor<double> cot({3}, 1.0);
  const auto analytic = leaky_relu_backward(x, cot);
  auto report = grad_check([&] { return dot(leaky_relu(x), cot); }, {{"x", &x, analytic, {}}}, 1e-4);
  CHECK_MESSAGE(report.passed, report.summary());
  CHECK(report.entries[0].refined >= 2);

  // A wrong slope next to the kink still fails after refinement.
  auto wrong = analytic;
  wrong[0] = 0.5;
  CHECK_FALSE(grad_check([&] { return dot(leaky_relu(x), cot); }, {{"x", &x, wrong, {}}}, 1e-4).passed);
}

TEST_CASE("grad_check: conv2d on a random 5x5x2 input") {
  Rng rng(21);
  auto x = random_tensor({5, 5, 2}, rng);
  auto w = random_tensor({3, 3, 2, 3}, rng);
  auto b = random_tensor({3}, rng);
  const auto cot = random_tensor({5, 5, 3}, rng);
  const auto g = conv2d_backward(x, w, true, 1, cot);
  auto report = grad_check([&] { return dot(conv2d(x, w, b, 1), cot); },
                           {{"x", &x, g.dx, {}}, {"w", &w, g.dw, {}}, {"b", &b, g.db, {}}}, 1e-4);
  CHECK_MESSAGE(report.passed, report.summary());
}
