#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "geofuse/parallel.hpp"
#include "geofuse/synth_world.hpp"
#include "support/oracles.hpp"

using namespace geofuse;

namespace {

WorldSpec small_spec(std::uint64_t seed) {
  WorldSpec s;
  s.seed = seed;
  s.tiles_x = 4;
  s.tiles_y = 3;
  s.holdout_columns = 1;
  s.test_fraction = 0.25;
  return s;
}

void require_same(const Dataset& a, const Dataset& b) {
  REQUIRE(a.tiles.size() == b.tiles.size());
  for (std::size_t i = 0; i < a.tiles.size(); ++i) {
    CHECK(a.tiles[i].overhead.storage() == b.tiles[i].overhead.storage());
    CHECK(a.tiles[i].split == b.tiles[i].split);
    for (const auto& [task, raster] : a.tiles[i].labels) {
      CHECK(raster.storage() == b.tiles[i].labels.at(task).storage());
    }
  }
  REQUIRE(a.observations.size() == b.observations.size());
  for (std::size_t i = 0; i < a.observations.size(); ++i) {
    CHECK(a.observations[i].id == b.observations[i].id);
    CHECK(a.observations[i].location.x == b.observations[i].location.x);
    CHECK(a.observations[i].location.y == b.observations[i].location.y);
    CHECK(a.observations[i].cutouts == b.observations[i].cutouts);
  }
}

GeoTransform unit_transform() {
  GeoTransform t;
  t.a = {0.0, 1.0, 0.0, 0.0, 0.0, 1.0};
  return t;
}

Parcel rect_parcel(int id, double c0, double r0, double c1, double r1, std::vector<int> classes) {
  Parcel p;
  p.id = id;
  p.polygon = {{c0, r0}, {c1, r0}, {c1, r1}, {c0, r1}};
  p.classes = std::move(classes);
  return p;
}

// One-tile fixture for sample_ground_observations on a hand-built raster.
struct Fixture {
  WorldSpec spec;
  std::vector<Parcel> parcels;
  std::vector<Tile> tiles;
  Tensor<int> raster;
};

Fixture fixture(int size) {
  Fixture f;
  f.spec.tiles_x = f.spec.tiles_y = 1;
  f.spec.tile_size = size;
  f.spec.pixel_size = 1.0;
  f.spec.observation_density = 6.0;
  f.spec.density_contrast = 1.0;
  f.spec.cutout_noise = 0.0;
  Tile t;
  t.transform = unit_transform();
  f.tiles.push_back(t);
  f.raster = Tensor<int>({size, size}, 0);
  return f;
}

std::vector<float> embedding_of(const CutoutEmbeddings& e, const std::vector<int>& classes) {
  std::vector<float> v(e.background.size(), 0.0f);
  for (std::size_t k = 0; k < classes.size(); ++k) {
    for (std::size_t j = 0; j < v.size(); ++j) v[j] += e.classes[k][classes[k]][j];
  }
  return v;
}

// Multinomial logistic probe on quadratic color features of parcel pixels;
// returns held-out accuracy.
double color_probe_accuracy(const GeneratedWorld& w) {
  std::vector<std::array<double, 10>> x;
  std::vector<int> y;
  const int k = static_cast<int>(w.dataset.spec.land_use_prior.size());
  for (const Tile& tile : w.dataset.tiles) {
    const auto& labels = tile.labels.at("land_use");
    for (int r = 0; r < labels.dim(0); r += 2) {
      for (int c = 0; c < labels.dim(1); c += 2) {
        const int l = labels(r, c);
        if (l >= k) continue;
        const double R = tile.overhead(r, c, 0), G = tile.overhead(r, c, 1),
                     B = tile.overhead(r, c, 2);
        x.push_back({R, G, B, R * R, G * G, B * B, R * G, R * B, G * B, 1.0});
        y.push_back(l);
      }
    }
  }
  const std::size_t n_train = x.size() * 2 / 3;
  std::vector<std::array<double, 10>> wt(k, std::array<double, 10>{});
  std::vector<std::array<double, 10>> m(k, std::array<double, 10>{}), v(k, std::array<double, 10>{});
  const double lr = 0.05;
  for (int it = 1; it <= 400; ++it) {
    std::vector<std::array<double, 10>> g(k, std::array<double, 10>{});
    for (std::size_t i = 0; i < n_train; ++i) {
      std::vector<double> z(k);
      double mx = -1e300;
      for (int c = 0; c < k; ++c) {
        z[c] = 0.0;
        for (int j = 0; j < 10; ++j) z[c] += wt[c][j] * x[i][j];
        mx = std::max(mx, z[c]);
      }
      double s = 0.0;
      for (auto& zc : z) s += (zc = std::exp(zc - mx));
      for (int c = 0; c < k; ++c) {
        const double d = z[c] / s - (y[i] == c ? 1.0 : 0.0);
        for (int j = 0; j < 10; ++j) g[c][j] += d * x[i][j] / n_train;
      }
    }
    for (int c = 0; c < k; ++c) {
      for (int j = 0; j < 10; ++j) {
        m[c][j] = 0.9 * m[c][j] + 0.1 * g[c][j];
        v[c][j] = 0.999 * v[c][j] + 0.001 * g[c][j] * g[c][j];
        const double mh = m[c][j] / (1 - std::pow(0.9, it));
        const double vh = v[c][j] / (1 - std::pow(0.999, it));
        wt[c][j] -= lr * mh / (std::sqrt(vh) + 1e-8);
      }
    }
  }
  int correct = 0;
  for (std::size_t i = n_train; i < x.size(); ++i) {
    int best = 0;
    double best_z = -1e300;
    for (int c = 0; c < k; ++c) {
      double z = 0.0;
      for (int j = 0; j < 10; ++j) z += wt[c][j] * x[i][j];
      if (z > best_z) best_z = z, best = c;
    }
    correct += best == y[i];
  }
  return static_cast<double>(correct) / static_cast<double>(x.size() - n_train);
}

}  // namespace

TEST_CASE("generate_world is deterministic in the spec and independent of thread count") {
  const WorldSpec spec = small_spec(11);
  const auto a = generate_world(spec);
  set_num_threads(3);
  const auto b = generate_world(spec);
  set_num_threads(1);
  require_same(a.dataset, b.dataset);

  WorldSpec other = spec;
  other.seed = 12;
  const auto c = generate_world(other);
  CHECK(c.dataset.tiles[0].overhead.storage() != a.dataset.tiles[0].overhead.storage());
}

TEST_CASE("labels use valid ids and unknown stays below 20 percent") {
  const auto w = generate_world(small_spec(3));
  for (const auto& task : w.dataset.tasks) {
    long unknown = 0, total = 0;
    for (const auto& tile : w.dataset.tiles) {
      for (int v : tile.labels.at(task.name).storage()) {
        CHECK(v >= 0);
        CHECK(v <= task.unknown());
        unknown += v == task.unknown();
        ++total;
      }
      CHECK(tile.transform.invertible());
    }
    CHECK(static_cast<double>(unknown) / total <= 0.2);
  }
  CHECK(w.dataset.task("land_use").num_outputs() == 6);
  CHECK(w.dataset.task("age").num_outputs() == 5);
}

TEST_CASE("splits are disjoint and the held-out region shares no parcels with training") {
  const WorldSpec spec = small_spec(5);
  const auto w = generate_world(spec);
  std::set<int> seen;
  for (const auto& tile : w.dataset.tiles) {
    CHECK((tile.split == "train" || tile.split == "test" || tile.split == "holdout"));
    CHECK(seen.insert(tile.id).second);
    CHECK((tile.split == "holdout") == (tile.tx >= spec.tiles_x - spec.holdout_columns));
  }
  CHECK(!w.dataset.split_tiles("train").empty());
  CHECK(!w.dataset.split_tiles("test").empty());
  // Every pixel of a parcel lies in the parcel's own tile.
  const int t = spec.tile_size;
  for (int r = 0; r < w.parcel_raster.dim(0); ++r) {
    for (int c = 0; c < w.parcel_raster.dim(1); ++c) {
      const int id = w.parcel_raster(r, c);
      if (id < 0) continue;
      CHECK(w.parcels[id].tile_id == (r / t) * spec.tiles_x + c / t);
    }
  }
}

TEST_CASE("tile labels agree with the parcel raster") {
  const auto w = generate_world(small_spec(8));
  const int t = w.dataset.spec.tile_size;
  const auto& lu = w.dataset.task("land_use");
  for (const auto& tile : w.dataset.tiles) {
    const auto& labels = tile.labels.at("land_use");
    for (int r = 0; r < t; ++r) {
      for (int c = 0; c < t; ++c) {
        const int id = w.parcel_raster(tile.ty * t + r, tile.tx * t + c);
        const int expect = id < 0                   ? lu.background()
                           : w.parcels[id].unknown ? lu.unknown()
                                                   : w.parcels[id].classes[0];
        CHECK(labels(r, c) == expect);
      }
    }
  }
}

TEST_CASE("infeasible specs are rejected") {
  WorldSpec s = small_spec(1);
  s.hidden_attribute_ratio = 1.5;
  CHECK_THROWS_AS(generate_world(s), ConfigError);
  s = small_spec(1);
  s.observation_density = 0.0;
  CHECK_THROWS_AS(generate_world(s), ConfigError);
  s = small_spec(1);
  s.tile_size = 12;  // urban blocks cannot hold 2 x 2 parcels
  s.urban_fraction = 1.0;
  CHECK_THROWS_AS(generate_world(s), ConfigError);
}

TEST_CASE("rasterize_labels: whole-tile parcel, half split and polygon oracle") {
  const GeoTransform tr = unit_transform();
  {
    std::vector<Parcel> ps{rect_parcel(0, 0, 0, 8, 8, {2})};
    const auto r = rasterize_labels(ps, tr, 8, 0, 5, 6);
    for (int v : r.storage()) CHECK(v == 2);
  }
  {
    std::vector<Parcel> ps{rect_parcel(0, 0, 0, 4, 8, {0}), rect_parcel(1, 4, 0, 8, 8, {1})};
    const auto r = rasterize_labels(ps, tr, 8, 0, 5, 6);
    for (int row = 0; row < 8; ++row) {
      for (int col = 0; col < 8; ++col) CHECK(r(row, col) == (col < 4 ? 0 : 1));
    }
    ps[1].unknown = true;
    const auto u = rasterize_labels(ps, tr, 8, 0, 5, 6);
    CHECK(u(0, 7) == 6);
    CHECK(u(0, 0) == 0);
  }
  Rng rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    // Star-shaped (hence simple) random polygons.
    std::vector<Parcel> ps;
    for (int k = 0; k < 3; ++k) {
      const int nv = 3 + static_cast<int>(rng.below(6));
      std::vector<double> angles(nv);
      for (auto& a : angles) a = rng.uniform(0.0, 2 * M_PI);
      std::sort(angles.begin(), angles.end());
      const double cx = rng.uniform(2, 14), cy = rng.uniform(2, 14);
      Parcel p;
      p.id = k;
      p.classes = {k};
      for (double a : angles) {
        const double rad = rng.uniform(1.0, 7.0);
        p.polygon.push_back({cx + rad * std::cos(a), cy + rad * std::sin(a)});
      }
      ps.push_back(p);
    }
    const auto r = rasterize_labels(ps, tr, 16, 0, 9, 10);
    for (int row = 0; row < 16; ++row) {
      for (int col = 0; col < 16; ++col) {
        int expect = 9;
        for (const auto& p : ps) {
          if (oracle::inside_winding(p.polygon, {col + 0.5, row + 0.5})) expect = p.classes[0];
        }
        CHECK(r(row, col) == expect);
      }
    }
  }
}

TEST_CASE("observation counts match the tile density over 100 seeds") {
  const double density = 10.0;
  double sum = 0.0, sum_sq = 0.0;
  int n = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    WorldSpec s;
    s.seed = seed;
    s.tiles_x = s.tiles_y = 2;
    s.holdout_columns = 0;
    s.observation_density = density;
    s.density_contrast = 1.0;
    const auto w = generate_world(s);
    for (const auto& tile : w.dataset.tiles) {
      const double c = static_cast<double>(tile.observation_ids.size());
      sum += c;
      sum_sq += c * c;
      ++n;
    }
    for (std::size_t i = 0; i < w.dataset.observations.size(); ++i) {
      const auto& obs = w.dataset.observations[i];
      CHECK(obs.id == static_cast<std::int64_t>(i));
      const int col = static_cast<int>(obs.location.x / s.pixel_size);
      const int row = static_cast<int>(obs.location.y / s.pixel_size);
      CHECK(w.parcel_raster(row, col) == kRoadPixel);
    }
  }
  const double mean = sum / n;
  const double var = sum_sq / n - mean * mean;
  CHECK(std::abs(mean - density) < 4.0 * std::sqrt(density / n));
  CHECK(var > 0.7 * density);
  CHECK(var < 1.3 * density);
}

TEST_CASE("dense districts receive more observations") {
  WorldSpec s;
  s.density_contrast = 4.0;
  CHECK(tile_observation_density(s, District::kUrban) ==
        doctest::Approx(4.0 * tile_observation_density(s, District::kSuburban)));
}

TEST_CASE("an observation surrounded by one parcel sees it in every direction") {
  Fixture f = fixture(9);
  f.raster(4, 4) = kRoadPixel;
  f.parcels.push_back(rect_parcel(0, 0, 0, 9, 9, {1, 2}));
  f.spec.cutout_noise = 0.05;
  const auto obs = sample_ground_observations(f.spec, f.parcels, f.tiles, f.raster);
  REQUIRE(!obs.empty());
  for (const auto& o : obs) {
    for (int d = 1; d < kNumCutouts; ++d) {
      for (std::size_t j = 0; j < o.cutouts[0].size(); ++j) {
        CHECK(std::abs(o.cutouts[d][j] - o.cutouts[0][j]) < 0.5);
      }
    }
  }
}

TEST_CASE("orientation: each block describes the parcel in its direction") {
  Fixture f = fixture(9);
  for (int c = 0; c < 9; ++c) f.raster(4, c) = kRoadPixel;
  for (int r = 5; r < 9; ++r) {
    for (int c = 0; c < 9; ++c) f.raster(r, c) = 1;
  }
  f.parcels.push_back(rect_parcel(0, 0, 0, 9, 4, {0, 0}));
  f.parcels.push_back(rect_parcel(1, 0, 5, 9, 9, {2, 1}));
  const auto emb = cutout_embeddings(f.spec);
  const auto north = embedding_of(emb, {0, 0});
  const auto south = embedding_of(emb, {2, 1});
  REQUIRE(north != south);

  auto obs = sample_ground_observations(f.spec, f.parcels, f.tiles, f.raster);
  REQUIRE(!obs.empty());
  for (auto& o : obs) {
    CHECK(o.cutouts[0] == north);
    CHECK(o.cutouts[2] == south);
    CHECK(o.cutouts[1] == emb.background);
    std::swap(o.cutouts[0], o.cutouts[2]);
    CHECK(o.cutouts[0] == south);
    CHECK(o.cutouts[2] == north);
  }

  f.spec.orientation_signal = false;
  const auto flat = sample_ground_observations(f.spec, f.parcels, f.tiles, f.raster);
  for (const auto& o : flat) {
    for (int d = 1; d < kNumCutouts; ++d) CHECK(o.cutouts[d] == o.cutouts[0]);
  }
}

TEST_CASE("a world without roads cannot host observations") {
  Fixture f = fixture(6);
  f.parcels.push_back(rect_parcel(0, 0, 0, 6, 6, {0, 0}));
  CHECK_THROWS_AS(sample_ground_observations(f.spec, f.parcels, f.tiles, f.raster), ConfigError);
}

TEST_CASE("fully revealed overhead determines parcel interiors exactly") {
  WorldSpec s = small_spec(4);
  s.hidden_attribute_ratio = 0.0;
  const auto w = generate_world(s);
  const int kl = static_cast<int>(s.land_use_prior.size());
  const int ka = static_cast<int>(s.age_prior.size());
  const int t = s.tile_size;
  long total = 0, correct = 0;
  for (const auto& tile : w.dataset.tiles) {
    for (int r = 1; r < t - 1; ++r) {
      for (int c = 1; c < t - 1; ++c) {
        const int id = w.parcel_raster(tile.ty * t + r, tile.tx * t + c);
        if (id < 0) continue;
        bool interior = true;
        for (auto [dr, dc] : {std::pair{-1, 0}, {1, 0}, {0, -1}, {0, 1}}) {
          interior &= w.parcel_raster(tile.ty * t + r + dr, tile.tx * t + c + dc) == id;
        }
        if (!interior) continue;
        // Nearest rendered class color.
        double best = 1e9;
        std::pair<int, int> guess{-1, -1};
        for (int a = 0; a < kl; ++a) {
          for (int b = 0; b < ka; ++b) {
            auto col = land_use_color(a);
            double d = 0.0;
            for (int ch = 0; ch < 3; ++ch) {
              const double e = tile.overhead(r, c, ch) - col[ch] * age_brightness(b);
              d += e * e;
            }
            if (d < best) best = d, guess = {a, b};
          }
        }
        ++total;
        correct += guess.first == w.parcels[id].classes[0] && guess.second == w.parcels[id].classes[1];
      }
    }
  }
  REQUIRE(total > 1000);
  CHECK(correct == total);
  CHECK(overhead_bayes_accuracy(s, 0) == 1.0);
}

TEST_CASE("fully hidden overhead: brute-force Bayes rate equals the class prior") {
  WorldSpec s = small_spec(9);
  s.tiles_x = s.tiles_y = 8;
  s.hidden_attribute_ratio = 1.0;
  s.observation_density = 60.0;
  const auto w = generate_world(s);
  for (int task = 0; task < 2; ++task) {
    const auto& prior = task == 0 ? s.land_use_prior : s.age_prior;
    const int k = static_cast<int>(prior.size());
    // Joint counts of (appearance, class) over parcel pixels; appearance is
    // the parcel's rendered state (hidden, or revealed with its colors).
    std::map<std::pair<int, int>, std::vector<long>> joint;
    std::vector<long> marginal(k, 0);
    long total = 0;
    for (int id : w.parcel_raster.storage()) {
      if (id < 0) continue;
      const Parcel& p = w.parcels[id];
      const std::pair<int, int> appearance =
          p.revealed ? std::pair{p.classes[0], p.classes[1]} : std::pair{-1, -1};
      auto& counts = joint[appearance];
      counts.resize(k, 0);
      ++counts[p.classes[task]];
      ++marginal[p.classes[task]];
      ++total;
    }
    long bayes = 0;
    for (const auto& [a, counts] : joint) bayes += *std::max_element(counts.begin(), counts.end());
    CHECK(joint.size() == 1);
    CHECK(bayes == *std::max_element(marginal.begin(), marginal.end()));
    // Block coherence keeps the marginal at the prior; parcels are
    // correlated within blocks, so the tolerance is loose.
    CHECK(static_cast<double>(bayes) / total == doctest::Approx(overhead_bayes_accuracy(s, task)).epsilon(0.15));
  }
}

TEST_CASE("a color probe loses accuracy as more attributes are hidden") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    std::vector<double> acc;
    for (double ratio : {0.0, 0.5, 1.0}) {
      WorldSpec s = small_spec(seed);
      s.hidden_attribute_ratio = ratio;
      acc.push_back(color_probe_accuracy(generate_world(s)));
    }
    INFO("seed " << seed << " accuracies " << acc[0] << " " << acc[1] << " " << acc[2]);
    CHECK(acc[0] > acc[1]);
    CHECK(acc[1] > acc[2]);
  }
}
