#include "geofuse/synth_world.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "geofuse/error.hpp"
#include "geofuse/parallel.hpp"
#include "geofuse/rng.hpp"

namespace geofuse {

namespace {

constexpr std::uint64_t kDistrictKey = 0xD15771C7ULL;
constexpr std::uint64_t kObservationKey = 0x0B5E7A7104ULL;
constexpr std::uint64_t kEmbeddingKey = 0xE3BEDD1ULL;
constexpr std::uint64_t kSplitKey = 0x5B117ULL;
constexpr int kRoadWidth = 2;
constexpr int kLawnMargin = 2;

struct Rect {
  int r0, r1, c0, c1;  // half-open, tile-local pixels
};

void check_prior(const std::vector<double>& prior, const char* name) {
  if (prior.size() < 2) throw ConfigError(std::string(name) + " needs at least two classes");
  for (double p : prior) {
    if (!(p > 0.0)) throw ConfigError(std::string(name) + " entries must be positive");
  }
}

// Splits [lo, hi) into n pieces separated by gaps of `gap` pixels, with each
// interior cut moved by up to `jitter` pixels.
std::vector<std::pair<int, int>> split_span(int lo, int hi, int n, int gap, int jitter, Rng& rng) {
  const int usable = hi - lo - (n - 1) * gap;
  std::vector<int> cuts(n + 1);
  for (int i = 0; i <= n; ++i) cuts[i] = lo + (usable * i) / n;
  for (int i = 1; i < n; ++i) cuts[i] += rng.uniform_int(-jitter, jitter);
  std::vector<std::pair<int, int>> out;
  for (int i = 0; i < n; ++i) {
    const int a = cuts[i] + i * gap;
    const int b = cuts[i + 1] + i * gap;
    out.emplace_back(a, b);
  }
  return out;
}

District district_of(const WorldSpec& spec, int tx, int ty) {
  const int dx = tx / spec.district_size;
  const int dy = ty / spec.district_size;
  const int per_row = (spec.tiles_x + spec.district_size - 1) / spec.district_size;
  Rng rng = Rng::derive(spec.seed ^ kDistrictKey, static_cast<std::uint64_t>(dy * per_row + dx));
  return rng.uniform() < spec.urban_fraction ? District::kUrban : District::kSuburban;
}

GeoTransform tile_transform(const WorldSpec& spec, int tx, int ty) {
  GeoTransform t;
  const double span = spec.tile_size * spec.pixel_size;
  t.a = {tx * span, spec.pixel_size, 0.0, ty * span, 0.0, spec.pixel_size};
  return t;
}

struct TileLayout {
  std::vector<Rect> parcels;
  std::vector<int> parcel_block;
  std::vector<Rect> blocks;
  Tensor<int> local;  // kRoadPixel / kLawnPixel / local parcel index
};

TileLayout layout_tile(const WorldSpec& spec, District district, Rng& rng) {
  const int t = spec.tile_size;
  TileLayout lay;
  lay.local = Tensor<int>({t, t}, kRoadPixel);
  const bool urban = district == District::kUrban;
  const int n_blocks = urban ? spec.urban_blocks : spec.suburban_blocks;
  const auto rows = split_span(1, t - 1, n_blocks, kRoadWidth, 2, rng);
  const auto cols = split_span(1, t - 1, n_blocks, kRoadWidth, 2, rng);
  for (const auto& [r0, r1] : rows) {
    for (const auto& [c0, c1] : cols) {
      const Rect block{r0, r1, c0, c1};
      const int block_index = static_cast<int>(lay.blocks.size());
      lay.blocks.push_back(block);
      for (int r = r0; r < r1; ++r) {
        for (int c = c0; c < c1; ++c) lay.local(r, c) = kLawnPixel;
      }
      if (urban) {
        // 2 x 2 abutting parcels filling the block.
        const auto pr = split_span(r0, r1, 2, 0, 1, rng);
        const auto pc = split_span(c0, c1, 2, 0, 1, rng);
        for (const auto& [a0, a1] : pr) {
          for (const auto& [b0, b1] : pc) {
            lay.parcels.push_back({a0, a1, b0, b1});
            lay.parcel_block.push_back(block_index);
          }
        }
      } else {
        // Two houses separated by lawn, inside a lawn margin.
        const Rect inner{r0 + kLawnMargin, r1 - kLawnMargin, c0 + kLawnMargin, c1 - kLawnMargin};
        const bool split_rows = rng.uniform() < 0.5;
        if (split_rows) {
          for (const auto& [a0, a1] : split_span(inner.r0, inner.r1, 2, kLawnMargin, 1, rng)) {
            lay.parcels.push_back({a0, a1, inner.c0, inner.c1});
            lay.parcel_block.push_back(block_index);
          }
        } else {
          for (const auto& [b0, b1] : split_span(inner.c0, inner.c1, 2, kLawnMargin, 1, rng)) {
            lay.parcels.push_back({inner.r0, inner.r1, b0, b1});
            lay.parcel_block.push_back(block_index);
          }
        }
      }
    }
  }
  for (std::size_t i = 0; i < lay.parcels.size(); ++i) {
    const Rect& p = lay.parcels[i];
    if (p.r1 - p.r0 < 2 || p.c1 - p.c0 < 2) {
      throw ConfigError("tile_size " + std::to_string(t) + " is too small for parcels to fit");
    }
    for (int r = p.r0; r < p.r1; ++r) {
      for (int c = p.c0; c < p.c1; ++c) lay.local(r, c) = static_cast<int>(i);
    }
  }
  return lay;
}

struct TileResult {
  Tile tile;
  std::vector<Parcel> parcels;  // ids local until renumbered
  Tensor<int> local;
};

std::array<float, 3> pixel_color(int local, const std::vector<Parcel>& parcels) {
  if (local == kRoadPixel) return kRoadColor;
  if (local == kLawnPixel) return kLawnColor;
  const Parcel& p = parcels[local];
  if (!p.revealed) return kHiddenColor;
  auto c = land_use_color(p.classes[0]);
  const float b = age_brightness(p.classes[1]);
  for (auto& v : c) v *= b;
  return c;
}

TileResult generate_tile(const WorldSpec& spec, const std::vector<TaskInfo>& tasks, int tile_id) {
  const int t = spec.tile_size;
  const int tx = tile_id % spec.tiles_x;
  const int ty = tile_id / spec.tiles_x;
  Rng rng = Rng::derive(spec.seed, static_cast<std::uint64_t>(tile_id));

  TileResult out;
  Tile& tile = out.tile;
  tile.id = tile_id;
  tile.tx = tx;
  tile.ty = ty;
  tile.district = district_of(spec, tx, ty);
  tile.transform = tile_transform(spec, tx, ty);

  TileLayout lay = layout_tile(spec, tile.district, rng);
  const std::vector<const std::vector<double>*> priors{&spec.land_use_prior, &spec.age_prior};

  std::vector<std::vector<int>> dominant(lay.blocks.size(), std::vector<int>(tasks.size()));
  for (auto& d : dominant) {
    for (std::size_t k = 0; k < tasks.size(); ++k) d[k] = rng.categorical(*priors[k]);
  }
  for (std::size_t i = 0; i < lay.parcels.size(); ++i) {
    const Rect& r = lay.parcels[i];
    Parcel p;
    p.id = static_cast<int>(i);
    p.tile_id = tile_id;
    p.block_id = lay.parcel_block[i];
    p.polygon = {tile.transform.apply(r.c0, r.r0), tile.transform.apply(r.c1, r.r0),
                 tile.transform.apply(r.c1, r.r1), tile.transform.apply(r.c0, r.r1)};
    for (std::size_t k = 0; k < tasks.size(); ++k) {
      const bool coherent = rng.uniform() < spec.block_coherence;
      p.classes.push_back(coherent ? dominant[p.block_id][k] : rng.categorical(*priors[k]));
    }
    p.revealed = rng.uniform() >= spec.hidden_attribute_ratio;
    p.unknown = rng.uniform() < spec.unknown_fraction;
    out.parcels.push_back(std::move(p));
  }

  tile.overhead = Tensor<float>({t, t, 3});
  const auto noise = static_cast<float>(spec.overhead_noise);
  for (int r = 0; r < t; ++r) {
    for (int c = 0; c < t; ++c) {
      const int id = lay.local(r, c);
      auto color = pixel_color(id, out.parcels);
      if (id >= 0) {
        const bool edge = r == 0 || c == 0 || r == t - 1 || c == t - 1 ||
                          lay.local(r - 1, c) != id || lay.local(r + 1, c) != id ||
                          lay.local(r, c - 1) != id || lay.local(r, c + 1) != id;
        if (edge) {
          for (auto& v : color) v *= kOutlineFactor;
        }
      }
      for (int ch = 0; ch < 3; ++ch) {
        const float v = color[ch] + static_cast<float>(rng.uniform(-1.0, 1.0)) * noise;
        tile.overhead(r, c, ch) = std::clamp(v, 0.0f, 1.0f);
      }
    }
  }

  for (std::size_t k = 0; k < tasks.size(); ++k) {
    tile.labels[tasks[k].name] =
        rasterize_labels(out.parcels, tile.transform, t, static_cast<int>(k),
                         tasks[k].background(), tasks[k].unknown());
  }
  out.local = std::move(lay.local);
  return out;
}

// Parcel met first by a ray from (row, col) stepping (dr, dc), or -1.
int first_parcel(const Tensor<int>& raster, int row, int col, int dr, int dc, int radius) {
  const int rows = raster.dim(0);
  const int cols = raster.dim(1);
  for (int s = 1; s <= radius; ++s) {
    const int r = row + dr * s;
    const int c = col + dc * s;
    if (r < 0 || c < 0 || r >= rows || c >= cols) return -1;
    const int id = raster(r, c);
    if (id >= 0) return id;
  }
  return -1;
}

}  // namespace

void WorldSpec::validate() const {
  if (tiles_x < 1 || tiles_y < 1) throw ConfigError("world needs at least one tile");
  if (tile_size < 8) throw ConfigError("tile_size must be at least 8");
  if (!(pixel_size > 0.0)) throw ConfigError("pixel_size must be positive");
  if (urban_blocks < 1 || suburban_blocks < 1) throw ConfigError("blocks per tile must be positive");
  if (district_size < 1) throw ConfigError("district_size must be positive");
  if (urban_fraction < 0.0 || urban_fraction > 1.0) throw ConfigError("urban_fraction must lie in [0,1]");
  check_prior(land_use_prior, "land_use_prior");
  check_prior(age_prior, "age_prior");
  if (block_coherence < 0.0 || block_coherence > 1.0) {
    throw ConfigError("block_coherence must lie in [0,1]");
  }
  if (unknown_fraction < 0.0 || unknown_fraction > 0.2) {
    throw ConfigError("unknown_fraction must lie in [0,0.2]");
  }
  if (hidden_attribute_ratio < 0.0 || hidden_attribute_ratio > 1.0) {
    throw ConfigError("hidden_attribute_ratio must lie in [0,1]");
  }
  if (!(observation_density > 0.0)) throw ConfigError("observation_density must be positive");
  if (!(density_contrast > 0.0)) throw ConfigError("density_contrast must be positive");
  if (view_radius < 1) throw ConfigError("view_radius must be positive");
  if (cutout_dim < 1) throw ConfigError("cutout_dim must be positive");
  if (cutout_noise < 0.0 || overhead_noise < 0.0) throw ConfigError("noise levels must be non-negative");
  if (holdout_columns < 0 || holdout_columns >= tiles_x) {
    throw ConfigError("holdout_columns must leave at least one tile column for training");
  }
  if (test_fraction < 0.0 || test_fraction >= 1.0) throw ConfigError("test_fraction must lie in [0,1)");
}

std::vector<int> TaskInfo::metric_ignore() const {
  if (name == "land_use") return {unknown()};
  return {background(), unknown()};
}

std::vector<TaskInfo> default_tasks(const WorldSpec& spec) {
  TaskInfo lu{"land_use", {}};
  for (std::size_t k = 0; k < spec.land_use_prior.size(); ++k) {
    lu.classes.push_back("use_" + std::to_string(k));
  }
  TaskInfo age{"age", {}};
  for (std::size_t k = 0; k < spec.age_prior.size(); ++k) {
    age.classes.push_back("era_" + std::to_string(k));
  }
  return {lu, age};
}

const TaskInfo& Dataset::task(const std::string& name) const {
  for (const auto& t : tasks) {
    if (t.name == name) return t;
  }
  throw ConfigError("unknown task '" + name + "'");
}

std::vector<int> Dataset::split_tiles(const std::string& split) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    if (tiles[i].split == split) out.push_back(static_cast<int>(i));
  }
  return out;
}

bool point_in_polygon(const std::vector<GeoPoint>& polygon, GeoPoint p) {
  bool inside = false;
  const std::size_t n = polygon.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const GeoPoint& a = polygon[i];
    const GeoPoint& b = polygon[j];
    if ((a.y > p.y) != (b.y > p.y)) {
      const double x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
      if (p.x < x) inside = !inside;
    }
  }
  return inside;
}

Tensor<int> rasterize_labels(const std::vector<Parcel>& parcels, const GeoTransform& transform,
                             int tile_size, int task, int background, int unknown) {
  Tensor<int> out({tile_size, tile_size}, background);
  for (const Parcel& parcel : parcels) {
    if (parcel.polygon.empty()) continue;
    // Pixel-space bounding box of the polygon, clipped to the tile.
    double cmin = 1e300, cmax = -1e300, rmin = 1e300, rmax = -1e300;
    for (const GeoPoint& v : parcel.polygon) {
      const auto [c, r] = transform.invert(v);
      cmin = std::min(cmin, c);
      cmax = std::max(cmax, c);
      rmin = std::min(rmin, r);
      rmax = std::max(rmax, r);
    }
    const int r0 = std::max(0, static_cast<int>(std::floor(rmin)));
    const int r1 = std::min(tile_size, static_cast<int>(std::ceil(rmax)) + 1);
    const int c0 = std::max(0, static_cast<int>(std::floor(cmin)));
    const int c1 = std::min(tile_size, static_cast<int>(std::ceil(cmax)) + 1);
    const int label = parcel.unknown ? unknown : parcel.classes.at(task);
    for (int r = r0; r < r1; ++r) {
      for (int c = c0; c < c1; ++c) {
        if (point_in_polygon(parcel.polygon, transform.pixel_center(r, c))) out(r, c) = label;
      }
    }
  }
  return out;
}

double tile_observation_density(const WorldSpec& spec, District d) {
  const double c = spec.density_contrast;
  return d == District::kUrban ? spec.observation_density * 2.0 * c / (1.0 + c)
                               : spec.observation_density * 2.0 / (1.0 + c);
}

CutoutEmbeddings cutout_embeddings(const WorldSpec& spec) {
  Rng rng = Rng::derive(spec.seed, kEmbeddingKey);
  CutoutEmbeddings e;
  const std::vector<const std::vector<double>*> priors{&spec.land_use_prior, &spec.age_prior};
  auto draw = [&] {
    std::vector<float> v(spec.cutout_dim);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return v;
  };
  for (const auto* prior : priors) {
    std::vector<std::vector<float>> per_class;
    for (std::size_t k = 0; k < prior->size(); ++k) per_class.push_back(draw());
    e.classes.push_back(std::move(per_class));
  }
  e.background = draw();
  return e;
}

std::vector<GroundObservation> sample_ground_observations(const WorldSpec& spec,
                                                          const std::vector<Parcel>& parcels,
                                                          const std::vector<Tile>& tiles,
                                                          const Tensor<int>& parcel_raster) {
  const int t = spec.tile_size;
  const CutoutEmbeddings emb = cutout_embeddings(spec);
  const int dim = spec.cutout_dim;
  constexpr int kDr[kNumCutouts] = {-1, 0, 1, 0};  // north is decreasing row
  constexpr int kDc[kNumCutouts] = {0, 1, 0, -1};

  std::vector<std::vector<GroundObservation>> per_tile(tiles.size());
  std::vector<std::string> errors(tiles.size());
  parallel_for(static_cast<int>(tiles.size()), [&](int i) {
    const Tile& tile = tiles[i];
    Rng rng = Rng::derive(spec.seed ^ kObservationKey, static_cast<std::uint64_t>(tile.id));
    const int row0 = tile.ty * t;
    const int col0 = tile.tx * t;
    std::vector<std::pair<int, int>> road;
    for (int r = 0; r < t; ++r) {
      for (int c = 0; c < t; ++c) {
        if (parcel_raster(row0 + r, col0 + c) == kRoadPixel) road.emplace_back(r, c);
      }
    }
    if (road.empty()) {
      errors[i] = "tile " + std::to_string(tile.id) + " has no road pixels";
      return;
    }
    const int count = rng.poisson(tile_observation_density(spec, tile.district));
    for (int n = 0; n < count; ++n) {
      const auto [r, c] = road[rng.below(road.size())];
      GroundObservation obs;
      obs.location = tile.transform.apply(c + rng.uniform(), r + rng.uniform());
      std::array<std::vector<float>, kNumCutouts> clean;
      for (int d = 0; d < kNumCutouts; ++d) {
        const int pid = first_parcel(parcel_raster, row0 + r, col0 + c, kDr[d], kDc[d],
                                     spec.view_radius);
        if (pid < 0) {
          clean[d] = emb.background;
          continue;
        }
        clean[d].assign(dim, 0.0f);
        const Parcel& p = parcels[pid];
        for (std::size_t k = 0; k < p.classes.size(); ++k) {
          const auto& v = emb.classes[k][p.classes[k]];
          for (int j = 0; j < dim; ++j) clean[d][j] += v[j];
        }
      }
      if (!spec.orientation_signal) {
        std::vector<float> mean(dim, 0.0f);
        for (const auto& b : clean) {
          for (int j = 0; j < dim; ++j) mean[j] += b[j] / kNumCutouts;
        }
        for (auto& b : clean) b = mean;
      }
      for (int d = 0; d < kNumCutouts; ++d) {
        obs.cutouts[d] = clean[d];
        for (auto& v : obs.cutouts[d]) v += static_cast<float>(rng.normal() * spec.cutout_noise);
      }
      per_tile[i].push_back(std::move(obs));
    }
  });
  for (const auto& e : errors) {
    if (!e.empty()) throw ConfigError(e);
  }
  std::vector<GroundObservation> out;
  for (auto& list : per_tile) {
    for (auto& obs : list) {
      obs.id = static_cast<std::int64_t>(out.size());
      out.push_back(std::move(obs));
    }
  }
  return out;
}

GeneratedWorld generate_world(const WorldSpec& spec) {
  spec.validate();
  GeneratedWorld world;
  Dataset& ds = world.dataset;
  ds.spec = spec;
  ds.tasks = default_tasks(spec);
  const int n = spec.num_tiles();
  const int t = spec.tile_size;

  std::vector<TileResult> results(n);
  std::vector<std::string> errors(n);
  parallel_for(n, [&](int i) {
    try {
      results[i] = generate_tile(spec, ds.tasks, i);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (const auto& e : errors) {
    if (!e.empty()) throw ConfigError(e);
  }

  world.parcel_raster = Tensor<int>({spec.tiles_y * t, spec.tiles_x * t}, kRoadPixel);
  int block_base = 0;
  for (auto& res : results) {
    const int base = static_cast<int>(world.parcels.size());
    int max_block = -1;
    for (auto& p : res.parcels) {
      p.id += base;
      max_block = std::max(max_block, p.block_id);
      p.block_id += block_base;
      world.parcels.push_back(std::move(p));
    }
    block_base += max_block + 1;
    const int row0 = res.tile.ty * t;
    const int col0 = res.tile.tx * t;
    for (int r = 0; r < t; ++r) {
      for (int c = 0; c < t; ++c) {
        const int v = res.local(r, c);
        world.parcel_raster(row0 + r, col0 + c) = v >= 0 ? v + base : v;
      }
    }
    ds.tiles.push_back(std::move(res.tile));
  }
  if (world.parcels.empty()) throw ConfigError("no parcels fit in the world");

  // Splits: the rightmost columns form the held-out region; the remaining
  // tiles are shuffled into train and test.
  std::vector<int> pool;
  for (auto& tile : ds.tiles) {
    if (tile.tx >= spec.tiles_x - spec.holdout_columns) {
      tile.split = "holdout";
    } else {
      pool.push_back(tile.id);
    }
  }
  Rng split_rng = Rng::derive(spec.seed, kSplitKey);
  split_rng.shuffle(pool.begin(), pool.end());
  const auto n_test = static_cast<std::size_t>(std::lround(spec.test_fraction * pool.size()));
  if (n_test >= pool.size()) throw ConfigError("test_fraction leaves no training tiles");
  for (std::size_t i = 0; i < pool.size(); ++i) {
    ds.tiles[pool[i]].split = i < n_test ? "test" : "train";
  }

  ds.observations = sample_ground_observations(spec, world.parcels, ds.tiles, world.parcel_raster);
  for (const auto& obs : ds.observations) {
    const double span = t * spec.pixel_size;
    const int tx = std::clamp(static_cast<int>(obs.location.x / span), 0, spec.tiles_x - 1);
    const int ty = std::clamp(static_cast<int>(obs.location.y / span), 0, spec.tiles_y - 1);
    ds.tiles[ty * spec.tiles_x + tx].observation_ids.push_back(obs.id);
  }
  return world;
}

double overhead_bayes_accuracy(const WorldSpec& spec, int task) {
  const auto& prior = task == 0 ? spec.land_use_prior : spec.age_prior;
  const double total = std::accumulate(prior.begin(), prior.end(), 0.0);
  const double best = *std::max_element(prior.begin(), prior.end()) / total;
  const double r = spec.hidden_attribute_ratio;
  return (1.0 - r) + r * best;
}

std::array<float, 3> land_use_color(int k) {
  static constexpr std::array<std::array<float, 3>, 8> kPalette{{
      {0.90f, 0.30f, 0.25f},
      {0.25f, 0.40f, 0.90f},
      {0.95f, 0.85f, 0.20f},
      {0.65f, 0.25f, 0.80f},
      {0.95f, 0.55f, 0.10f},
      {0.20f, 0.85f, 0.85f},
      {0.95f, 0.45f, 0.75f},
      {0.55f, 0.35f, 0.15f},
  }};
  return kPalette[static_cast<std::size_t>(k) % kPalette.size()];
}

float age_brightness(int k) {
  static constexpr std::array<float, 4> kLevels{1.0f, 0.78f, 0.58f, 0.42f};
  return kLevels[static_cast<std::size_t>(k) % kLevels.size()];
}

}  // namespace geofuse
