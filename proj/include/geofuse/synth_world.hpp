#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "geofuse/kernel_field.hpp"
#include "geofuse/tensor.hpp"

namespace geofuse {

/// Parameters of a procedurally generated city. Tiles form a tiles_x by
/// tiles_y grid; each tile is tile_size pixels square and belongs to an
/// urban or suburban district, which sets its block size and observation
/// density.
struct WorldSpec {
  std::uint64_t seed = 1;
  int tiles_x = 14;
  int tiles_y = 14;
  int tile_size = 64;
  double pixel_size = 0.125;  // world units per pixel
  int district_size = 2;      // tiles per district side
  double urban_fraction = 0.5;
  int urban_blocks = 3;     // blocks per tile side; urban blocks hold 2 x 2 parcels
  int suburban_blocks = 2;  // suburban blocks hold two houses on a lawn

  std::vector<double> land_use_prior{0.4, 0.3, 0.2, 0.1};
  std::vector<double> age_prior{0.5, 0.3, 0.2};
  double block_coherence = 0.6;  // P(parcel takes its block's dominant class)
  double unknown_fraction = 0.05;

  double hidden_attribute_ratio = 0.5;
  bool orientation_signal = true;

  double observation_density = 24.0;  // mean observations per tile
  double density_contrast = 3.0;      // urban : suburban density ratio
  int view_radius = 24;               // pixels
  int cutout_dim = 8;
  double cutout_noise = 0.35;
  double overhead_noise = 0.04;

  int holdout_columns = 2;  // rightmost tile columns held out as a region
  double test_fraction = 0.2;

  int num_tiles() const { return tiles_x * tiles_y; }
  void validate() const;
};

/// Per-task class table. Labels 0..K-1 are classes; K is background and
/// K+1 unknown, so a model for the task has K+2 outputs.
struct TaskInfo {
  std::string name;
  std::vector<std::string> classes;
  int num_classes() const { return static_cast<int>(classes.size()); }
  int background() const { return num_classes(); }
  int unknown() const { return num_classes() + 1; }
  int num_outputs() const { return num_classes() + 2; }
  /// Labels excluded from metrics: unknown, plus background except for land use.
  std::vector<int> metric_ignore() const;
};

std::vector<TaskInfo> default_tasks(const WorldSpec& spec);

struct Parcel {
  int id = 0;
  int tile_id = 0;
  int block_id = 0;
  std::vector<GeoPoint> polygon;  // world coordinates, closed implicitly
  std::vector<int> classes;       // per task, always a real class
  bool revealed = false;          // class visible in overhead imagery
  bool unknown = false;           // labeled UNKNOWN in every task raster
};

inline constexpr int kRoadPixel = -1;
inline constexpr int kLawnPixel = -2;

enum class District { kUrban, kSuburban };

struct Tile {
  int id = 0;
  int tx = 0;
  int ty = 0;
  District district = District::kUrban;
  GeoTransform transform;
  Tensor<float> overhead;                    // [T, T, 3] in [0, 1]
  std::map<std::string, Tensor<int>> labels;  // task -> [T, T]
  std::string split;                          // train | test | holdout
  std::vector<std::int64_t> observation_ids;  // observations located in the tile
};

struct Dataset {
  WorldSpec spec;
  std::vector<TaskInfo> tasks;
  std::vector<Tile> tiles;
  std::vector<GroundObservation> observations;

  const TaskInfo& task(const std::string& name) const;
  std::vector<int> split_tiles(const std::string& split) const;
};

struct GeneratedWorld {
  Dataset dataset;
  std::vector<Parcel> parcels;
  /// Parcel id per world pixel, kRoadPixel or kLawnPixel elsewhere; [rows, cols].
  Tensor<int> parcel_raster;
};

/// Deterministic in spec (including seed); tiles are generated from streams
/// derived from (seed, tile id), so the result does not depend on the
/// thread count.
GeneratedWorld generate_world(const WorldSpec& spec);

/// Pixel-center point-in-polygon rasterization of parcel classes for one
/// task onto a tile grid; uncovered pixels are background.
Tensor<int> rasterize_labels(const std::vector<Parcel>& parcels, const GeoTransform& transform,
                             int tile_size, int task, int background, int unknown);

/// Even-odd point-in-polygon test.
bool point_in_polygon(const std::vector<GeoPoint>& polygon, GeoPoint p);

/// Observations for the whole world: Poisson(tile density) per tile, placed
/// on road pixels, with cutouts describing the first parcel met by a ray in
/// each cardinal direction. Throws ConfigError when a tile has no road.
std::vector<GroundObservation> sample_ground_observations(const WorldSpec& spec,
                                                          const std::vector<Parcel>& parcels,
                                                          const std::vector<Tile>& tiles,
                                                          const Tensor<int>& parcel_raster);

/// Expected observation count of a tile.
double tile_observation_density(const WorldSpec& spec, District d);

/// Fixed per-class cutout embeddings; block = sum over tasks of the class
/// embeddings, or the background embedding when a ray meets no parcel.
struct CutoutEmbeddings {
  std::vector<std::vector<std::vector<float>>> classes;  // [task][class][dim]
  std::vector<float> background;
};
CutoutEmbeddings cutout_embeddings(const WorldSpec& spec);

/// Bayes accuracy of classifying a parcel pixel from its overhead
/// appearance alone, under the generator's joint distribution of
/// (appearance, class) for a task: (1 - r) + r * max_k prior(k).
double overhead_bayes_accuracy(const WorldSpec& spec, int task);

/// Colors used by the renderer.
std::array<float, 3> land_use_color(int k);
float age_brightness(int k);
inline constexpr std::array<float, 3> kRoadColor{0.25f, 0.25f, 0.27f};
inline constexpr std::array<float, 3> kLawnColor{0.30f, 0.55f, 0.30f};
inline constexpr std::array<float, 3> kHiddenColor{0.60f, 0.60f, 0.60f};
inline constexpr float kOutlineFactor = 0.7f;

}  // namespace geofuse
