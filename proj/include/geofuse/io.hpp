#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "geofuse/network.hpp"
#include "geofuse/synth_world.hpp"
#include "geofuse/tensor.hpp"
#include "geofuse/train_eval.hpp"

namespace geofuse {

namespace fs = std::filesystem;
using Json = nlohmann::json;

// ---- tensor files -----------------------------------------------------------

enum class DType : std::uint32_t { kF32 = 0, kF64 = 1, kU8 = 2, kI32 = 3 };

std::size_t dtype_size(DType d);
std::string dtype_name(DType d);

template <typename T>
constexpr DType dtype_of();
template <> constexpr DType dtype_of<float>() { return DType::kF32; }
template <> constexpr DType dtype_of<double>() { return DType::kF64; }
template <> constexpr DType dtype_of<std::uint8_t>() { return DType::kU8; }
template <> constexpr DType dtype_of<std::int32_t>() { return DType::kI32; }

/// A decoded tensor file before conversion to a typed tensor.
struct TensorBlob {
  DType dtype = DType::kF32;
  Shape shape;
  std::vector<unsigned char> payload;  // little-endian values
};

/// "GFTN", version 1, dtype, rank, dims, then the row-major payload, all
/// little-endian.
template <typename T>
std::vector<unsigned char> encode_tensor(const Tensor<T>& t);

/// Throws FormatError naming the byte offset of the first problem.
TensorBlob decode_tensor(const std::vector<unsigned char>& bytes);

/// Typed view of a blob; throws FormatError when the dtype differs.
template <typename T>
Tensor<T> blob_to_tensor(const TensorBlob& blob);

template <typename T>
void write_tensor(const fs::path& path, const Tensor<T>& t);

template <typename T>
Tensor<T> read_tensor(const fs::path& path);

std::vector<unsigned char> read_bytes(const fs::path& path);
void write_bytes(const fs::path& path, const std::vector<unsigned char>& bytes);
void write_text(const fs::path& path, const std::string& text);

/// Stable, sorted-key JSON text with a trailing newline.
std::string dump_json(const Json& j);
Json read_json(const fs::path& path);

// ---- configuration documents ------------------------------------------------

/// Unknown keys are rejected with ConfigError; missing keys keep defaults.
Json to_json(const WorldSpec& spec);
WorldSpec world_spec_from_json(const Json& j);
Json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const Json& j);
Json to_json(const NetworkConfig& config);
NetworkConfig network_config_from_json(const Json& j);
Json to_json(const EvalReport& report);
Json to_json(const LogRecord& record);

// ---- dataset layout ---------------------------------------------------------

/// manifest.json, tiles/tile_NNNNN/{overhead,labels_<task>}.gftn and
/// observations/{ids,locations,cutouts}.gftn under `dir`.
void write_dataset(const Dataset& dataset, const fs::path& dir);

/// Checks a manifest against the files under `dir`: every referenced file
/// exists, tile and observation ids are unique, transforms are invertible,
/// and split lists match the tile entries. Throws FormatError.
void validate_manifest(const Json& manifest, const fs::path& dir);

/// Validates, then loads every tensor.
Dataset read_dataset(const fs::path& dir);

// ---- checkpoints ------------------------------------------------------------

/// checkpoint.json plus params/<name>.{value,m,v}.gftn and
/// buffers/<name>.gftn. Parameter names iterate in sorted order.
template <typename T>
void save_checkpoint(const fs::path& dir, const TrainResult<T>& model, const std::string& task,
                     int epoch);

struct CheckpointInfo {
  NetworkConfig network;
  std::string task;
  std::string precision;
  int epoch = 0;
  long step = 0;
  std::vector<double> prior;
};

CheckpointInfo read_checkpoint_info(const fs::path& dir);

template <typename T>
TrainResult<T> load_checkpoint(const fs::path& dir);

// ---- rendering --------------------------------------------------------------

using Rgb = std::array<std::uint8_t, 3>;

/// Binary PPM: "P6\n<W> <H>\n255\n" followed by row-major RGB bytes.
std::vector<unsigned char> encode_ppm(int height, int width, const std::vector<Rgb>& pixels);

/// Throws ConfigError when a raster id has no palette entry.
std::vector<unsigned char> render_categorical(const Tensor<int>& raster,
                                              const std::map<int, Rgb>& palette);

/// Palette for a task's outputs: class colors, gray background, black unknown.
std::map<int, Rgb> task_palette(const TaskInfo& task);

/// Rank r of K maps to t = (r-1)/(K-1) and color (255t, 255(1-t), 0): rank 1
/// is pure green and rank K pure red. Rank 0 (ignored pixel) is black.
Rgb rank_color(int rank, int num_classes);
std::vector<unsigned char> render_rank(const Tensor<int>& ranks, int num_classes);

/// Sequential ramp for scalar maps: t = (v - lo)/(hi - lo) clamped to [0,1]
/// maps to (255t, 255t, 255(1-t)), dark blue to yellow. A constant map uses t = 0.5.
Rgb sequential_color(double t);
template <typename T>
std::vector<unsigned char> render_scalar(const Tensor<T>& map, double lo, double hi);

/// Overhead [H, W, 3] values in [0, 1] as an RGB image.
std::vector<unsigned char> render_overhead(const Tensor<float>& overhead);

}  // namespace geofuse
