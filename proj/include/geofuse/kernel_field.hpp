#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <type_traits>
#include <vector>

#include "geofuse/ops.hpp"
#include "geofuse/params.hpp"
#include "geofuse/rng.hpp"
#include "geofuse/tensor.hpp"

namespace geofuse {

struct GeoPoint {
  double x = 0.0;
  double y = 0.0;
};

/// Affine pixel -> world map: x = a0 + a1*col + a2*row, y = a3 + a4*col + a5*row.
struct GeoTransform {
  std::array<double, 6> a{0.0, 1.0, 0.0, 0.0, 0.0, 1.0};

  GeoPoint apply(double col, double row) const {
    return {a[0] + a[1] * col + a[2] * row, a[3] + a[4] * col + a[5] * row};
  }
  /// World coordinates of the center of pixel (row, col).
  GeoPoint pixel_center(int row, int col) const { return apply(col + 0.5, row + 0.5); }
  double determinant() const { return a[1] * a[5] - a[2] * a[4]; }
  bool invertible() const { return determinant() != 0.0; }
  /// World -> fractional (col, row).
  std::pair<double, double> invert(GeoPoint p) const;
};

/// Cutout order is fixed: north, east, south, west.
enum class Cardinal : int { kNorth = 0, kEast = 1, kSouth = 2, kWest = 3 };
inline constexpr int kNumCutouts = 4;

struct GroundObservation {
  std::int64_t id = 0;
  GeoPoint location;
  std::array<std::vector<float>, kNumCutouts> cutouts;
};

/// Indices of the n observations closest to `center` (Euclidean, world
/// units), nearest first, ties broken by ascending id. Returns every
/// observation when fewer than n exist. Throws ConfigError when empty.
std::vector<std::size_t> nearest_n(std::span<const GroundObservation> observations,
                                   GeoPoint center, int n);

/// Squared Mahalanobis distance under diag(sigma1, sigma2).
template <typename T>
T mahalanobis_sq(GeoPoint l, GeoPoint li, T sigma1, T sigma2) {
  const T dx = static_cast<T>(l.x - li.x);
  const T dy = static_cast<T>(l.y - li.y);
  return dx * dx / sigma1 + dy * dy / sigma2;
}

/// Gaussian kernel exp(-d^2).
template <typename T>
T kernel_weight(T d_sq) {
  return std::exp(-d_sq);
}

enum class BandwidthMode { kUniform, kAdaptive };

/// Kernel bandwidths held pre-softplus. Uniform mode stores one pair for the
/// whole map; adaptive mode stores an [H, W, 2] map on the output grid.
template <typename T>
struct BandwidthField {
  BandwidthMode mode = BandwidthMode::kUniform;
  Tensor<T> uniform_raw;   // [2]
  Tensor<T> adaptive_map;  // [H, W, 2]

  static BandwidthField uniform(T raw1, T raw2) {
    BandwidthField f;
    f.mode = BandwidthMode::kUniform;
    f.uniform_raw = Tensor<T>({2}, std::vector<T>{raw1, raw2});
    return f;
  }
  static BandwidthField adaptive(Tensor<T> raw_map) {
    if (raw_map.rank() != 3 || raw_map.dim(2) != 2) {
      throw ShapeError("adaptive bandwidth map must be [H,W,2], got " + shape_str(raw_map.shape()));
    }
    BandwidthField f;
    f.mode = BandwidthMode::kAdaptive;
    f.adaptive_map = std::move(raw_map);
    return f;
  }

  /// Effective (sigma1, sigma2) at a pixel.
  std::pair<T, T> sigma_at(int row, int col) const {
    if (mode == BandwidthMode::kUniform) {
      return {softplus(uniform_raw[0]), softplus(uniform_raw[1])};
    }
    const std::size_t base = (static_cast<std::size_t>(row) * adaptive_map.dim(1) + col) * 2;
    return {softplus(adaptive_map[base]), softplus(adaptive_map[base + 1])};
  }
};

/// Output raster geometry for the kernel field.
struct PixelGrid {
  int height = 0;
  int width = 0;
  GeoTransform transform;
};

inline constexpr double kKernelEps = 1e-12;

/// Nadaraya-Watson regression of `features` [N, m] observed at `locations`
/// onto every pixel center: sum_i w_i f_i / (sum_i w_i + eps). Rows of the
/// grid are evaluated independently (and in parallel) with a fixed per-pixel
/// summation order.
template <typename T>
Tensor<T> interpolate(const Tensor<T>& features, std::span<const GeoPoint> locations,
                      const PixelGrid& grid, const BandwidthField<T>& bandwidth,
                      double eps = kKernelEps);

/// Kernel density (1/N) sum_i w_i with the same kernel, as [H, W, 1].
template <typename T>
Tensor<T> density(std::span<const GeoPoint> locations, const PixelGrid& grid,
                  const BandwidthField<T>& bandwidth);

template <typename T>
struct KernelFieldGrads {
  Tensor<T> d_features;  // [N, m]
  Tensor<T> d_raw;       // [2] (uniform) or [H, W, 2] (adaptive)
};

/// Joint VJP of interpolate and density. Either cotangent may be empty.
template <typename T>
KernelFieldGrads<T> kernel_field_backward(const Tensor<T>& features,
                                          std::span<const GeoPoint> locations,
                                          const PixelGrid& grid,
                                          const BandwidthField<T>& bandwidth,
                                          const Tensor<T>& d_interp,
                                          const Tensor<T>& d_density,
                                          double eps = kKernelEps);

// ---- panorama features ----------------------------------------------------

struct PanoramaEncoderDims {
  int cutout_dim = 8;  // per-cutout input feature length
  int enc_dim = 8;     // shared per-cutout encoder output
  int out_dim = 8;     // m, after the reducing projection
};

/// Shared per-cutout encoder (linear + leaky ReLU) applied to all four
/// cutouts, concatenated in cardinal order, then linearly reduced to m.
/// Parameters live in ModelParams under "ground.enc.*" and "ground.reduce.*".
template <typename T>
class PanoramaEncoder {
 public:
  struct Cache {
    Tensor<T> input;     // [4N, cutout_dim]
    Tensor<T> pre_act;   // [4N, enc_dim]
    Tensor<T> concat;    // [N, 4*enc_dim]
  };

  static void init_params(ModelParams<T>& params, const PanoramaEncoderDims& dims, Rng& rng);

  /// Encodes observations; `shifts` (optional, one per observation) rotates
  /// the cutout order so that block j reads cutout (j + shift) mod 4.
  static Tensor<T> forward(const ModelParams<T>& params,
                           const std::vector<const GroundObservation*>& observations,
                           const std::vector<int>& shifts, Cache* cache);

  /// Accumulates encoder/reducer gradients into `params`.
  static void backward(ModelParams<T>& params, const Cache& cache, const Tensor<T>& d_out);
};

/// Feature vector of a single observation.
template <typename T>
std::vector<T> panorama_feature(const ModelParams<T>& params, const GroundObservation& obs,
                                int shift = 0);

// ---- ground feature map ---------------------------------------------------

template <typename T>
struct GroundFeatureMap {
  Tensor<T> features;  // [H, W, m]
  Tensor<T> density;   // [H, W, 1]
  Tensor<T> combined;  // [H, W, m + 1]
};

template <typename T>
struct GroundMapCache {
  typename PanoramaEncoder<T>::Cache encoder;
  Tensor<T> obs_features;  // [N, m]
  std::vector<GeoPoint> locations;
  PixelGrid grid;
  BandwidthField<T> bandwidth;
};

/// Encodes the observations and concatenates the interpolated features with
/// the density channel.
template <typename T>
GroundFeatureMap<T> build_ground_map(const ModelParams<T>& params, const PixelGrid& grid,
                                     const std::vector<const GroundObservation*>& observations,
                                     const std::vector<int>& shifts,
                                     const BandwidthField<T>& bandwidth,
                                     std::type_identity_t<GroundMapCache<T>>* cache);

/// Backpropagates a cotangent on `combined` [H, W, m+1] into the encoder
/// parameters; returns the gradient w.r.t. the raw bandwidth values.
template <typename T>
Tensor<T> build_ground_map_backward(ModelParams<T>& params, const GroundMapCache<T>& cache,
                                    const Tensor<T>& d_combined);

}  // namespace geofuse
