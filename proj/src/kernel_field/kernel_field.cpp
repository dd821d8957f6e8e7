#include "geofuse/kernel_field.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "geofuse/init.hpp"
#include "geofuse/parallel.hpp"

namespace geofuse {

std::pair<double, double> GeoTransform::invert(GeoPoint p) const {
  const double det = determinant();
  if (det == 0.0) throw ConfigError("geo transform is not invertible");
  const double dx = p.x - a[0];
  const double dy = p.y - a[3];
  return {(a[5] * dx - a[2] * dy) / det, (-a[4] * dx + a[1] * dy) / det};
}

std::vector<std::size_t> nearest_n(std::span<const GroundObservation> observations,
                                   GeoPoint center, int n) {
  if (observations.empty()) throw ConfigError("nearest_n: no ground observations");
  if (n < 1) throw ConfigError("nearest_n: n must be >= 1");
  std::vector<std::size_t> order(observations.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> dist(observations.size());
  for (std::size_t i = 0; i < observations.size(); ++i) {
    const double dx = observations[i].location.x - center.x;
    const double dy = observations[i].location.y - center.y;
    dist[i] = dx * dx + dy * dy;
  }
  auto closer = [&](std::size_t a, std::size_t b) {
    if (dist[a] != dist[b]) return dist[a] < dist[b];
    return observations[a].id < observations[b].id;
  };
  const std::size_t keep = std::min<std::size_t>(n, observations.size());
  std::partial_sort(order.begin(), order.begin() + keep, order.end(), closer);
  order.resize(keep);
  return order;
}

namespace {

std::vector<GeoPoint> pixel_centers(const PixelGrid& grid) {
  std::vector<GeoPoint> out(static_cast<std::size_t>(grid.height) * grid.width);
  for (int r = 0; r < grid.height; ++r)
    for (int c = 0; c < grid.width; ++c) out[r * grid.width + c] = grid.transform.pixel_center(r, c);
  return out;
}

template <typename T>
void check_bandwidth(const BandwidthField<T>& bw, const PixelGrid& grid) {
  if (bw.mode == BandwidthMode::kUniform) {
    if (bw.uniform_raw.size() != 2) throw ShapeError("uniform bandwidth needs 2 raw values");
  } else if (bw.adaptive_map.rank() != 3 || bw.adaptive_map.dim(0) != grid.height ||
             bw.adaptive_map.dim(1) != grid.width || bw.adaptive_map.dim(2) != 2) {
    throw ShapeError("adaptive bandwidth map " + shape_str(bw.adaptive_map.shape()) +
                     " does not match the output grid");
  }
}

// Kernel weights of every observation at one pixel.
template <typename T>
void pixel_weights(GeoPoint p, std::span<const GeoPoint> locations, T s1, T s2, T* w) {
  for (std::size_t i = 0; i < locations.size(); ++i) {
    w[i] = kernel_weight(mahalanobis_sq(p, locations[i], s1, s2));
  }
}

}  // namespace

template <typename T>
Tensor<T> interpolate(const Tensor<T>& features, std::span<const GeoPoint> locations,
                      const PixelGrid& grid, const BandwidthField<T>& bandwidth, double eps) {
  if (features.rank() != 2 || features.dim(0) != static_cast<int>(locations.size())) {
    throw ShapeError("interpolate: features must be [N,m] with N locations");
  }
  check_bandwidth(bandwidth, grid);
  const int n = features.dim(0), m = features.dim(1);
  const auto centers = pixel_centers(grid);
  Tensor<T> out({grid.height, grid.width, m});
  parallel_for(grid.height, [&](int r) {
    std::vector<T> w(n);
    for (int c = 0; c < grid.width; ++c) {
      const auto [s1, s2] = bandwidth.sigma_at(r, c);
      pixel_weights(centers[r * grid.width + c], locations, s1, s2, w.data());
      T* o = out.data() + (static_cast<std::size_t>(r) * grid.width + c) * m;
      T total = T(0);
      for (int i = 0; i < n; ++i) {
        total += w[i];
        const T* f = features.data() + static_cast<std::size_t>(i) * m;
        for (int k = 0; k < m; ++k) o[k] += w[i] * f[k];
      }
      const T denom = total + T(eps);
      for (int k = 0; k < m; ++k) o[k] /= denom;
    }
  });
  require_finite(out, "interpolate");
  return out;
}

template <typename T>
Tensor<T> density(std::span<const GeoPoint> locations, const PixelGrid& grid,
                  const BandwidthField<T>& bandwidth) {
  if (locations.empty()) throw ConfigError("density: no observation locations");
  check_bandwidth(bandwidth, grid);
  const int n = static_cast<int>(locations.size());
  const auto centers = pixel_centers(grid);
  Tensor<T> out({grid.height, grid.width, 1});
  parallel_for(grid.height, [&](int r) {
    std::vector<T> w(n);
    for (int c = 0; c < grid.width; ++c) {
      const auto [s1, s2] = bandwidth.sigma_at(r, c);
      pixel_weights(centers[r * grid.width + c], locations, s1, s2, w.data());
      T total = T(0);
      for (int i = 0; i < n; ++i) total += w[i];
      out[static_cast<std::size_t>(r) * grid.width + c] = total / T(n);
    }
  });
  require_finite(out, "density");
  return out;
}

template <typename T>
KernelFieldGrads<T> kernel_field_backward(const Tensor<T>& features,
                                          std::span<const GeoPoint> locations,
                                          const PixelGrid& grid,
                                          const BandwidthField<T>& bandwidth,
                                          const Tensor<T>& d_interp,
                                          const Tensor<T>& d_density, double eps) {
  check_bandwidth(bandwidth, grid);
  const int n = static_cast<int>(locations.size());
  const bool has_interp = !d_interp.empty();
  const bool has_density = !d_density.empty();
  const int m = has_interp ? features.dim(1) : 0;
  if (has_interp && (features.dim(0) != n || d_interp.size() !=
                     static_cast<std::size_t>(grid.height) * grid.width * m)) {
    throw ShapeError("kernel_field_backward: interpolation cotangent shape mismatch");
  }
  if (has_density && d_density.size() != static_cast<std::size_t>(grid.height) * grid.width) {
    throw ShapeError("kernel_field_backward: density cotangent shape mismatch");
  }
  const bool adaptive = bandwidth.mode == BandwidthMode::kAdaptive;
  const auto centers = pixel_centers(grid);

  // Per-row partial sums, reduced in row order afterwards so the result does
  // not depend on the worker count.
  const std::size_t feat_len = static_cast<std::size_t>(n) * m;
  std::vector<T> row_dfeat(static_cast<std::size_t>(grid.height) * feat_len, T(0));
  std::vector<double> row_dsigma(static_cast<std::size_t>(grid.height) * 2, 0.0);
  KernelFieldGrads<T> grads;
  if (adaptive) grads.d_raw = Tensor<T>(bandwidth.adaptive_map.shape());

  parallel_for(grid.height, [&](int r) {
    std::vector<T> w(n), f_out(m);
    T* dfeat = row_dfeat.data() + r * feat_len;
    for (int c = 0; c < grid.width; ++c) {
      const std::size_t pix = static_cast<std::size_t>(r) * grid.width + c;
      const auto [s1, s2] = bandwidth.sigma_at(r, c);
      const GeoPoint p = centers[pix];
      pixel_weights(p, locations, s1, s2, w.data());
      T total = T(0);
      for (int i = 0; i < n; ++i) total += w[i];
      const T denom = total + T(eps);
      const T* g = has_interp ? d_interp.data() + pix * m : nullptr;
      if (has_interp) {
        std::fill(f_out.begin(), f_out.end(), T(0));
        for (int i = 0; i < n; ++i) {
          const T* f = features.data() + static_cast<std::size_t>(i) * m;
          for (int k = 0; k < m; ++k) f_out[k] += w[i] * f[k];
        }
        for (int k = 0; k < m; ++k) f_out[k] /= denom;
      }
      const T g_density = has_density ? d_density[pix] / T(n) : T(0);
      double ds1 = 0.0, ds2 = 0.0;
      for (int i = 0; i < n; ++i) {
        T dw = g_density;
        if (has_interp) {
          const T* f = features.data() + static_cast<std::size_t>(i) * m;
          T acc = T(0);
          for (int k = 0; k < m; ++k) acc += g[k] * (f[k] - f_out[k]);
          dw += acc / denom;
          const T coef = w[i] / denom;
          T* df = dfeat + static_cast<std::size_t>(i) * m;
          for (int k = 0; k < m; ++k) df[k] += coef * g[k];
        }
        // d w / d sigma_j = w * delta_j^2 / sigma_j^2
        const T dx = static_cast<T>(p.x - locations[i].x);
        const T dy = static_cast<T>(p.y - locations[i].y);
        ds1 += static_cast<double>(dw * w[i] * dx * dx / (s1 * s1));
        ds2 += static_cast<double>(dw * w[i] * dy * dy / (s2 * s2));
      }
      if (adaptive) {
        grads.d_raw[pix * 2] = T(ds1) * logistic(bandwidth.adaptive_map[pix * 2]);
        grads.d_raw[pix * 2 + 1] = T(ds2) * logistic(bandwidth.adaptive_map[pix * 2 + 1]);
      } else {
        row_dsigma[r * 2] += ds1;
        row_dsigma[r * 2 + 1] += ds2;
      }
    }
  });

  if (has_interp) {
    grads.d_features = Tensor<T>({n, m});
    for (int r = 0; r < grid.height; ++r) {
      const T* src = row_dfeat.data() + r * feat_len;
      for (std::size_t j = 0; j < feat_len; ++j) grads.d_features[j] += src[j];
    }
  }
  if (!adaptive) {
    double s1 = 0.0, s2 = 0.0;
    for (int r = 0; r < grid.height; ++r) {
      s1 += row_dsigma[r * 2];
      s2 += row_dsigma[r * 2 + 1];
    }
    grads.d_raw = Tensor<T>({2});
    grads.d_raw[0] = T(s1) * logistic(bandwidth.uniform_raw[0]);
    grads.d_raw[1] = T(s2) * logistic(bandwidth.uniform_raw[1]);
  }
  return grads;
}

// ---- panorama encoder ---------------------------------------------------------

template <typename T>
void PanoramaEncoder<T>::init_params(ModelParams<T>& params, const PanoramaEncoderDims& d,
                                     Rng& rng) {
  params.add("ground.enc.w", he_normal<T>({d.cutout_dim, d.enc_dim}, d.cutout_dim, rng));
  params.add("ground.enc.b", Tensor<T>({d.enc_dim}), false);
  params.add("ground.reduce.w",
             he_normal<T>({kNumCutouts * d.enc_dim, d.out_dim}, kNumCutouts * d.enc_dim, rng));
  params.add("ground.reduce.b", Tensor<T>({d.out_dim}), false);
}

template <typename T>
Tensor<T> PanoramaEncoder<T>::forward(const ModelParams<T>& params,
                                      const std::vector<const GroundObservation*>& observations,
                                      const std::vector<int>& shifts, Cache* cache) {
  const auto& enc_w = params.get("ground.enc.w").value;
  const int n = static_cast<int>(observations.size());
  const int cut = enc_w.dim(0), enc = enc_w.dim(1);
  if (!shifts.empty() && shifts.size() != observations.size()) {
    throw ShapeError("PanoramaEncoder: one shift per observation required");
  }
  Tensor<T> input({kNumCutouts * n, cut});
  for (int i = 0; i < n; ++i) {
    const int shift = shifts.empty() ? 0 : shifts[i];
    for (int j = 0; j < kNumCutouts; ++j) {
      const auto& block = observations[i]->cutouts[((j + shift) % kNumCutouts + kNumCutouts) %
                                                   kNumCutouts];
      if (static_cast<int>(block.size()) != cut) {
        throw ShapeError("PanoramaEncoder: cutout length " + std::to_string(block.size()) +
                         " but encoder expects " + std::to_string(cut));
      }
      std::copy(block.begin(), block.end(), input.data() + (static_cast<std::size_t>(i) * 4 + j) * cut);
    }
  }
  Tensor<T> pre = linear(input, enc_w, params.get("ground.enc.b").value);
  // Rows 4i..4i+3 are observation i's cutouts, so the row-major buffer is
  // already the per-observation concatenation.
  Tensor<T> concat = leaky_relu(pre).reshaped({n, kNumCutouts * enc});
  Tensor<T> out = linear(concat, params.get("ground.reduce.w").value,
                         params.get("ground.reduce.b").value);
  if (cache) {
    cache->input = std::move(input);
    cache->pre_act = std::move(pre);
    cache->concat = std::move(concat);
  }
  return out;
}

template <typename T>
void PanoramaEncoder<T>::backward(ModelParams<T>& params, const Cache& cache,
                                  const Tensor<T>& d_out) {
  auto& reduce_w = params.get("ground.reduce.w");
  auto& reduce_b = params.get("ground.reduce.b");
  auto& enc_w = params.get("ground.enc.w");
  auto& enc_b = params.get("ground.enc.b");
  auto g2 = linear_backward(cache.concat, reduce_w.value, true, d_out);
  reduce_w.grad += g2.dw;
  reduce_b.grad += g2.db;
  Tensor<T> d_act = g2.dx.reshaped(cache.pre_act.shape());
  Tensor<T> d_pre = leaky_relu_backward(cache.pre_act, d_act);
  auto g1 = linear_backward(cache.input, enc_w.value, true, d_pre);
  enc_w.grad += g1.dw;
  enc_b.grad += g1.db;
}

template <typename T>
std::vector<T> panorama_feature(const ModelParams<T>& params, const GroundObservation& obs,
                                int shift) {
  const Tensor<T> out = PanoramaEncoder<T>::forward(params, {&obs}, {shift}, nullptr);
  return std::vector<T>(out.storage().begin(), out.storage().end());
}

// ---- ground feature map -------------------------------------------------------

template <typename T>
GroundFeatureMap<T> build_ground_map(const ModelParams<T>& params, const PixelGrid& grid,
                                     const std::vector<const GroundObservation*>& observations,
                                     const std::vector<int>& shifts,
                                     const BandwidthField<T>& bandwidth,
                                     std::type_identity_t<GroundMapCache<T>>* cache) {
  if (observations.empty()) throw ConfigError("build_ground_map: no observations");
  typename PanoramaEncoder<T>::Cache enc_cache;
  Tensor<T> feats = PanoramaEncoder<T>::forward(params, observations, shifts,
                                                cache ? &enc_cache : nullptr);
  std::vector<GeoPoint> locations;
  locations.reserve(observations.size());
  for (const auto* o : observations) locations.push_back(o->location);

  GroundFeatureMap<T> map;
  map.features = interpolate(feats, locations, grid, bandwidth);
  map.density = density<T>(locations, grid, bandwidth);
  map.combined = concat_channels<T>({&map.features, &map.density});
  if (cache) {
    cache->encoder = std::move(enc_cache);
    cache->obs_features = std::move(feats);
    cache->locations = std::move(locations);
    cache->grid = grid;
    cache->bandwidth = bandwidth;
  }
  return map;
}

template <typename T>
Tensor<T> build_ground_map_backward(ModelParams<T>& params, const GroundMapCache<T>& cache,
                                    const Tensor<T>& d_combined) {
  const int m = cache.obs_features.dim(1);
  auto parts = split_channels(d_combined, {m, 1});
  KernelFieldGrads<T> kg = kernel_field_backward(cache.obs_features, cache.locations, cache.grid,
                                                 cache.bandwidth, parts[0], parts[1]);
  PanoramaEncoder<T>::backward(params, cache.encoder, kg.d_features);
  return std::move(kg.d_raw);
}

#define GEOFUSE_INSTANTIATE_KF(T)                                                             \
  template Tensor<T> interpolate(const Tensor<T>&, std::span<const GeoPoint>,                \
                                 const PixelGrid&, const BandwidthField<T>&, double);         \
  template Tensor<T> density(std::span<const GeoPoint>, const PixelGrid&,                    \
                             const BandwidthField<T>&);                                       \
  template KernelFieldGrads<T> kernel_field_backward(                                         \
      const Tensor<T>&, std::span<const GeoPoint>, const PixelGrid&,                         \
      const BandwidthField<T>&, const Tensor<T>&, const Tensor<T>&, double);                 \
  template class PanoramaEncoder<T>;                                                          \
  template std::vector<T> panorama_feature(const ModelParams<T>&, const GroundObservation&,   \
                                           int);                                              \
  template GroundFeatureMap<T> build_ground_map(                                              \
      const ModelParams<T>&, const PixelGrid&, const std::vector<const GroundObservation*>&,  \
      const std::vector<int>&, const BandwidthField<T>&, std::type_identity_t<GroundMapCache<T>>*);                 \
  template Tensor<T> build_ground_map_backward(ModelParams<T>&, const GroundMapCache<T>&,    \
                                               const Tensor<T>&);

GEOFUSE_INSTANTIATE_KF(float)
GEOFUSE_INSTANTIATE_KF(double)

}  // namespace geofuse
