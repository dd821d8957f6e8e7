#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "geofuse/kernel_field.hpp"
#include "geofuse/ops.hpp"
#include "geofuse/params.hpp"
#include "geofuse/tensor.hpp"

namespace geofuse {

enum class Variant { kRandom, kRemote, kProximate, kGrid, kUnifiedUniform, kUnifiedAdaptive };

std::string variant_name(Variant v);
Variant parse_variant(const std::string& name);
const std::vector<Variant>& all_variants();

bool uses_overhead(Variant v);
bool uses_ground(Variant v);
/// Variants whose conv4/conv5 groups consume the pooled ground map.
bool uses_fusion(Variant v);

struct NetworkConfig {
  Variant variant = Variant::kUnifiedAdaptive;
  int input_size = 64;  // H = W
  std::array<int, 5> channels{8, 16, 32, 64, 128};
  std::array<int, 5> layers{2, 2, 3, 3, 3};
  int fusion_group = 3;  // ground map joins after this group's last layer
  int num_classes = 4;   // K, including background and unknown
  int ground_dim = 8;    // m
  int cutout_dim = 8;
  int ground_enc_dim = 8;
  int n_nearest = 20;
  std::array<int, 2> mlp_hidden{64, 64};
  std::array<int, 3> head_dims{16, 8, 2};
  int fusion_kernel = 6;
  int fusion_pad = 1;
  double bandwidth_init = 1.0;  // raw (pre-softplus) uniform bandwidth
  double head_bias_init = 1.0;  // raw bias of the last transpose conv
  bool head_grad_to_trunk = true;
  double leaky_alpha = 0.2;

  /// Full-scale dimensions: 256 input, channels 32..512, m = 50, MLP 512/512.
  static NetworkConfig full_scale(Variant v, int num_classes);

  /// With no ground observations the fusion variants degrade to `remote`.
  Variant effective_variant() const;
  int fusion_size() const { return input_size / 8; }
  int fusion_stride() const { return 8; }
  int ground_channels() const { return ground_dim + 1; }
  /// Input channels of conv4_1.
  int fusion_input_channels() const;
  void validate() const;
};

/// Length of the per-pixel hypercolumn fed to the MLP.
int hypercolumn_length(const NetworkConfig& config);
/// Output shape of avg-pooling the [H, W, m+1] ground map to conv3_3 resolution.
Shape pooled_ground_shape(const NetworkConfig& config);

/// Layer names "conv{g}_{l}" in forward order.
std::vector<std::string> conv_layer_names(const NetworkConfig& config);

/// Parameters and batch-norm buffers for the configured variant. Every
/// tensor draws from its own stream derived from (seed, name), so shared
/// layers get identical values across variants.
template <typename T>
ModelParams<T> init_network(const NetworkConfig& config, std::uint64_t seed);

// ---- building blocks ------------------------------------------------------

template <typename T>
struct ConvLayerCache {
  Tensor<T> input;
  BatchNormCache<T> bn;
  Tensor<T> normalized;  // batch-norm output, pre-activation
  int stride = 1;
};

/// conv (no bias) -> batch norm -> leaky ReLU under the parameter prefix.
template <typename T>
Tensor<T> conv_bn_act(ModelParams<T>& params, const std::string& prefix, const Tensor<T>& x,
                      int stride, Mode mode, double alpha, std::type_identity_t<ConvLayerCache<T>>* cache);

template <typename T>
Tensor<T> conv_bn_act_backward(ModelParams<T>& params, const std::string& prefix,
                               const ConvLayerCache<T>& cache, double alpha, const Tensor<T>& dy);

template <typename T>
struct BackboneCache {
  std::vector<ConvLayerCache<T>> layers;
  std::vector<std::string> layer_names;
  std::vector<MaxPoolResult<T>> pools;
  std::vector<Shape> pool_inputs;
  int first_group = 1;
};

/// Groups [first, last] of the backbone on a [B, h, w, C] batch. Returns the
/// last-layer output of every group in range; a 2x2 max pool follows groups
/// 1 and 2, and conv3_1 has stride 2.
template <typename T>
std::vector<Tensor<T>> backbone_groups(const NetworkConfig& config, ModelParams<T>& params,
                                       const Tensor<T>& x, int first, int last, Mode mode,
                                       std::type_identity_t<BackboneCache<T>>* cache);

/// Backpropagates cotangents on each group output (same order as the
/// forward result; empty entries count as zero) and returns d input.
template <typename T>
Tensor<T> backbone_groups_backward(const NetworkConfig& config, ModelParams<T>& params,
                                   const BackboneCache<T>& cache,
                                   std::vector<Tensor<T>> d_outputs);

/// Backbone taps in hypercolumn order: conv1_2, conv2_2, conv3_3, conv4_3,
/// conv5_3 (grid variant: conv4_3, conv5_3 only).
template <typename T>
struct BackboneResult {
  std::vector<Tensor<T>> taps;
  Tensor<T> trunk_output;   // conv3_3, shared with the adaptive head
  Tensor<T> pooled_ground;  // [B, H/8, W/8, m+1] for fusion variants
  Shape ground_shape;
  BackboneCache<T> trunk;   // groups 1-3
  BackboneCache<T> upper;   // groups 4-5
};

/// Groups 1-3 on the stacked overhead batch [B, H, W, 3].
template <typename T>
void backbone_trunk(const NetworkConfig& config, ModelParams<T>& params,
                    const Tensor<T>& overhead, Mode mode, BackboneResult<T>& result);

/// Pools the stacked ground map [B, H, W, m+1] to conv3_3 resolution,
/// concatenates it with the trunk output (grid: uses it alone) and runs
/// groups 4-5.
template <typename T>
void backbone_upper(const NetworkConfig& config, ModelParams<T>& params,
                    const Tensor<T>& ground_maps, Mode mode, BackboneResult<T>& result);

/// backbone_trunk followed by backbone_upper. Throws ConfigError when a
/// fusion variant is given no ground map.
template <typename T>
BackboneResult<T> backbone_forward(const NetworkConfig& config, ModelParams<T>& params,
                                   const Tensor<T>& overhead, const Tensor<T>& ground_maps,
                                   Mode mode);

template <typename T>
struct UpperGrads {
  Tensor<T> d_trunk;   // empty for grid
  Tensor<T> d_ground;  // [B, H, W, m+1]; empty without fusion
};

/// Backward through groups 4-5 and the fusion pooling from cotangents on
/// the conv4_3 and conv5_3 taps.
template <typename T>
UpperGrads<T> backbone_upper_backward(const NetworkConfig& config, ModelParams<T>& params,
                                      const BackboneResult<T>& result, const Tensor<T>& d_conv4,
                                      const Tensor<T>& d_conv5);

/// Backward through groups 1-3. `d_trunk` is the total extra cotangent on
/// conv3_3 beyond its tap (from groups 4-5 and the adaptive head).
template <typename T>
void backbone_trunk_backward(const NetworkConfig& config, ModelParams<T>& params,
                             const BackboneResult<T>& result, const Tensor<T>& d_conv1,
                             const Tensor<T>& d_conv2, const Tensor<T>& d_conv3,
                             const Tensor<T>& d_trunk);

template <typename T>
struct AdaptiveHeadCache {
  Tensor<T> input;
  std::array<Tensor<T>, 3> stage_in;
  std::array<Tensor<T>, 2> pre_act;
};

/// Three stride-2 transpose convolutions from conv3_3 resolution to the full
/// [B, H, W, 2] pre-softplus bandwidth map.
template <typename T>
Tensor<T> adaptive_head(const NetworkConfig& config, const ModelParams<T>& params,
                        const Tensor<T>& trunk, std::type_identity_t<AdaptiveHeadCache<T>>* cache);

template <typename T>
Tensor<T> adaptive_head_backward(const NetworkConfig& config, ModelParams<T>& params,
                                 const AdaptiveHeadCache<T>& cache, const Tensor<T>& d_raw);

/// Samples every map (bilinearly resized to H x W) at the requested pixels.
/// `pixels[b]` lists flat indices r * W + c for scene b; rows of the result
/// are ordered scene-major. Only the sampled values are computed.
template <typename T>
Tensor<T> extract_hypercolumn(const std::vector<const Tensor<T>*>& maps,
                              const std::vector<std::vector<int>>& pixels, int out_h, int out_w);

template <typename T>
std::vector<Tensor<T>> extract_hypercolumn_backward(const std::vector<Shape>& map_shapes,
                                                    const std::vector<std::vector<int>>& pixels,
                                                    int out_h, int out_w, const Tensor<T>& dh);

template <typename T>
struct MlpCache {
  Tensor<T> input;
  std::array<Tensor<T>, 2> hidden_in;  // inputs to fc2, out
  std::array<BatchNormCache<T>, 2> bn;
  std::array<Tensor<T>, 2> normalized;
};

/// fc1 -> BN -> leaky, fc2 -> BN -> leaky, out (+bias). Batch norm runs over
/// every sampled pixel of the batch.
template <typename T>
Tensor<T> mlp_head(const NetworkConfig& config, ModelParams<T>& params, const Tensor<T>& h,
                   Mode mode, std::type_identity_t<MlpCache<T>>* cache);

template <typename T>
Tensor<T> mlp_head_backward(const NetworkConfig& config, ModelParams<T>& params,
                            const MlpCache<T>& cache, const Tensor<T>& d_logits);

// ---- whole model ----------------------------------------------------------

/// One training or evaluation example.
template <typename T>
struct Scene {
  Tensor<T> overhead;  // [H, W, 3]
  PixelGrid grid;
  std::vector<const GroundObservation*> observations;
  std::vector<int> shifts;  // optional cutout rotation per observation
};

template <typename T>
struct ModelCache {
  Tensor<T> overhead;  // stacked [B, H, W, 3]
  std::vector<std::vector<int>> pixels;
  BackboneResult<T> backbone;
  AdaptiveHeadCache<T> head;
  Tensor<T> head_raw;  // [B, H, W, 2]
  std::vector<GroundMapCache<T>> ground;
  Tensor<T> ground_maps;  // [B, H, W, m+1]
  std::vector<Shape> hyper_shapes;
  MlpCache<T> mlp;
  Variant variant = Variant::kRemote;
};

template <typename T>
struct ModelOutput {
  Tensor<T> logits;     // [sum_b |pixels[b]|, K]
  Tensor<T> bandwidth;  // adaptive only: softplus sigma map [B, H, W, 2]
};

/// Full forward pass. Not valid for the random variant.
template <typename T>
ModelOutput<T> model_forward(const NetworkConfig& config, ModelParams<T>& params,
                             const std::vector<Scene<T>>& scenes,
                             const std::vector<std::vector<int>>& pixels, Mode mode,
                             std::type_identity_t<ModelCache<T>>* cache);

/// Accumulates every parameter gradient for a cotangent on the logits.
template <typename T>
void model_backward(const NetworkConfig& config, ModelParams<T>& params,
                    const ModelCache<T>& cache, const Tensor<T>& d_logits);

/// The random baseline: log-prior logits and labels drawn from the prior.
Tensor<float> prior_logits(const std::vector<double>& prior, int pixels);
std::vector<int> sample_from_prior(const std::vector<double>& prior, int pixels, Rng& rng);

}  // namespace geofuse
