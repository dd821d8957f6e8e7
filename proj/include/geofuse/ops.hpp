#pragma once

#include <set>
#include <type_traits>
#include <vector>

#include "geofuse/params.hpp"
#include "geofuse/tensor.hpp"

// Differentiable primitives. Each forward op has a matching *_backward that
// returns the vector-Jacobian product for an output cotangent `dy`.
// Feature maps are [B, H, W, C] or [H, W, C]; outputs keep the input rank.

namespace geofuse {

// ---- convolution ----------------------------------------------------------

template <typename T>
struct ConvGrads {
  Tensor<T> dx;
  Tensor<T> dw;
  Tensor<T> db;  // empty when the op ran without bias
};

/// Same-padded (pad = k/2) convolution. Kernel is [k, k, Cin, Cout]; `bias`
/// may be empty. Output spatial dims are ceil(H/stride) x ceil(W/stride).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel,
                 const Tensor<T>& bias, int stride);

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel,
                             bool has_bias, int stride, const Tensor<T>& dy);

/// Transposed convolution with a [k, k, Cin, Cout] kernel, padding k/2 and
/// output padding stride-1; with k = 3 and stride 2 it doubles each spatial
/// dim. It is the adjoint of conv2d at the doubled resolution.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& kernel,
                           const Tensor<T>& bias, int stride);

template <typename T>
ConvGrads<T> conv_transpose2d_backward(const Tensor<T>& x,
                                       const Tensor<T>& kernel, bool has_bias,
                                       int stride, const Tensor<T>& dy);

// ---- pooling and resizing -------------------------------------------------

/// Average pooling; zero padding counts toward the divisor.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int kernel, int stride, int pad);

template <typename T>
Tensor<T> avg_pool2d_backward(const Shape& x_shape, int kernel, int stride,
                              int pad, const Tensor<T>& dy);

template <typename T>
struct MaxPoolResult {
  Tensor<T> out;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

/// 2x2 / stride 2 max pooling. Ties go to the first element in row-major
/// window order.
template <typename T>
MaxPoolResult<T> max_pool2d(const Tensor<T>& x);

template <typename T>
Tensor<T> max_pool2d_backward(const Shape& x_shape,
                              const std::vector<std::size_t>& argmax,
                              const Tensor<T>& dy);

/// Source coordinate and blend weights for resizing one axis with
/// half-pixel centers: src = (dst + 0.5) * in / out - 0.5, clamped.
struct ResizeTap {
  int lo = 0;
  int hi = 0;
  double frac = 0.0;  // weight of `hi`
};
std::vector<ResizeTap> resize_taps(int in_size, int out_size);

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int out_h, int out_w);

template <typename T>
Tensor<T> bilinear_resize_backward(const Shape& x_shape, const Tensor<T>& dy);

// ---- pointwise ------------------------------------------------------------

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T alpha = T(0.2));

/// Gates on the forward input `x`.
template <typename T>
Tensor<T> leaky_relu_backward(const Tensor<T>& x, const Tensor<T>& dy,
                              T alpha = T(0.2));

template <typename T>
T softplus(T x);

template <typename T>
T logistic(T x);

template <typename T>
Tensor<T> softplus(const Tensor<T>& x);

template <typename T>
Tensor<T> softplus_backward(const Tensor<T>& x, const Tensor<T>& dy);

// ---- batch normalization --------------------------------------------------

enum class Mode { kTrain, kInfer };

template <typename T>
struct BatchNormCache {
  Tensor<T> xhat;           // normalized input
  std::vector<T> inv_std;   // per channel
  Mode mode = Mode::kTrain;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormDecay = 0.99;

/// Per-channel normalization over every leading dim (batch and spatial).
/// Train mode uses batch statistics (biased variance) and folds them into
/// the moving statistics with `decay`; infer mode uses the moving stats.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, Tensor<T>& moving_mean,
                     Tensor<T>& moving_var, Mode mode,
                     std::type_identity_t<BatchNormCache<T>>* cache = nullptr,
                     double decay = kBatchNormDecay,
                     double eps = kBatchNormEps);

template <typename T>
struct BatchNormGrads {
  Tensor<T> dx;
  Tensor<T> dgamma;
  Tensor<T> dbeta;
};

template <typename T>
BatchNormGrads<T> batch_norm_backward(const BatchNormCache<T>& cache,
                                      const Tensor<T>& gamma,
                                      const Tensor<T>& dy);

// ---- dense ----------------------------------------------------------------

/// x [P, D] times weight [D, O] plus bias [O] (bias may be empty).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias);

template <typename T>
struct LinearGrads {
  Tensor<T> dx;
  Tensor<T> dw;
  Tensor<T> db;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& weight,
                               bool has_bias, const Tensor<T>& dy);

/// Channel concatenation of maps sharing every leading dim.
template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts);

/// Splits a channel-concatenated cotangent back into parts with the given
/// channel counts.
template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& dy,
                                      const std::vector<int>& channels);

// ---- loss -----------------------------------------------------------------

template <typename T>
struct LossResult {
  T loss = T(0);
  Tensor<T> dlogits;  // gradient of the mean loss
  int counted = 0;    // pixels that were not ignored
};

/// Mean softmax cross entropy over pixels whose label is not in `ignore`.
/// Throws EmptyBatchError when every pixel is ignored.
template <typename T>
LossResult<T> cross_entropy_ignore(const Tensor<T>& logits,
                                   const std::vector<int>& labels,
                                   const std::set<int>& ignore);

// ---- optimization ---------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// One bias-corrected ADAM step over every parameter. Weight decay is added
/// to the gradient (g + wd * theta) for parameters flagged `decay`.
/// Throws NumericError naming the first parameter with a non-finite
/// gradient; in that case no parameter is modified.
template <typename T>
void adam_step(ModelParams<T>& params, const AdamConfig& config);

/// lr0 * 0.5^floor(step / interval).
double step_decay_lr(double lr0, long step, long interval);

}  // namespace geofuse
