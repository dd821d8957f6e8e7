#include "geofuse/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>

#include "geofuse/parallel.hpp"

namespace geofuse {

namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapMat = Eigen::Map<const MatRM<T>>;

struct MapDims {
  int b, h, w, c;
};

MapDims map_dims(const Shape& s, const char* op) {
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  throw ShapeError(std::string(op) + ": expected [B,H,W,C] or [H,W,C], got " +
                   shape_str(s));
}

Shape make_map_shape(const Shape& like, int b, int h, int w, int c) {
  if (like.size() == 3) return {h, w, c};
  return {b, h, w, c};
}

// Geometry of a same-padded convolution from an (h, w) input.
struct ConvGeom {
  int b, h, w, cin, oh, ow, k, stride, pad;
  int patch() const { return k * k * cin; }
  int rows_per_image() const { return oh * ow; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const int patch = g.patch();
  for (int oy = 0; oy < g.oh; ++oy) {
    for (int ox = 0; ox < g.ow; ++ox) {
      T* dst = cols + static_cast<std::size_t>(oy * g.ow + ox) * patch;
      for (int ky = 0; ky < g.k; ++ky) {
        const int iy = oy * g.stride - g.pad + ky;
        for (int kx = 0; kx < g.k; ++kx) {
          const int ix = ox * g.stride - g.pad + kx;
          T* d = dst + (ky * g.k + kx) * g.cin;
          if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) {
            std::fill(d, d + g.cin, T(0));
          } else {
            std::memcpy(d, x + (static_cast<std::size_t>(iy) * g.w + ix) * g.cin,
                        sizeof(T) * g.cin);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates patch columns back onto the image.
template <typename T>
void col2im(const T* cols, const ConvGeom& g, T* x) {
  const int patch = g.patch();
  for (int oy = 0; oy < g.oh; ++oy) {
    for (int ox = 0; ox < g.ow; ++ox) {
      const T* src = cols + static_cast<std::size_t>(oy * g.ow + ox) * patch;
      for (int ky = 0; ky < g.k; ++ky) {
        const int iy = oy * g.stride - g.pad + ky;
        if (iy < 0 || iy >= g.h) continue;
        for (int kx = 0; kx < g.k; ++kx) {
          const int ix = ox * g.stride - g.pad + kx;
          if (ix < 0 || ix >= g.w) continue;
          const T* s = src + (ky * g.k + kx) * g.cin;
          T* d = x + (static_cast<std::size_t>(iy) * g.w + ix) * g.cin;
          for (int c = 0; c < g.cin; ++c) d[c] += s[c];
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1; }

// Patch matrix for a whole batch: [B*oh*ow, k*k*cin].
template <typename T>
std::vector<T> batch_im2col(const T* x, const ConvGeom& g) {
  const std::size_t rows = g.rows_per_image();
  const std::size_t in_img = static_cast<std::size_t>(g.h) * g.w * g.cin;
  std::vector<T> cols(static_cast<std::size_t>(g.b) * rows * g.patch());
  parallel_for(g.b, [&](int i) {
    im2col(x + i * in_img, g, cols.data() + i * rows * g.patch());
  });
  return cols;
}

template <typename T>
void batch_col2im(const T* cols, const ConvGeom& g, T* x) {
  const std::size_t rows = g.rows_per_image();
  const std::size_t in_img = static_cast<std::size_t>(g.h) * g.w * g.cin;
  parallel_for(g.b, [&](int i) {
    col2im(cols + i * rows * g.patch(), g, x + i * in_img);
  });
}

void check_kernel(const Shape& ks, int cin, const char* op) {
  if (ks.size() != 4 || ks[0] != ks[1] || ks[0] % 2 == 0) {
    throw ShapeError(std::string(op) + ": kernel must be [k,k,Cin,Cout] with odd k, got " +
                     shape_str(ks));
  }
  if (ks[2] != cin) {
    throw ShapeError(std::string(op) + ": input has " + std::to_string(cin) +
                     " channels but kernel expects " + std::to_string(ks[2]));
  }
}

template <typename T>
void add_bias_rows(T* y, std::size_t rows, const Tensor<T>& bias) {
  const int c = static_cast<int>(bias.size());
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = y + r * c;
    for (int j = 0; j < c; ++j) row[j] += bias[j];
  }
}

template <typename T>
Tensor<T> column_sums(const T* y, std::size_t rows, int c) {
  std::vector<double> acc(c, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = y + r * c;
    for (int j = 0; j < c; ++j) acc[j] += row[j];
  }
  return Tensor<T>({c}, std::vector<T>(acc.begin(), acc.end()));
}

}  // namespace

// ---- conv2d -----------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel,
                 const Tensor<T>& bias, int stride) {
  const MapDims d = map_dims(x.shape(), "conv2d");
  check_kernel(kernel.shape(), d.c, "conv2d");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  const int k = kernel.dim(0);
  const int cout = kernel.dim(3);
  if (!bias.empty() && bias.size() != static_cast<std::size_t>(cout)) {
    throw ShapeError("conv2d: bias length does not match output channels");
  }
  const ConvGeom g{d.b, d.h, d.w, d.c, (d.h + stride - 1) / stride,
                   (d.w + stride - 1) / stride, k, stride, k / 2};
  const std::size_t rows = static_cast<std::size_t>(g.b) * g.rows_per_image();
  Tensor<T> y(make_map_shape(x.shape(), g.b, g.oh, g.ow, cout));
  CMapMat<T> w(kernel.data(), g.patch(), cout);
  MapMat<T> out(y.data(), rows, cout);
  if (is_pointwise(g)) {
    out.noalias() = CMapMat<T>(x.data(), rows, g.patch()) * w;
  } else {
    const std::vector<T> cols = batch_im2col(x.data(), g);
    out.noalias() = CMapMat<T>(cols.data(), rows, g.patch()) * w;
  }
  if (!bias.empty()) add_bias_rows(y.data(), rows, bias);
  require_finite(y, "conv2d");
  return y;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel,
                             bool has_bias, int stride, const Tensor<T>& dy) {
  const MapDims d = map_dims(x.shape(), "conv2d_backward");
  check_kernel(kernel.shape(), d.c, "conv2d_backward");
  const int k = kernel.dim(0);
  const int cout = kernel.dim(3);
  const ConvGeom g{d.b, d.h, d.w, d.c, (d.h + stride - 1) / stride,
                   (d.w + stride - 1) / stride, k, stride, k / 2};
  const std::size_t rows = static_cast<std::size_t>(g.b) * g.rows_per_image();
  if (dy.size() != rows * cout) throw ShapeError("conv2d_backward: dy shape mismatch");

  ConvGrads<T> grads;
  grads.dx = Tensor<T>(x.shape());
  grads.dw = Tensor<T>(kernel.shape());
  CMapMat<T> w(kernel.data(), g.patch(), cout);
  CMapMat<T> gy(dy.data(), rows, cout);
  MapMat<T> gw(grads.dw.data(), g.patch(), cout);
  if (is_pointwise(g)) {
    CMapMat<T> cols(x.data(), rows, g.patch());
    gw.noalias() = cols.transpose() * gy;
    MapMat<T>(grads.dx.data(), rows, g.patch()).noalias() = gy * w.transpose();
  } else {
    const std::vector<T> cols = batch_im2col(x.data(), g);
    gw.noalias() = CMapMat<T>(cols.data(), rows, g.patch()).transpose() * gy;
    std::vector<T> dcols(cols.size());
    MapMat<T>(dcols.data(), rows, g.patch()).noalias() = gy * w.transpose();
    batch_col2im(dcols.data(), g, grads.dx.data());
  }
  if (has_bias) grads.db = column_sums(dy.data(), rows, cout);
  return grads;
}

// ---- conv_transpose2d -------------------------------------------------------
//
// Forward scatters x[i] * W into out[i * stride - pad + ky]; this is the
// adjoint of a stride-s conv2d whose input is the transposed output.

namespace {

// [Cin, k*k*Cout] view of a [k, k, Cin, Cout] kernel.
template <typename T>
std::vector<T> transpose_kernel_matrix(const Tensor<T>& kernel) {
  const int k = kernel.dim(0), cin = kernel.dim(2), cout = kernel.dim(3);
  std::vector<T> m(static_cast<std::size_t>(cin) * k * k * cout);
  for (int kk = 0; kk < k * k; ++kk)
    for (int ci = 0; ci < cin; ++ci)
      for (int co = 0; co < cout; ++co)
        m[(static_cast<std::size_t>(ci) * k * k + kk) * cout + co] =
            kernel[(static_cast<std::size_t>(kk) * cin + ci) * cout + co];
  return m;
}

}  // namespace

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& kernel,
                           const Tensor<T>& bias, int stride) {
  const MapDims d = map_dims(x.shape(), "conv_transpose2d");
  check_kernel(kernel.shape(), d.c, "conv_transpose2d");
  if (stride < 1) throw ShapeError("conv_transpose2d: stride must be >= 1");
  const int k = kernel.dim(0);
  const int cout = kernel.dim(3);
  if (!bias.empty() && bias.size() != static_cast<std::size_t>(cout)) {
    throw ShapeError("conv_transpose2d: bias length does not match output channels");
  }
  // Conv geometry of the adjoint convolution (its input is our output).
  const ConvGeom g{d.b, d.h * stride, d.w * stride, cout, d.h, d.w, k, stride, k / 2};
  const std::size_t rows = static_cast<std::size_t>(d.b) * d.h * d.w;
  const std::vector<T> wm = transpose_kernel_matrix(kernel);
  std::vector<T> cols(rows * g.patch());
  MapMat<T>(cols.data(), rows, g.patch()).noalias() =
      CMapMat<T>(x.data(), rows, d.c) * CMapMat<T>(wm.data(), d.c, g.patch());
  Tensor<T> y(make_map_shape(x.shape(), d.b, g.h, g.w, cout));
  batch_col2im(cols.data(), g, y.data());
  if (!bias.empty()) {
    add_bias_rows(y.data(), static_cast<std::size_t>(d.b) * g.h * g.w, bias);
  }
  require_finite(y, "conv_transpose2d");
  return y;
}

template <typename T>
ConvGrads<T> conv_transpose2d_backward(const Tensor<T>& x,
                                       const Tensor<T>& kernel, bool has_bias,
                                       int stride, const Tensor<T>& dy) {
  const MapDims d = map_dims(x.shape(), "conv_transpose2d_backward");
  check_kernel(kernel.shape(), d.c, "conv_transpose2d_backward");
  const int k = kernel.dim(0), cin = d.c, cout = kernel.dim(3);
  const ConvGeom g{d.b, d.h * stride, d.w * stride, cout, d.h, d.w, k, stride, k / 2};
  const std::size_t rows = static_cast<std::size_t>(d.b) * d.h * d.w;
  if (dy.size() != static_cast<std::size_t>(d.b) * g.h * g.w * cout) {
    throw ShapeError("conv_transpose2d_backward: dy shape mismatch");
  }
  const std::vector<T> wm = transpose_kernel_matrix(kernel);
  const std::vector<T> dcols = batch_im2col(dy.data(), g);
  CMapMat<T> gc(dcols.data(), rows, g.patch());

  ConvGrads<T> grads;
  grads.dx = Tensor<T>(x.shape());
  MapMat<T>(grads.dx.data(), rows, cin).noalias() =
      gc * CMapMat<T>(wm.data(), cin, g.patch()).transpose();
  std::vector<T> dwm(wm.size());
  MapMat<T>(dwm.data(), cin, g.patch()).noalias() =
      CMapMat<T>(x.data(), rows, cin).transpose() * gc;
  grads.dw = Tensor<T>(kernel.shape());
  for (int kk = 0; kk < k * k; ++kk)
    for (int ci = 0; ci < cin; ++ci)
      for (int co = 0; co < cout; ++co)
        grads.dw[(static_cast<std::size_t>(kk) * cin + ci) * cout + co] =
            dwm[(static_cast<std::size_t>(ci) * k * k + kk) * cout + co];
  if (has_bias) {
    grads.db = column_sums(dy.data(), static_cast<std::size_t>(d.b) * g.h * g.w, cout);
  }
  return grads;
}

// ---- pooling ------------------------------------------------------------------

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int kernel, int stride, int pad) {
  const MapDims d = map_dims(x.shape(), "avg_pool2d");
  if (kernel < 1 || stride < 1 || pad < 0) {
    throw ShapeError("avg_pool2d: kernel and stride must be >= 1, pad >= 0");
  }
  const int oh = (d.h + 2 * pad - kernel) / stride + 1;
  const int ow = (d.w + 2 * pad - kernel) / stride + 1;
  if (d.h + 2 * pad < kernel || d.w + 2 * pad < kernel || oh < 1 || ow < 1) {
    throw ShapeError("avg_pool2d: output would be empty for input " +
                     shape_str(x.shape()));
  }
  Tensor<T> y(make_map_shape(x.shape(), d.b, oh, ow, d.c));
  const T inv = T(1) / T(kernel * kernel);
  for (int b = 0; b < d.b; ++b)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        T* out = y.data() + ((static_cast<std::size_t>(b) * oh + oy) * ow + ox) * d.c;
        for (int ky = 0; ky < kernel; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= d.h) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= d.w) continue;
            const T* in = x.data() + ((static_cast<std::size_t>(b) * d.h + iy) * d.w + ix) * d.c;
            for (int c = 0; c < d.c; ++c) out[c] += in[c];
          }
        }
        for (int c = 0; c < d.c; ++c) out[c] *= inv;
      }
  require_finite(y, "avg_pool2d");
  return y;
}

template <typename T>
Tensor<T> avg_pool2d_backward(const Shape& x_shape, int kernel, int stride,
                              int pad, const Tensor<T>& dy) {
  const MapDims d = map_dims(x_shape, "avg_pool2d_backward");
  const int oh = (d.h + 2 * pad - kernel) / stride + 1;
  const int ow = (d.w + 2 * pad - kernel) / stride + 1;
  if (dy.size() != static_cast<std::size_t>(d.b) * oh * ow * d.c) {
    throw ShapeError("avg_pool2d_backward: dy shape mismatch");
  }
  Tensor<T> dx(x_shape);
  const T inv = T(1) / T(kernel * kernel);
  for (int b = 0; b < d.b; ++b)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const T* g = dy.data() + ((static_cast<std::size_t>(b) * oh + oy) * ow + ox) * d.c;
        for (int ky = 0; ky < kernel; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= d.h) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= d.w) continue;
            T* out = dx.data() + ((static_cast<std::size_t>(b) * d.h + iy) * d.w + ix) * d.c;
            for (int c = 0; c < d.c; ++c) out[c] += g[c] * inv;
          }
        }
      }
  return dx;
}

template <typename T>
MaxPoolResult<T> max_pool2d(const Tensor<T>& x) {
  const MapDims d = map_dims(x.shape(), "max_pool2d");
  if (d.h % 2 != 0 || d.w % 2 != 0) {
    throw ShapeError("max_pool2d: spatial dims must be even, got " + shape_str(x.shape()));
  }
  const int oh = d.h / 2, ow = d.w / 2;
  MaxPoolResult<T> r;
  r.out = Tensor<T>(make_map_shape(x.shape(), d.b, oh, ow, d.c));
  r.argmax.resize(r.out.size());
  for (int b = 0; b < d.b; ++b)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox)
        for (int c = 0; c < d.c; ++c) {
          std::size_t best = ((static_cast<std::size_t>(b) * d.h + 2 * oy) * d.w + 2 * ox) * d.c + c;
          for (int ky = 0; ky < 2; ++ky)
            for (int kx = 0; kx < 2; ++kx) {
              const std::size_t idx =
                  ((static_cast<std::size_t>(b) * d.h + 2 * oy + ky) * d.w + 2 * ox + kx) * d.c + c;
              if (x[idx] > x[best]) best = idx;
            }
          const std::size_t o = ((static_cast<std::size_t>(b) * oh + oy) * ow + ox) * d.c + c;
          r.out[o] = x[best];
          r.argmax[o] = best;
        }
  return r;
}

template <typename T>
Tensor<T> max_pool2d_backward(const Shape& x_shape,
                              const std::vector<std::size_t>& argmax,
                              const Tensor<T>& dy) {
  if (dy.size() != argmax.size()) throw ShapeError("max_pool2d_backward: dy shape mismatch");
  Tensor<T> dx(x_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += dy[i];
  return dx;
}

// ---- bilinear resize ----------------------------------------------------------

std::vector<ResizeTap> resize_taps(int in_size, int out_size) {
  std::vector<ResizeTap> taps(out_size);
  const double scale = static_cast<double>(in_size) / out_size;
  for (int o = 0; o < out_size; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    int lo = static_cast<int>(std::floor(src));
    if (lo >= in_size - 1) {
      taps[o] = {in_size - 1, in_size - 1, 0.0};
    } else {
      taps[o] = {lo, lo + 1, src - lo};
    }
  }
  return taps;
}

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int out_h, int out_w) {
  const MapDims d = map_dims(x.shape(), "bilinear_resize");
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: output dims must be >= 1");
  const auto ty = resize_taps(d.h, out_h);
  const auto tx = resize_taps(d.w, out_w);
  Tensor<T> y(make_map_shape(x.shape(), d.b, out_h, out_w, d.c));
  for (int b = 0; b < d.b; ++b)
    for (int oy = 0; oy < out_h; ++oy) {
      const T fy = T(ty[oy].frac);
      for (int ox = 0; ox < out_w; ++ox) {
        const T fx = T(tx[ox].frac);
        auto px = [&](int yy, int xx) {
          return x.data() + ((static_cast<std::size_t>(b) * d.h + yy) * d.w + xx) * d.c;
        };
        const T* a = px(ty[oy].lo, tx[ox].lo);
        const T* bb = px(ty[oy].lo, tx[ox].hi);
        const T* cc = px(ty[oy].hi, tx[ox].lo);
        const T* dd = px(ty[oy].hi, tx[ox].hi);
        T* out = y.data() + ((static_cast<std::size_t>(b) * out_h + oy) * out_w + ox) * d.c;
        for (int c = 0; c < d.c; ++c) {
          const T top = (T(1) - fx) * a[c] + fx * bb[c];
          const T bot = (T(1) - fx) * cc[c] + fx * dd[c];
          out[c] = (T(1) - fy) * top + fy * bot;
        }
      }
    }
  return y;
}

template <typename T>
Tensor<T> bilinear_resize_backward(const Shape& x_shape, const Tensor<T>& dy) {
  const MapDims d = map_dims(x_shape, "bilinear_resize_backward");
  const MapDims o = map_dims(dy.shape(), "bilinear_resize_backward");
  const auto ty = resize_taps(d.h, o.h);
  const auto tx = resize_taps(d.w, o.w);
  Tensor<T> dx(x_shape);
  for (int b = 0; b < d.b; ++b)
    for (int oy = 0; oy < o.h; ++oy) {
      const T fy = T(ty[oy].frac);
      for (int ox = 0; ox < o.w; ++ox) {
        const T fx = T(tx[ox].frac);
        auto px = [&](int yy, int xx) {
          return dx.data() + ((static_cast<std::size_t>(b) * d.h + yy) * d.w + xx) * d.c;
        };
        const T* g = dy.data() + ((static_cast<std::size_t>(b) * o.h + oy) * o.w + ox) * d.c;
        T* a = px(ty[oy].lo, tx[ox].lo);
        T* bb = px(ty[oy].lo, tx[ox].hi);
        T* cc = px(ty[oy].hi, tx[ox].lo);
        T* dd = px(ty[oy].hi, tx[ox].hi);
        for (int c = 0; c < d.c; ++c) {
          a[c] += (T(1) - fy) * (T(1) - fx) * g[c];
          bb[c] += (T(1) - fy) * fx * g[c];
          cc[c] += fy * (T(1) - fx) * g[c];
          dd[c] += fy * fx * g[c];
        }
      }
    }
  return dx;
}

// ---- pointwise ----------------------------------------------------------------

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T alpha) {
  Tensor<T> y = x;
  for (auto& v : y.storage()) v = v >= T(0) ? v : alpha * v;
  return y;
}

template <typename T>
Tensor<T> leaky_relu_backward(const Tensor<T>& x, const Tensor<T>& dy, T alpha) {
  if (!x.same_shape(dy)) throw ShapeError("leaky_relu_backward: shape mismatch");
  Tensor<T> dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i) {
    if (x[i] < T(0)) dx[i] *= alpha;
  }
  return dx;
}

template <typename T>
T softplus(T x) {
  // x + log(1 + e^-x) for positive x keeps exp from overflowing.
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
T logistic(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.storage()) v = softplus(v);
  require_finite(y, "softplus");
  return y;
}

template <typename T>
Tensor<T> softplus_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  if (!x.same_shape(dy)) throw ShapeError("softplus_backward: shape mismatch");
  Tensor<T> dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= logistic(x[i]);
  return dx;
}

// ---- batch norm ---------------------------------------------------------------

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, Tensor<T>& moving_mean,
                     Tensor<T>& moving_var, Mode mode, std::type_identity_t<BatchNormCache<T>>* cache,
                     double decay, double eps) {
  const int c = x.dim(-1);
  if (gamma.size() != static_cast<std::size_t>(c) || beta.size() != gamma.size() ||
      moving_mean.size() != gamma.size() || moving_var.size() != gamma.size()) {
    throw ShapeError("batch_norm: parameter length does not match channels");
  }
  const std::size_t rows = x.size() / c;
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  if (mode == Mode::kTrain) {
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = x.data() + r * c;
      for (int j = 0; j < c; ++j) mean[j] += row[j];
    }
    for (int j = 0; j < c; ++j) mean[j] /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = x.data() + r * c;
      for (int j = 0; j < c; ++j) {
        const double dv = row[j] - mean[j];
        var[j] += dv * dv;
      }
    }
    for (int j = 0; j < c; ++j) {
      var[j] /= static_cast<double>(rows);
      moving_mean[j] = T(decay * moving_mean[j] + (1.0 - decay) * mean[j]);
      moving_var[j] = T(decay * moving_var[j] + (1.0 - decay) * var[j]);
    }
  } else {
    for (int j = 0; j < c; ++j) {
      mean[j] = moving_mean[j];
      var[j] = moving_var[j];
    }
  }
  std::vector<T> inv_std(c), mu(c);
  for (int j = 0; j < c; ++j) {
    inv_std[j] = T(1.0 / std::sqrt(var[j] + eps));
    mu[j] = T(mean[j]);
  }
  Tensor<T> xhat(x.shape());
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * c;
    T* h = xhat.data() + r * c;
    T* out = y.data() + r * c;
    for (int j = 0; j < c; ++j) {
      h[j] = (in[j] - mu[j]) * inv_std[j];
      out[j] = gamma[j] * h[j] + beta[j];
    }
  }
  require_finite(y, "batch_norm");
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->mode = mode;
  }
  return y;
}

template <typename T>
BatchNormGrads<T> batch_norm_backward(const BatchNormCache<T>& cache,
                                      const Tensor<T>& gamma,
                                      const Tensor<T>& dy) {
  const int c = static_cast<int>(gamma.size());
  if (!cache.xhat.same_shape(dy)) throw ShapeError("batch_norm_backward: shape mismatch");
  const std::size_t rows = dy.size() / c;
  std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* g = dy.data() + r * c;
    const T* h = cache.xhat.data() + r * c;
    for (int j = 0; j < c; ++j) {
      sum_dy[j] += g[j];
      sum_dy_xhat[j] += static_cast<double>(g[j]) * h[j];
    }
  }
  BatchNormGrads<T> grads;
  grads.dgamma = Tensor<T>({c}, std::vector<T>(sum_dy_xhat.begin(), sum_dy_xhat.end()));
  grads.dbeta = Tensor<T>({c}, std::vector<T>(sum_dy.begin(), sum_dy.end()));
  grads.dx = Tensor<T>(dy.shape());
  const double n = static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* g = dy.data() + r * c;
    const T* h = cache.xhat.data() + r * c;
    T* out = grads.dx.data() + r * c;
    for (int j = 0; j < c; ++j) {
      if (cache.mode == Mode::kTrain) {
        out[j] = T(gamma[j] * cache.inv_std[j] *
                   (g[j] - sum_dy[j] / n - h[j] * sum_dy_xhat[j] / n));
      } else {
        out[j] = gamma[j] * cache.inv_std[j] * g[j];
      }
    }
  }
  return grads;
}

// ---- linear -------------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(0)) {
    throw ShapeError("linear: cannot apply weight " + shape_str(weight.shape()) +
                     " to input " + shape_str(x.shape()));
  }
  const int p = x.dim(0), dd = x.dim(1), o = weight.dim(1);
  if (!bias.empty() && bias.size() != static_cast<std::size_t>(o)) {
    throw ShapeError("linear: bias length does not match output dim");
  }
  Tensor<T> y({p, o});
  MapMat<T>(y.data(), p, o).noalias() =
      CMapMat<T>(x.data(), p, dd) * CMapMat<T>(weight.data(), dd, o);
  if (!bias.empty()) add_bias_rows(y.data(), p, bias);
  require_finite(y, "linear");
  return y;
}

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& weight,
                               bool has_bias, const Tensor<T>& dy) {
  const int p = x.dim(0), dd = x.dim(1), o = weight.dim(1);
  if (dy.rank() != 2 || dy.dim(0) != p || dy.dim(1) != o) {
    throw ShapeError("linear_backward: dy shape mismatch");
  }
  LinearGrads<T> g;
  g.dx = Tensor<T>({p, dd});
  g.dw = Tensor<T>({dd, o});
  CMapMat<T> gy(dy.data(), p, o);
  MapMat<T>(g.dx.data(), p, dd).noalias() = gy * CMapMat<T>(weight.data(), dd, o).transpose();
  MapMat<T>(g.dw.data(), dd, o).noalias() = CMapMat<T>(x.data(), p, dd).transpose() * gy;
  if (has_bias) g.db = column_sums(dy.data(), p, o);
  return g;
}

// ---- channel concat -----------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  Shape lead = parts[0]->shape();
  lead.pop_back();
  int total = 0;
  for (const auto* p : parts) {
    Shape l = p->shape();
    l.pop_back();
    if (l != lead) throw ShapeError("concat_channels: leading dims differ");
    total += p->dim(-1);
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor<T> y(out_shape);
  const std::size_t rows = shape_size(lead);
  int offset = 0;
  for (const auto* p : parts) {
    const int c = p->dim(-1);
    for (std::size_t r = 0; r < rows; ++r) {
      std::memcpy(y.data() + r * total + offset, p->data() + r * c, sizeof(T) * c);
    }
    offset += c;
  }
  return y;
}

template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& dy, const std::vector<int>& channels) {
  int total = 0;
  for (int c : channels) total += c;
  if (dy.dim(-1) != total) throw ShapeError("split_channels: channel count mismatch");
  Shape lead = dy.shape();
  lead.pop_back();
  const std::size_t rows = shape_size(lead);
  std::vector<Tensor<T>> out;
  int offset = 0;
  for (int c : channels) {
    Shape s = lead;
    s.push_back(c);
    Tensor<T> part(s);
    for (std::size_t r = 0; r < rows; ++r) {
      std::memcpy(part.data() + r * c, dy.data() + r * total + offset, sizeof(T) * c);
    }
    out.push_back(std::move(part));
    offset += c;
  }
  return out;
}

// ---- loss ---------------------------------------------------------------------

template <typename T>
LossResult<T> cross_entropy_ignore(const Tensor<T>& logits,
                                   const std::vector<int>& labels,
                                   const std::set<int>& ignore) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<int>(labels.size())) {
    throw ShapeError("cross_entropy_ignore: logits must be [P,K] with P labels");
  }
  const int p = logits.dim(0), k = logits.dim(1);
  int counted = 0;
  for (int i = 0; i < p; ++i) {
    if (!ignore.count(labels[i])) {
      if (labels[i] < 0 || labels[i] >= k) {
        throw ShapeError("cross_entropy_ignore: label " + std::to_string(labels[i]) +
                         " outside [0," + std::to_string(k) + ")");
      }
      ++counted;
    }
  }
  if (counted == 0) throw EmptyBatchError("cross_entropy_ignore: every pixel is ignored");

  LossResult<T> r;
  r.counted = counted;
  r.dlogits = Tensor<T>(logits.shape());
  double total = 0.0;
  std::vector<double> prob(k);
  for (int i = 0; i < p; ++i) {
    if (ignore.count(labels[i])) continue;
    const T* z = logits.data() + static_cast<std::size_t>(i) * k;
    double mx = z[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(z[j]));
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      prob[j] = std::exp(z[j] - mx);
      sum += prob[j];
    }
    const double lse = mx + std::log(sum);
    total += lse - z[labels[i]];
    T* g = r.dlogits.data() + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < k; ++j) {
      g[j] = T((prob[j] / sum - (j == labels[i] ? 1.0 : 0.0)) / counted);
    }
  }
  r.loss = T(total / counted);
  if (!std::isfinite(static_cast<double>(r.loss))) {
    throw NumericError("cross_entropy_ignore: non-finite loss");
  }
  return r;
}

// ---- ADAM ---------------------------------------------------------------------

template <typename T>
void adam_step(ModelParams<T>& params, const AdamConfig& config) {
  for (const auto& [name, p] : params.all()) {
    if (!p.grad.all_finite()) {
      throw NumericError("adam_step: non-finite gradient in parameter '" + name + "'");
    }
  }
  const long t = params.step + 1;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
  const T b1 = T(config.beta1), b2 = T(config.beta2);
  for (auto& [name, p] : params.all()) {
    const T wd = p.decay ? T(config.weight_decay) : T(0);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const T g = p.grad[i] + wd * p.value[i];
      p.m[i] = b1 * p.m[i] + (T(1) - b1) * g;
      p.v[i] = b2 * p.v[i] + (T(1) - b2) * g * g;
      const T mhat = p.m[i] / T(bc1);
      const T vhat = p.v[i] / T(bc2);
      p.value[i] -= T(config.lr) * mhat / (std::sqrt(vhat) + T(config.eps));
    }
  }
  params.step = t;
}

double step_decay_lr(double lr0, long step, long interval) {
  if (interval <= 0) return lr0;
  return lr0 * std::pow(0.5, static_cast<double>(step / interval));
}

// ---- instantiations -----------------------------------------------------------

#define GEOFUSE_INSTANTIATE_OPS(T)                                                        \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int);   \
  template ConvGrads<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, bool, int,    \
                                        const Tensor<T>&);                                \
  template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&,                 \
                                      const Tensor<T>&, int);                             \
  template ConvGrads<T> conv_transpose2d_backward(const Tensor<T>&, const Tensor<T>&,     \
                                                  bool, int, const Tensor<T>&);           \
  template Tensor<T> avg_pool2d(const Tensor<T>&, int, int, int);                         \
  template Tensor<T> avg_pool2d_backward(const Shape&, int, int, int, const Tensor<T>&);  \
  template MaxPoolResult<T> max_pool2d(const Tensor<T>&);                                 \
  template Tensor<T> max_pool2d_backward(const Shape&, const std::vector<std::size_t>&,   \
                                         const Tensor<T>&);                               \
  template Tensor<T> bilinear_resize(const Tensor<T>&, int, int);                         \
  template Tensor<T> bilinear_resize_backward(const Shape&, const Tensor<T>&);            \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                                     \
  template Tensor<T> leaky_relu_backward(const Tensor<T>&, const Tensor<T>&, T);          \
  template T softplus(T);                                                                 \
  template T logistic(T);                                                                 \
  template Tensor<T> softplus(const Tensor<T>&);                                          \
  template Tensor<T> softplus_backward(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                Tensor<T>&, Tensor<T>&, Mode, std::type_identity_t<BatchNormCache<T>>*, double, \
                                double);                                                  \
  template BatchNormGrads<T> batch_norm_backward(const BatchNormCache<T>&,                \
                                                 const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);        \
  template LinearGrads<T> linear_backward(const Tensor<T>&, const Tensor<T>&, bool,       \
                                          const Tensor<T>&);                              \
  template Tensor<T> concat_channels(const std::vector<const Tensor<T>*>&);               \
  template std::vector<Tensor<T>> split_channels(const Tensor<T>&, const std::vector<int>&); \
  template LossResult<T> cross_entropy_ignore(const Tensor<T>&, const std::vector<int>&,  \
                                              const std::set<int>&);                      \
  template void adam_step(ModelParams<T>&, const AdamConfig&);

GEOFUSE_INSTANTIATE_OPS(float)
GEOFUSE_INSTANTIATE_OPS(double)

}  // namespace geofuse
