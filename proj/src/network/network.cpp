#include "geofuse/network.hpp"

#include <cmath>
#include <cstring>

#include "geofuse/error.hpp"
#include "geofuse/init.hpp"
#include "geofuse/parallel.hpp"

namespace geofuse {

namespace {

std::uint64_t name_key(const std::string& s) {  // FNV-1a
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  if (src.empty()) return;
  if (dst.empty()) {
    dst = src;
  } else {
    dst += src;
  }
}

template <typename T>
Tensor<T> stack(const std::vector<const Tensor<T>*>& items) {
  Shape s = items.front()->shape();
  s.insert(s.begin(), static_cast<int>(items.size()));
  Tensor<T> out(s);
  const std::size_t n = items.front()->size();
  for (std::size_t b = 0; b < items.size(); ++b) {
    if (items[b]->shape() != items.front()->shape()) throw ShapeError("stack: shape mismatch");
    std::memcpy(out.data() + b * n, items[b]->data(), n * sizeof(T));
  }
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& batch, int b) {
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  Tensor<T> out(s);
  std::memcpy(out.data(), batch.data() + b * out.size(), out.size() * sizeof(T));
  return out;
}

std::string layer_name(int g, int l) {
  return "conv" + std::to_string(g) + "_" + std::to_string(l);
}

int pooled_dim(int in, int k, int s, int p) { return (in + 2 * p - k) / s + 1; }

}  // namespace

// ---- configuration --------------------------------------------------------

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kRandom: return "random";
    case Variant::kRemote: return "remote";
    case Variant::kProximate: return "proximate";
    case Variant::kGrid: return "grid";
    case Variant::kUnifiedUniform: return "unified_uniform";
    case Variant::kUnifiedAdaptive: return "unified_adaptive";
  }
  throw ConfigError("unknown variant");
}

Variant parse_variant(const std::string& name) {
  for (Variant v : all_variants()) {
    if (variant_name(v) == name) return v;
  }
  throw ConfigError("unknown variant: " + name);
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::kRandom, Variant::kRemote,
                                      Variant::kProximate, Variant::kGrid,
                                      Variant::kUnifiedUniform, Variant::kUnifiedAdaptive};
  return v;
}

bool uses_overhead(Variant v) {
  return v == Variant::kRemote || v == Variant::kUnifiedUniform || v == Variant::kUnifiedAdaptive;
}

bool uses_ground(Variant v) {
  return v == Variant::kProximate || v == Variant::kGrid || v == Variant::kUnifiedUniform ||
         v == Variant::kUnifiedAdaptive;
}

bool uses_fusion(Variant v) {
  return v == Variant::kGrid || v == Variant::kUnifiedUniform || v == Variant::kUnifiedAdaptive;
}

NetworkConfig NetworkConfig::full_scale(Variant v, int num_classes) {
  NetworkConfig c;
  c.variant = v;
  c.input_size = 256;
  c.channels = {32, 64, 128, 256, 512};
  c.num_classes = num_classes;
  c.ground_dim = 50;
  c.ground_enc_dim = 64;
  c.mlp_hidden = {512, 512};
  c.head_dims = {32, 16, 2};
  return c;
}

Variant NetworkConfig::effective_variant() const {
  if (n_nearest == 0 && uses_fusion(variant)) return Variant::kRemote;
  return variant;
}

int NetworkConfig::fusion_input_channels() const {
  switch (effective_variant()) {
    case Variant::kGrid: return ground_channels();
    case Variant::kUnifiedUniform:
    case Variant::kUnifiedAdaptive: return channels[2] + ground_channels();
    default: return channels[2];
  }
}

void NetworkConfig::validate() const {
  if (input_size < 16 || input_size % 8 != 0) {
    throw ConfigError("input_size must be a multiple of 8 and at least 16");
  }
  if (fusion_group != 3) throw ConfigError("fusion is only supported after conv group 3");
  for (int i = 0; i < 5; ++i) {
    if (channels[i] < 1 || layers[i] < 1) throw ConfigError("channels and layers must be >= 1");
  }
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (ground_dim < 1 || cutout_dim < 1 || ground_enc_dim < 1) {
    throw ConfigError("ground feature dims must be >= 1");
  }
  if (n_nearest < 0) throw ConfigError("n_nearest must be >= 0");
  if (variant == Variant::kProximate && n_nearest == 0) {
    throw ConfigError("proximate variant needs at least one observation");
  }
  if (head_dims[2] != 2) throw ConfigError("adaptive head must end with 2 channels");
  if (mlp_hidden[0] < 1 || mlp_hidden[1] < 1) throw ConfigError("mlp dims must be >= 1");
  const int pooled = pooled_dim(input_size, fusion_kernel, fusion_stride(), fusion_pad);
  if (pooled != fusion_size()) {
    throw ConfigError("fusion pooling does not reach conv3_3 resolution");
  }
}

int hypercolumn_length(const NetworkConfig& config) {
  const auto& ch = config.channels;
  switch (config.effective_variant()) {
    case Variant::kRandom: return 0;
    case Variant::kRemote: return ch[0] + ch[1] + ch[2] + ch[3] + ch[4];
    case Variant::kProximate: return config.ground_dim;
    case Variant::kGrid: return ch[3] + ch[4] + config.ground_channels();
    case Variant::kUnifiedUniform:
    case Variant::kUnifiedAdaptive:
      return ch[0] + ch[1] + ch[2] + ch[3] + ch[4] + config.ground_channels();
  }
  return 0;
}

Shape pooled_ground_shape(const NetworkConfig& config) {
  const int p = pooled_dim(config.input_size, config.fusion_kernel, config.fusion_stride(),
                           config.fusion_pad);
  return {p, p, config.ground_channels()};
}

std::vector<std::string> conv_layer_names(const NetworkConfig& config) {
  std::vector<std::string> out;
  const Variant v = config.effective_variant();
  if (!uses_overhead(v) && v != Variant::kGrid) return out;
  const int first = v == Variant::kGrid ? 4 : 1;
  for (int g = first; g <= 5; ++g)
    for (int l = 1; l <= config.layers[g - 1]; ++l) out.push_back(layer_name(g, l));
  return out;
}

template <typename T>
ModelParams<T> init_network(const NetworkConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams<T> params;
  const Variant v = config.effective_variant();
  if (v == Variant::kRandom) return params;
  auto rng_for = [&](const std::string& name) { return Rng::derive(seed, name_key(name)); };

  auto add_bn = [&](const std::string& prefix, int c) {
    params.add(prefix + ".bn.gamma", Tensor<T>({c}, T(1)), false);
    params.add(prefix + ".bn.beta", Tensor<T>({c}), false);
    params.add_buffer(prefix + ".bn.mean", Tensor<T>({c}));
    params.add_buffer(prefix + ".bn.var", Tensor<T>({c}, T(1)));
  };

  const auto& ch = config.channels;
  for (const auto& name : conv_layer_names(config)) {
    const int g = name[4] - '0';
    const int l = std::stoi(name.substr(6));
    int cin;
    if (l > 1) {
      cin = ch[g - 1];
    } else if (g == 1) {
      cin = 3;
    } else if (g == 4) {
      cin = config.fusion_input_channels();
    } else {
      cin = ch[g - 2];
    }
    auto rng = rng_for(name + ".w");
    params.add(name + ".w", he_normal<T>({3, 3, cin, ch[g - 1]}, 9 * cin, rng));
    add_bn(name, ch[g - 1]);
  }

  if (uses_ground(v)) {
    auto rng = rng_for("ground");
    PanoramaEncoder<T>::init_params(
        params, {config.cutout_dim, config.ground_enc_dim, config.ground_dim}, rng);
    if (v == Variant::kUnifiedAdaptive) {
      int cin = ch[2];
      for (int i = 0; i < 3; ++i) {
        const std::string p = "head.up" + std::to_string(i + 1);
        const int cout = config.head_dims[i];
        auto r = rng_for(p + ".w");
        params.add(p + ".w", he_normal<T>({3, 3, cin, cout}, 9 * cin, r, i == 2 ? 0.01 : 1.0), false);
        params.add(p + ".b", Tensor<T>({cout}, i == 2 ? T(config.head_bias_init) : T(0)), false);
        cin = cout;
      }
    } else {
      params.add("kernel.raw", Tensor<T>({2}, T(config.bandwidth_init)), false);
    }
  }

  const int d = hypercolumn_length(config);
  const auto& hid = config.mlp_hidden;
  {
    auto r = rng_for("mlp.fc1.w");
    params.add("mlp.fc1.w", he_normal<T>({d, hid[0]}, d, r));
    add_bn("mlp.fc1", hid[0]);
  }
  {
    auto r = rng_for("mlp.fc2.w");
    params.add("mlp.fc2.w", he_normal<T>({hid[0], hid[1]}, hid[0], r));
    add_bn("mlp.fc2", hid[1]);
  }
  {
    auto r = rng_for("mlp.out.w");
    params.add("mlp.out.w", he_normal<T>({hid[1], config.num_classes}, hid[1], r, 0.01));
    params.add("mlp.out.b", Tensor<T>({config.num_classes}), false);
  }
  return params;
}

// ---- conv blocks ----------------------------------------------------------

template <typename T>
Tensor<T> conv_bn_act(ModelParams<T>& params, const std::string& prefix, const Tensor<T>& x,
                      int stride, Mode mode, double alpha, std::type_identity_t<ConvLayerCache<T>>* cache) {
  const auto y = conv2d(x, params.get(prefix + ".w").value, Tensor<T>(), stride);
  std::type_identity_t<BatchNormCache<T>>* bn_cache = cache ? &cache->bn : nullptr;
  auto n = batch_norm(y, params.get(prefix + ".bn.gamma").value,
                      params.get(prefix + ".bn.beta").value, params.buffer(prefix + ".bn.mean"),
                      params.buffer(prefix + ".bn.var"), mode, bn_cache);
  auto out = leaky_relu(n, T(alpha));
  if (cache) {
    cache->input = x;
    cache->normalized = std::move(n);
    cache->stride = stride;
  }
  return out;
}

template <typename T>
Tensor<T> conv_bn_act_backward(ModelParams<T>& params, const std::string& prefix,
                               const ConvLayerCache<T>& cache, double alpha, const Tensor<T>& dy) {
  const auto dn = leaky_relu_backward(cache.normalized, dy, T(alpha));
  auto& gamma = params.get(prefix + ".bn.gamma");
  const auto bg = batch_norm_backward(cache.bn, gamma.value, dn);
  gamma.grad += bg.dgamma;
  params.get(prefix + ".bn.beta").grad += bg.dbeta;
  auto& w = params.get(prefix + ".w");
  auto cg = conv2d_backward(cache.input, w.value, false, cache.stride, bg.dx);
  w.grad += cg.dw;
  return std::move(cg.dx);
}

template <typename T>
std::vector<Tensor<T>> backbone_groups(const NetworkConfig& config, ModelParams<T>& params,
                                       const Tensor<T>& x, int first, int last, Mode mode,
                                       std::type_identity_t<BackboneCache<T>>* cache) {
  std::vector<Tensor<T>> outputs;
  BackboneCache<T> local;
  BackboneCache<T>& c = cache ? *cache : local;
  c = BackboneCache<T>{};
  c.first_group = first;
  Tensor<T> cur = x;
  for (int g = first; g <= last; ++g) {
    for (int l = 1; l <= config.layers[g - 1]; ++l) {
      const std::string name = layer_name(g, l);
      const int stride = (g == 3 && l == 1) ? 2 : 1;
      c.layers.emplace_back();
      c.layer_names.push_back(name);
      cur = conv_bn_act(params, name, cur, stride, mode, config.leaky_alpha, &c.layers.back());
    }
    outputs.push_back(cur);
    c.pools.emplace_back();
    c.pool_inputs.emplace_back();
    if (g <= 2 && g < last) {
      c.pool_inputs.back() = cur.shape();
      c.pools.back() = max_pool2d(cur);
      cur = c.pools.back().out;
      c.pools.back().out = Tensor<T>();
    }
  }
  return outputs;
}

template <typename T>
Tensor<T> backbone_groups_backward(const NetworkConfig& config, ModelParams<T>& params,
                                   const BackboneCache<T>& cache,
                                   std::vector<Tensor<T>> d_outputs) {
  const int groups = static_cast<int>(cache.pools.size());
  int layer = static_cast<int>(cache.layers.size());
  Tensor<T> d;
  for (int i = groups - 1; i >= 0; --i) {
    const int g = cache.first_group + i;
    if (!cache.pools[i].argmax.empty() && !d.empty()) {
      d = max_pool2d_backward(cache.pool_inputs[i], cache.pools[i].argmax, d);
    } else if (!cache.pools[i].argmax.empty()) {
      d = Tensor<T>();
    }
    accumulate(d, d_outputs[i]);
    if (d.empty()) d = Tensor<T>(cache.layers[layer - 1].normalized.shape());
    for (int l = config.layers[g - 1]; l >= 1; --l) {
      --layer;
      d = conv_bn_act_backward(params, cache.layer_names[layer], cache.layers[layer],
                               config.leaky_alpha, d);
    }
  }
  return d;
}

template <typename T>
void backbone_trunk(const NetworkConfig& config, ModelParams<T>& params,
                    const Tensor<T>& overhead, Mode mode, BackboneResult<T>& result) {
  if (overhead.rank() != 4 || overhead.dim(3) != 3) {
    throw ShapeError("backbone: overhead batch must be [B,H,W,3], got " +
                     shape_str(overhead.shape()));
  }
  result.taps = backbone_groups(config, params, overhead, 1, 3, mode, &result.trunk);
  result.trunk_output = result.taps[2];
}

template <typename T>
void backbone_upper(const NetworkConfig& config, ModelParams<T>& params,
                    const Tensor<T>& ground_maps, Mode mode, BackboneResult<T>& result) {
  const Variant v = config.effective_variant();
  Tensor<T> in;
  if (uses_fusion(v)) {
    if (ground_maps.empty()) throw ConfigError("variant " + variant_name(v) + " needs a ground map");
    if (ground_maps.rank() != 4 || ground_maps.dim(3) != config.ground_channels()) {
      throw ShapeError("backbone: ground map batch must be [B,H,W,m+1], got " +
                       shape_str(ground_maps.shape()));
    }
    result.ground_shape = ground_maps.shape();
    result.pooled_ground =
        avg_pool2d(ground_maps, config.fusion_kernel, config.fusion_stride(), config.fusion_pad);
    if (v == Variant::kGrid) {
      in = result.pooled_ground;
    } else {
      in = concat_channels<T>({&result.trunk_output, &result.pooled_ground});
    }
  } else {
    in = result.trunk_output;
  }
  auto outs = backbone_groups(config, params, in, 4, 5, mode, &result.upper);
  for (auto& o : outs) result.taps.push_back(std::move(o));
}

template <typename T>
BackboneResult<T> backbone_forward(const NetworkConfig& config, ModelParams<T>& params,
                                   const Tensor<T>& overhead, const Tensor<T>& ground_maps,
                                   Mode mode) {
  BackboneResult<T> result;
  if (config.effective_variant() != Variant::kGrid) {
    backbone_trunk(config, params, overhead, mode, result);
  }
  backbone_upper(config, params, ground_maps, mode, result);
  return result;
}

template <typename T>
UpperGrads<T> backbone_upper_backward(const NetworkConfig& config, ModelParams<T>& params,
                                      const BackboneResult<T>& result, const Tensor<T>& d_conv4,
                                      const Tensor<T>& d_conv5) {
  const Variant v = config.effective_variant();
  auto d_in = backbone_groups_backward(config, params, result.upper, {d_conv4, d_conv5});
  UpperGrads<T> g;
  if (!uses_fusion(v)) {
    g.d_trunk = std::move(d_in);
    return g;
  }
  Tensor<T> d_pooled;
  if (v == Variant::kGrid) {
    d_pooled = std::move(d_in);
  } else {
    auto parts = split_channels(d_in, {config.channels[2], config.ground_channels()});
    g.d_trunk = std::move(parts[0]);
    d_pooled = std::move(parts[1]);
  }
  g.d_ground = avg_pool2d_backward(result.ground_shape, config.fusion_kernel,
                                   config.fusion_stride(), config.fusion_pad, d_pooled);
  return g;
}

template <typename T>
void backbone_trunk_backward(const NetworkConfig& config, ModelParams<T>& params,
                             const BackboneResult<T>& result, const Tensor<T>& d_conv1,
                             const Tensor<T>& d_conv2, const Tensor<T>& d_conv3,
                             const Tensor<T>& d_trunk) {
  Tensor<T> d3 = d_conv3;
  accumulate(d3, d_trunk);
  backbone_groups_backward(config, params, result.trunk, {d_conv1, d_conv2, d3});
}

// ---- adaptive head --------------------------------------------------------

template <typename T>
Tensor<T> adaptive_head(const NetworkConfig& config, const ModelParams<T>& params,
                        const Tensor<T>& trunk, std::type_identity_t<AdaptiveHeadCache<T>>* cache) {
  Tensor<T> x = trunk;
  for (int i = 0; i < 3; ++i) {
    const std::string p = "head.up" + std::to_string(i + 1);
    auto y = conv_transpose2d(x, params.get(p + ".w").value, params.get(p + ".b").value, 2);
    if (cache) cache->stage_in[i] = x;
    if (i < 2) {
      x = leaky_relu(y, T(config.leaky_alpha));
      if (cache) cache->pre_act[i] = std::move(y);
    } else {
      x = std::move(y);
    }
  }
  if (x.rank() != 4 || x.dim(1) != config.input_size || x.dim(2) != config.input_size) {
    throw ConfigError("adaptive head output " + shape_str(x.shape()) +
                      " does not match the input size");
  }
  return x;
}

template <typename T>
Tensor<T> adaptive_head_backward(const NetworkConfig& config, ModelParams<T>& params,
                                 const AdaptiveHeadCache<T>& cache, const Tensor<T>& d_raw) {
  Tensor<T> d = d_raw;
  for (int i = 2; i >= 0; --i) {
    const std::string p = "head.up" + std::to_string(i + 1);
    auto& w = params.get(p + ".w");
    auto g = conv_transpose2d_backward(cache.stage_in[i], w.value, true, 2, d);
    w.grad += g.dw;
    params.get(p + ".b").grad += g.db;
    d = std::move(g.dx);
    if (i > 0) d = leaky_relu_backward(cache.pre_act[i - 1], d, T(config.leaky_alpha));
  }
  return d;
}

// ---- hypercolumns ---------------------------------------------------------

template <typename T>
Tensor<T> extract_hypercolumn(const std::vector<const Tensor<T>*>& maps,
                              const std::vector<std::vector<int>>& pixels, int out_h, int out_w) {
  int depth = 0;
  for (const auto* m : maps) {
    if (m->rank() != 4 || m->dim(0) != static_cast<int>(pixels.size())) {
      throw ShapeError("extract_hypercolumn: map " + shape_str(m->shape()) +
                       " does not match the batch");
    }
    depth += m->dim(3);
  }
  std::vector<std::pair<int, int>> rows;  // (scene, flat pixel)
  for (std::size_t b = 0; b < pixels.size(); ++b)
    for (int p : pixels[b]) {
      if (p < 0 || p >= out_h * out_w) {
        throw ShapeError("extract_hypercolumn: pixel index " + std::to_string(p) +
                         " out of bounds");
      }
      rows.emplace_back(static_cast<int>(b), p);
    }
  Tensor<T> out({static_cast<int>(rows.size()), depth});
  std::vector<std::vector<ResizeTap>> ty, tx;
  for (const auto* m : maps) {
    ty.push_back(resize_taps(m->dim(1), out_h));
    tx.push_back(resize_taps(m->dim(2), out_w));
  }
  parallel_for(static_cast<int>(rows.size()), [&](int i) {
    const auto [b, p] = rows[i];
    const int oy = p / out_w, ox = p % out_w;
    T* dst = out.data() + static_cast<std::size_t>(i) * depth;
    for (std::size_t k = 0; k < maps.size(); ++k) {
      const auto& m = *maps[k];
      const int h = m.dim(1), w = m.dim(2), c = m.dim(3);
      const auto& y = ty[k][oy];
      const auto& x = tx[k][ox];
      const T fy = T(y.frac), fx = T(x.frac);
      auto px = [&](int yy, int xx) {
        return m.data() + ((static_cast<std::size_t>(b) * h + yy) * w + xx) * c;
      };
      const T* a = px(y.lo, x.lo);
      const T* bb = px(y.lo, x.hi);
      const T* cc = px(y.hi, x.lo);
      const T* dd = px(y.hi, x.hi);
      for (int j = 0; j < c; ++j) {
        const T top = (T(1) - fx) * a[j] + fx * bb[j];
        const T bot = (T(1) - fx) * cc[j] + fx * dd[j];
        dst[j] = (T(1) - fy) * top + fy * bot;
      }
      dst += c;
    }
  });
  return out;
}

template <typename T>
std::vector<Tensor<T>> extract_hypercolumn_backward(const std::vector<Shape>& map_shapes,
                                                    const std::vector<std::vector<int>>& pixels,
                                                    int out_h, int out_w, const Tensor<T>& dh) {
  std::vector<Tensor<T>> grads;
  std::vector<int> offsets;
  int depth = 0;
  for (const auto& s : map_shapes) {
    grads.emplace_back(s);
    offsets.push_back(depth);
    depth += s[3];
  }
  if (dh.rank() != 2 || dh.dim(1) != depth) {
    throw ShapeError("extract_hypercolumn_backward: cotangent " + shape_str(dh.shape()));
  }
  parallel_for(static_cast<int>(map_shapes.size()), [&](int k) {
    const Shape& s = map_shapes[k];
    const int h = s[1], w = s[2], c = s[3];
    const auto ty = resize_taps(h, out_h);
    const auto tx = resize_taps(w, out_w);
    T* g = grads[k].data();
    int row = 0;
    for (std::size_t b = 0; b < pixels.size(); ++b) {
      for (int p : pixels[b]) {
        const int oy = p / out_w, ox = p % out_w;
        const T fy = T(ty[oy].frac), fx = T(tx[ox].frac);
        const T* src = dh.data() + static_cast<std::size_t>(row) * depth + offsets[k];
        auto px = [&](int yy, int xx) {
          return g + ((static_cast<std::size_t>(b) * h + yy) * w + xx) * c;
        };
        T* a = px(ty[oy].lo, tx[ox].lo);
        T* bb = px(ty[oy].lo, tx[ox].hi);
        T* cc = px(ty[oy].hi, tx[ox].lo);
        T* dd = px(ty[oy].hi, tx[ox].hi);
        for (int j = 0; j < c; ++j) {
          const T top = (T(1) - fy) * src[j];
          const T bot = fy * src[j];
          a[j] += (T(1) - fx) * top;
          bb[j] += fx * top;
          cc[j] += (T(1) - fx) * bot;
          dd[j] += fx * bot;
        }
        ++row;
      }
    }
  });
  return grads;
}

// ---- MLP ------------------------------------------------------------------

template <typename T>
Tensor<T> mlp_head(const NetworkConfig& config, ModelParams<T>& params, const Tensor<T>& h,
                   Mode mode, std::type_identity_t<MlpCache<T>>* cache) {
  const T alpha = T(config.leaky_alpha);
  Tensor<T> x = h;
  if (cache) cache->input = h;
  const char* names[2] = {"mlp.fc1", "mlp.fc2"};
  for (int i = 0; i < 2; ++i) {
    const std::string p = names[i];
    const auto z = linear(x, params.get(p + ".w").value, Tensor<T>());
    auto n = batch_norm(z, params.get(p + ".bn.gamma").value, params.get(p + ".bn.beta").value,
                        params.buffer(p + ".bn.mean"), params.buffer(p + ".bn.var"), mode,
                        cache ? &cache->bn[i] : nullptr);
    x = leaky_relu(n, alpha);
    if (cache) {
      cache->normalized[i] = std::move(n);
      cache->hidden_in[i] = x;
    }
  }
  return linear(x, params.get("mlp.out.w").value, params.get("mlp.out.b").value);
}

template <typename T>
Tensor<T> mlp_head_backward(const NetworkConfig& config, ModelParams<T>& params,
                            const MlpCache<T>& cache, const Tensor<T>& d_logits) {
  const T alpha = T(config.leaky_alpha);
  auto& ow = params.get("mlp.out.w");
  auto g = linear_backward(cache.hidden_in[1], ow.value, true, d_logits);
  ow.grad += g.dw;
  params.get("mlp.out.b").grad += g.db;
  Tensor<T> d = std::move(g.dx);
  const char* names[2] = {"mlp.fc1", "mlp.fc2"};
  for (int i = 1; i >= 0; --i) {
    const std::string p = names[i];
    const auto dn = leaky_relu_backward(cache.normalized[i], d, alpha);
    auto& gamma = params.get(p + ".bn.gamma");
    const auto bg = batch_norm_backward(cache.bn[i], gamma.value, dn);
    gamma.grad += bg.dgamma;
    params.get(p + ".bn.beta").grad += bg.dbeta;
    auto& w = params.get(p + ".w");
    const Tensor<T>& in = i == 0 ? cache.input : cache.hidden_in[0];
    auto lg = linear_backward(in, w.value, false, bg.dx);
    w.grad += lg.dw;
    d = std::move(lg.dx);
  }
  return d;
}

// ---- whole model ----------------------------------------------------------

template <typename T>
ModelOutput<T> model_forward(const NetworkConfig& config, ModelParams<T>& params,
                             const std::vector<Scene<T>>& scenes,
                             const std::vector<std::vector<int>>& pixels, Mode mode,
                             std::type_identity_t<ModelCache<T>>* cache) {
  const Variant v = config.effective_variant();
  if (v == Variant::kRandom) throw ConfigError("the random variant has no forward pass");
  if (scenes.empty()) throw EmptyBatchError("model_forward: empty batch");
  if (pixels.size() != scenes.size()) throw ShapeError("model_forward: one pixel list per scene");
  const int hw = config.input_size;
  ModelCache<T> local;
  ModelCache<T>& c = cache ? *cache : local;
  c = ModelCache<T>{};
  c.variant = v;
  c.pixels = pixels;
  const int batch = static_cast<int>(scenes.size());
  ModelOutput<T> out;

  if (uses_overhead(v)) {
    std::vector<const Tensor<T>*> imgs;
    for (const auto& s : scenes) {
      if (s.overhead.shape() != Shape{hw, hw, 3}) {
        throw ShapeError("model_forward: overhead must be [" + std::to_string(hw) + "," +
                         std::to_string(hw) + ",3], got " + shape_str(s.overhead.shape()));
      }
      imgs.push_back(&s.overhead);
    }
    c.overhead = stack(imgs);
    backbone_trunk(config, params, c.overhead, mode, c.backbone);
  }

  if (uses_ground(v)) {
    std::vector<BandwidthField<T>> fields(batch);
    if (v == Variant::kUnifiedAdaptive) {
      c.head_raw = adaptive_head(config, params, c.backbone.trunk_output, &c.head);
      out.bandwidth = softplus(c.head_raw);
      for (int b = 0; b < batch; ++b) fields[b] = BandwidthField<T>::adaptive(slice(c.head_raw, b));
    } else {
      const auto& raw = params.get("kernel.raw").value;
      for (int b = 0; b < batch; ++b) fields[b] = BandwidthField<T>::uniform(raw[0], raw[1]);
    }
    c.ground.resize(batch);
    std::vector<Tensor<T>> maps(batch);
    for (int b = 0; b < batch; ++b) {
      const auto& s = scenes[b];
      if (s.grid.height != hw || s.grid.width != hw) {
        throw ShapeError("model_forward: scene grid does not match the input size");
      }
      if (s.observations.empty()) throw ConfigError("model_forward: scene has no observations");
      maps[b] = build_ground_map(params, s.grid, s.observations, s.shifts, fields[b], &c.ground[b])
                    .combined;
    }
    std::vector<const Tensor<T>*> ptrs;
    for (const auto& m : maps) ptrs.push_back(&m);
    c.ground_maps = stack(ptrs);
  }

  if (uses_fusion(v) || v == Variant::kRemote) {
    backbone_upper(config, params, c.ground_maps, mode, c.backbone);
  }

  std::vector<const Tensor<T>*> hyper;
  Tensor<T> ground_features;
  if (v == Variant::kProximate) {
    ground_features = split_channels(c.ground_maps, {config.ground_dim, 1})[0];
    hyper.push_back(&ground_features);
  } else {
    for (const auto& t : c.backbone.taps) hyper.push_back(&t);
    if (uses_fusion(v)) hyper.push_back(&c.ground_maps);
  }
  for (const auto* t : hyper) c.hyper_shapes.push_back(t->shape());
  const auto h = extract_hypercolumn(hyper, pixels, hw, hw);
  out.logits = mlp_head(config, params, h, mode, &c.mlp);
  return out;
}

template <typename T>
void model_backward(const NetworkConfig& config, ModelParams<T>& params,
                    const ModelCache<T>& cache, const Tensor<T>& d_logits) {
  const Variant v = cache.variant;
  const int hw = config.input_size;
  const auto dh = mlp_head_backward(config, params, cache.mlp, d_logits);
  auto d_maps = extract_hypercolumn_backward(cache.hyper_shapes, cache.pixels, hw, hw, dh);
  const auto& bb = cache.backbone;

  Tensor<T> d_ground;
  Tensor<T> d_trunk;
  if (v == Variant::kProximate) {
    Tensor<T> zeros(Shape{d_maps[0].dim(0), hw, hw, 1});
    d_ground = concat_channels<T>({&d_maps[0], &zeros});
  } else {
    const std::size_t upper = v == Variant::kGrid ? 0 : 3;
    auto ug = backbone_upper_backward(config, params, bb, d_maps[upper], d_maps[upper + 1]);
    d_trunk = std::move(ug.d_trunk);
    if (uses_fusion(v)) {
      d_ground = std::move(d_maps.back());
      d_ground += ug.d_ground;
    }
  }

  if (uses_ground(v)) {
    const int batch = d_ground.dim(0);
    std::vector<Tensor<T>> d_raw(batch);
    for (int b = 0; b < batch; ++b) {
      d_raw[b] = build_ground_map_backward(params, cache.ground[b], slice(d_ground, b));
    }
    if (v == Variant::kUnifiedAdaptive) {
      std::vector<const Tensor<T>*> ptrs;
      for (const auto& t : d_raw) ptrs.push_back(&t);
      const auto d_head_in = adaptive_head_backward(config, params, cache.head, stack(ptrs));
      if (config.head_grad_to_trunk) accumulate(d_trunk, d_head_in);
    } else {
      auto& raw = params.get("kernel.raw").grad;
      for (const auto& t : d_raw) raw += t;
    }
  }

  if (uses_overhead(v)) {
    backbone_trunk_backward(config, params, bb, d_maps[0], d_maps[1], d_maps[2], d_trunk);
  }
}

Tensor<float> prior_logits(const std::vector<double>& prior, int pixels) {
  const int k = static_cast<int>(prior.size());
  Tensor<float> out({pixels, k});
  for (int p = 0; p < pixels; ++p)
    for (int j = 0; j < k; ++j) out(p, j) = static_cast<float>(std::log(std::max(prior[j], 1e-12)));
  return out;
}

std::vector<int> sample_from_prior(const std::vector<double>& prior, int pixels, Rng& rng) {
  std::vector<int> out(pixels);
  for (auto& v : out) v = rng.categorical(prior);
  return out;
}

#define GEOFUSE_INSTANTIATE_NETWORK(T)                                                         \
  template ModelParams<T> init_network<T>(const NetworkConfig&, std::uint64_t);               \
  template Tensor<T> conv_bn_act(ModelParams<T>&, const std::string&, const Tensor<T>&, int,  \
                                 Mode, double, std::type_identity_t<ConvLayerCache<T>>*);                           \
  template Tensor<T> conv_bn_act_backward(ModelParams<T>&, const std::string&,                \
                                          const ConvLayerCache<T>&, double, const Tensor<T>&); \
  template std::vector<Tensor<T>> backbone_groups(const NetworkConfig&, ModelParams<T>&,      \
                                                  const Tensor<T>&, int, int, Mode,           \
                                                  std::type_identity_t<BackboneCache<T>>*);                         \
  template Tensor<T> backbone_groups_backward(const NetworkConfig&, ModelParams<T>&,          \
                                              const BackboneCache<T>&, std::vector<Tensor<T>>); \
  template void backbone_trunk(const NetworkConfig&, ModelParams<T>&, const Tensor<T>&, Mode, \
                               BackboneResult<T>&);                                           \
  template void backbone_upper(const NetworkConfig&, ModelParams<T>&, const Tensor<T>&, Mode, \
                               BackboneResult<T>&);                                           \
  template BackboneResult<T> backbone_forward(const NetworkConfig&, ModelParams<T>&,          \
                                              const Tensor<T>&, const Tensor<T>&, Mode);      \
  template UpperGrads<T> backbone_upper_backward(const NetworkConfig&, ModelParams<T>&,       \
                                                 const BackboneResult<T>&, const Tensor<T>&,  \
                                                 const Tensor<T>&);                           \
  template void backbone_trunk_backward(const NetworkConfig&, ModelParams<T>&,                \
                                        const BackboneResult<T>&, const Tensor<T>&,           \
                                        const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> adaptive_head(const NetworkConfig&, const ModelParams<T>&,               \
                                   const Tensor<T>&, std::type_identity_t<AdaptiveHeadCache<T>>*);                  \
  template Tensor<T> adaptive_head_backward(const NetworkConfig&, ModelParams<T>&,            \
                                            const AdaptiveHeadCache<T>&, const Tensor<T>&);   \
  template Tensor<T> extract_hypercolumn(const std::vector<const Tensor<T>*>&,                \
                                         const std::vector<std::vector<int>>&, int, int);     \
  template std::vector<Tensor<T>> extract_hypercolumn_backward(                               \
      const std::vector<Shape>&, const std::vector<std::vector<int>>&, int, int,              \
      const Tensor<T>&);                                                                      \
  template Tensor<T> mlp_head(const NetworkConfig&, ModelParams<T>&, const Tensor<T>&, Mode,  \
                              std::type_identity_t<MlpCache<T>>*);                                                  \
  template Tensor<T> mlp_head_backward(const NetworkConfig&, ModelParams<T>&,                 \
                                       const MlpCache<T>&, const Tensor<T>&);                 \
  template ModelOutput<T> model_forward(const NetworkConfig&, ModelParams<T>&,                \
                                        const std::vector<Scene<T>>&,                         \
                                        const std::vector<std::vector<int>>&, Mode,           \
                                        std::type_identity_t<ModelCache<T>>*);                                      \
  template void model_backward(const NetworkConfig&, ModelParams<T>&, const ModelCache<T>&,   \
                               const Tensor<T>&);

GEOFUSE_INSTANTIATE_NETWORK(float)
GEOFUSE_INSTANTIATE_NETWORK(double)

}  // namespace geofuse
