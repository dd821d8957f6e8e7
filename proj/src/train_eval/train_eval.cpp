#include "geofuse/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "geofuse/error.hpp"
#include "geofuse/parallel.hpp"

namespace geofuse {

namespace {

constexpr std::uint64_t kTrainStreamKey = 0x7A41ULL;
constexpr std::uint64_t kShiftStreamKey = 0x5A1F7ULL;
constexpr std::uint64_t kEvalShiftKey = 0xE5A1FULL;
constexpr std::uint64_t kRandomBaselineKey = 0xBA5EULL;

template <typename T>
Tensor<T> cast_overhead(const Tensor<float>& src) {
  Tensor<T> out(src.shape());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = static_cast<T>(src[i]);
  return out;
}

int argmax_row(const float* row, int k) { return static_cast<int>(std::max_element(row, row + k) - row); }
int argmax_row(const double* row, int k) { return static_cast<int>(std::max_element(row, row + k) - row); }

int scene_neighbours(const NetworkConfig& net) {
  return uses_ground(net.effective_variant()) ? net.n_nearest : 0;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw ConfigError("lr0 must be positive");
  if (lr_halving_interval < 0) throw ConfigError("lr_halving_interval must be non-negative");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (pixels_per_image < 1) throw ConfigError("pixels_per_image must be positive");
  if (epochs < 1) throw ConfigError("epochs must be positive");
  if (n_nearest < 0) throw ConfigError("n_nearest must be non-negative");
  if (max_steps < 0) throw ConfigError("max_steps must be non-negative");
}

long TrainConfig::halving_interval(long total_steps) const {
  if (lr_halving_interval > 0) return lr_halving_interval;
  const double scaled = static_cast<double>(kReferenceHalvingInterval) * total_steps /
                        static_cast<double>(kReferenceTotalSteps);
  return std::max(1L, std::lround(scaled));
}

NetworkConfig network_for(Variant variant, const Dataset& dataset, const std::string& task,
                          int n_nearest) {
  NetworkConfig c;
  c.variant = variant;
  c.input_size = dataset.spec.tile_size;
  c.num_classes = dataset.task(task).num_outputs();
  c.cutout_dim = dataset.spec.cutout_dim;
  c.n_nearest = n_nearest;
  c.validate();
  return c;
}

std::vector<int> sample_pixels(const Tensor<int>& labels, int count, const std::set<int>& ignore,
                               Rng& rng) {
  std::vector<int> eligible;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!ignore.count(labels[i])) eligible.push_back(static_cast<int>(i));
  }
  if (static_cast<int>(eligible.size()) <= count) return eligible;
  // Partial Fisher-Yates: the first `count` entries are a uniform sample.
  for (int i = 0; i < count; ++i) {
    const auto j = i + static_cast<int>(rng.below(eligible.size() - i));
    std::swap(eligible[i], eligible[j]);
  }
  eligible.resize(count);
  return eligible;
}

template <typename T>
SceneSet<T> build_scenes(const Dataset& dataset, int n_nearest) {
  SceneSet<T> set;
  set.scenes.resize(dataset.tiles.size());
  const int t = dataset.spec.tile_size;
  parallel_for(static_cast<int>(dataset.tiles.size()), [&](int i) {
    const Tile& tile = dataset.tiles[i];
    Scene<T>& s = set.scenes[i];
    s.overhead = cast_overhead<T>(tile.overhead);
    s.grid.height = t;
    s.grid.width = t;
    s.grid.transform = tile.transform;
    if (n_nearest > 0 && !dataset.observations.empty()) {
      const GeoPoint center = tile.transform.apply(t / 2.0, t / 2.0);
      for (std::size_t idx : nearest_n(dataset.observations, center, n_nearest)) {
        s.observations.push_back(&dataset.observations[idx]);
      }
    }
  });
  return set;
}

template <typename T>
void assign_shifts(SceneSet<T>& set, Rng& rng) {
  for (auto& s : set.scenes) {
    s.shifts.resize(s.observations.size());
    for (auto& v : s.shifts) v = static_cast<int>(rng.below(kNumCutouts));
  }
}

std::vector<double> label_prior(const Dataset& dataset, const std::string& task) {
  const TaskInfo& info = dataset.task(task);
  std::vector<double> counts(info.num_outputs(), 0.0);
  for (int i : dataset.split_tiles("train")) {
    for (int v : dataset.tiles[i].labels.at(task).storage()) {
      if (v != info.unknown()) counts[v] += 1.0;
    }
  }
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  if (total <= 0.0) throw ConfigError("train split has no labeled pixels for task " + task);
  for (auto& c : counts) c /= total;
  return counts;
}

template <typename T>
TrainResult<T> train(Variant variant, const Dataset& dataset, const TrainConfig& config,
                     const EpochHook<T>& on_epoch) {
  config.validate();
  TrainResult<T> result;
  const TaskInfo& task = dataset.task(config.task);
  result.network = network_for(variant, dataset, config.task, config.n_nearest);
  result.prior = label_prior(dataset, config.task);
  if (variant == Variant::kRandom) return result;

  const NetworkConfig& net = result.network;
  const int t = dataset.spec.tile_size;
  if (config.pixels_per_image > t * t) {
    throw ConfigError("pixels_per_image exceeds the pixels of a tile");
  }
  const std::vector<int> train_tiles = dataset.split_tiles("train");
  if (train_tiles.empty()) throw ConfigError("dataset has no train tiles");

  result.params = init_network<T>(net, config.seed);
  ModelParams<T>& params = result.params;
  SceneSet<T> scenes = build_scenes<T>(dataset, scene_neighbours(net));

  const long per_epoch = (static_cast<long>(train_tiles.size()) + config.batch_size - 1) /
                         config.batch_size;
  long total = per_epoch * config.epochs;
  if (config.max_steps > 0) total = std::min(total, config.max_steps);
  const long interval = config.halving_interval(total);
  const std::set<int> ignore{task.unknown()};

  Rng rng = Rng::derive(config.seed, kTrainStreamKey);
  Rng shift_rng = Rng::derive(config.seed, kShiftStreamKey);
  ModelParams<T> last_good = params;
  ModelCache<T> cache;
  std::vector<int> order = train_tiles;
  long step = 0;

  for (int epoch = 1; epoch <= config.epochs && step < total; ++epoch) {
    if (config.shuffle_orientation && (epoch == 1 || config.reshuffle_each_epoch)) {
      assign_shifts(scenes, shift_rng);
    }
    rng.shuffle(order.begin(), order.end());
    for (long b = 0; b < per_epoch && step < total; ++b) {
      std::vector<Scene<T>> batch;
      std::vector<std::vector<int>> pixels;
      std::vector<int> labels;
      const auto first = static_cast<std::size_t>(b * config.batch_size);
      const auto last = std::min(order.size(), first + config.batch_size);
      for (std::size_t i = first; i < last; ++i) {
        const Tile& tile = dataset.tiles[order[i]];
        const Tensor<int>& raster = tile.labels.at(config.task);
        auto pix = sample_pixels(raster, config.pixels_per_image, ignore, rng);
        if (pix.empty()) {
          result.warnings.push_back("tile " + std::to_string(tile.id) +
                                    " has no labeled pixels; skipped");
          continue;
        }
        for (int p : pix) labels.push_back(raster[p]);
        batch.push_back(scenes.scenes[order[i]]);
        pixels.push_back(std::move(pix));
      }
      if (batch.empty()) continue;

      params.zero_grad();
      const double lr = step_decay_lr(config.lr0, step, interval);
      double loss_value = 0.0;
      try {
        const auto out = model_forward(net, params, batch, pixels, Mode::kTrain, &cache);
        const auto loss = cross_entropy_ignore(out.logits, labels, ignore);
        loss_value = static_cast<double>(loss.loss);
        if (!std::isfinite(loss_value)) {
          throw NumericError("non-finite loss at step " + std::to_string(step + 1));
        }
        model_backward(net, params, cache, loss.dlogits);
        adam_step(params, AdamConfig{lr, 0.9, 0.999, 1e-8, config.weight_decay});
      } catch (const NumericError& e) {
        result.aborted = true;
        result.abort_reason = e.what();
        result.params = std::move(last_good);
        return result;
      }
      ++step;
      result.log.push_back({step, epoch, lr, loss_value});
    }
    last_good = params;
    result.completed_epochs = epoch;
    if (on_epoch) on_epoch(epoch, params);
  }
  return result;
}

TaskMetrics compute_metrics(const std::vector<int>& truth, const std::vector<int>& prediction,
                            int num_classes, const std::vector<int>& ignore) {
  if (truth.size() != prediction.size()) {
    throw ShapeError("compute_metrics: truth and prediction lengths differ");
  }
  std::vector<bool> ignored(num_classes, false);
  for (int c : ignore) {
    if (c >= 0 && c < num_classes) ignored[c] = true;
  }
  TaskMetrics m;
  m.confusion.assign(num_classes, std::vector<long>(num_classes, 0));
  long correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i];
    const int p = prediction[i];
    if (t < 0 || t >= num_classes || p < 0 || p >= num_classes) {
      throw ConfigError("compute_metrics: label out of range");
    }
    if (ignored[t]) continue;
    ++m.confusion[t][p];
    ++m.counted;
    correct += t == p;
  }
  m.accuracy = m.counted ? static_cast<double>(correct) / m.counted : 0.0;
  m.iou.assign(num_classes, std::nullopt);
  double sum = 0.0;
  int n = 0;
  for (int c = 0; c < num_classes; ++c) {
    if (ignored[c]) continue;
    long in_truth = 0, in_pred = 0;
    for (int j = 0; j < num_classes; ++j) {
      in_truth += m.confusion[c][j];
      in_pred += m.confusion[j][c];
    }
    const long inter = m.confusion[c][c];
    const long uni = in_truth + in_pred - inter;
    if (uni == 0) continue;
    m.iou[c] = static_cast<double>(inter) / static_cast<double>(uni);
    sum += *m.iou[c];
    ++n;
  }
  m.miou = n ? sum / n : 0.0;
  return m;
}

template <typename T>
std::vector<int> topk_rank(const Tensor<T>& scores, const std::vector<int>& truth,
                           const std::vector<int>& ignore) {
  const int p = scores.dim(0);
  const int k = scores.dim(1);
  if (static_cast<int>(truth.size()) != p) throw ShapeError("topk_rank: one truth label per row");
  std::vector<int> out(p, 0);
  for (int i = 0; i < p; ++i) {
    const int t = truth[i];
    if (std::find(ignore.begin(), ignore.end(), t) != ignore.end()) continue;
    if (t < 0 || t >= k) throw ConfigError("topk_rank: label out of range");
    const T* row = scores.data() + static_cast<std::size_t>(i) * k;
    int rank = 1;
    for (int c = 0; c < k; ++c) {
      if (row[c] > row[t] || (row[c] == row[t] && c < t)) ++rank;
    }
    out[i] = rank;
  }
  return out;
}

template <typename T>
Tensor<T> predict_scene(const NetworkConfig& config, ModelParams<T>& params, const Scene<T>& scene,
                        ModelOutput<T>* raw) {
  const int hw = config.input_size;
  std::vector<int> all(static_cast<std::size_t>(hw) * hw);
  std::iota(all.begin(), all.end(), 0);
  auto out = model_forward(config, params, std::vector<Scene<T>>{scene},
                           std::vector<std::vector<int>>{all}, Mode::kInfer, nullptr);
  Tensor<T> logits = std::move(out.logits);
  if (raw) *raw = std::move(out);
  return logits;
}

template <typename T>
EvalResult evaluate(const TrainResult<T>& model, Variant variant, const Dataset& dataset,
                    const std::string& split, const std::string& task,
                    const EvalOptions& options) {
  const TaskInfo& info = dataset.task(task);
  const std::vector<int> ignore = info.metric_ignore();
  const int k = info.num_outputs();
  const int t = dataset.spec.tile_size;
  EvalResult res;
  res.tiles = dataset.split_tiles(split);
  const int n = static_cast<int>(res.tiles.size());
  res.predictions.resize(n);
  if (options.keep_rank_maps) res.rank_maps.resize(n);

  if (variant == Variant::kRandom) {
    Rng rng = Rng::derive(options.seed, kRandomBaselineKey);
    for (int i = 0; i < n; ++i) {
      res.predictions[i] = Tensor<int>({t, t}, sample_from_prior(model.prior, t * t, rng));
      if (options.keep_rank_maps) {
        const Tensor<float> scores = prior_logits(model.prior, t * t);
        res.rank_maps[i] = Tensor<int>(
            {t, t}, topk_rank(scores, dataset.tiles[res.tiles[i]].labels.at(task).storage(), ignore));
      }
    }
  } else {
    ModelParams<T> params = model.params;
    const NetworkConfig& net = model.network;
    SceneSet<T> scenes = build_scenes<T>(dataset, scene_neighbours(net));
    if (options.shuffle_orientation) {
      Rng rng = Rng::derive(options.seed, kEvalShiftKey);
      assign_shifts(scenes, rng);
    }
    parallel_for(n, [&](int i) {
      const int tile = res.tiles[i];
      const Tensor<T> logits = predict_scene(net, params, scenes.scenes[tile]);
      Tensor<int> pred({t, t});
      for (int p = 0; p < t * t; ++p) {
        pred[p] = argmax_row(logits.data() + static_cast<std::size_t>(p) * k, k);
      }
      res.predictions[i] = std::move(pred);
      if (options.keep_rank_maps) {
        res.rank_maps[i] = Tensor<int>(
            {t, t}, topk_rank(logits, dataset.tiles[tile].labels.at(task).storage(), ignore));
      }
    });
  }

  std::vector<int> truth, pred;
  for (int i = 0; i < n; ++i) {
    const auto& labels = dataset.tiles[res.tiles[i]].labels.at(task).storage();
    truth.insert(truth.end(), labels.begin(), labels.end());
    pred.insert(pred.end(), res.predictions[i].storage().begin(), res.predictions[i].storage().end());
  }
  res.report.variant = variant_name(variant);
  res.report.task = task;
  res.report.split = split;
  res.report.metrics = compute_metrics(truth, pred, k, ignore);
  res.report.class_names = info.classes;
  res.report.class_names.push_back("background");
  res.report.class_names.push_back("unknown");
  return res;
}

double random_baseline_expected_accuracy(const std::vector<double>& train_prior,
                                         const Dataset& dataset, const std::string& split,
                                         const std::string& task) {
  const TaskInfo& info = dataset.task(task);
  const auto ignore = info.metric_ignore();
  std::vector<double> counts(info.num_outputs(), 0.0);
  for (int i : dataset.split_tiles(split)) {
    for (int v : dataset.tiles[i].labels.at(task).storage()) {
      if (std::find(ignore.begin(), ignore.end(), v) == ignore.end()) counts[v] += 1.0;
    }
  }
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  if (total <= 0.0) return 0.0;
  double acc = 0.0;
  for (std::size_t c = 0; c < counts.size(); ++c) acc += train_prior.at(c) * counts[c] / total;
  return acc;
}

template <typename T>
std::vector<Tensor<T>> export_bandwidth_map(const NetworkConfig& config, ModelParams<T>& params,
                                            const std::vector<Scene<T>>& scenes, bool* constant) {
  const Variant v = config.effective_variant();
  const int hw = config.input_size;
  std::vector<Tensor<T>> maps;
  if (v == Variant::kUnifiedAdaptive) {
    if (constant) *constant = false;
    for (const auto& s : scenes) {
      auto out = model_forward(config, params, std::vector<Scene<T>>{s},
                               std::vector<std::vector<int>>{{0}}, Mode::kInfer, nullptr);
      Tensor<T> m({hw, hw});
      for (int p = 0; p < hw * hw; ++p) {
        m[p] = (out.bandwidth[2 * p] + out.bandwidth[2 * p + 1]) / T(2);
      }
      maps.push_back(std::move(m));
    }
    return maps;
  }
  if (!params.contains("kernel.raw")) {
    throw ConfigError("variant " + variant_name(v) + " has no kernel bandwidth");
  }
  if (constant) *constant = true;
  const auto& raw = params.get("kernel.raw").value;
  const T mean = (softplus(raw[0]) + softplus(raw[1])) / T(2);
  for (std::size_t i = 0; i < scenes.size(); ++i) maps.emplace_back(Shape{hw, hw}, mean);
  return maps;
}

template <typename T>
double coefficient_of_variation(const std::vector<Tensor<T>>& maps) {
  double sum = 0.0;
  long n = 0;
  for (const auto& m : maps) {
    for (T v : m.storage()) sum += v;
    n += static_cast<long>(m.size());
  }
  if (n == 0) return 0.0;
  const double mean = sum / n;
  double sq = 0.0;
  for (const auto& m : maps) {
    for (T v : m.storage()) sq += (v - mean) * (v - mean);
  }
  return mean != 0.0 ? std::sqrt(sq / n) / std::abs(mean) : 0.0;
}

template <typename T>
OrientationResult experiment_orientation_shuffle(const Dataset& dataset, const TrainConfig& config,
                                                 const std::string& split) {
  if (!dataset.spec.orientation_signal) {
    throw ConfigError("the orientation experiment needs a dataset with orientation_signal on");
  }
  OrientationResult out;
  TrainConfig plain = config;
  plain.shuffle_orientation = false;
  const auto base = train<T>(Variant::kUnifiedAdaptive, dataset, plain);
  out.baseline = evaluate(base, Variant::kUnifiedAdaptive, dataset, split, config.task).report;

  TrainConfig shuffled = config;
  shuffled.shuffle_orientation = true;
  const auto shuf = train<T>(Variant::kUnifiedAdaptive, dataset, shuffled);
  EvalOptions opts;
  opts.seed = config.seed;
  opts.shuffle_orientation = true;
  out.shuffled = evaluate(shuf, Variant::kUnifiedAdaptive, dataset, split, config.task, opts).report;
  return out;
}

template <typename T>
std::vector<VaryNPoint> experiment_vary_n(const Dataset& dataset, const TrainConfig& config,
                                          const std::vector<int>& n_values,
                                          const std::string& split) {
  if (!std::is_sorted(n_values.begin(), n_values.end())) {
    throw ConfigError("vary-n values must be sorted ascending");
  }
  std::vector<VaryNPoint> curve;
  for (int n : n_values) {
    TrainConfig c = config;
    c.n_nearest = n;
    const auto model = train<T>(Variant::kUnifiedAdaptive, dataset, c);
    curve.push_back({n, evaluate(model, Variant::kUnifiedAdaptive, dataset, split, c.task).report});
  }
  return curve;
}

#define GEOFUSE_INSTANTIATE_TRAIN_EVAL(T)                                                        \
  template SceneSet<T> build_scenes<T>(const Dataset&, int);                                   \
  template void assign_shifts(SceneSet<T>&, Rng&);                                              \
  template TrainResult<T> train<T>(Variant, const Dataset&, const TrainConfig&,                 \
                                   const EpochHook<T>&);                                        \
  template std::vector<int> topk_rank(const Tensor<T>&, const std::vector<int>&,                \
                                      const std::vector<int>&);                                 \
  template Tensor<T> predict_scene(const NetworkConfig&, ModelParams<T>&, const Scene<T>&,      \
                                   ModelOutput<T>*);                                            \
  template EvalResult evaluate(const TrainResult<T>&, Variant, const Dataset&,                  \
                               const std::string&, const std::string&, const EvalOptions&);     \
  template std::vector<Tensor<T>> export_bandwidth_map(const NetworkConfig&, ModelParams<T>&,   \
                                                       const std::vector<Scene<T>>&, bool*);    \
  template double coefficient_of_variation(const std::vector<Tensor<T>>&);                      \
  template OrientationResult experiment_orientation_shuffle<T>(const Dataset&,                  \
                                                               const TrainConfig&,              \
                                                               const std::string&);             \
  template std::vector<VaryNPoint> experiment_vary_n<T>(const Dataset&, const TrainConfig&,     \
                                                        const std::vector<int>&,                \
                                                        const std::string&);

GEOFUSE_INSTANTIATE_TRAIN_EVAL(float)
GEOFUSE_INSTANTIATE_TRAIN_EVAL(double)

}  // namespace geofuse
