#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "geofuse/network.hpp"
#include "geofuse/synth_world.hpp"

namespace geofuse {

/// Mini-batches of the reference schedule (25 epochs of 1,227 batches) over
/// which the learning rate is halved every 7,500 steps.
inline constexpr long kReferenceHalvingInterval = 7500;
inline constexpr long kReferenceTotalSteps = 30675;

struct TrainConfig {
  double lr0 = 1e-3;
  long lr_halving_interval = 0;  // 0: scaled to the run length
  double weight_decay = 5e-4;
  int batch_size = 8;
  int pixels_per_image = 256;
  int epochs = 20;
  int n_nearest = 20;
  std::uint64_t seed = 1;
  std::string task = "land_use";
  bool shuffle_orientation = false;   // random circular shift of each observation's cutouts
  bool reshuffle_each_epoch = true;   // fresh shifts every epoch, else one fixed draw
  long max_steps = 0;                 // stop after this many mini-batches when positive

  void validate() const;
  /// The configured interval, or 7,500 scaled by total_steps / 30,675.
  long halving_interval(long total_steps) const;
};

/// Network configuration matching a dataset's geometry and a task.
NetworkConfig network_for(Variant variant, const Dataset& dataset, const std::string& task,
                          int n_nearest);

/// Uniform draw without replacement of flat pixel indices (r * W + c)
/// among pixels whose label is not ignored; every eligible pixel when fewer
/// than `count` exist, and none when no pixel is eligible.
std::vector<int> sample_pixels(const Tensor<int>& labels, int count, const std::set<int>& ignore,
                               Rng& rng);

/// Model inputs for every tile of a dataset. Observation pointers refer into
/// `dataset`, which must outlive the set.
template <typename T>
struct SceneSet {
  std::vector<Scene<T>> scenes;  // indexed like dataset.tiles
};

template <typename T>
SceneSet<T> build_scenes(const Dataset& dataset, int n_nearest);

/// Random circular shifts (0..3) for each scene's observations.
template <typename T>
void assign_shifts(SceneSet<T>& set, Rng& rng);

struct LogRecord {
  long step = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

template <typename T>
struct TrainResult {
  NetworkConfig network;
  ModelParams<T> params;
  std::vector<double> prior;  // training label prior over all outputs
  std::vector<LogRecord> log;
  std::vector<std::string> warnings;
  bool aborted = false;  // non-finite loss; params hold the last good epoch
  int completed_epochs = 0;
  std::string abort_reason;
};

/// Called after every epoch with (epoch, params); used for checkpointing.
template <typename T>
using EpochHook = std::function<void(int, const ModelParams<T>&)>;

/// Trains `variant` on the train split. The loss ignores UNKNOWN only.
/// The random variant has no parameters and only records the label prior.
template <typename T>
TrainResult<T> train(Variant variant, const Dataset& dataset, const TrainConfig& config,
                     const EpochHook<T>& on_epoch = {});

/// Label prior over the task's outputs from the train split, UNKNOWN excluded.
std::vector<double> label_prior(const Dataset& dataset, const std::string& task);

struct TaskMetrics {
  double accuracy = 0.0;
  std::vector<std::optional<double>> iou;  // empty where excluded
  double miou = 0.0;
  std::vector<std::vector<long>> confusion;  // [truth][prediction]
  long counted = 0;
};

/// Top-1 accuracy, per-class IoU, mIOU and confusion over pixels whose
/// truth is not ignored. IoU skips ignored classes and classes with empty
/// union; mIOU averages the rest.
TaskMetrics compute_metrics(const std::vector<int>& truth, const std::vector<int>& prediction,
                            int num_classes, const std::vector<int>& ignore);

struct EvalReport {
  std::string variant;
  std::string task;
  std::string split;
  TaskMetrics metrics;
  std::vector<std::string> class_names;
};

/// Per-pixel rank (1 = best) of the true class in each row of `scores`
/// [P, K]; equal scores rank the lower class id first. Pixels whose truth
/// is ignored get rank 0.
template <typename T>
std::vector<int> topk_rank(const Tensor<T>& scores, const std::vector<int>& truth,
                           const std::vector<int>& ignore);

/// Dense class scores [H*W, K] for one scene in inference mode.
template <typename T>
Tensor<T> predict_scene(const NetworkConfig& config, ModelParams<T>& params, const Scene<T>& scene,
                        ModelOutput<T>* raw = nullptr);

struct EvalOptions {
  std::uint64_t seed = 1;  // random baseline draws
  bool shuffle_orientation = false;
  bool keep_rank_maps = false;
};

struct EvalResult {
  EvalReport report;
  std::vector<int> tiles;                   // evaluated tile indices
  std::vector<Tensor<int>> predictions;     // per tile [H, W]
  std::vector<Tensor<int>> rank_maps;       // per tile [H, W] when requested
};

/// Dense evaluation of a trained model on every tile of a split.
template <typename T>
EvalResult evaluate(const TrainResult<T>& model, Variant variant, const Dataset& dataset,
                    const std::string& split, const std::string& task,
                    const EvalOptions& options = {});

/// Expected top-1 accuracy of sampling predictions from `train_prior`
/// against the split's metric-eligible labels: sum_k p_train(k) p_split(k).
double random_baseline_expected_accuracy(const std::vector<double>& train_prior,
                                         const Dataset& dataset, const std::string& split,
                                         const std::string& task);

/// Mean of the two bandwidths per pixel for each scene. For a uniform
/// variant every map is the constant softplus mean and `constant` is set.
template <typename T>
std::vector<Tensor<T>> export_bandwidth_map(const NetworkConfig& config, ModelParams<T>& params,
                                            const std::vector<Scene<T>>& scenes, bool* constant);

/// Coefficient of variation (std / mean) over every pixel of the maps.
template <typename T>
double coefficient_of_variation(const std::vector<Tensor<T>>& maps);

struct OrientationResult {
  EvalReport baseline;
  EvalReport shuffled;
};

/// unified_adaptive trained twice, once with shuffled cutouts.
template <typename T>
OrientationResult experiment_orientation_shuffle(const Dataset& dataset, const TrainConfig& config,
                                                 const std::string& split);

struct VaryNPoint {
  int n = 0;
  EvalReport report;
};

/// One unified_adaptive training per N; N = 0 is the remote model.
template <typename T>
std::vector<VaryNPoint> experiment_vary_n(const Dataset& dataset, const TrainConfig& config,
                                          const std::vector<int>& n_values,
                                          const std::string& split);

}  // namespace geofuse
