#include <cstdio>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "geofuse/error.hpp"
#include "geofuse/gradient_suite.hpp"
#include "geofuse/io.hpp"
#include "geofuse/parallel.hpp"
#include "geofuse/train_eval.hpp"

using namespace geofuse;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string precision = "f32";
  int threads = 1;
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void print_json(const Json& j) { std::cout << dump_json(j); }

std::string epoch_dir(int epoch) {
  std::ostringstream s;
  s << "epochs/epoch_" << std::setw(4) << std::setfill('0') << epoch;
  return s.str();
}

TrainConfig load_train_config(const std::string& path, const Globals& g) {
  TrainConfig c = path.empty() ? TrainConfig{} : train_config_from_json(read_json(path));
  if (g.seed_set) c.seed = g.seed;
  return c;
}

const TaskInfo& require_task(const Dataset& ds, const std::string& name) {
  for (const auto& t : ds.tasks) {
    if (t.name == name) return t;
  }
  throw ConfigError("dataset has no task '" + name + "'");
}

// ---- synth ------------------------------------------------------------------

int cmd_synth(const std::string& spec_path, const std::string& out, const Globals& g) {
  WorldSpec spec = world_spec_from_json(read_json(spec_path));
  if (g.seed_set) spec.seed = g.seed;
  const GeneratedWorld world = generate_world(spec);
  write_dataset(world.dataset, out);
  print_json(Json{{"dataset", out},
                  {"tiles", world.dataset.tiles.size()},
                  {"observations", world.dataset.observations.size()},
                  {"parcels", world.parcels.size()}});
  return 0;
}

// ---- train ------------------------------------------------------------------

template <typename T>
int cmd_train(const std::string& variant_name_arg, const std::string& dataset_dir,
              const std::string& config_path, const std::string& out, const std::string& task,
              const Globals& g) {
  const Variant variant = parse_variant(variant_name_arg);
  TrainConfig config = load_train_config(config_path, g);
  if (!task.empty()) config.task = task;
  const Dataset ds = read_dataset(dataset_dir);
  require_task(ds, config.task);

  fs::create_directories(out);
  TrainResult<T> snapshot;
  snapshot.network = network_for(variant, ds, config.task, config.n_nearest);
  snapshot.prior = label_prior(ds, config.task);
  const EpochHook<T> hook = [&](int epoch, const ModelParams<T>& params) {
    snapshot.params = params;
    save_checkpoint(fs::path(out) / epoch_dir(epoch), snapshot, config.task, epoch);
  };
  const TrainResult<T> result = train<T>(variant, ds, config, hook);

  std::string log;
  for (const auto& r : result.log) log += to_json(r).dump() + "\n";
  write_text(fs::path(out) / "log.jsonl", log);
  save_checkpoint(fs::path(out), result, config.task, result.completed_epochs);
  const Json summary{{"variant", variant_name(variant)},
                     {"task", config.task},
                     {"config", to_json(config)},
                     {"steps", result.log.size()},
                     {"completed_epochs", result.completed_epochs},
                     {"aborted", result.aborted},
                     {"abort_reason", result.abort_reason},
                     {"warnings", result.warnings},
                     {"final_loss", result.log.empty() ? 0.0 : result.log.back().loss}};
  write_text(fs::path(out) / "train_summary.json", dump_json(summary));
  print_json(summary);
  return result.aborted ? 1 : 0;
}

// ---- eval -------------------------------------------------------------------

template <typename T>
int cmd_eval(const std::string& ckpt, const std::string& dataset_dir, const std::string& split,
             std::string task, const std::string& out, const std::string& rank_dir,
             const Globals& g) {
  const TrainResult<T> model = load_checkpoint<T>(ckpt);
  const CheckpointInfo info = read_checkpoint_info(ckpt);
  if (task.empty()) task = info.task;
  if (task != info.task) {
    throw ConfigError("checkpoint was trained for task '" + info.task + "', not '" + task + "'");
  }
  const Dataset ds = read_dataset(dataset_dir);
  const TaskInfo& t = require_task(ds, task);
  if (info.network.num_classes != t.num_outputs()) {
    throw ConfigError("checkpoint class count does not match the dataset task");
  }
  EvalOptions opts;
  opts.seed = g.seed_set ? g.seed : 1;
  opts.keep_rank_maps = !rank_dir.empty();
  const EvalResult r = evaluate(model, info.network.variant, ds, split, task, opts);
  const Json report = to_json(r.report);
  if (!out.empty()) write_text(out, dump_json(report));
  for (std::size_t i = 0; i < r.rank_maps.size(); ++i) {
    std::ostringstream name;
    name << "rank_tile_" << std::setw(5) << std::setfill('0') << ds.tiles[r.tiles[i]].id << ".ppm";
    write_bytes(fs::path(rank_dir) / name.str(), render_rank(r.rank_maps[i], t.num_outputs()));
  }
  print_json(report);
  return 0;
}

// ---- gradcheck --------------------------------------------------------------

int cmd_gradcheck(int seeds, double tolerance, const std::string& filter, const Globals& g) {
  if (g.precision != "f64") throw UsageError("gradcheck runs in 64-bit; pass --precision f64");
  const auto results = run_gradient_suite(seeds, tolerance, filter, &std::cerr);
  if (results.empty()) throw ConfigError("no gradient case matches '" + filter + "'");
  Json cases = Json::array();
  int failed = 0;
  for (const auto& r : results) {
    cases.push_back(Json{{"name", r.name},
                         {"seeds", r.seeds},
                         {"failures", r.failures},
                         {"worst_rel_error", r.worst},
                         {"first_failure", r.first_failure}});
    if (r.failures > 0) ++failed;
  }
  print_json(Json{{"tolerance", tolerance}, {"cases", cases}, {"failed_cases", failed}});
  return failed == 0 ? 0 : 1;
}

// ---- experiments ------------------------------------------------------------

template <typename T>
int cmd_orientation(const std::string& dataset_dir, const std::string& config_path,
                    const std::string& split, const Globals& g) {
  const TrainConfig config = load_train_config(config_path, g);
  const Dataset ds = read_dataset(dataset_dir);
  const OrientationResult r = experiment_orientation_shuffle<T>(ds, config, split);
  print_json(Json{{"baseline", to_json(r.baseline)},
                  {"shuffled", to_json(r.shuffled)},
                  {"accuracy_drop", r.baseline.metrics.accuracy - r.shuffled.metrics.accuracy}});
  return 0;
}

template <typename T>
int cmd_vary_n(const std::string& dataset_dir, const std::string& config_path,
               const std::string& split, const std::vector<int>& n_values, const Globals& g) {
  const TrainConfig config = load_train_config(config_path, g);
  const Dataset ds = read_dataset(dataset_dir);
  const auto curve = experiment_vary_n<T>(ds, config, n_values, split);
  Json points = Json::array();
  for (const auto& p : curve) {
    points.push_back(Json{{"n", p.n},
                          {"accuracy", p.report.metrics.accuracy},
                          {"miou", p.report.metrics.miou},
                          {"report", to_json(p.report)}});
  }
  print_json(Json{{"curve", points}});
  return 0;
}

template <typename T>
int cmd_bandwidth_map(const std::string& ckpt, const std::string& dataset_dir,
                      const std::string& split, const std::string& out) {
  TrainResult<T> model = load_checkpoint<T>(ckpt);
  const Dataset ds = read_dataset(dataset_dir);
  const SceneSet<T> all = build_scenes<T>(ds, model.network.n_nearest);
  std::vector<Scene<T>> scenes;
  std::vector<int> ids;
  for (std::size_t i = 0; i < ds.tiles.size(); ++i) {
    if (ds.tiles[i].split == split) {
      scenes.push_back(all.scenes[i]);
      ids.push_back(ds.tiles[i].id);
    }
  }
  if (scenes.empty()) throw ConfigError("split '" + split + "' has no tiles");
  bool constant = false;
  const auto maps = export_bandwidth_map(model.network, model.params, scenes, &constant);
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& m : maps) {
    for (T v : m.storage()) {
      lo = std::min(lo, static_cast<double>(v));
      hi = std::max(hi, static_cast<double>(v));
    }
  }
  Json tiles = Json::array();
  for (std::size_t i = 0; i < maps.size(); ++i) {
    std::ostringstream name;
    name << "bandwidth_tile_" << std::setw(5) << std::setfill('0') << ids[i];
    write_tensor(fs::path(out) / (name.str() + ".gftn"), maps[i]);
    write_bytes(fs::path(out) / (name.str() + ".ppm"), render_scalar(maps[i], lo, hi));
    tiles.push_back(ids[i]);
  }
  const Json summary{{"variant", variant_name(model.network.variant)},
                     {"split", split},
                     {"constant", constant},
                     {"coefficient_of_variation", coefficient_of_variation(maps)},
                     {"min", lo},
                     {"max", hi},
                     {"tiles", tiles}};
  write_text(fs::path(out) / "bandwidth_summary.json", dump_json(summary));
  print_json(summary);
  return 0;
}

// ---- render -----------------------------------------------------------------

int cmd_render(const std::string& input, const std::string& out, const std::string& kind,
               const std::string& dataset_dir, const std::string& task, int num_classes,
               const std::vector<double>& range) {
  const TensorBlob blob = decode_tensor(read_bytes(input));
  std::vector<unsigned char> bytes;
  if (kind == "labels") {
    if (dataset_dir.empty() || task.empty()) throw UsageError("labels rendering needs --dataset and --task");
    const Json m = read_json(fs::path(dataset_dir) / "manifest.json");
    std::vector<TaskInfo> tasks;
    for (const auto& t : m.at("tasks")) {
      tasks.push_back({t.at("name").get<std::string>(), t.at("classes").get<std::vector<std::string>>()});
    }
    const TaskInfo* info = nullptr;
    for (const auto& t : tasks) {
      if (t.name == task) info = &t;
    }
    if (!info) throw ConfigError("dataset has no task '" + task + "'");
    bytes = render_categorical(blob_to_tensor<std::int32_t>(blob), task_palette(*info));
  } else if (kind == "rank") {
    if (num_classes < 1) throw UsageError("rank rendering needs --num-classes");
    bytes = render_rank(blob_to_tensor<std::int32_t>(blob), num_classes);
  } else if (kind == "scalar") {
    auto draw = [&](const auto& t) {
      double lo = 0, hi = 0;
      if (range.size() == 2) {
        lo = range[0];
        hi = range[1];
      } else {
        const auto [mn, mx] = std::minmax_element(t.storage().begin(), t.storage().end());
        lo = static_cast<double>(*mn);
        hi = static_cast<double>(*mx);
      }
      return render_scalar(t, lo, hi);
    };
    if (blob.dtype == DType::kF64) {
      bytes = draw(blob_to_tensor<double>(blob));
    } else {
      bytes = draw(blob_to_tensor<float>(blob));
    }
  } else if (kind == "overhead") {
    bytes = render_overhead(blob_to_tensor<float>(blob));
  } else {
    throw UsageError("unknown render kind '" + kind + "'");
  }
  write_bytes(out, bytes);
  return 0;
}

int fail(const char* kind, const std::string& message, int code) {
  std::cerr << Json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"geofuse: kernel-regression fusion of ground observations with overhead imagery"};
  app.require_subcommand(1);
  Globals g;
  auto* seed_opt = app.add_option("--seed", g.seed, "Override the seed of the spec or config");
  app.add_option("--precision", g.precision, "Floating point precision")
      ->check(CLI::IsMember({"f32", "f64"}));
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::Range(1, 256));

  std::string spec_path, out, variant, dataset, config, task, split = "test", ckpt, rank_dir;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("spec", spec_path, "World spec JSON")->required();
  synth->add_option("out", out, "Output directory")->required();

  auto* trn = app.add_subcommand("train", "Train a model variant");
  trn->add_option("--variant", variant)->required();
  trn->add_option("--dataset", dataset)->required();
  trn->add_option("--config", config, "Training config JSON");
  trn->add_option("--out", out, "Checkpoint directory")->required();
  trn->add_option("--task", task);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint and print an EvalReport");
  ev->add_option("--ckpt", ckpt)->required();
  ev->add_option("--dataset", dataset)->required();
  ev->add_option("--split", split);
  ev->add_option("--task", task);
  ev->add_option("--out", out, "Also write the report here");
  ev->add_option("--rank-maps", rank_dir, "Directory for per-tile rank PPMs");

  int seeds = 20;
  double tolerance = 1e-4;
  std::string filter;
  auto* gc = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  gc->add_option("--seeds", seeds)->check(CLI::Range(1, 100000));
  gc->add_option("--tolerance", tolerance);
  gc->add_option("--filter", filter, "Only cases whose name contains this");

  auto* exp = app.add_subcommand("experiment", "Run an experiment");
  exp->require_subcommand(1);
  auto* ori = exp->add_subcommand("orientation", "Orientation shuffle experiment");
  ori->add_option("--dataset", dataset)->required();
  ori->add_option("--config", config);
  ori->add_option("--split", split);
  std::vector<int> n_values{0, 1, 5, 10, 20};
  auto* vn = exp->add_subcommand("vary-n", "Accuracy against the number of observations");
  vn->add_option("--dataset", dataset)->required();
  vn->add_option("--config", config);
  vn->add_option("--split", split);
  vn->add_option("--n", n_values)->delimiter(',');
  auto* bw = exp->add_subcommand("bandwidth-map", "Export per-pixel bandwidth maps");
  bw->add_option("--ckpt", ckpt)->required();
  bw->add_option("--dataset", dataset)->required();
  bw->add_option("--split", split);
  bw->add_option("--out", out)->required();

  std::string input, kind = "labels";
  int num_classes = 0;
  std::vector<double> range;
  auto* rnd = app.add_subcommand("render", "Render a tensor file to PPM");
  rnd->add_option("input", input, "Tensor file")->required();
  rnd->add_option("out", out, "PPM path")->required();
  rnd->add_option("--kind", kind)->check(CLI::IsMember({"labels", "rank", "scalar", "overhead"}));
  rnd->add_option("--dataset", dataset, "Dataset providing the class palette");
  rnd->add_option("--task", task);
  rnd->add_option("--num-classes", num_classes);
  rnd->add_option("--range", range, "lo,hi for scalar maps")->delimiter(',')->expected(2);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }
  g.seed_set = seed_opt->count() > 0;
  set_num_threads(g.threads);
  const bool f64 = g.precision == "f64";

  try {
    if (*synth) return cmd_synth(spec_path, out, g);
    if (*trn) {
      return f64 ? cmd_train<double>(variant, dataset, config, out, task, g)
                 : cmd_train<float>(variant, dataset, config, out, task, g);
    }
    if (*ev) {
      return f64 ? cmd_eval<double>(ckpt, dataset, split, task, out, rank_dir, g)
                 : cmd_eval<float>(ckpt, dataset, split, task, out, rank_dir, g);
    }
    if (*gc) return cmd_gradcheck(seeds, tolerance, filter, g);
    if (*ori) {
      return f64 ? cmd_orientation<double>(dataset, config, split, g)
                 : cmd_orientation<float>(dataset, config, split, g);
    }
    if (*vn) {
      return f64 ? cmd_vary_n<double>(dataset, config, split, n_values, g)
                 : cmd_vary_n<float>(dataset, config, split, n_values, g);
    }
    if (*bw) {
      return f64 ? cmd_bandwidth_map<double>(ckpt, dataset, split, out)
                 : cmd_bandwidth_map<float>(ckpt, dataset, split, out);
    }
    if (*rnd) return cmd_render(input, out, kind, dataset, task, num_classes, range);
  } catch (const UsageError& e) {
    return fail("usage", e.what(), 2);
  } catch (const ConfigError& e) {
    return fail("config", e.what(), 2);
  } catch (const FormatError& e) {
    return fail("format", e.what(), 1);
  } catch (const NumericError& e) {
    return fail("numeric", e.what(), 1);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), 1);
  }
  return fail("usage", "no subcommand", 2);
}
