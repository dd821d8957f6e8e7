#include "geofuse/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "geofuse/error.hpp"

namespace geofuse {

namespace {

constexpr char kMagic[4] = {'G', 'F', 'T', 'N'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

template <typename T>
void put_value(std::vector<unsigned char>& out, T v) {
  if constexpr (std::is_same_v<T, float>) {
    put_u32(out, std::bit_cast<std::uint32_t>(v));
  } else if constexpr (std::is_same_v<T, double>) {
    put_u64(out, std::bit_cast<std::uint64_t>(v));
  } else if constexpr (std::is_same_v<T, std::uint8_t>) {
    out.push_back(v);
  } else {
    put_u32(out, static_cast<std::uint32_t>(v));
  }
}

template <typename T>
T get_value(const unsigned char* p) {
  if constexpr (std::is_same_v<T, float>) {
    return std::bit_cast<float>(get_u32(p));
  } else if constexpr (std::is_same_v<T, double>) {
    return std::bit_cast<double>(get_u64(p));
  } else if constexpr (std::is_same_v<T, std::uint8_t>) {
    return *p;
  } else {
    return static_cast<std::int32_t>(get_u32(p));
  }
}

std::string format_error(std::size_t offset, const std::string& what) {
  return "tensor file: " + what + " at offset " + std::to_string(offset);
}

std::string tile_dir(int id) {
  std::ostringstream s;
  s << "tiles/tile_" << std::setw(5) << std::setfill('0') << id;
  return s.str();
}

std::string district_name(District d) { return d == District::kUrban ? "urban" : "suburban"; }

District parse_district(const std::string& s) {
  if (s == "urban") return District::kUrban;
  if (s == "suburban") return District::kSuburban;
  throw FormatError("unknown district '" + s + "'");
}

void reject_unknown_keys(const Json& j, const std::set<std::string>& known, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  for (const auto& [k, _] : j.items()) {
    if (!known.count(k)) throw ConfigError(std::string(what) + ": unknown key '" + k + "'");
  }
}

template <typename V>
void read_field(const Json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("field '") + key + "': " + e.what());
  }
}

std::string param_file(const std::string& name, const char* part) {
  return "params/" + name + "." + part + ".gftn";
}

}  // namespace

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kU8: return 1;
    case DType::kI32: return 4;
  }
  throw FormatError("unknown dtype");
}

std::string dtype_name(DType d) {
  switch (d) {
    case DType::kF32: return "f32";
    case DType::kF64: return "f64";
    case DType::kU8: return "u8";
    case DType::kI32: return "i32";
  }
  return "?";
}

template <typename T>
std::vector<unsigned char> encode_tensor(const Tensor<T>& t) {
  std::vector<unsigned char> out(kMagic, kMagic + 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(dtype_of<T>()));
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  out.reserve(out.size() + t.size() * sizeof(T));
  for (T v : t.storage()) put_value(out, v);
  return out;
}

TensorBlob decode_tensor(const std::vector<unsigned char>& bytes) {
  const std::size_t n = bytes.size();
  if (n < 4) throw FormatError(format_error(0, "truncated header"));
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError(format_error(0, "bad magic"));
  if (n < 16) throw FormatError(format_error(n, "truncated header"));
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kVersion) {
    throw FormatError(format_error(4, "unsupported version " + std::to_string(version)));
  }
  const std::uint32_t code = get_u32(bytes.data() + 8);
  if (code > 3) throw FormatError(format_error(8, "unknown dtype " + std::to_string(code)));
  TensorBlob blob;
  blob.dtype = static_cast<DType>(code);
  const std::uint32_t rank = get_u32(bytes.data() + 12);
  std::size_t offset = 16;
  if (rank > 16) throw FormatError(format_error(12, "implausible rank " + std::to_string(rank)));
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    if (offset + 4 > n) throw FormatError(format_error(offset, "truncated dims"));
    const std::uint32_t d = get_u32(bytes.data() + offset);
    if (d == 0 || d > static_cast<std::uint32_t>(INT32_MAX)) {
      throw FormatError(format_error(offset, "invalid dimension " + std::to_string(d)));
    }
    blob.shape.push_back(static_cast<int>(d));
    count *= d;
    offset += 4;
  }
  const std::size_t need = count * dtype_size(blob.dtype);
  if (n - offset < need) {
    throw FormatError(format_error(n, "truncated payload (expected " + std::to_string(need) +
                                          " bytes after offset " + std::to_string(offset) + ")"));
  }
  if (n - offset > need) throw FormatError(format_error(offset + need, "trailing bytes"));
  blob.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end());
  return blob;
}

template <typename T>
Tensor<T> blob_to_tensor(const TensorBlob& blob) {
  if (blob.dtype != dtype_of<T>()) {
    throw FormatError("tensor file: expected dtype " + dtype_name(dtype_of<T>()) + ", found " +
                      dtype_name(blob.dtype) + " at offset 8");
  }
  Tensor<T> t(blob.shape);
  const std::size_t sz = sizeof(T);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = get_value<T>(blob.payload.data() + i * sz);
  return t;
}

std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

void write_bytes(const fs::path& path, const std::vector<unsigned char>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
  write_bytes(path, std::vector<unsigned char>(text.begin(), text.end()));
}

template <typename T>
void write_tensor(const fs::path& path, const Tensor<T>& t) {
  write_bytes(path, encode_tensor(t));
}

template <typename T>
Tensor<T> read_tensor(const fs::path& path) {
  try {
    return blob_to_tensor<T>(decode_tensor(read_bytes(path)));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string dump_json(const Json& j) { return j.dump(2) + "\n"; }

Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---- configuration documents ------------------------------------------------

Json to_json(const WorldSpec& s) {
  return Json{{"seed", s.seed},
              {"tiles_x", s.tiles_x},
              {"tiles_y", s.tiles_y},
              {"tile_size", s.tile_size},
              {"pixel_size", s.pixel_size},
              {"district_size", s.district_size},
              {"urban_fraction", s.urban_fraction},
              {"urban_blocks", s.urban_blocks},
              {"suburban_blocks", s.suburban_blocks},
              {"land_use_prior", s.land_use_prior},
              {"age_prior", s.age_prior},
              {"block_coherence", s.block_coherence},
              {"unknown_fraction", s.unknown_fraction},
              {"hidden_attribute_ratio", s.hidden_attribute_ratio},
              {"orientation_signal", s.orientation_signal},
              {"observation_density", s.observation_density},
              {"density_contrast", s.density_contrast},
              {"view_radius", s.view_radius},
              {"cutout_dim", s.cutout_dim},
              {"cutout_noise", s.cutout_noise},
              {"overhead_noise", s.overhead_noise},
              {"holdout_columns", s.holdout_columns},
              {"test_fraction", s.test_fraction}};
}

WorldSpec world_spec_from_json(const Json& j) {
  WorldSpec s;
  std::set<std::string> known;
  const Json defaults = to_json(s);
  for (const auto& [k, _] : defaults.items()) known.insert(k);
  reject_unknown_keys(j, known, "world spec");
  read_field(j, "seed", s.seed);
  read_field(j, "tiles_x", s.tiles_x);
  read_field(j, "tiles_y", s.tiles_y);
  read_field(j, "tile_size", s.tile_size);
  read_field(j, "pixel_size", s.pixel_size);
  read_field(j, "district_size", s.district_size);
  read_field(j, "urban_fraction", s.urban_fraction);
  read_field(j, "urban_blocks", s.urban_blocks);
  read_field(j, "suburban_blocks", s.suburban_blocks);
  read_field(j, "land_use_prior", s.land_use_prior);
  read_field(j, "age_prior", s.age_prior);
  read_field(j, "block_coherence", s.block_coherence);
  read_field(j, "unknown_fraction", s.unknown_fraction);
  read_field(j, "hidden_attribute_ratio", s.hidden_attribute_ratio);
  read_field(j, "orientation_signal", s.orientation_signal);
  read_field(j, "observation_density", s.observation_density);
  read_field(j, "density_contrast", s.density_contrast);
  read_field(j, "view_radius", s.view_radius);
  read_field(j, "cutout_dim", s.cutout_dim);
  read_field(j, "cutout_noise", s.cutout_noise);
  read_field(j, "overhead_noise", s.overhead_noise);
  read_field(j, "holdout_columns", s.holdout_columns);
  read_field(j, "test_fraction", s.test_fraction);
  s.validate();
  return s;
}

Json to_json(const TrainConfig& c) {
  return Json{{"lr0", c.lr0},
              {"lr_halving_interval", c.lr_halving_interval},
              {"weight_decay", c.weight_decay},
              {"batch_size", c.batch_size},
              {"pixels_per_image", c.pixels_per_image},
              {"epochs", c.epochs},
              {"n_nearest", c.n_nearest},
              {"seed", c.seed},
              {"task", c.task},
              {"shuffle_orientation", c.shuffle_orientation},
              {"reshuffle_each_epoch", c.reshuffle_each_epoch},
              {"max_steps", c.max_steps}};
}

TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  std::set<std::string> known;
  const Json defaults = to_json(c);
  for (const auto& [k, _] : defaults.items()) known.insert(k);
  reject_unknown_keys(j, known, "train config");
  read_field(j, "lr0", c.lr0);
  read_field(j, "lr_halving_interval", c.lr_halving_interval);
  read_field(j, "weight_decay", c.weight_decay);
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "pixels_per_image", c.pixels_per_image);
  read_field(j, "epochs", c.epochs);
  read_field(j, "n_nearest", c.n_nearest);
  read_field(j, "seed", c.seed);
  read_field(j, "task", c.task);
  read_field(j, "shuffle_orientation", c.shuffle_orientation);
  read_field(j, "reshuffle_each_epoch", c.reshuffle_each_epoch);
  read_field(j, "max_steps", c.max_steps);
  c.validate();
  return c;
}

Json to_json(const NetworkConfig& c) {
  return Json{{"variant", variant_name(c.variant)},
              {"input_size", c.input_size},
              {"channels", c.channels},
              {"layers", c.layers},
              {"fusion_group", c.fusion_group},
              {"num_classes", c.num_classes},
              {"ground_dim", c.ground_dim},
              {"cutout_dim", c.cutout_dim},
              {"ground_enc_dim", c.ground_enc_dim},
              {"n_nearest", c.n_nearest},
              {"mlp_hidden", c.mlp_hidden},
              {"head_dims", c.head_dims},
              {"fusion_kernel", c.fusion_kernel},
              {"fusion_pad", c.fusion_pad},
              {"bandwidth_init", c.bandwidth_init},
              {"head_bias_init", c.head_bias_init},
              {"head_grad_to_trunk", c.head_grad_to_trunk},
              {"leaky_alpha", c.leaky_alpha}};
}

NetworkConfig network_config_from_json(const Json& j) {
  NetworkConfig c;
  std::set<std::string> known;
  const Json defaults = to_json(c);
  for (const auto& [k, _] : defaults.items()) known.insert(k);
  reject_unknown_keys(j, known, "network config");
  if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  read_field(j, "input_size", c.input_size);
  read_field(j, "channels", c.channels);
  read_field(j, "layers", c.layers);
  read_field(j, "fusion_group", c.fusion_group);
  read_field(j, "num_classes", c.num_classes);
  read_field(j, "ground_dim", c.ground_dim);
  read_field(j, "cutout_dim", c.cutout_dim);
  read_field(j, "ground_enc_dim", c.ground_enc_dim);
  read_field(j, "n_nearest", c.n_nearest);
  read_field(j, "mlp_hidden", c.mlp_hidden);
  read_field(j, "head_dims", c.head_dims);
  read_field(j, "fusion_kernel", c.fusion_kernel);
  read_field(j, "fusion_pad", c.fusion_pad);
  read_field(j, "bandwidth_init", c.bandwidth_init);
  read_field(j, "head_bias_init", c.head_bias_init);
  read_field(j, "head_grad_to_trunk", c.head_grad_to_trunk);
  read_field(j, "leaky_alpha", c.leaky_alpha);
  c.validate();
  return c;
}

Json to_json(const EvalReport& r) {
  Json iou = Json::array();
  for (const auto& v : r.metrics.iou) iou.push_back(v ? Json(*v) : Json(nullptr));
  return Json{{"variant", r.variant},
              {"task", r.task},
              {"split", r.split},
              {"accuracy", r.metrics.accuracy},
              {"miou", r.metrics.miou},
              {"iou", iou},
              {"confusion", r.metrics.confusion},
              {"pixels", r.metrics.counted},
              {"classes", r.class_names}};
}

Json to_json(const LogRecord& r) {
  return Json{{"step", r.step}, {"epoch", r.epoch}, {"lr", r.lr}, {"loss", r.loss}};
}

// ---- dataset layout ---------------------------------------------------------

void write_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  Json tiles = Json::array();
  std::map<std::string, std::vector<int>> splits{{"train", {}}, {"test", {}}, {"holdout", {}}};
  for (const Tile& tile : ds.tiles) {
    const std::string base = tile_dir(tile.id);
    Json labels = Json::object();
    for (const auto& [task, raster] : tile.labels) {
      const std::string p = base + "/labels_" + task + ".gftn";
      write_tensor(dir / p, raster);
      labels[task] = p;
    }
    write_tensor(dir / (base + "/overhead.gftn"), tile.overhead);
    tiles.push_back(Json{{"id", tile.id},
                         {"tx", tile.tx},
                         {"ty", tile.ty},
                         {"district", district_name(tile.district)},
                         {"geo_transform", tile.transform.a},
                         {"overhead", base + "/overhead.gftn"},
                         {"labels", labels},
                         {"split", tile.split},
                         {"observations", tile.observation_ids}});
    splits[tile.split].push_back(tile.id);
  }

  const int n = static_cast<int>(ds.observations.size());
  const int dim = n > 0 ? static_cast<int>(ds.observations[0].cutouts[0].size()) : ds.spec.cutout_dim;
  Tensor<std::int32_t> ids({std::max(n, 1)}, -1);
  Tensor<double> locations({std::max(n, 1), 2});
  Tensor<float> cutouts({std::max(n, 1), kNumCutouts, dim});
  for (int i = 0; i < n; ++i) {
    const auto& o = ds.observations[i];
    if (o.id > INT32_MAX) throw FormatError("observation id exceeds the i32 range");
    ids[i] = static_cast<std::int32_t>(o.id);
    locations(i, 0) = o.location.x;
    locations(i, 1) = o.location.y;
    for (int d = 0; d < kNumCutouts; ++d) {
      if (static_cast<int>(o.cutouts[d].size()) != dim) throw FormatError("ragged cutouts");
      for (int j = 0; j < dim; ++j) cutouts(i, d, j) = o.cutouts[d][j];
    }
  }
  write_tensor(dir / "observations/ids.gftn", ids);
  write_tensor(dir / "observations/locations.gftn", locations);
  write_tensor(dir / "observations/cutouts.gftn", cutouts);

  Json tasks = Json::array();
  for (const auto& t : ds.tasks) {
    tasks.push_back(Json{{"name", t.name},
                         {"classes", t.classes},
                         {"background", t.background()},
                         {"unknown", t.unknown()}});
  }
  const Json manifest{{"format", "geofuse-dataset"},
                      {"version", 1},
                      {"spec", to_json(ds.spec)},
                      {"tasks", tasks},
                      {"tiles", tiles},
                      {"observations",
                       Json{{"count", n},
                            {"ids", "observations/ids.gftn"},
                            {"locations", "observations/locations.gftn"},
                            {"cutouts", "observations/cutouts.gftn"}}},
                      {"splits", splits}};
  write_text(dir / "manifest.json", dump_json(manifest));
}

void validate_manifest(const Json& m, const fs::path& dir) {
  auto fail = [](const std::string& what) { throw FormatError("manifest: " + what); };
  try {
    if (m.value("format", "") != "geofuse-dataset") fail("not a geofuse dataset manifest");
    auto check_file = [&](const std::string& rel) {
      if (rel.empty() || fs::path(rel).is_absolute()) fail("invalid path '" + rel + "'");
      if (!fs::is_regular_file(dir / rel)) fail("dangling path '" + rel + "'");
    };
    std::set<int> tile_ids;
    std::map<std::string, std::set<int>> by_split;
    std::set<std::string> task_names;
    for (const auto& t : m.at("tasks")) {
      const std::string name = t.at("name").get<std::string>();
      if (!task_names.insert(name).second) fail("duplicate task '" + name + "'");
      const int k = static_cast<int>(t.at("classes").size());
      if (t.at("background").get<int>() != k || t.at("unknown").get<int>() != k + 1) {
        fail("task '" + name + "' sentinel ids must be K and K+1");
      }
    }
    for (const auto& t : m.at("tiles")) {
      const int id = t.at("id").get<int>();
      if (!tile_ids.insert(id).second) fail("duplicate tile id " + std::to_string(id));
      GeoTransform g;
      g.a = t.at("geo_transform").get<std::array<double, 6>>();
      if (!g.invertible()) fail("tile " + std::to_string(id) + " has a singular geo_transform");
      check_file(t.at("overhead").get<std::string>());
      for (const auto& name : task_names) {
        if (!t.at("labels").contains(name)) fail("tile " + std::to_string(id) + " lacks labels for " + name);
        check_file(t.at("labels").at(name).get<std::string>());
      }
      by_split[t.at("split").get<std::string>()].insert(id);
    }
    const auto& obs = m.at("observations");
    for (const char* key : {"ids", "locations", "cutouts"}) check_file(obs.at(key).get<std::string>());
    for (const auto& [split, ids] : m.at("splits").items()) {
      std::set<int> listed;
      for (int id : ids.get<std::vector<int>>()) {
        if (!listed.insert(id).second) fail("duplicate id " + std::to_string(id) + " in split " + split);
        if (!tile_ids.count(id)) fail("split " + split + " names unknown tile " + std::to_string(id));
      }
      if (listed != by_split[split]) fail("split " + split + " disagrees with the tile entries");
    }
  } catch (const Json::exception& e) {
    fail(e.what());
  }
}

Dataset read_dataset(const fs::path& dir) {
  const Json m = read_json(dir / "manifest.json");
  validate_manifest(m, dir);
  Dataset ds;
  ds.spec = world_spec_from_json(m.at("spec"));
  for (const auto& t : m.at("tasks")) {
    ds.tasks.push_back(TaskInfo{t.at("name").get<std::string>(),
                                t.at("classes").get<std::vector<std::string>>()});
  }
  for (const auto& t : m.at("tiles")) {
    Tile tile;
    tile.id = t.at("id").get<int>();
    tile.tx = t.at("tx").get<int>();
    tile.ty = t.at("ty").get<int>();
    tile.district = parse_district(t.at("district").get<std::string>());
    tile.transform.a = t.at("geo_transform").get<std::array<double, 6>>();
    tile.overhead = read_tensor<float>(dir / t.at("overhead").get<std::string>());
    for (const auto& task : ds.tasks) {
      auto raster = read_tensor<std::int32_t>(dir / t.at("labels").at(task.name).get<std::string>());
      for (int v : raster.storage()) {
        if (v < 0 || v > task.unknown()) {
          throw FormatError("tile " + std::to_string(tile.id) + ": invalid label " + std::to_string(v));
        }
      }
      tile.labels[task.name] = std::move(raster);
    }
    tile.split = t.at("split").get<std::string>();
    tile.observation_ids = t.at("observations").get<std::vector<std::int64_t>>();
    ds.tiles.push_back(std::move(tile));
  }
  const auto& obs = m.at("observations");
  const int n = obs.at("count").get<int>();
  if (n > 0) {
    const auto ids = read_tensor<std::int32_t>(dir / obs.at("ids").get<std::string>());
    const auto loc = read_tensor<double>(dir / obs.at("locations").get<std::string>());
    const auto cut = read_tensor<float>(dir / obs.at("cutouts").get<std::string>());
    if (ids.size() != static_cast<std::size_t>(n) || loc.shape() != Shape{n, 2} ||
        cut.rank() != 3 || cut.dim(0) != n || cut.dim(1) != kNumCutouts) {
      throw FormatError("observation tables disagree with the manifest count");
    }
    std::set<std::int64_t> seen;
    const int dim = cut.dim(2);
    for (int i = 0; i < n; ++i) {
      GroundObservation o;
      o.id = ids[i];
      if (!seen.insert(o.id).second) throw FormatError("duplicate observation id " + std::to_string(o.id));
      o.location = {loc(i, 0), loc(i, 1)};
      for (int d = 0; d < kNumCutouts; ++d) {
        o.cutouts[d].assign(cut.data() + (static_cast<std::size_t>(i) * kNumCutouts + d) * dim,
                            cut.data() + (static_cast<std::size_t>(i) * kNumCutouts + d + 1) * dim);
      }
      ds.observations.push_back(std::move(o));
    }
  }
  return ds;
}

// ---- checkpoints ------------------------------------------------------------

template <typename T>
void save_checkpoint(const fs::path& dir, const TrainResult<T>& model, const std::string& task,
                     int epoch) {
  fs::create_directories(dir);
  Json names = Json::array();
  for (const auto& [name, p] : model.params.all()) {
    write_tensor(dir / param_file(name, "value"), p.value);
    write_tensor(dir / param_file(name, "m"), p.m);
    write_tensor(dir / param_file(name, "v"), p.v);
    names.push_back(Json{{"name", name}, {"decay", p.decay}});
  }
  Json buffers = Json::array();
  for (const auto& [name, b] : model.params.buffers()) {
    write_tensor(dir / ("buffers/" + name + ".gftn"), b);
    buffers.push_back(name);
  }
  const Json info{{"format", "geofuse-checkpoint"},
                  {"version", 1},
                  {"network", to_json(model.network)},
                  {"task", task},
                  {"precision", std::is_same_v<T, float> ? "f32" : "f64"},
                  {"epoch", epoch},
                  {"step", model.params.step},
                  {"prior", model.prior},
                  {"params", names},
                  {"buffers", buffers}};
  write_text(dir / "checkpoint.json", dump_json(info));
}

CheckpointInfo read_checkpoint_info(const fs::path& dir) {
  const Json j = read_json(dir / "checkpoint.json");
  try {
    if (j.at("format") != "geofuse-checkpoint") throw FormatError("not a geofuse checkpoint");
    CheckpointInfo info;
    info.network = network_config_from_json(j.at("network"));
    info.task = j.at("task").get<std::string>();
    info.precision = j.at("precision").get<std::string>();
    info.epoch = j.at("epoch").get<int>();
    info.step = j.at("step").get<long>();
    info.prior = j.at("prior").get<std::vector<double>>();
    return info;
  } catch (const Json::exception& e) {
    throw FormatError(std::string("checkpoint.json: ") + e.what());
  }
}

template <typename T>
TrainResult<T> load_checkpoint(const fs::path& dir) {
  const CheckpointInfo info = read_checkpoint_info(dir);
  const std::string want = std::is_same_v<T, float> ? "f32" : "f64";
  if (info.precision != want) {
    throw FormatError("checkpoint precision is " + info.precision + ", requested " + want);
  }
  const Json j = read_json(dir / "checkpoint.json");
  TrainResult<T> model;
  model.network = info.network;
  model.prior = info.prior;
  model.completed_epochs = info.epoch;
  for (const auto& p : j.at("params")) {
    const std::string name = p.at("name").get<std::string>();
    auto& param = model.params.add(name, read_tensor<T>(dir / param_file(name, "value")),
                                   p.at("decay").get<bool>());
    param.m = read_tensor<T>(dir / param_file(name, "m"));
    param.v = read_tensor<T>(dir / param_file(name, "v"));
    if (param.m.shape() != param.value.shape() || param.v.shape() != param.value.shape()) {
      throw FormatError("checkpoint moments of " + name + " do not match the value shape");
    }
  }
  for (const auto& b : j.at("buffers")) {
    const std::string name = b.get<std::string>();
    model.params.add_buffer(name, read_tensor<T>(dir / ("buffers/" + name + ".gftn")));
  }
  model.params.step = info.step;
  // The stored parameter set must be exactly what the network expects.
  if (info.network.variant != Variant::kRandom) {
    const auto fresh = init_network<T>(info.network, 0);
    if (fresh.names() != model.params.names()) {
      throw FormatError("checkpoint parameters do not match the network configuration");
    }
    for (const auto& [name, p] : fresh.all()) {
      if (p.value.shape() != model.params.get(name).value.shape()) {
        throw FormatError("checkpoint tensor " + name + " has the wrong shape");
      }
    }
  }
  return model;
}

// ---- rendering --------------------------------------------------------------

std::vector<unsigned char> encode_ppm(int height, int width, const std::vector<Rgb>& pixels) {
  if (pixels.size() != static_cast<std::size_t>(height) * width) {
    throw ShapeError("encode_ppm: pixel count does not match the size");
  }
  const std::string header =
      "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  for (const Rgb& p : pixels) out.insert(out.end(), p.begin(), p.end());
  return out;
}

std::vector<unsigned char> render_categorical(const Tensor<int>& raster,
                                              const std::map<int, Rgb>& palette) {
  if (raster.rank() != 2) throw ShapeError("render_categorical: raster must be [H, W]");
  std::vector<Rgb> px;
  px.reserve(raster.size());
  for (int v : raster.storage()) {
    auto it = palette.find(v);
    if (it == palette.end()) throw ConfigError("render: id " + std::to_string(v) + " has no palette entry");
    px.push_back(it->second);
  }
  return encode_ppm(raster.dim(0), raster.dim(1), px);
}

std::map<int, Rgb> task_palette(const TaskInfo& task) {
  std::map<int, Rgb> p;
  for (int k = 0; k < task.num_classes(); ++k) {
    const auto c = land_use_color(k);
    p[k] = {static_cast<std::uint8_t>(std::lround(255 * c[0])),
            static_cast<std::uint8_t>(std::lround(255 * c[1])),
            static_cast<std::uint8_t>(std::lround(255 * c[2]))};
  }
  p[task.background()] = {160, 160, 160};
  p[task.unknown()] = {0, 0, 0};
  return p;
}

Rgb rank_color(int rank, int num_classes) {
  if (rank <= 0) return {0, 0, 0};
  const double t = num_classes > 1 ? static_cast<double>(rank - 1) / (num_classes - 1) : 0.0;
  return {static_cast<std::uint8_t>(std::lround(255 * t)),
          static_cast<std::uint8_t>(std::lround(255 * (1 - t))), 0};
}

std::vector<unsigned char> render_rank(const Tensor<int>& ranks, int num_classes) {
  if (ranks.rank() != 2) throw ShapeError("render_rank: raster must be [H, W]");
  std::vector<Rgb> px;
  px.reserve(ranks.size());
  for (int r : ranks.storage()) {
    if (r < 0 || r > num_classes) throw ConfigError("render: rank " + std::to_string(r) + " out of range");
    px.push_back(rank_color(r, num_classes));
  }
  return encode_ppm(ranks.dim(0), ranks.dim(1), px);
}

Rgb sequential_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const auto v = static_cast<std::uint8_t>(std::lround(255 * t));
  return {v, v, static_cast<std::uint8_t>(std::lround(255 * (1 - t)))};
}

template <typename T>
std::vector<unsigned char> render_scalar(const Tensor<T>& map, double lo, double hi) {
  if (map.rank() != 2) throw ShapeError("render_scalar: map must be [H, W]");
  std::vector<Rgb> px;
  px.reserve(map.size());
  for (T v : map.storage()) {
    const double t = hi > lo ? (static_cast<double>(v) - lo) / (hi - lo) : 0.5;
    px.push_back(sequential_color(t));
  }
  return encode_ppm(map.dim(0), map.dim(1), px);
}

std::vector<unsigned char> render_overhead(const Tensor<float>& overhead) {
  if (overhead.rank() != 3 || overhead.dim(2) != 3) throw ShapeError("render_overhead: expected [H, W, 3]");
  std::vector<Rgb> px(static_cast<std::size_t>(overhead.dim(0)) * overhead.dim(1));
  for (std::size_t i = 0; i < px.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      px[i][c] = static_cast<std::uint8_t>(std::lround(255 * std::clamp(overhead[i * 3 + c], 0.0f, 1.0f)));
    }
  }
  return encode_ppm(overhead.dim(0), overhead.dim(1), px);
}

#define GEOFUSE_INSTANTIATE_TENSOR_IO(T)                                       \
  template std::vector<unsigned char> encode_tensor(const Tensor<T>&);         \
  template Tensor<T> blob_to_tensor<T>(const TensorBlob&);                     \
  template void write_tensor(const fs::path&, const Tensor<T>&);               \
  template Tensor<T> read_tensor<T>(const fs::path&);

GEOFUSE_INSTANTIATE_TENSOR_IO(float)
GEOFUSE_INSTANTIATE_TENSOR_IO(double)
GEOFUSE_INSTANTIATE_TENSOR_IO(std::uint8_t)
GEOFUSE_INSTANTIATE_TENSOR_IO(std::int32_t)

template void save_checkpoint(const fs::path&, const TrainResult<float>&, const std::string&, int);
template void save_checkpoint(const fs::path&, const TrainResult<double>&, const std::string&, int);
template TrainResult<float> load_checkpoint<float>(const fs::path&);
template TrainResult<double> load_checkpoint<double>(const fs::path&);
template std::vector<unsigned char> render_scalar(const Tensor<float>&, double, double);
template std::vector<unsigned char> render_scalar(const Tensor<double>&, double, double);

}  // namespace geofuse
