#include <cstring>
#include <string>

#include "doctest.h"
#include "geofuse/error.hpp"
#include "geofuse/gradient_suite.hpp"
#include "geofuse/io.hpp"
#include "support/files.hpp"

using namespace geofuse;

namespace {

WorldSpec tiny_spec(std::uint64_t seed) {
  WorldSpec s;
  s.seed = seed;
  s.tiles_x = 3;
  s.tiles_y = 2;
  s.tile_size = 32;
  s.urban_blocks = 2;
  s.holdout_columns = 1;
  s.test_fraction = 0.25;
  s.observation_density = 10.0;
  return s;
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.batch_size = 2;
  c.pixels_per_image = 32;
  c.epochs = 1;
  c.n_nearest = 4;
  return c;
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

std::vector<unsigned char> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("a single f64 value of 1.0 encodes to a 28-byte file") {
  const auto bytes = encode_tensor(Tensor<double>({1}, 1.0));
  CHECK(bytes.size() == 28);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "GFTN");
  CHECK(bytes[4] == 1);   // version
  CHECK(bytes[8] == 1);   // dtype f64
  CHECK(bytes[12] == 1);  // rank
  CHECK(bytes[16] == 1);  // dim 0
  // 1.0 = 0x3FF0000000000000, little-endian.
  const std::vector<unsigned char> payload(bytes.begin() + 20, bytes.end());
  CHECK(payload == std::vector<unsigned char>{0, 0, 0, 0, 0, 0, 0xF0, 0x3F});
}

TEST_CASE("random 3x4x5 f32 tensors round-trip bit-identically through files") {
  const auto dir = testfs::scratch_dir("io_roundtrip");
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<float> t({3, 4, 5});
    for (auto& v : t.storage()) v = static_cast<float>(rng.normal() * std::pow(10.0, rng.uniform(-30, 30)));
    if (trial == 0) {
      t[0] = -0.0f;
      t[1] = std::numeric_limits<float>::denorm_min();
      t[2] = std::numeric_limits<float>::infinity();
    }
    write_tensor(dir / "t.gftn", t);
    CHECK(bit_equal(read_tensor<float>(dir / "t.gftn"), t));
  }
  Tensor<double> d({2, 3});
  for (auto& v : d.storage()) v = rng.normal();
  CHECK(bit_equal(blob_to_tensor<double>(decode_tensor(encode_tensor(d))), d));
  Tensor<std::int32_t> i({5}, std::vector<std::int32_t>{-3, 0, 7, INT32_MIN, INT32_MAX});
  CHECK(bit_equal(blob_to_tensor<std::int32_t>(decode_tensor(encode_tensor(i))), i));
  Tensor<std::uint8_t> u({2, 2}, std::vector<std::uint8_t>{0, 1, 128, 255});
  CHECK(bit_equal(blob_to_tensor<std::uint8_t>(decode_tensor(encode_tensor(u))), u));
}

TEST_CASE("malformed tensor files raise format errors naming the offset") {
  auto good = encode_tensor(Tensor<float>({2, 3}, 1.5f));

  auto bad_magic = good;
  std::memcpy(bad_magic.data(), "XXXX", 4);
  CHECK_THROWS_WITH_AS(decode_tensor(bad_magic), doctest::Contains("offset 0"), FormatError);

  auto bad_dtype = good;
  bad_dtype[8] = 9;
  CHECK_THROWS_WITH_AS(decode_tensor(bad_dtype), doctest::Contains("offset 8"), FormatError);

  auto truncated = good;
  truncated.resize(truncated.size() - 3);
  CHECK_THROWS_WITH_AS(decode_tensor(truncated), doctest::Contains("truncated payload"), FormatError);

  auto short_header = good;
  short_header.resize(18);
  CHECK_THROWS_AS(decode_tensor(short_header), FormatError);

  auto trailing = good;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode_tensor(trailing), FormatError);

  CHECK_THROWS_AS(blob_to_tensor<double>(decode_tensor(good)), FormatError);
}

TEST_CASE("dataset directories round-trip and are byte-identical across runs") {
  const auto dir = testfs::scratch_dir("io_dataset");
  const GeneratedWorld world = generate_world(tiny_spec(3));
  write_dataset(world.dataset, dir / "a");
  write_dataset(generate_world(tiny_spec(3)).dataset, dir / "b");
  CHECK(testfs::snapshot(dir / "a") == testfs::snapshot(dir / "b"));

  const Dataset back = read_dataset(dir / "a");
  const Dataset& ds = world.dataset;
  REQUIRE(back.tiles.size() == ds.tiles.size());
  REQUIRE(back.observations.size() == ds.observations.size());
  CHECK(back.tasks.size() == ds.tasks.size());
  for (std::size_t i = 0; i < ds.tiles.size(); ++i) {
    CHECK(back.tiles[i].id == ds.tiles[i].id);
    CHECK(back.tiles[i].split == ds.tiles[i].split);
    CHECK(back.tiles[i].transform.a == ds.tiles[i].transform.a);
    CHECK(bit_equal(back.tiles[i].overhead, ds.tiles[i].overhead));
    for (const auto& [task, labels] : ds.tiles[i].labels) CHECK(bit_equal(back.tiles[i].labels.at(task), labels));
    CHECK(back.tiles[i].observation_ids == ds.tiles[i].observation_ids);
  }
  for (std::size_t i = 0; i < ds.observations.size(); ++i) {
    CHECK(back.observations[i].id == ds.observations[i].id);
    CHECK(back.observations[i].location.x == ds.observations[i].location.x);
    CHECK(back.observations[i].cutouts == ds.observations[i].cutouts);
  }
  // Re-writing the loaded dataset reproduces the same bytes.
  write_dataset(back, dir / "c");
  CHECK(testfs::snapshot(dir / "a") == testfs::snapshot(dir / "c"));

  const std::string manifest = testfs::slurp(dir / "a" / "manifest.json");
  CHECK(manifest.find("\"background\"") != std::string::npos);
  CHECK(manifest.back() == '\n');
}

TEST_CASE("manifest validation rejects dangling paths, duplicate ids and singular transforms") {
  const auto dir = testfs::scratch_dir("io_manifest");
  write_dataset(generate_world(tiny_spec(4)).dataset, dir);
  const Json good = read_json(dir / "manifest.json");
  CHECK_NOTHROW(validate_manifest(good, dir));

  Json dangling = good;
  dangling["tiles"][0]["overhead"] = "tiles/missing.gftn";
  CHECK_THROWS_WITH_AS(validate_manifest(dangling, dir), doctest::Contains("dangling"), FormatError);

  Json duplicate = good;
  duplicate["tiles"][1]["id"] = duplicate["tiles"][0]["id"];
  CHECK_THROWS_WITH_AS(validate_manifest(duplicate, dir), doctest::Contains("duplicate"), FormatError);

  Json singular = good;
  singular["tiles"][0]["geo_transform"] = std::vector<double>{0, 1, 2, 0, 2, 4};
  CHECK_THROWS_WITH_AS(validate_manifest(singular, dir), doctest::Contains("singular"), FormatError);

  Json bad_split = good;
  bad_split["splits"]["train"].push_back(9999);
  CHECK_THROWS_AS(validate_manifest(bad_split, dir), FormatError);

  fs::remove(dir / "observations" / "cutouts.gftn");
  CHECK_THROWS_AS(read_dataset(dir), FormatError);
}

TEST_CASE("configuration documents reject unknown keys and keep defaults") {
  const WorldSpec spec = world_spec_from_json(Json{{"seed", 9}, {"tiles_x", 5}});
  CHECK(spec.seed == 9);
  CHECK(spec.tiles_x == 5);
  CHECK(spec.tile_size == WorldSpec{}.tile_size);
  CHECK_THROWS_AS(world_spec_from_json(Json{{"tiles", 5}}), ConfigError);
  CHECK_THROWS_AS(world_spec_from_json(Json{{"tile_size", "big"}}), ConfigError);
  CHECK_THROWS_AS(train_config_from_json(Json{{"learning_rate", 1}}), ConfigError);
  CHECK_THROWS_AS(train_config_from_json(Json{{"epochs", 0}}), ConfigError);

  const TrainConfig c = train_config_from_json(to_json(tiny_train()));
  CHECK(to_json(c) == to_json(tiny_train()));
  const NetworkConfig n = toy_network_config(Variant::kUnifiedAdaptive);
  CHECK(to_json(network_config_from_json(to_json(n))) == to_json(n));
}

TEST_CASE("checkpoints round-trip parameters, optimizer moments and buffers exactly") {
  const auto dir = testfs::scratch_dir("io_ckpt");
  const GeneratedWorld world = generate_world(tiny_spec(5));
  for (Variant v : {Variant::kRemote, Variant::kUnifiedAdaptive, Variant::kRandom}) {
    const auto model = train<double>(v, world.dataset, tiny_train());
    const fs::path a = dir / (variant_name(v) + "_a");
    save_checkpoint(a, model, "land_use", 1);
    const auto back = load_checkpoint<double>(a);
    CHECK(back.params.names() == model.params.names());
    for (const auto& [name, p] : model.params.all()) {
      const auto& q = back.params.get(name);
      CHECK(bit_equal(q.value, p.value));
      CHECK(bit_equal(q.m, p.m));
      CHECK(bit_equal(q.v, p.v));
      CHECK(q.decay == p.decay);
    }
    for (const auto& [name, b] : model.params.buffers()) CHECK(bit_equal(back.params.buffer(name), b));
    CHECK(back.params.step == model.params.step);
    CHECK(back.prior == model.prior);
    CHECK(to_json(back.network) == to_json(model.network));

    const fs::path b = dir / (variant_name(v) + "_b");
    save_checkpoint(b, back, "land_use", 1);
    CHECK(testfs::snapshot(a) == testfs::snapshot(b));

    // The reloaded model evaluates identically.
    const auto r1 = evaluate(model, v, world.dataset, "test", "land_use");
    const auto r2 = evaluate(back, v, world.dataset, "test", "land_use");
    CHECK(r1.report.metrics.confusion == r2.report.metrics.confusion);
    CHECK_THROWS_AS(load_checkpoint<float>(a), FormatError);
  }
}

TEST_CASE("PPM encoding of a one-pixel categorical raster") {
  const Tensor<int> raster({1, 1}, 0);
  const auto bytes = render_categorical(raster, {{0, Rgb{255, 0, 0}}});
  const std::string expected = std::string("P6\n1 1\n255\n") + "\xFF" + std::string(1, '\0') + std::string(1, '\0');
  CHECK(bytes == bytes_of(expected));
  CHECK_THROWS_AS(render_categorical(Tensor<int>({1, 1}, 3), {{0, Rgb{255, 0, 0}}}), ConfigError);
}

TEST_CASE("rank colors run from pure green at rank one to pure red at rank K") {
  for (int k : {2, 4, 6}) {
    CHECK(rank_color(1, k) == Rgb{0, 255, 0});
    CHECK(rank_color(k, k) == Rgb{255, 0, 0});
    for (int r = 1; r < k; ++r) {
      CHECK(rank_color(r + 1, k)[0] > rank_color(r, k)[0]);
      CHECK(rank_color(r + 1, k)[1] < rank_color(r, k)[1]);
    }
  }
  CHECK(rank_color(0, 4) == Rgb{0, 0, 0});
  const auto bytes = render_rank(Tensor<int>({1, 2}, std::vector<int>{1, 6}), 6);
  const std::string header = "P6\n2 1\n255\n";
  REQUIRE(bytes.size() == header.size() + 6);
  CHECK(std::vector<unsigned char>(bytes.begin() + header.size(), bytes.end()) ==
        std::vector<unsigned char>{0, 255, 0, 255, 0, 0});
  CHECK_THROWS_AS(render_rank(Tensor<int>({1, 1}, 7), 6), ConfigError);
}

TEST_CASE("renders are deterministic and the scalar ramp is monotone") {
  const GeneratedWorld w = generate_world(tiny_spec(6));
  const auto& tile = w.dataset.tiles[0];
  const auto pal = task_palette(w.dataset.tasks[0]);
  CHECK(render_categorical(tile.labels.at("land_use"), pal) ==
        render_categorical(tile.labels.at("land_use"), pal));
  CHECK(render_overhead(tile.overhead) == render_overhead(tile.overhead));
  for (int i = 0; i < 10; ++i) {
    const Rgb a = sequential_color(i / 10.0), b = sequential_color((i + 1) / 10.0);
    CHECK(a[0] <= b[0]);
    CHECK(a[2] >= b[2]);
  }
  const auto constant = render_scalar(Tensor<double>({2, 2}, 3.0), 3.0, 3.0);
  CHECK(constant.back() == sequential_color(0.5)[2]);
}

#ifdef GEOFUSE_CLI_PATH
TEST_CASE("command line: exit codes, error JSON and repeatable synth output") {
  const auto dir = testfs::scratch_dir("io_cli");
  const std::string cli = GEOFUSE_CLI_PATH;
  write_text(dir / "spec.json", dump_json(to_json(tiny_spec(8))));
  const std::string base = cli + " synth " + (dir / "spec.json").string() + " ";
  CHECK(testfs::run(base + (dir / "a").string() + " > /dev/null") == 0);
  CHECK(testfs::run(base + (dir / "b").string() + " > /dev/null") == 0);
  CHECK(testfs::snapshot(dir / "a") == testfs::snapshot(dir / "b"));

  CHECK(testfs::run(cli + " 2> " + (dir / "err.txt").string()) == 2);
  CHECK(testfs::run(cli + " train --variant nope --dataset " + (dir / "a").string() + " --out " +
                    (dir / "x").string() + " 2> " + (dir / "err.txt").string()) == 2);
  const Json err = Json::parse(testfs::slurp(dir / "err.txt"));
  CHECK(err.at("error") == "config");
  CHECK(testfs::run(cli + " eval --ckpt " + (dir / "missing").string() + " --dataset " +
                    (dir / "a").string() + " 2> /dev/null") == 1);
  write_text(dir / "bad.json", "{\"tiles\": 3}");
  CHECK(testfs::run(cli + " synth " + (dir / "bad.json").string() + " " + (dir / "c").string() +
                    " 2> /dev/null") == 2);
}
#endif
