// Copyright 2026 The Trifuse Authors
// Checkpoint container tests: byte-exact round trips and truncation
//
// Licensed under the Apache License, Version 2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "trifuse/checkpoint.hpp"
#include "trifuse/errors.hpp"
#include "trifuse/nn.hpp"

using namespace trifuse;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  const fs::path dir = fs::temp_directory_path() / "trifuse_ckpt_test";
  fs::create_directories(dir);
  return dir;
}

std::string read_file_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

ckpt::Checkpoint random_checkpoint(Pcg32& rng, int n_records) {
  ckpt::Checkpoint ckpt;
  ckpt.metadata = {{"purpose", "round-trip"}, {"seed", 7}};
  for (int i = 0; i < n_records; ++i) {
    ckpt::ParamRecord rec;
    rec.name = "param." + std::to_string(i);
    const auto rank = static_cast<std::uint32_t>(rng.uniform_int(1, 3));
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      rec.dims.push_back(static_cast<std::uint64_t>(rng.uniform_int(1, 5)));
      n *= rec.dims.back();
    }
    for (std::uint64_t k = 0; k < n; ++k) {
      rec.data.push_back(rng.uniform(-1e3, 1e3));
    }
    ckpt.records.push_back(std::move(rec));
  }
  return ckpt;
}

}  // namespace

TEST_CASE("save/load round trip is byte-exact") {
  const fs::path dir = temp_dir();
  Pcg32 rng(1);
  for (int rep = 0; rep < 10; ++rep) {
    const ckpt::Checkpoint original =
        random_checkpoint(rng, 1 + static_cast<int>(rng.uniform_int(0, 4)));
    const fs::path p1 = dir / "a.ckpt";
    const fs::path p2 = dir / "b.ckpt";
    ckpt::save(original, p1);
    const ckpt::Checkpoint loaded = ckpt::load(p1);
    ckpt::save(loaded, p2);
    CHECK(read_file_bytes(p1) == read_file_bytes(p2));

    REQUIRE(loaded.records.size() == original.records.size());
    for (std::size_t i = 0; i < original.records.size(); ++i) {
      CHECK(loaded.records[i].name == original.records[i].name);
      CHECK(loaded.records[i].dims == original.records[i].dims);
      REQUIRE(loaded.records[i].data.size() == original.records[i].data.size());
      CHECK(std::memcmp(loaded.records[i].data.data(),
                        original.records[i].data.data(),
                        original.records[i].data.size() * sizeof(double)) == 0);
    }
    CHECK(loaded.metadata == original.metadata);
  }
}

TEST_CASE("malformed files are data errors") {
  const fs::path dir = temp_dir();
  const fs::path path = dir / "bad.ckpt";
  std::ofstream(path, std::ios::binary) << "definitely not a checkpoint";
  CHECK_THROWS_AS(ckpt::load(path), DataError);
  CHECK_THROWS_AS(ckpt::load(dir / "missing.ckpt"), DataError);
}

TEST_CASE("from_params and load_into") {
  Pcg32 rng(2);
  nn::Linear a("layer.a", 4, 3, rng);
  nn::Linear b("layer.b", 3, 2, rng);
  nn::ParamRefs params;
  a.collect(params);
  b.collect(params);

  const ckpt::Checkpoint ckpt = ckpt::from_params(params, {{"stage", 1}});
  CHECK(ckpt.records.size() == 4);
  CHECK(ckpt.find("layer.a.weight") != nullptr);
  CHECK(ckpt.find("nope") == nullptr);

  // Perturb, then restore.
  const Eigen::ArrayXd saved = a.weight.tensor.values();
  a.weight.tensor.values_mut() += 1.0;
  ckpt::load_into(ckpt, params);
  CHECK((a.weight.tensor.values() == saved).all());

  // Restoring only a prefix leaves the rest untouched.
  a.weight.tensor.values_mut() += 1.0;
  b.weight.tensor.values_mut() += 1.0;
  const Eigen::ArrayXd b_perturbed = b.weight.tensor.values();
  ckpt::load_into(ckpt, params, "layer.a.");
  CHECK((a.weight.tensor.values() == saved).all());
  CHECK((b.weight.tensor.values() == b_perturbed).all());

  // A parameter missing from the checkpoint is an error.
  nn::Linear c("layer.c", 2, 2, rng);
  nn::ParamRefs more = params;
  c.collect(more);
  CHECK_THROWS_AS(ckpt::load_into(ckpt, more), DataError);
}

TEST_CASE("encoder truncation") {
  Pcg32 rng(3);
  ckpt::Checkpoint ckpt;
  ckpt.metadata = {{"role", "probe"}};

  // A front-end record, six layers, a projection.
  const auto add_record = [&](const std::string& name, int n) {
    ckpt::ParamRecord rec;
    rec.name = name;
    rec.dims = {static_cast<std::uint64_t>(n)};
    for (int i = 0; i < n; ++i) rec.data.push_back(rng.uniform(-1, 1));
    ckpt.records.push_back(std::move(rec));
  };
  add_record("enc.front.kernel", 10);
  for (int layer = 0; layer < 6; ++layer) {
    add_record("enc.layers." + std::to_string(layer) + ".wq.weight", 16);
    add_record("enc.layers." + std::to_string(layer) + ".wq.bias", 4);
  }
  add_record("proj.weight", 8);

  SUBCASE("keeps the first k layers bit-identically") {
    const ckpt::Checkpoint cut = ckpt::truncate_encoder(ckpt, "enc.layers", 2);
    CHECK(cut.records.size() == 2 + 2 * 2);
    CHECK(cut.find("enc.front.kernel") != nullptr);
    CHECK(cut.find("proj.weight") != nullptr);
    CHECK(cut.find("enc.layers.1.wq.weight") != nullptr);
    CHECK(cut.find("enc.layers.2.wq.weight") == nullptr);
    CHECK(cut.metadata.at("truncated_layers") == 2);
    CHECK(cut.metadata.at("original_layers") == 6);
    for (const ckpt::ParamRecord& rec : cut.records) {
      const ckpt::ParamRecord* src = ckpt.find(rec.name);
      REQUIRE(src != nullptr);
      CHECK(std::memcmp(rec.data.data(), src->data.data(),
                        rec.data.size() * sizeof(double)) == 0);
    }
  }

  SUBCASE("keeping all layers is the identity on records") {
    const ckpt::Checkpoint cut = ckpt::truncate_encoder(ckpt, "enc.layers", 6);
    REQUIRE(cut.records.size() == ckpt.records.size());
    for (std::size_t i = 0; i < ckpt.records.size(); ++i) {
      CHECK(cut.records[i].name == ckpt.records[i].name);
      CHECK(std::memcmp(cut.records[i].data.data(), ckpt.records[i].data.data(),
                        ckpt.records[i].data.size() * sizeof(double)) == 0);
    }
  }

  SUBCASE("out-of-range layer counts are rejected") {
    CHECK_THROWS_AS(ckpt::truncate_encoder(ckpt, "enc.layers", 0),
                    InvalidInputError);
    CHECK_THROWS_AS(ckpt::truncate_encoder(ckpt, "enc.layers", 7),
                    InvalidInputError);
    CHECK_THROWS_AS(ckpt::truncate_encoder(ckpt, "no.such.prefix", 1),
                    InvalidInputError);
  }
}
