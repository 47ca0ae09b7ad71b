#include "advcon/datagen.hpp"
#include "advcon/io.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

using namespace advcon;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "advcon_test_datagen";
  fs::create_directories(dir);
  return dir / name;
}

void write_bytes(const fs::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> be32(std::uint32_t v) {
  return {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 8),
          static_cast<unsigned char>(v)};
}

std::vector<unsigned char> cat(std::initializer_list<std::vector<unsigned char>> parts) {
  std::vector<unsigned char> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

}  // namespace

TEST_CASE("the pinned dataset has 400 balanced images in the unit box") {
  const auto data = generate_shapes(ShapeDatasetConfig{});
  CHECK(data.size() == 400);
  CHECK(data.images.shape() == Shape{400, 3, 32, 32});
  CHECK(data.images.array().minCoeff() >= 0.0);
  CHECK(data.images.array().maxCoeff() <= 1.0);
  for (int c = 0; c < 8; ++c) CHECK(data.indices_of(c).size() == 50);
}

TEST_CASE("generation is deterministic and seed dependent") {
  ShapeDatasetConfig cfg;
  cfg.noise_std = 0.0;
  cfg.samples_per_class = 5;
  const auto a = generate_shapes(cfg), b = generate_shapes(cfg);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  cfg.seed = 43;
  CHECK_FALSE(generate_shapes(cfg).images == a.images);
}

TEST_CASE("classes are separable enough for a nearest-neighbour baseline") {
  ShapeDatasetConfig cfg;
  cfg.samples_per_class = 20;
  const auto data = generate_shapes(cfg);
  const auto [train, test] = stratified_split(data, 0.5, 1);
  const Index f = train.images.item_size();
  const Eigen::Map<const RowMatrix> tr(train.images.data(), train.size(), f);
  const Eigen::Map<const RowMatrix> te(test.images.data(), test.size(), f);
  int correct = 0;
  for (Index i = 0; i < te.rows(); ++i) {
    Index best = 0;
    (tr.rowwise() - te.row(i)).rowwise().squaredNorm().minCoeff(&best);
    correct += train.labels[static_cast<std::size_t>(best)] == test.labels[static_cast<std::size_t>(i)];
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(test.size()) > 2.0 / 8.0);
}

TEST_CASE("stratified split keeps class proportions and loses nothing") {
  const auto data = generate_shapes(ShapeDatasetConfig{});
  const auto [train, test] = stratified_split(data, 0.8, 42);
  CHECK(train.size() == 320);
  CHECK(test.size() == 80);
  for (int c = 0; c < 8; ++c) {
    CHECK(train.indices_of(c).size() == 40);
    CHECK(test.indices_of(c).size() == 10);
  }
  std::set<double> firsts;
  for (Index i = 0; i < data.size(); ++i) firsts.insert(data.images.item(i).array().sum());
  std::set<double> split;
  for (Index i = 0; i < train.size(); ++i) split.insert(train.images.item(i).array().sum());
  for (Index i = 0; i < test.size(); ++i) split.insert(test.images.item(i).array().sum());
  CHECK(split == firsts);
  CHECK_THROWS_AS(stratified_split(data, 1.0, 1), ConfigError);
}

TEST_CASE("invalid generator settings are config errors") {
  ShapeDatasetConfig cfg;
  cfg.num_classes = 3;
  CHECK_THROWS_AS(generate_shapes(cfg), ConfigError);
  cfg = {};
  cfg.noise_std = -1.0;
  CHECK_THROWS_AS(generate_shapes(cfg), ConfigError);
  cfg = {};
  cfg.contrast = 0.0;
  CHECK_THROWS_AS(generate_shapes(cfg), ConfigError);
}

TEST_CASE("hand-built IDX fixture is decoded exactly") {
  const auto images = scratch("two.idx3");
  const auto labels = scratch("two.idx1");
  write_bytes(images, cat({be32(0x803), be32(2), be32(2), be32(3), {0, 51, 102, 153, 204, 255, 255, 0, 17, 34, 68, 136}}));
  write_bytes(labels, cat({be32(0x801), be32(2), {3, 1}}));
  const auto data = load_idx(images, labels);
  REQUIRE(data.images.shape() == Shape{2, 1, 2, 3});
  CHECK(data.labels == std::vector<int>{3, 1});
  const double want[] = {0, 51, 102, 153, 204, 255, 255, 0, 17, 34, 68, 136};
  for (int i = 0; i < 12; ++i) CHECK(data.images[i] == want[i] / 255.0);

  const auto images2 = scratch("copy.idx3");
  const auto labels2 = scratch("copy.idx1");
  save_idx(data, images2, labels2);
  CHECK(read_text(images2) == read_text(images));
  CHECK(read_text(labels2) == read_text(labels));
}

TEST_CASE("broken IDX files are rejected") {
  const auto images = scratch("img.idx3");
  const auto labels = scratch("lab.idx1");
  const auto empty = scratch("empty.idx");
  write_bytes(images, cat({be32(0x803), be32(2), be32(1), be32(2), {1, 2, 3, 4}}));
  write_bytes(labels, cat({be32(0x801), be32(3), {0, 1, 2}}));
  write_bytes(empty, {});
  try {
    load_idx(empty, labels);
    FAIL("expected a magic error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("magic") != std::string::npos);
  }
  try {
    load_idx(images, labels);
    FAIL("expected a count mismatch");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("count mismatch") != std::string::npos);
  }
  write_bytes(labels, cat({be32(0x801), be32(2), {0, 1}}));
  write_bytes(images, cat({be32(0x803), be32(2), be32(1), be32(2), {1, 2, 3}}));
  CHECK_THROWS_AS(load_idx(images, labels), IoError);
  CHECK_THROWS_AS(load_idx(scratch("missing.idx"), labels), IoError);
}
