#include "advcon/io.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <filesystem>
#include <sstream>

using namespace advcon;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "advcon_test_io";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("tensors survive a binary round trip") {
  Rng rng(1);
  const std::vector<Tensor> ts{oracle::random_tensor({2, 3, 4, 5}, rng), oracle::random_tensor({7}, rng), Tensor({0, 3})};
  save_tensors(scratch("t.bin"), ts);
  const auto back = load_tensors(scratch("t.bin"));
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(back[i] == ts[i]);

  std::stringstream buf;
  write_tensor(buf, ts[1]);
  std::string bytes = buf.str();
  CHECK(bytes.substr(0, 4) == "ADVT");
  std::string bad = bytes;
  bad[4] = 9;
  std::stringstream v(bad);
  CHECK_THROWS_AS(read_tensor(v), IoError);
  std::stringstream cut(bytes.substr(0, bytes.size() - 1));
  CHECK_THROWS_AS(read_tensor(cut), IoError);
}

TEST_CASE("little-endian primitives") {
  std::stringstream buf;
  write_u32(buf, 0x01020304u);
  write_u64(buf, 0x0102030405060708ull);
  write_f64(buf, -2.5);
  const std::string b = buf.str();
  CHECK(b[0] == 4);
  CHECK(b[3] == 1);
  CHECK(b[4] == 8);
  CHECK(read_u32(buf) == 0x01020304u);
  CHECK(read_u64(buf) == 0x0102030405060708ull);
  CHECK(read_f64(buf) == -2.5);
}

TEST_CASE("doubles are printed in shortest round-trip form") {
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(2.0) == "2");
  CHECK(format_double(-1e-300) == "-1e-300");
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const double v = rng.normal() * std::pow(10.0, rng.uniform(-20, 20));
    CHECK(std::stod(format_double(v)) == v);
  }
}

TEST_CASE("csv tables and labelled matrices") {
  CsvTable t({"a", "b"});
  t.add_row({"1", "x"});
  CHECK(t.str() == "a,b\n1,x\n");
  CHECK_THROWS_AS(t.add_row({"only"}), ShapeError);
  Matrix m(2, 2);
  m << 1, 0.5, -2, 3;
  CHECK(matrix_csv(m, {"r0", "r1"}, {"c0", "c1"}, "id") == "id,c0,c1\nr0,1,0.5\nr1,-2,3\n");
  CHECK_THROWS_AS(matrix_csv(m, {"r0"}, {"c0", "c1"}), ShapeError);
}

TEST_CASE("pgm export normalises to the byte range") {
  Matrix m(2, 3);
  m << -1, 0, 1, 1, 0, -1;
  const auto [lo, hi] = write_pgm(scratch("m.pgm"), m);
  CHECK(lo == -1.0);
  CHECK(hi == 1.0);
  const std::string bytes = read_text(scratch("m.pgm"));
  const std::string header = "P5\n3 2\n255\n";
  REQUIRE(bytes.size() == header.size() + 6);
  CHECK(bytes.substr(0, header.size()) == header);
  const auto px = [&](std::size_t i) { return static_cast<unsigned char>(bytes[header.size() + i]); };
  CHECK(px(0) == 0);
  CHECK(px(1) == 128);
  CHECK(px(2) == 255);
  CHECK(px(5) == 0);
  write_pgm(scratch("c.pgm"), Matrix::Constant(2, 2, 4.0));
  const std::string flat = read_text(scratch("c.pgm"));
  CHECK(flat.substr(flat.size() - 4) == std::string(4, '\0'));
}

TEST_CASE("json files and hashes") {
  const Json j{{"b", 1}, {"a", {1.5, "x"}}};
  write_json(scratch("j.json"), j);
  CHECK(read_json(scratch("j.json")) == j);
  write_text(scratch("broken.json"), "{");
  CHECK_THROWS_AS(read_json(scratch("broken.json")), IoError);
  CHECK_THROWS_AS(read_text(scratch("absent.txt")), IoError);
  CHECK(fnv1a("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cull);
  CHECK(hex64(0xabcull) == "0000000000000abc");
}
