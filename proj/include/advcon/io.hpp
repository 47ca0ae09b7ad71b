#pragma once

#include "advcon/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace advcon {

using Json = nlohmann::ordered_json;

// Little-endian primitives shared by the binary formats.
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f64(std::ostream& out, double v);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
double read_f64(std::istream& in);

/// Tensor record: "ADVT", u8 version, u32 rank, u64 dims..., f64 payload (all LE).
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

/// Several tensors in one file, in order.
void save_tensors(const std::filesystem::path& path, const std::vector<Tensor>& tensors);
std::vector<Tensor> load_tensors(const std::filesystem::path& path);

/// Shortest round-trip decimal representation, independent of locale.
std::string format_double(double v);

/// Writes `text` and creates parent directories.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

void write_json(const std::filesystem::path& path, const Json& j);
Json read_json(const std::filesystem::path& path);

/// CSV with a header row and pre-formatted cells.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}
  void add_row(std::vector<std::string> cells);
  std::string str() const;
  void save(const std::filesystem::path& path) const { write_text(path, str()); }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

/// Labeled matrix CSV: first header cell is `corner`, then column labels;
/// each row starts with its row label.
std::string matrix_csv(const Matrix& m, const std::vector<std::string>& row_labels,
                       const std::vector<std::string>& col_labels, const std::string& corner = "");

/// 8-bit binary PGM of a min-max normalised map. Returns the (min, max)
/// used for normalisation; a constant map is written as all zeros.
std::pair<double, double> write_pgm(const std::filesystem::path& path, const Matrix& map);

/// 64-bit FNV-1a of a string; used as the config hash in metadata sidecars.
std::uint64_t fnv1a(const std::string& text);
std::string hex64(std::uint64_t v);

}  // namespace advcon
