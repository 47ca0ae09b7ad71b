#include "advcon/io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace advcon {

void write_u32(std::ostream& out, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>(v >> (8 * i));
  out.write(b.data(), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>(v >> (8 * i));
  out.write(b.data(), 8);
}

void write_f64(std::ostream& out, double v) { write_u64(out, std::bit_cast<std::uint64_t>(v)); }

namespace {

template <std::size_t N>
std::uint64_t read_le(std::istream& in) {
  std::array<unsigned char, N> b{};
  in.read(reinterpret_cast<char*>(b.data()), N);
  if (in.gcount() != static_cast<std::streamsize>(N)) throw IoError("unexpected end of binary stream");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < N; ++i) v |= std::uint64_t{b[i]} << (8 * i);
  return v;
}

constexpr char kTensorMagic[4] = {'A', 'D', 'V', 'T'};
constexpr std::uint8_t kTensorVersion = 1;

}  // namespace

std::uint32_t read_u32(std::istream& in) { return static_cast<std::uint32_t>(read_le<4>(in)); }
std::uint64_t read_u64(std::istream& in) { return read_le<8>(in); }
double read_f64(std::istream& in) { return std::bit_cast<double>(read_le<8>(in)); }

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(kTensorMagic, 4);
  out.put(static_cast<char>(kTensorVersion));
  write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (Index d : t.shape()) write_u64(out, static_cast<std::uint64_t>(d));
  for (double v : t.values()) write_f64(out, v);
}

Tensor read_tensor(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || !std::equal(magic, magic + 4, kTensorMagic)) throw IoError("tensor record: bad magic");
  const int version = in.get();
  if (version != kTensorVersion) {
    throw IoError("tensor record: unsupported version " + std::to_string(version));
  }
  const std::uint32_t rank = read_u32(in);
  if (rank > 8) throw IoError("tensor record: implausible rank");
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<Index>(read_u64(in));
  Tensor t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = read_f64(in);
  return t;
}

void save_tensors(const std::filesystem::path& path, const std::vector<Tensor>& tensors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create " + path.string());
  write_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) write_tensor(out, t);
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<Tensor> load_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::uint32_t count = read_u32(in);
  std::vector<Tensor> out;
  for (std::uint32_t i = 0; i < count; ++i) out.push_back(read_tensor(in));
  return out;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc()) throw InvariantError("format_double failed");
  return std::string(buf.data(), ptr);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_json(const std::filesystem::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

Json read_json(const std::filesystem::path& path) {
  try {
    return Json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void CsvTable::add_row(std::vector<std::string> cells) {
  if (cells.size() != header_.size()) throw ShapeError("csv row width does not match header");
  rows_.push_back(std::move(cells));
}

std::string CsvTable::str() const {
  std::string out;
  const auto line = [&out](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += cells[i];
    }
    out += '\n';
  };
  line(header_);
  for (const auto& r : rows_) line(r);
  return out;
}

std::string matrix_csv(const Matrix& m, const std::vector<std::string>& row_labels,
                       const std::vector<std::string>& col_labels, const std::string& corner) {
  if (static_cast<Index>(row_labels.size()) != m.rows() || static_cast<Index>(col_labels.size()) != m.cols()) {
    throw ShapeError("matrix_csv: label count mismatch");
  }
  std::vector<std::string> header{corner};
  header.insert(header.end(), col_labels.begin(), col_labels.end());
  CsvTable table(header);
  for (Index r = 0; r < m.rows(); ++r) {
    std::vector<std::string> cells{row_labels[static_cast<std::size_t>(r)]};
    for (Index c = 0; c < m.cols(); ++c) cells.push_back(format_double(m(r, c)));
    table.add_row(std::move(cells));
  }
  return table.str();
}

std::pair<double, double> write_pgm(const std::filesystem::path& path, const Matrix& map) {
  const double lo = map.minCoeff(), hi = map.maxCoeff();
  std::ostringstream out;
  out << "P5\n" << map.cols() << ' ' << map.rows() << "\n255\n";
  for (Index r = 0; r < map.rows(); ++r) {
    for (Index c = 0; c < map.cols(); ++c) {
      const double t = hi > lo ? (map(r, c) - lo) / (hi - lo) : 0.0;
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0))));
    }
  }
  write_text(path, out.str());
  return {lo, hi};
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace advcon
