#include "advcon/datagen.hpp"

#include "advcon/random.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

namespace advcon {

LabeledImages LabeledImages::select(std::span<const Index> indices) const {
  LabeledImages out;
  out.num_classes = num_classes;
  Shape s = images.shape();
  s[0] = static_cast<Index>(indices.size());
  out.images = Tensor(s);
  out.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out.images.set_item(static_cast<Index>(i), images.item(indices[i]));
    out.labels.push_back(labels.at(static_cast<std::size_t>(indices[i])));
  }
  return out;
}

std::vector<Index> LabeledImages::indices_of(int label) const {
  std::vector<Index> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == label) out.push_back(static_cast<Index>(i));
  }
  return out;
}

void ShapeDatasetConfig::validate() const {
  if (num_classes < 4 || num_classes > 10) throw ConfigError("num_classes must be in [4, 10]");
  if (samples_per_class <= 0) throw ConfigError("samples_per_class must be positive");
  if (height < 8 || width < 8) throw ConfigError("image size must be at least 8x8");
  if (channels != 3 && channels != 1) throw ConfigError("channels must be 3 (or 1 for grayscale)");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw ConfigError("noise_std must be >= 0");
  if (!(contrast > 0.0 && contrast <= 1.0)) throw ConfigError("contrast must be in (0, 1]");
  if (!(color_jitter >= 0.0 && color_jitter <= 1.0)) throw ConfigError("color_jitter must be in [0, 1]");
}

namespace {

using Rgb = std::array<double, 3>;

constexpr std::array<Rgb, 10> kPalette{{
    {0.90, 0.20, 0.20},
    {0.20, 0.85, 0.25},
    {0.25, 0.35, 0.95},
    {0.95, 0.90, 0.20},
    {0.90, 0.25, 0.85},
    {0.20, 0.85, 0.90},
    {0.95, 0.55, 0.15},
    {0.90, 0.90, 0.90},
    {0.55, 0.30, 0.90},
    {0.60, 0.95, 0.55},
}};

bool even_band(double t, double bands) { return static_cast<long>(std::floor(t * bands)) % 2 == 0; }

// (u, v) are coordinates relative to the shape centre in units of its radius.
bool inside(int cls, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  const double rr = u * u + v * v;
  const bool box = au <= 1.0 && av <= 1.0;
  switch (cls) {
    case 0: return rr <= 1.0;
    case 1: return v >= -1.0 && v <= 1.0 && au <= (v + 1.0) * 0.5;
    case 2: return box && even_band(v + 1.0, 2.5);
    case 3: return box && (static_cast<long>(std::floor((u + 1.0) * 2.0)) + static_cast<long>(std::floor((v + 1.0) * 2.0))) % 2 == 0;
    case 4: return rr <= 1.0 && rr >= 0.55 * 0.55;
    case 5: return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
    case 6: return box && std::max(au, av) >= 0.65;
    case 7: return rr <= 1.0 && even_band(u + v + 2.0, 2.0);
    case 8: return au + av <= 1.0;
    case 9: return box && even_band(u + 1.0, 2.5);
    default: return false;
  }
}

}  // namespace

LabeledImages generate_shapes(const ShapeDatasetConfig& config) {
  config.validate();
  const Index n = static_cast<Index>(config.num_classes) * config.samples_per_class;
  const Index h = config.height, w = config.width, c = config.channels;
  LabeledImages out;
  out.num_classes = config.num_classes;
  out.images = Tensor({n, c, h, w});
  out.labels.resize(static_cast<std::size_t>(n));

  for (Index i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i / config.samples_per_class);
    out.labels[static_cast<std::size_t>(i)] = cls;
    Rng rng = Rng::stream(config.seed, static_cast<std::uint64_t>(i));

    const double side = static_cast<double>(std::min(h, w));
    const double radius = rng.uniform(0.22, 0.38) * side;
    const double cy = rng.uniform(radius, static_cast<double>(h) - radius);
    const double cx = rng.uniform(radius, static_cast<double>(w) - radius);
    Rgb fg, bg, ramp;
    for (int k = 0; k < 3; ++k) {
      fg[k] = std::clamp(kPalette[static_cast<std::size_t>(cls)][k] + rng.uniform(-config.color_jitter, config.color_jitter), 0.0, 1.0);
      bg[k] = rng.uniform(0.0, 0.3);
      ramp[k] = rng.uniform(-0.1, 0.1);
    }

    double* img = out.images.data() + i * c * h * w;
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        const double u = (static_cast<double>(x) + 0.5 - cx) / radius;
        const double v = (static_cast<double>(y) + 0.5 - cy) / radius;
        const bool on = inside(cls, u, v);
        const double t = static_cast<double>(x + y) / static_cast<double>(h + w);
        Rgb px;
        for (int k = 0; k < 3; ++k) {
          const double base = bg[k] + ramp[k] * t;
          px[k] = on ? base + config.contrast * (fg[k] - base) : base;
        }
        if (c == 1) {
          const double gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
          img[y * w + x] = std::clamp(gray + config.noise_std * rng.normal(), 0.0, 1.0);
        } else {
          for (Index k = 0; k < 3; ++k) {
            const double noise = config.noise_std > 0.0 ? config.noise_std * rng.normal() : 0.0;
            img[(k * h + y) * w + x] = std::clamp(px[static_cast<std::size_t>(k)] + noise, 0.0, 1.0);
          }
        }
      }
    }
  }
  return out;
}

std::pair<LabeledImages, LabeledImages> stratified_split(const LabeledImages& data, double train_fraction,
                                                         std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must be in (0, 1)");
  std::vector<Index> train, test;
  Rng rng(seed);
  for (int cls = 0; cls < data.num_classes; ++cls) {
    std::vector<Index> idx = data.indices_of(cls);
    rng.shuffle(idx);
    const auto n_train = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(idx.size())));
    for (std::size_t k = 0; k < idx.size(); ++k) (k < n_train ? train : test).push_back(idx[k]);
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {data.select(train), data.select(test)};
}

namespace {

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset, const std::filesystem::path& path) {
  if (buf.size() < offset + 4) throw IoError(path.string() + ": truncated IDX header");
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  out.write(bytes, 4);
}

constexpr std::uint32_t kIdxLabels = 0x00000801;
constexpr std::uint32_t kIdxImages3 = 0x00000803;
constexpr std::uint32_t kIdxImages4 = 0x00000804;

}  // namespace

LabeledImages load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto img = read_all(images_path);
  const auto lab = read_all(labels_path);

  if (img.size() < 4 || (read_be32(img, 0, images_path) != kIdxImages3 && read_be32(img, 0, images_path) != kIdxImages4)) {
    throw IoError(images_path.string() + ": IDX image magic mismatch");
  }
  if (lab.size() < 4 || read_be32(lab, 0, labels_path) != kIdxLabels) {
    throw IoError(labels_path.string() + ": IDX label magic mismatch");
  }
  const bool four = read_be32(img, 0, images_path) == kIdxImages4;
  const Index n = read_be32(img, 4, images_path);
  Index c = 1, h = 0, w = 0;
  std::size_t offset = 0;
  if (four) {
    c = read_be32(img, 8, images_path);
    h = read_be32(img, 12, images_path);
    w = read_be32(img, 16, images_path);
    offset = 20;
  } else {
    h = read_be32(img, 8, images_path);
    w = read_be32(img, 12, images_path);
    offset = 16;
  }
  const Index n_labels = read_be32(lab, 4, labels_path);
  if (n_labels != n) {
    throw IoError("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(n_labels) + " labels");
  }
  const auto pixels = static_cast<std::size_t>(n * c * h * w);
  if (img.size() < offset + pixels) throw IoError(images_path.string() + ": truncated IDX image payload");
  if (lab.size() < 8 + static_cast<std::size_t>(n)) throw IoError(labels_path.string() + ": truncated IDX label payload");

  LabeledImages out;
  out.images = Tensor({n, c, h, w});
  for (std::size_t i = 0; i < pixels; ++i) out.images[static_cast<Index>(i)] = img[offset + i] / 255.0;
  out.labels.resize(static_cast<std::size_t>(n));
  int max_label = -1;
  for (Index i = 0; i < n; ++i) {
    out.labels[static_cast<std::size_t>(i)] = lab[8 + static_cast<std::size_t>(i)];
    max_label = std::max(max_label, out.labels[static_cast<std::size_t>(i)]);
  }
  out.num_classes = max_label + 1;
  return out;
}

void save_idx(const LabeledImages& data, const std::filesystem::path& images_path,
              const std::filesystem::path& labels_path) {
  if (data.images.rank() != 4 || data.images.dim(0) != data.size()) throw ShapeError("save_idx: expected (N, C, H, W)");
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw IoError("cannot create IDX output files");
  const bool four = data.images.dim(1) != 1;
  write_be32(img, four ? kIdxImages4 : kIdxImages3);
  write_be32(img, static_cast<std::uint32_t>(data.images.dim(0)));
  if (four) write_be32(img, static_cast<std::uint32_t>(data.images.dim(1)));
  write_be32(img, static_cast<std::uint32_t>(data.images.dim(2)));
  write_be32(img, static_cast<std::uint32_t>(data.images.dim(3)));
  for (double v : data.images.values()) {
    img.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  }
  write_be32(lab, kIdxLabels);
  write_be32(lab, static_cast<std::uint32_t>(data.size()));
  for (int y : data.labels) lab.put(static_cast<char>(static_cast<unsigned char>(y)));
  if (!img || !lab) throw IoError("failed writing IDX files");
}

}  // namespace advcon
