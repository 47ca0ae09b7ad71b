#pragma once

#include "advcon/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

namespace advcon {

/// Images (N, C, H, W) with values in [0, 1] plus one class label per image.
struct LabeledImages {
  Tensor images;
  std::vector<int> labels;
  int num_classes = 0;

  Index size() const { return static_cast<Index>(labels.size()); }
  /// Subset in the given order.
  LabeledImages select(std::span<const Index> indices) const;
  std::vector<Index> indices_of(int label) const;
};

struct ShapeDatasetConfig {
  int num_classes = 8;
  int samples_per_class = 50;
  Index height = 32;
  Index width = 32;
  Index channels = 3;
  double noise_std = 0.03;
  double color_jitter = 0.4;  // per-channel spread around the class colour
  double contrast = 0.4;       // shape pixels are bg + contrast * (fg - bg)
  std::uint64_t seed = 42;

  void validate() const;
};

/// Procedural shapes: class c draws its own shape family (disc, triangle,
/// bars, checker, ring, cross, frame, diagonal stripes, diamond, columns) in
/// its own colour family at a random position and scale over a dark random
/// background. Image i is rendered from its own generator stream, so the
/// output depends only on (config, i). Images are ordered class-major.
LabeledImages generate_shapes(const ShapeDatasetConfig& config);

/// Stratified split; each class contributes round(train_fraction * count)
/// training items chosen by a seeded shuffle.
std::pair<LabeledImages, LabeledImages> stratified_split(const LabeledImages& data, double train_fraction,
                                                         std::uint64_t seed);

/// Reads an IDX image file (magic 0x00000803 for N×H×W, or 0x00000804 for
/// N×C×H×W, unsigned bytes) and an IDX label file (magic 0x00000801).
/// Pixels are rescaled to [0, 1].
LabeledImages load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// Writes the same format; pixels are quantised with round(255 v).
void save_idx(const LabeledImages& data, const std::filesystem::path& images_path,
              const std::filesystem::path& labels_path);

}  // namespace advcon
