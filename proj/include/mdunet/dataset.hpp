#pragma once

#include <cstdint>
#include <filesystem>

#include "mdunet/train.hpp"

namespace mdunet {

/// Random filled ellipses and rectangles on a flat background.
struct SyntheticSpec {
  std::int64_t count = 100;
  std::int64_t size = 64;
  /// Shapes per image are drawn uniformly from 1..max_shapes.
  int max_shapes = 4;
  /// Half-width of the uniform noise added to every pixel.
  double noise = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

/// image = mask * 0.8 + 0.2 + U(-noise, noise), clamped to [0, 1].
Dataset synth_dataset(const SyntheticSpec& spec);

/// Reads `root/images/*.pgm` paired by stem with `root/masks/*.pgm`.
Dataset load_dataset_dir(const std::filesystem::path& root);

/// Single-channel mask from an image, foreground where the value is > 0.
LabelMask mask_from_image(const Tensor& image);

}  // namespace mdunet
