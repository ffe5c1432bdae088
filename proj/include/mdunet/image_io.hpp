#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "mdunet/tensor.hpp"

namespace mdunet {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decodes binary PGM (P5, maxval <= 255) into a (1, 1, H, W) tensor scaled
/// to [0, 1]. Throws FormatError on a bad magic, truncated payload or
/// unsupported maxval.
Tensor decode_pgm(std::span<const std::uint8_t> bytes);
Tensor load_pgm(const std::filesystem::path& path);

/// Encodes values in [0, 1] as P5 with maxval 255 (rounded, clamped).
std::vector<std::uint8_t> encode_pgm(const Tensor& image);
void save_pgm(const std::filesystem::path& path, const Tensor& image);

/// Writes a binary mask (H*W entries, non-zero = foreground) as P5 {0, 255}.
void save_mask_pgm(const std::filesystem::path& path, std::span<const std::uint8_t> mask, std::int64_t height,
                   std::int64_t width);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace mdunet
