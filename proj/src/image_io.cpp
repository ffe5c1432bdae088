#include "mdunet/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

namespace mdunet {
namespace {

class HeaderReader {
 public:
  explicit HeaderReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const auto c = static_cast<char>(bytes_[pos_]);
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
        ++pos_;
      } else {
        return;
      }
    }
  }

  std::int64_t read_uint(const char* what) {
    skip_space_and_comments();
    std::int64_t v = 0;
    std::size_t digits = 0;
    while (pos_ < bytes_.size() && bytes_[pos_] >= '0' && bytes_[pos_] <= '9') {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > (std::int64_t{1} << 31)) throw FormatError(std::string("PGM ") + what + " too large");
      ++pos_;
      ++digits;
    }
    if (digits == 0) throw FormatError(std::string("PGM header: missing ") + what);
    return v;
  }

  // Exactly one whitespace byte separates maxval from the raster.
  void expect_single_space() {
    if (pos_ >= bytes_.size()) throw FormatError("PGM header truncated");
    const auto c = static_cast<char>(bytes_[pos_]);
    if (c != ' ' && c != '\t' && c != '\n' && c != '\r') throw FormatError("PGM header: expected whitespace after maxval");
    ++pos_;
  }

  [[nodiscard]] std::size_t pos() const { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 2;
};

}  // namespace

Tensor decode_pgm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P') throw FormatError("not a PNM file (bad magic)");
  if (bytes[1] != '5') {
    throw FormatError(std::string("unsupported PNM variant P") + static_cast<char>(bytes[1]) +
                      " (only binary P5 is supported)");
  }
  HeaderReader hr(bytes);
  const std::int64_t width = hr.read_uint("width");
  const std::int64_t height = hr.read_uint("height");
  const std::int64_t maxval = hr.read_uint("maxval");
  if (width <= 0 || height <= 0) throw FormatError("PGM has zero extent");
  if (maxval < 1 || maxval > 255) throw FormatError("unsupported PGM maxval " + std::to_string(maxval));
  hr.expect_single_space();
  const std::size_t need = static_cast<std::size_t>(width * height);
  if (bytes.size() - hr.pos() < need) {
    throw FormatError("PGM payload truncated: need " + std::to_string(need) + " bytes, have " +
                      std::to_string(bytes.size() - hr.pos()));
  }
  Tensor t(Shape{1, 1, height, width});
  const auto denom = static_cast<float>(maxval);
  for (std::size_t i = 0; i < need; ++i) {
    t[i] = static_cast<float>(std::min<std::int64_t>(bytes[hr.pos() + i], maxval)) / denom;
  }
  return t;
}

Tensor load_pgm(const std::filesystem::path& path) {
  try {
    return decode_pgm(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_pgm(const Tensor& image) {
  const Shape& s = image.shape();
  if (s.n != 1 || s.c != 1) throw ShapeError("encode_pgm expects a (1, 1, H, W) tensor, got " + s.str());
  const std::string header = "P5\n" + std::to_string(s.w) + " " + std::to_string(s.h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + image.size());
  for (float v : image.values()) {
    const float clamped = std::clamp(v, 0.0f, 1.0f);
    out.push_back(static_cast<std::uint8_t>(std::lround(clamped * 255.0f)));
  }
  return out;
}

void save_pgm(const std::filesystem::path& path, const Tensor& image) { write_file(path, encode_pgm(image)); }

void save_mask_pgm(const std::filesystem::path& path, std::span<const std::uint8_t> mask, std::int64_t height,
                   std::int64_t width) {
  if (static_cast<std::int64_t>(mask.size()) != height * width) throw ShapeError("mask size does not match extents");
  Tensor t(Shape{1, 1, height, width});
  for (std::size_t i = 0; i < mask.size(); ++i) t[i] = mask[i] != 0 ? 1.0f : 0.0f;
  save_pgm(path, t);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace mdunet
