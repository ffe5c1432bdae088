#include "mdunet/dataset.hpp"

#include <algorithm>
#include <map>
#include <random>

#include "mdunet/image_io.hpp"

namespace mdunet {

void SyntheticSpec::validate() const {
  if (count < 1) throw ConfigError("synthetic_count must be at least 1");
  if (size < 4) throw ConfigError("synthetic_size must be at least 4");
  if (max_shapes < 1) throw ConfigError("synthetic_max_shapes must be at least 1");
  if (!(noise >= 0.0)) throw ConfigError("synthetic_noise must be non-negative");
}

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
  // Fixed mapping from raw draws, independent of the library's distributions.
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

void render_shape(std::mt19937_64& rng, std::int64_t size, std::vector<std::int32_t>& mask) {
  const double s = static_cast<double>(size);
  const bool ellipse = (rng() & 1U) != 0;
  const double cx = uniform(rng, 0.15 * s, 0.85 * s);
  const double cy = uniform(rng, 0.15 * s, 0.85 * s);
  const double rx = uniform(rng, 0.06 * s, 0.2 * s);
  const double ry = uniform(rng, 0.06 * s, 0.2 * s);
  for (std::int64_t y = 0; y < size; ++y) {
    for (std::int64_t x = 0; x < size; ++x) {
      const double dx = (static_cast<double>(x) + 0.5 - cx) / rx;
      const double dy = (static_cast<double>(y) + 0.5 - cy) / ry;
      const bool inside = ellipse ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
      if (inside) mask[static_cast<std::size_t>(y * size + x)] = 1;
    }
  }
}

}  // namespace

Dataset synth_dataset(const SyntheticSpec& spec) {
  spec.validate();
  Dataset data;
  std::mt19937_64 rng(spec.seed);
  for (std::int64_t k = 0; k < spec.count; ++k) {
    Sample s;
    s.name = "synth_" + std::to_string(k);
    s.mask = LabelMask(1, spec.size, spec.size);
    const auto shapes = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(spec.max_shapes));
    for (int j = 0; j < shapes; ++j) render_shape(rng, spec.size, s.mask.labels);
    s.image = Tensor(Shape{1, 1, spec.size, spec.size});
    for (std::size_t i = 0; i < s.image.size(); ++i) {
      double v = s.mask.labels[i] != 0 ? 1.0 : 0.2;
      if (spec.noise > 0.0) v += uniform(rng, -spec.noise, spec.noise);
      s.image[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

LabelMask mask_from_image(const Tensor& image) {
  const Shape& s = image.shape();
  if (s.n != 1 || s.c != 1) throw ShapeError("mask image must be single channel, got " + s.str());
  LabelMask m(1, s.h, s.w);
  for (std::size_t i = 0; i < image.size(); ++i) m.labels[i] = image[i] > 0.0f ? 1 : 0;
  return m;
}

Dataset load_dataset_dir(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  const fs::path images = root / "images";
  const fs::path masks = root / "masks";
  if (!fs::is_directory(images) || !fs::is_directory(masks)) {
    throw std::runtime_error("dataset " + root.string() + " needs images/ and masks/ subdirectories");
  }
  std::map<std::string, fs::path> mask_by_stem;
  for (const auto& e : fs::directory_iterator(masks)) {
    if (e.is_regular_file()) mask_by_stem[e.path().stem().string()] = e.path();
  }
  std::map<std::string, fs::path> image_by_stem;
  for (const auto& e : fs::directory_iterator(images)) {
    if (e.is_regular_file()) image_by_stem[e.path().stem().string()] = e.path();
  }
  Dataset data;
  for (const auto& [stem, path] : image_by_stem) {
    const auto it = mask_by_stem.find(stem);
    if (it == mask_by_stem.end()) throw std::runtime_error("image " + path.string() + " has no mask");
    Sample s;
    s.name = stem;
    s.image = load_pgm(path);
    const Tensor m = load_pgm(it->second);
    if (m.shape() != s.image.shape()) {
      throw ShapeError("mask " + it->second.string() + " is " + m.shape().str() + " but image is " +
                       s.image.shape().str());
    }
    s.mask = mask_from_image(m);
    data.samples.push_back(std::move(s));
  }
  if (data.empty()) throw std::runtime_error("dataset " + root.string() + " contains no image/mask pairs");
  return data;
}

}  // namespace mdunet
