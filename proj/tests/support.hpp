#pragma once

// Shared oracles and helpers for the unit and acceptance tests.

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "mdunet/arch.hpp"
#include "mdunet/executor.hpp"
#include "mdunet/grad_check.hpp"
#include "mdunet/ops.hpp"

namespace mdunet::testing {

template <typename T>
BasicTensor<T> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  BasicTensor<T> t(s);
  for (auto& v : t.values()) v = static_cast<T>(d(rng));
  return t;
}

/// Values with magnitude in [0.1, 1] and random sign, so relu inputs stay clear of the kink.
template <typename T>
BasicTensor<T> away_from_zero(Shape s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  BasicTensor<T> t(s);
  for (auto& v : t.values()) v = static_cast<T>((rng() & 1U) != 0 ? mag(rng) : -mag(rng));
  return t;
}

/// Distinct values spaced 0.01 apart in shuffled order: no pooling ties, and
/// perturbations below 0.005 never change an argmax.
template <typename T>
BasicTensor<T> distinct_tensor(Shape s, std::mt19937_64& rng) {
  BasicTensor<T> t(s);
  std::vector<std::size_t> idx(t.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  for (std::size_t i = 0; i < idx.size(); ++i) t[idx[i]] = static_cast<T>(0.01 * static_cast<double>(i) - 1.0);
  return t;
}

/// Direct convolution by explicit loops over output and kernel positions.
inline BasicTensor<double> naive_conv(const BasicTensor<double>& x, const BasicTensor<double>& w,
                                      const std::vector<double>& bias, const ConvSpec& spec) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  const std::int64_t oh = (xs.h + 2 * spec.padding - spec.kernel) / spec.stride + 1;
  const std::int64_t ow = (xs.w + 2 * spec.padding - spec.kernel) / spec.stride + 1;
  BasicTensor<double> out(Shape{xs.n, ws.n, oh, ow});
  for (std::int64_t n = 0; n < xs.n; ++n) {
    for (std::int64_t o = 0; o < ws.n; ++o) {
      for (std::int64_t y = 0; y < oh; ++y) {
        for (std::int64_t xo = 0; xo < ow; ++xo) {
          double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(o)];
          for (std::int64_t c = 0; c < xs.c; ++c) {
            for (std::int64_t ky = 0; ky < spec.kernel; ++ky) {
              for (std::int64_t kx = 0; kx < spec.kernel; ++kx) {
                const std::int64_t iy = y * spec.stride + ky - spec.padding;
                const std::int64_t ix = xo * spec.stride + kx - spec.padding;
                if (iy < 0 || ix < 0 || iy >= xs.h || ix >= xs.w) continue;
                acc += x.at(n, c, iy, ix) * w.at(o, c, ky, kx);
              }
            }
          }
          out.at(n, o, y, xo) = acc;
        }
      }
    }
  }
  return out;
}

/// sum(out * r): a scalar whose gradient with respect to out is r.
inline double weighted_sum(const BasicTensor<double>& out, const BasicTensor<double>& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * r[i];
  return s;
}

/// Worst relative error of a set of named checks.
struct CheckSet {
  double worst = 0.0;
  void add(const GradCheckReport& r) { worst = std::max(worst, r.max_relative_error); }
};

// Gradient checks for each op in double precision with a seeded random
// instance. Each returns the maximum relative error over all differentiable
// inputs of the op.
double check_conv(std::uint64_t seed, int kernel, double eps);
double check_batch_norm(std::uint64_t seed, double eps);
double check_relu(std::uint64_t seed, double eps);
double check_maxpool(std::uint64_t seed, int factor_log2, double eps);
double check_nearest_up(std::uint64_t seed, int factor_log2, double eps);
double check_transposed_conv(std::uint64_t seed, double eps);
double check_concat(std::uint64_t seed, double eps);
double check_softmax_ce(std::uint64_t seed, double eps);
/// Full forward/backward of a built graph in train mode against a
/// cross-entropy loss; checks every parameter and the input.
double check_end_to_end(const ArchConfig& cfg, std::uint64_t seed, Shape input, double eps);

/// Symbolic per-layer parameter sum for the classic U-Net.
std::int64_t unet_param_oracle(const ArchConfig& cfg);

}  // namespace mdunet::testing
