#include "mdunet/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>

namespace mdunet {
namespace {

constexpr std::int64_t kColumnBlock = 512;

// C[M,N] += A[M,K] * B[K,N], row-major. Blocked over N so a panel of B stays
// cache resident across rows of A.
template <typename T>
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c) {
  for (std::int64_t j0 = 0; j0 < n; j0 += kColumnBlock) {
    const std::int64_t jn = std::min(n, j0 + kColumnBlock) - j0;
    for (std::int64_t i = 0; i < m; ++i) {
      T* crow = c + i * n + j0;
      const T* arow = a + i * k;
      for (std::int64_t p = 0; p < k; ++p) {
        const T av = arow[p];
        if (av == T{0}) continue;
        const T* brow = b + p * n + j0;
        for (std::int64_t j = 0; j < jn; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N].
template <typename T>
void gemm_tn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c) {
  for (std::int64_t j0 = 0; j0 < n; j0 += kColumnBlock) {
    const std::int64_t jn = std::min(n, j0 + kColumnBlock) - j0;
    for (std::int64_t p = 0; p < k; ++p) {
      const T* brow = b + p * n + j0;
      const T* acol = a + p * m;
      for (std::int64_t i = 0; i < m; ++i) {
        const T av = acol[i];
        if (av == T{0}) continue;
        T* crow = c + i * n + j0;
        for (std::int64_t j = 0; j < jn; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

// Fixed 8-lane accumulation so the reduction vectorizes without reassociation
// flags and stays bit-deterministic.
template <typename T>
T dot(const T* x, const T* y, std::int64_t len) {
  std::array<T, 8> acc{};
  std::int64_t i = 0;
  for (; i + 8 <= len; i += 8) {
    for (int l = 0; l < 8; ++l) acc[static_cast<std::size_t>(l)] += x[i + l] * y[i + l];
  }
  T tail{0};
  for (; i < len; ++i) tail += x[i] * y[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

// C[M,N] += A[M,K] * B[N,K]^T.
template <typename T>
void gemm_nt(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c) {
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) c[i * n + j] += dot(a + i * k, b + j * k, k);
  }
}

template <typename T>
void im2col(const T* image, std::int64_t channels, std::int64_t h, std::int64_t w, const ConvSpec& spec,
            std::int64_t oh, std::int64_t ow, T* col) {
  const int k = spec.kernel;
  for (std::int64_t c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col + ((c * k + ky) * k + kx) * oh * ow;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t iy = oy * spec.stride + ky - spec.padding;
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t ix = ox * spec.stride + kx - spec.padding;
            dst[oy * ow + ox] =
                (iy >= 0 && iy < h && ix >= 0 && ix < w) ? image[(c * h + iy) * w + ix] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::int64_t channels, std::int64_t h, std::int64_t w, const ConvSpec& spec,
            std::int64_t oh, std::int64_t ow, T* image) {
  const int k = spec.kernel;
  for (std::int64_t c = 0; c < channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col + ((c * k + ky) * k + kx) * oh * ow;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t iy = oy * spec.stride + ky - spec.padding;
          if (iy < 0 || iy >= h) continue;
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t ix = ox * spec.stride + kx - spec.padding;
            if (ix >= 0 && ix < w) image[(c * h + iy) * w + ix] += src[oy * ow + ox];
          }
        }
      }
    }
  }
}

bool is_direct_1x1(const ConvSpec& spec) { return spec.kernel == 1 && spec.stride == 1 && spec.padding == 0; }

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace

Shape conv2d_output_shape(const Shape& input, const Shape& weight, const ConvSpec& spec) {
  spec.validate();
  require(weight.n == spec.out_channels, "conv weight has " + std::to_string(weight.n) +
                                             " output channels, spec expects " +
                                             std::to_string(spec.out_channels));
  require(weight.h == spec.kernel && weight.w == spec.kernel, "conv weight kernel extent mismatch");
  require(weight.c == input.c, "conv channel mismatch: input has " + std::to_string(input.c) +
                                   ", weight expects " + std::to_string(weight.c));
  const std::int64_t oh = (input.h + 2 * spec.padding - spec.kernel) / spec.stride + 1;
  const std::int64_t ow = (input.w + 2 * spec.padding - spec.kernel) / spec.stride + 1;
  require(input.h + 2 * spec.padding >= spec.kernel && input.w + 2 * spec.padding >= spec.kernel && oh > 0 &&
              ow > 0,
          "conv produces non-positive spatial output for input " + input.str());
  return {input.n, spec.out_channels, oh, ow};
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight, std::span<const T> bias,
                      const ConvSpec& spec) {
  const Shape& is = input.shape();
  const Shape os = conv2d_output_shape(is, weight.shape(), spec);
  require(bias.empty() || static_cast<std::int64_t>(bias.size()) == spec.out_channels, "conv bias length mismatch");
  BasicTensor<T> out(os);
  const std::int64_t ckk = is.c * spec.kernel * spec.kernel;
  const std::int64_t ohw = os.h * os.w;
  std::vector<T> col;
  if (!is_direct_1x1(spec)) col.resize(static_cast<std::size_t>(ckk * ohw));
  for (std::int64_t n = 0; n < is.n; ++n) {
    const T* image = input.data() + n * is.c * is.h * is.w;
    const T* b = image;
    if (!is_direct_1x1(spec)) {
      im2col(image, is.c, is.h, is.w, spec, os.h, os.w, col.data());
      b = col.data();
    }
    T* dst = out.data() + n * os.c * ohw;
    if (!bias.empty()) {
      for (std::int64_t o = 0; o < os.c; ++o) std::fill(dst + o * ohw, dst + (o + 1) * ohw, bias[o]);
    }
    gemm_nn(os.c, ohw, ckk, weight.data(), b, dst);
  }
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight, const ConvSpec& spec,
                             const BasicTensor<T>& grad_output) {
  const Shape& is = input.shape();
  const Shape os = conv2d_output_shape(is, weight.shape(), spec);
  require(grad_output.shape() == os, "conv grad_output shape mismatch");
  ConvGrads<T> g{BasicTensor<T>(is), BasicTensor<T>(weight.shape()),
                 std::vector<T>(spec.has_bias ? static_cast<std::size_t>(os.c) : 0, T{0})};
  const std::int64_t ckk = is.c * spec.kernel * spec.kernel;
  const std::int64_t ohw = os.h * os.w;
  const bool direct = is_direct_1x1(spec);
  std::vector<T> col;
  std::vector<T> gcol(static_cast<std::size_t>(ckk * ohw));
  if (!direct) col.resize(static_cast<std::size_t>(ckk * ohw));
  for (std::int64_t n = 0; n < is.n; ++n) {
    const T* image = input.data() + n * is.c * is.h * is.w;
    const T* gout = grad_output.data() + n * os.c * ohw;
    const T* b = image;
    if (!direct) {
      im2col(image, is.c, is.h, is.w, spec, os.h, os.w, col.data());
      b = col.data();
    }
    gemm_nt(os.c, ckk, ohw, gout, b, g.weight.data());
    if (spec.has_bias) {
      for (std::int64_t o = 0; o < os.c; ++o) {
        T s{0};
        for (std::int64_t p = 0; p < ohw; ++p) s += gout[o * ohw + p];
        g.bias[static_cast<std::size_t>(o)] += s;
      }
    }
    T* gimage = g.input.data() + n * is.c * is.h * is.w;
    if (direct) {
      gemm_tn(ckk, ohw, os.c, weight.data(), gout, gimage);
    } else {
      std::fill(gcol.begin(), gcol.end(), T{0});
      gemm_tn(ckk, ohw, os.c, weight.data(), gout, gcol.data());
      col2im(gcol.data(), is.c, is.h, is.w, spec, os.h, os.w, gimage);
    }
  }
  return g;
}

template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& input, std::span<const T> gamma, std::span<const T> beta,
                          RunningStats& stats, Mode mode, BatchNormCache<T>* cache, double epsilon,
                          double momentum) {
  const Shape& s = input.shape();
  const auto channels = static_cast<std::size_t>(s.c);
  require(gamma.size() == channels && beta.size() == channels, "batch_norm gamma/beta length mismatch");
  require(stats.mean.size() == channels && stats.var.size() == channels, "batch_norm running stats length mismatch");
  const std::int64_t per_channel = s.n * s.h * s.w;
  if (mode == Mode::Train) {
    require(per_channel > 1, "batch_norm train mode needs more than one value per channel");
  }
  BasicTensor<T> out(s);
  BasicTensor<T> normalized(s);
  std::vector<T> inv_std(channels);
  const std::int64_t hw = s.h * s.w;
  for (std::int64_t c = 0; c < s.c; ++c) {
    double mean = 0.0;
    double var = 0.0;
    if (mode == Mode::Train) {
      for (std::int64_t n = 0; n < s.n; ++n) {
        const T* x = input.data() + (n * s.c + c) * hw;
        for (std::int64_t p = 0; p < hw; ++p) mean += static_cast<double>(x[p]);
      }
      mean /= static_cast<double>(per_channel);
      for (std::int64_t n = 0; n < s.n; ++n) {
        const T* x = input.data() + (n * s.c + c) * hw;
        for (std::int64_t p = 0; p < hw; ++p) {
          const double d = static_cast<double>(x[p]) - mean;
          var += d * d;
        }
      }
      const double unbiased = var / static_cast<double>(per_channel - 1);
      var /= static_cast<double>(per_channel);
      const auto ci = static_cast<std::size_t>(c);
      stats.mean[ci] = static_cast<float>(momentum * stats.mean[ci] + (1.0 - momentum) * mean);
      stats.var[ci] = static_cast<float>(momentum * stats.var[ci] + (1.0 - momentum) * unbiased);
    } else {
      mean = stats.mean[static_cast<std::size_t>(c)];
      var = stats.var[static_cast<std::size_t>(c)];
    }
    const T istd = static_cast<T>(1.0 / std::sqrt(var + epsilon));
    const T m = static_cast<T>(mean);
    const T g = gamma[static_cast<std::size_t>(c)];
    const T b = beta[static_cast<std::size_t>(c)];
    inv_std[static_cast<std::size_t>(c)] = istd;
    for (std::int64_t n = 0; n < s.n; ++n) {
      const std::int64_t off = (n * s.c + c) * hw;
      const T* x = input.data() + off;
      T* xh = normalized.data() + off;
      T* y = out.data() + off;
      for (std::int64_t p = 0; p < hw; ++p) {
        xh[p] = (x[p] - m) * istd;
        y[p] = g * xh[p] + b;
      }
    }
  }
  if (cache != nullptr) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
    cache->mode = mode;
  }
  return out;
}

template <typename T>
BatchNormGrads<T> batch_norm_backward(const BatchNormCache<T>& cache, std::span<const T> gamma,
                                      const BasicTensor<T>& grad_output) {
  const Shape& s = cache.normalized.shape();
  require(grad_output.shape() == s, "batch_norm grad_output shape mismatch");
  const auto channels = static_cast<std::size_t>(s.c);
  BatchNormGrads<T> g{BasicTensor<T>(s), std::vector<T>(channels, T{0}), std::vector<T>(channels, T{0})};
  const std::int64_t hw = s.h * s.w;
  const auto count = static_cast<double>(s.n * hw);
  for (std::int64_t c = 0; c < s.c; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (std::int64_t n = 0; n < s.n; ++n) {
      const std::int64_t off = (n * s.c + c) * hw;
      const T* dy = grad_output.data() + off;
      const T* xh = cache.normalized.data() + off;
      for (std::int64_t p = 0; p < hw; ++p) {
        sum_dy += static_cast<double>(dy[p]);
        sum_dy_xhat += static_cast<double>(dy[p]) * static_cast<double>(xh[p]);
      }
    }
    g.gamma[ci] = static_cast<T>(sum_dy_xhat);
    g.beta[ci] = static_cast<T>(sum_dy);
    const T scale = gamma[ci] * cache.inv_std[ci];
    const T mean_dy = static_cast<T>(sum_dy / count);
    const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / count);
    for (std::int64_t n = 0; n < s.n; ++n) {
      const std::int64_t off = (n * s.c + c) * hw;
      const T* dy = grad_output.data() + off;
      const T* xh = cache.normalized.data() + off;
      T* dx = g.input.data() + off;
      if (cache.mode == Mode::Train) {
        for (std::int64_t p = 0; p < hw; ++p) dx[p] = scale * (dy[p] - mean_dy - xh[p] * mean_dy_xhat);
      } else {
        for (std::int64_t p = 0; p < hw; ++p) dx[p] = scale * dy[p];
      }
    }
  }
  return g;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  BasicTensor<T> out(input.shape());
  const T* x = input.data();
  T* y = out.data();
  for (std::size_t i = 0; i < input.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
  return out;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_output) {
  require(input.shape() == grad_output.shape(), "relu grad_output shape mismatch");
  BasicTensor<T> g(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) g[i] = input[i] > T{0} ? grad_output[i] : T{0};
  return g;
}

template <typename T>
BasicTensor<T> maxpool2(const BasicTensor<T>& input, int factor_log2, std::vector<std::int64_t>* argmax) {
  require(factor_log2 >= 1, "maxpool factor_log2 must be positive");
  const Shape& s = input.shape();
  const std::int64_t f = std::int64_t{1} << factor_log2;
  require(s.h % f == 0 && s.w % f == 0,
          "maxpool: spatial extent " + s.str() + " not divisible by " + std::to_string(f));
  const Shape os{s.n, s.c, s.h / f, s.w / f};
  BasicTensor<T> out(os);
  if (argmax != nullptr) argmax->assign(static_cast<std::size_t>(os.numel()), 0);
  std::size_t o = 0;
  for (std::int64_t nc = 0; nc < s.n * s.c; ++nc) {
    const std::int64_t base = nc * s.h * s.w;
    for (std::int64_t oy = 0; oy < os.h; ++oy) {
      for (std::int64_t ox = 0; ox < os.w; ++ox, ++o) {
        std::int64_t best = base + (oy * f) * s.w + ox * f;
        T best_v = input[static_cast<std::size_t>(best)];
        for (std::int64_t dy = 0; dy < f; ++dy) {
          for (std::int64_t dx = 0; dx < f; ++dx) {
            const std::int64_t idx = base + (oy * f + dy) * s.w + ox * f + dx;
            const T v = input[static_cast<std::size_t>(idx)];
            if (v > best_v) {
              best_v = v;
              best = idx;
            }
          }
        }
        out[o] = best_v;
        if (argmax != nullptr) (*argmax)[o] = best;
      }
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> maxpool2_backward(const Shape& input_shape, std::span<const std::int64_t> argmax,
                                 const BasicTensor<T>& grad_output) {
  require(argmax.size() == grad_output.size(), "maxpool argmax/grad size mismatch");
  BasicTensor<T> g(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) g[static_cast<std::size_t>(argmax[i])] += grad_output[i];
  return g;
}

template <typename T>
BasicTensor<T> nearest_up2(const BasicTensor<T>& input, int factor_log2) {
  require(factor_log2 >= 1, "nearest_up2 factor_log2 must be positive");
  const Shape& s = input.shape();
  const std::int64_t f = std::int64_t{1} << factor_log2;
  const Shape os{s.n, s.c, s.h * f, s.w * f};
  BasicTensor<T> out(os);
  for (std::int64_t nc = 0; nc < s.n * s.c; ++nc) {
    const T* src = input.data() + nc * s.h * s.w;
    T* dst = out.data() + nc * os.h * os.w;
    for (std::int64_t y = 0; y < os.h; ++y) {
      const T* srow = src + (y / f) * s.w;
      T* drow = dst + y * os.w;
      for (std::int64_t x = 0; x < os.w; ++x) drow[x] = srow[x / f];
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> nearest_up2_backward(const BasicTensor<T>& grad_output, int factor_log2) {
  require(factor_log2 >= 1, "nearest_up2 factor_log2 must be positive");
  const Shape& s = grad_output.shape();
  const std::int64_t f = std::int64_t{1} << factor_log2;
  require(s.h % f == 0 && s.w % f == 0, "nearest_up2 backward: extent not divisible");
  const Shape is{s.n, s.c, s.h / f, s.w / f};
  BasicTensor<T> g(is);
  for (std::int64_t nc = 0; nc < s.n * s.c; ++nc) {
    const T* src = grad_output.data() + nc * s.h * s.w;
    T* dst = g.data() + nc * is.h * is.w;
    for (std::int64_t y = 0; y < s.h; ++y) {
      T* drow = dst + (y / f) * is.w;
      const T* srow = src + y * s.w;
      for (std::int64_t x = 0; x < s.w; ++x) drow[x / f] += srow[x];
    }
  }
  return g;
}

template <typename T>
BasicTensor<T> transposed_conv2(const BasicTensor<T>& input, const BasicTensor<T>& weight, std::span<const T> bias) {
  const Shape& s = input.shape();
  const Shape& ws = weight.shape();
  require(ws.n == s.c && ws.h == 2 && ws.w == 2, "transposed_conv2 weight must be (C_in, C_out, 2, 2) with C_in = " +
                                                    std::to_string(s.c));
  const std::int64_t out_c = ws.c;
  require(bias.empty() || static_cast<std::int64_t>(bias.size()) == out_c, "transposed_conv2 bias length mismatch");
  const Shape os{s.n, out_c, s.h * 2, s.w * 2};
  BasicTensor<T> out(os);
  const std::int64_t hw = s.h * s.w;
  std::vector<T> cols(static_cast<std::size_t>(out_c * 4 * hw));
  for (std::int64_t n = 0; n < s.n; ++n) {
    std::fill(cols.begin(), cols.end(), T{0});
    gemm_tn(out_c * 4, hw, s.c, weight.data(), input.data() + n * s.c * hw, cols.data());
    for (std::int64_t o = 0; o < out_c; ++o) {
      const T b = bias.empty() ? T{0} : bias[static_cast<std::size_t>(o)];
      T* dst = out.data() + (n * out_c + o) * os.h * os.w;
      for (int d = 0; d < 4; ++d) {
        const T* src = cols.data() + (o * 4 + d) * hw;
        const int dy = d / 2;
        const int dx = d % 2;
        for (std::int64_t y = 0; y < s.h; ++y) {
          for (std::int64_t x = 0; x < s.w; ++x) dst[(2 * y + dy) * os.w + 2 * x + dx] = src[y * s.w + x] + b;
        }
      }
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> transposed_conv2_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                                       const BasicTensor<T>& grad_output) {
  const Shape& s = input.shape();
  const std::int64_t out_c = weight.shape().c;
  const Shape os{s.n, out_c, s.h * 2, s.w * 2};
  require(grad_output.shape() == os, "transposed_conv2 grad_output shape mismatch");
  ConvGrads<T> g{BasicTensor<T>(s), BasicTensor<T>(weight.shape()), std::vector<T>(static_cast<std::size_t>(out_c))};
  const std::int64_t hw = s.h * s.w;
  std::vector<T> gcols(static_cast<std::size_t>(out_c * 4 * hw));
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t o = 0; o < out_c; ++o) {
      const T* src = grad_output.data() + (n * out_c + o) * os.h * os.w;
      T bsum{0};
      for (int d = 0; d < 4; ++d) {
        T* dst = gcols.data() + (o * 4 + d) * hw;
        const int dy = d / 2;
        const int dx = d % 2;
        for (std::int64_t y = 0; y < s.h; ++y) {
          for (std::int64_t x = 0; x < s.w; ++x) dst[y * s.w + x] = src[(2 * y + dy) * os.w + 2 * x + dx];
        }
      }
      for (std::int64_t p = 0; p < os.h * os.w; ++p) bsum += src[p];
      g.bias[static_cast<std::size_t>(o)] += bsum;
    }
    const T* x = input.data() + n * s.c * hw;
    gemm_nn(s.c, hw, out_c * 4, weight.data(), gcols.data(), g.input.data() + n * s.c * hw);
    gemm_nt(s.c, out_c * 4, hw, x, gcols.data(), g.weight.data());
  }
  return g;
}

template <typename T>
BasicTensor<T> resample(const BasicTensor<T>& input, ResampleMode mode, int factor_log2, const BasicTensor<T>* weight,
                        std::span<const T> bias) {
  switch (mode) {
    case ResampleMode::MaxPool2:
      return maxpool2(input, factor_log2);
    case ResampleMode::NearestUp2:
      return nearest_up2(input, factor_log2);
    case ResampleMode::TransposedConv2:
      require(weight != nullptr, "transposed_conv2 resample requires a weight");
      require(factor_log2 == 1, "transposed_conv2 resample supports factor_log2 = 1 only");
      return transposed_conv2(input, *weight, bias);
  }
  throw ShapeError("unknown resample mode");
}

template <typename T>
BasicTensor<T> concat_channels(std::span<const BasicTensor<T>* const> inputs) {
  require(!inputs.empty(), "concat_channels: empty input list");
  const Shape& first = inputs.front()->shape();
  std::int64_t channels = 0;
  for (const auto* t : inputs) {
    const Shape& s = t->shape();
    require(s.n == first.n && s.h == first.h && s.w == first.w,
            "concat_channels: shape " + s.str() + " incompatible with " + first.str());
    channels += s.c;
  }
  const Shape os{first.n, channels, first.h, first.w};
  BasicTensor<T> out(os);
  const std::int64_t hw = first.h * first.w;
  for (std::int64_t n = 0; n < first.n; ++n) {
    T* dst = out.data() + n * channels * hw;
    for (const auto* t : inputs) {
      const std::int64_t block = t->shape().c * hw;
      const T* src = t->data() + n * block;
      std::copy(src, src + block, dst);
      dst += block;
    }
  }
  return out;
}

template <typename T>
std::vector<BasicTensor<T>> split_channels(const BasicTensor<T>& input, std::span<const std::int64_t> channels) {
  const Shape& s = input.shape();
  std::int64_t total = 0;
  for (auto c : channels) total += c;
  require(total == s.c, "split_channels: channel counts sum to " + std::to_string(total) + ", tensor has " +
                            std::to_string(s.c));
  std::vector<BasicTensor<T>> parts;
  parts.reserve(channels.size());
  for (auto c : channels) parts.emplace_back(Shape{s.n, c, s.h, s.w});
  const std::int64_t hw = s.h * s.w;
  for (std::int64_t n = 0; n < s.n; ++n) {
    const T* src = input.data() + n * s.c * hw;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const std::int64_t block = channels[k] * hw;
      std::copy(src, src + block, parts[k].data() + n * block);
      src += block;
    }
  }
  return parts;
}

template <typename T>
LossResult<T> softmax_cross_entropy(const BasicTensor<T>& logits, const LabelMask& labels) {
  const Shape& s = logits.shape();
  require(labels.n == s.n && labels.h == s.h && labels.w == s.w,
          "softmax_cross_entropy: label extents do not match logits " + s.str());
  require(s.c >= 1, "softmax_cross_entropy: need at least one class");
  LossResult<T> r{0.0, BasicTensor<T>(s)};
  const std::int64_t hw = s.h * s.w;
  const double pixels = static_cast<double>(s.n * hw);
  std::vector<double> prob(static_cast<std::size_t>(s.c));
  double total = 0.0;
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t p = 0; p < hw; ++p) {
      const std::int32_t label = labels.labels[static_cast<std::size_t>(n * hw + p)];
      if (label < 0 || label >= s.c) {
        throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(label) + " outside [0, " +
                                std::to_string(s.c) + ")");
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t c = 0; c < s.c; ++c) mx = std::max(mx, static_cast<double>(logits[logits.index(n, c, 0, 0) + p]));
      double z = 0.0;
      for (std::int64_t c = 0; c < s.c; ++c) {
        const double e = std::exp(static_cast<double>(logits[logits.index(n, c, 0, 0) + p]) - mx);
        prob[static_cast<std::size_t>(c)] = e;
        z += e;
      }
      const double logit_label = static_cast<double>(logits[logits.index(n, label, 0, 0) + p]);
      total += std::log(z) + mx - logit_label;
      for (std::int64_t c = 0; c < s.c; ++c) {
        const double pc = prob[static_cast<std::size_t>(c)] / z - (c == label ? 1.0 : 0.0);
        r.grad[r.grad.index(n, c, 0, 0) + p] = static_cast<T>(pc / pixels);
      }
    }
  }
  r.loss = total / pixels;
  return r;
}

#define MDUNET_INSTANTIATE_OPS(T)                                                                                     \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, std::span<const T>, const ConvSpec&); \
  template ConvGrads<T> conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&, const ConvSpec&,                \
                                        const BasicTensor<T>&);                                                       \
  template BasicTensor<T> batch_norm(const BasicTensor<T>&, std::span<const T>, std::span<const T>, RunningStats&,    \
                                     Mode, BatchNormCache<T>*, double, double);                                       \
  template BatchNormGrads<T> batch_norm_backward(const BatchNormCache<T>&, std::span<const T>,                        \
                                                 const BasicTensor<T>&);                                              \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                                \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                                \
  template BasicTensor<T> maxpool2(const BasicTensor<T>&, int, std::vector<std::int64_t>*);                           \
  template BasicTensor<T> maxpool2_backward(const Shape&, std::span<const std::int64_t>, const BasicTensor<T>&);      \
  template BasicTensor<T> nearest_up2(const BasicTensor<T>&, int);                                                    \
  template BasicTensor<T> nearest_up2_backward(const BasicTensor<T>&, int);                                           \
  template BasicTensor<T> transposed_conv2(const BasicTensor<T>&, const BasicTensor<T>&, std::span<const T>);         \
  template ConvGrads<T> transposed_conv2_backward(const BasicTensor<T>&, const BasicTensor<T>&,                       \
                                                  const BasicTensor<T>&);                                             \
  template BasicTensor<T> resample(const BasicTensor<T>&, ResampleMode, int, const BasicTensor<T>*,                   \
                                   std::span<const T>);                                                               \
  template BasicTensor<T> concat_channels(std::span<const BasicTensor<T>* const>);                                    \
  template std::vector<BasicTensor<T>> split_channels(const BasicTensor<T>&, std::span<const std::int64_t>);          \
  template LossResult<T> softmax_cross_entropy(const BasicTensor<T>&, const LabelMask&);

MDUNET_INSTANTIATE_OPS(float)
MDUNET_INSTANTIATE_OPS(double)

#undef MDUNET_INSTANTIATE_OPS

}  // namespace mdunet
