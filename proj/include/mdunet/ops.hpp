#pragma once

// Tensor primitives with analytic backward passes. Every kernel is explicitly
// instantiated for float (the model type) and double (used by gradient-check
// oracles).

#include <cstdint>
#include <span>
#include <vector>

#include "mdunet/tensor.hpp"

namespace mdunet {

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

// ---------------------------------------------------------------------------
// Convolution

/// Forward convolution. `weight` is (out, in, k, k); `bias` is empty or has
/// `out` entries.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight, std::span<const T> bias,
                      const ConvSpec& spec);

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;
  BasicTensor<T> weight;
  std::vector<T> bias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight, const ConvSpec& spec,
                             const BasicTensor<T>& grad_output);

/// Output extents of a convolution; throws ShapeError on invalid combinations.
Shape conv2d_output_shape(const Shape& input, const Shape& weight, const ConvSpec& spec);

// ---------------------------------------------------------------------------
// Batch normalization

/// Per-channel running statistics; non-learned state.
struct RunningStats {
  std::vector<float> mean;
  std::vector<float> var;

  explicit RunningStats(std::size_t channels = 0) : mean(channels, 0.0f), var(channels, 1.0f) {}
};

template <typename T>
struct BatchNormCache {
  BasicTensor<T> normalized;
  std::vector<T> inv_std;
  Mode mode = Mode::Train;
};

/// Normalizes per channel. Train mode uses batch statistics over N*H*W and
/// updates `stats` as stats = momentum*stats + (1-momentum)*batch (variance
/// stored unbiased). Infer mode uses `stats`. `cache` may be null.
template <typename T>
BasicTensor<T> batch_norm(const BasicTensor<T>& input, std::span<const T> gamma, std::span<const T> beta,
                          RunningStats& stats, Mode mode, BatchNormCache<T>* cache,
                          double epsilon = kBatchNormEpsilon, double momentum = kBatchNormMomentum);

template <typename T>
struct BatchNormGrads {
  BasicTensor<T> input;
  std::vector<T> gamma;
  std::vector<T> beta;
};

template <typename T>
BatchNormGrads<T> batch_norm_backward(const BatchNormCache<T>& cache, std::span<const T> gamma,
                                      const BasicTensor<T>& grad_output);

// ---------------------------------------------------------------------------
// Element-wise

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input);

/// Gradient passes where the forward input was strictly positive.
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_output);

// ---------------------------------------------------------------------------
// Resampling

enum class ResampleMode { MaxPool2, NearestUp2, TransposedConv2 };

/// Max pooling with a 2^factor_log2 window and stride. When `argmax` is given
/// it receives, per output element, the flat input index that won (first
/// row-major maximum on ties).
template <typename T>
BasicTensor<T> maxpool2(const BasicTensor<T>& input, int factor_log2, std::vector<std::int64_t>* argmax = nullptr);

template <typename T>
BasicTensor<T> maxpool2_backward(const Shape& input_shape, std::span<const std::int64_t> argmax,
                                 const BasicTensor<T>& grad_output);

/// Block replication by 2^factor_log2 along H and W.
template <typename T>
BasicTensor<T> nearest_up2(const BasicTensor<T>& input, int factor_log2);

/// Sums each replicated block back into its source element.
template <typename T>
BasicTensor<T> nearest_up2_backward(const BasicTensor<T>& grad_output, int factor_log2);

/// 2x2 stride-2 transposed convolution. `weight` is (in, out, 2, 2).
template <typename T>
BasicTensor<T> transposed_conv2(const BasicTensor<T>& input, const BasicTensor<T>& weight, std::span<const T> bias);

template <typename T>
ConvGrads<T> transposed_conv2_backward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                                       const BasicTensor<T>& grad_output);

/// Dispatches to the resampling kernels (forward only). `weight`/`bias` are
/// required for TransposedConv2 and ignored otherwise.
template <typename T>
BasicTensor<T> resample(const BasicTensor<T>& input, ResampleMode mode, int factor_log2,
                        const BasicTensor<T>* weight = nullptr, std::span<const T> bias = {});

// ---------------------------------------------------------------------------
// Channel concatenation

template <typename T>
BasicTensor<T> concat_channels(std::span<const BasicTensor<T>* const> inputs);

/// Inverse of concat_channels: splits along C into the given channel counts.
template <typename T>
std::vector<BasicTensor<T>> split_channels(const BasicTensor<T>& input, std::span<const std::int64_t> channels);

// ---------------------------------------------------------------------------
// Loss

/// Integer class map of extents N x H x W.
struct LabelMask {
  std::int64_t n = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;
  std::vector<std::int32_t> labels;

  LabelMask() = default;
  LabelMask(std::int64_t n_, std::int64_t h_, std::int64_t w_)
      : n(n_), h(h_), w(w_), labels(static_cast<std::size_t>(n_ * h_ * w_), 0) {}
};

template <typename T>
struct LossResult {
  double loss = 0.0;
  BasicTensor<T> grad;
};

/// Mean over pixels of -log softmax(logits)[label]; gradient is
/// (softmax - onehot) / (N*H*W).
template <typename T>
LossResult<T> softmax_cross_entropy(const BasicTensor<T>& logits, const LabelMask& labels);

}  // namespace mdunet
