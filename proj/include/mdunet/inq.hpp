#pragma once

// Incremental network quantization: weights are partitioned by magnitude,
// the selected group is snapped to {0} U {+-2^p : n2 <= p <= n1} and frozen,
// and the remaining weights are retrained before the next group is taken.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mdunet/arch.hpp"
#include "mdunet/tensor.hpp"

namespace mdunet {

enum class PartitionStrategy { MagnitudeDesc };

struct QuantConfig {
  int bits = 5;
  std::vector<double> schedule{0.5, 0.75, 1.0};
  PartitionStrategy strategy = PartitionStrategy::MagnitudeDesc;
  /// Training iterations run between quantization steps.
  std::int64_t retrain_iterations = 100;
  /// Leave BatchNorm gamma/beta in full precision.
  bool skip_batch_norm = false;
  /// Stop after the step that reaches this fraction (0 = run the whole schedule).
  double stop_after = 0.0;

  void validate() const;
};

struct QuantBounds {
  int n1 = 0;  ///< largest exponent
  int n2 = 0;  ///< smallest exponent

  [[nodiscard]] int magnitude_levels() const { return n1 - n2 + 1; }
  /// Sorted codebook {0} U {+-2^p}.
  [[nodiscard]] std::vector<float> codebook() const;
  [[nodiscard]] bool contains(float v) const;
  friend constexpr bool operator==(const QuantBounds&, const QuantBounds&) = default;
};

/// n1 = floor(log2(4 * max|w| / 3)), n2 = n1 - (2^(bits-1) - 2). Throws
/// std::invalid_argument for an all-zero tensor or unsupported bit width.
QuantBounds compute_bounds(std::span<const float> weights, int bits);
QuantBounds compute_bounds(const Parameter& weights, int bits);

/// Nearest codeword in magnitude, sign preserved. Magnitudes at or above 2^n1
/// clamp to 2^n1; magnitudes below 2^(n2-1) become 0; exact midpoints round
/// to the larger magnitude.
float quantize_value(float w, const QuantBounds& bounds);

/// Indices of not-yet-frozen elements to freeze so the frozen count reaches
/// round(target_fraction * size). Largest |w| first, ties by index. Throws
/// std::invalid_argument when the target is below the current frozen count.
std::vector<std::size_t> partition_weights(const Parameter& param, double target_fraction,
                                           PartitionStrategy strategy = PartitionStrategy::MagnitudeDesc);

struct ParamQuantState {
  std::string name;
  /// Unset when the parameter was entirely zero at the first step; its
  /// codebook degenerates to {0}.
  std::optional<QuantBounds> bounds;
  double quantized_fraction = 0.0;
};

struct QuantState {
  int bits = 5;
  std::vector<ParamQuantState> params;

  [[nodiscard]] const ParamQuantState* find(std::string_view name) const;
};

/// Parameters INQ manages: every learnable tensor, optionally minus BN affine.
std::vector<Parameter*> quantizable_parameters(ModelGraph& graph, const QuantConfig& config);

/// Partition, quantize in place and freeze, per parameter. Bounds are computed
/// on the first call for each parameter and reused afterwards.
QuantState apply_quant_step(std::span<Parameter* const> params, QuantState state, double target_fraction);

/// True when every frozen element lies in its parameter's codebook.
bool frozen_values_in_codebook(std::span<const Parameter* const> params, const QuantState& state);

/// FNV-1a over (index, bit pattern) of every frozen element.
std::uint64_t frozen_checksum(std::span<const Parameter* const> params);

struct InqSnapshot {
  double fraction = 0.0;
  std::size_t frozen = 0;
  std::size_t total = 0;
  std::uint64_t frozen_checksum = 0;
};

struct InqResult {
  QuantState state;
  std::vector<InqSnapshot> snapshots;
  /// Set when a callback threw; state and parameters reflect the last
  /// completed step.
  std::optional<std::string> error;
};

/// Called with the step index after each quantization step; must honor frozen masks.
using RetrainFn = std::function<void(std::size_t step)>;
/// Called after each step (and its retraining) completes.
using SnapshotFn = std::function<void(std::size_t step, const InqSnapshot&, const QuantState&)>;

InqResult run_inq_schedule(ModelGraph& graph, const QuantConfig& config, const RetrainFn& retrain,
                           const SnapshotFn& on_snapshot = {});

}  // namespace mdunet
