#pragma once

#include <vector>

#include "mdunet/arch.hpp"
#include "mdunet/ops.hpp"

namespace mdunet {

/// Evaluates a ModelGraph in topological order and back-propagates through it.
///
/// Executor<float> reads the graph's parameters in place, accumulates
/// gradients into each Parameter's grad slot and updates the graph's running
/// statistics. Executor<double> works on a widened private copy of the
/// parameters and statistics; it exists for finite-difference checking.
template <typename T>
class Executor {
 public:
  explicit Executor(ModelGraph& graph);

  /// Throws ShapeError via the ops on mismatched input, NumericError if any
  /// node produces a non-finite value.
  BasicTensor<T> forward(const BasicTensor<T>& input, Mode mode);

  /// Accumulates parameter gradients for the most recent forward call and
  /// returns the gradient with respect to the network input.
  BasicTensor<T> backward(const BasicTensor<T>& grad_output);

  [[nodiscard]] BasicTensor<T>& weight(std::size_t param);
  [[nodiscard]] std::span<T> grad(std::size_t param);
  void zero_grad();

  /// Re-reads parameter values from the graph (no-op for float).
  void sync_from_graph();

  [[nodiscard]] const BasicTensor<T>& activation(NodeId id) const { return outputs_.at(id.value); }

 private:
  std::span<const T> param_values(std::size_t p) { return weight(p).values(); }
  RunningStats& stats(int index);

  ModelGraph* graph_;
  std::vector<BasicTensor<T>> outputs_;
  std::vector<BatchNormCache<T>> bn_caches_;
  std::vector<std::vector<std::int64_t>> argmax_;
  Mode last_mode_ = Mode::Infer;
  bool has_forward_ = false;

  // Only used by the double instantiation.
  std::vector<BasicTensor<T>> owned_weights_;
  std::vector<std::vector<T>> owned_grads_;
  std::vector<RunningStats> owned_stats_;
};

extern template class Executor<float>;
extern template class Executor<double>;

/// Convenience single forward pass in float.
Tensor forward(ModelGraph& graph, const Tensor& input, Mode mode);

}  // namespace mdunet
