#include "mdunet/executor.hpp"

#include <type_traits>

namespace mdunet {

template <typename T>
Executor<T>::Executor(ModelGraph& graph) : graph_(&graph) {
  const std::size_t n = graph.nodes().size();
  outputs_.resize(n);
  bn_caches_.resize(n);
  argmax_.resize(n);
  sync_from_graph();
}

template <typename T>
void Executor<T>::sync_from_graph() {
  if constexpr (!std::is_same_v<T, float>) {
    owned_weights_.clear();
    owned_grads_.clear();
    for (const auto& p : graph_->parameters()) {
      owned_weights_.push_back(p.tensor.template cast<T>());
      owned_grads_.emplace_back(p.size(), T{0});
    }
    owned_stats_.clear();
    for (const auto& s : graph_->running_stats()) owned_stats_.push_back(s.stats);
  }
}

template <typename T>
BasicTensor<T>& Executor<T>::weight(std::size_t param) {
  if constexpr (std::is_same_v<T, float>) {
    return graph_->parameters()[param].tensor;
  } else {
    return owned_weights_.at(param);
  }
}

template <typename T>
std::span<T> Executor<T>::grad(std::size_t param) {
  if constexpr (std::is_same_v<T, float>) {
    return graph_->parameters()[param].tensor.grad();
  } else {
    return owned_grads_.at(param);
  }
}

template <typename T>
void Executor<T>::zero_grad() {
  for (std::size_t p = 0; p < graph_->parameters().size(); ++p) {
    auto g = grad(p);
    std::fill(g.begin(), g.end(), T{0});
  }
}

template <typename T>
RunningStats& Executor<T>::stats(int index) {
  if constexpr (std::is_same_v<T, float>) {
    return graph_->running_stats()[static_cast<std::size_t>(index)].stats;
  } else {
    return owned_stats_.at(static_cast<std::size_t>(index));
  }
}

template <typename T>
BasicTensor<T> Executor<T>::forward(const BasicTensor<T>& input, Mode mode) {
  const auto nodes = graph_->nodes();
  for (const auto& n : nodes) {
    auto in = [&](std::size_t k) -> const BasicTensor<T>& { return outputs_[n.parents[k].value]; };
    BasicTensor<T>& out = outputs_[n.id.value];
    switch (n.kind) {
      case OpKind::Input:
        if (input.shape().c != n.channels) {
          throw ShapeError("input has " + std::to_string(input.shape().c) + " channels, model expects " +
                           std::to_string(n.channels));
        }
        out = input;
        break;
      case OpKind::Conv: {
        std::span<const T> bias;
        if (n.params.size() > 1) bias = param_values(n.params[1]);
        out = conv2d(in(0), weight(n.params[0]), bias, n.conv);
        break;
      }
      case OpKind::BatchNorm:
        out = batch_norm(in(0), param_values(n.params[0]), param_values(n.params[1]), stats(n.stats_index), mode,
                         mode == Mode::Train ? &bn_caches_[n.id.value] : nullptr);
        break;
      case OpKind::Relu:
        out = relu(in(0));
        break;
      case OpKind::MaxPool:
        out = maxpool2(in(0), n.factor_log2, mode == Mode::Train ? &argmax_[n.id.value] : nullptr);
        break;
      case OpKind::NearestUp:
        out = nearest_up2(in(0), n.factor_log2);
        break;
      case OpKind::TransposedConv:
        out = transposed_conv2(in(0), weight(n.params[0]), param_values(n.params[1]));
        break;
      case OpKind::Concat: {
        std::vector<const BasicTensor<T>*> parts;
        parts.reserve(n.parents.size());
        for (auto p : n.parents) parts.push_back(&outputs_[p.value]);
        out = concat_channels<T>(parts);
        break;
      }
      case OpKind::Output:
        out = in(0);
        break;
    }
    if (!out.all_finite()) throw NumericError("non-finite value produced at node " + n.name);
  }
  last_mode_ = mode;
  has_forward_ = true;
  return outputs_[graph_->output().value];
}

template <typename T>
BasicTensor<T> Executor<T>::backward(const BasicTensor<T>& grad_output) {
  if (!has_forward_ || last_mode_ != Mode::Train) {
    throw std::logic_error("backward requires a preceding train-mode forward");
  }
  const auto nodes = graph_->nodes();
  std::vector<BasicTensor<T>> grads(nodes.size());
  std::vector<bool> has(nodes.size(), false);
  auto accumulate = [&](NodeId target, BasicTensor<T>&& g) {
    auto& slot = grads[target.value];
    if (!has[target.value]) {
      slot = std::move(g);
      has[target.value] = true;
      return;
    }
    T* dst = slot.data();
    const T* src = g.data();
    for (std::size_t i = 0; i < slot.size(); ++i) dst[i] += src[i];
  };
  auto add_into = [](std::span<T> dst, std::span<const T> src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  };

  accumulate(graph_->output(), BasicTensor<T>(grad_output));
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    const GraphNode& n = *it;
    if (!has[n.id.value]) continue;
    BasicTensor<T>& g = grads[n.id.value];
    auto in = [&](std::size_t k) -> const BasicTensor<T>& { return outputs_[n.parents[k].value]; };
    switch (n.kind) {
      case OpKind::Input:
        break;
      case OpKind::Conv: {
        auto cg = conv2d_backward(in(0), weight(n.params[0]), n.conv, g);
        add_into(grad(n.params[0]), cg.weight.values());
        if (n.params.size() > 1) add_into(grad(n.params[1]), cg.bias);
        accumulate(n.parents[0], std::move(cg.input));
        break;
      }
      case OpKind::BatchNorm: {
        auto bg = batch_norm_backward(bn_caches_[n.id.value], param_values(n.params[0]), g);
        add_into(grad(n.params[0]), bg.gamma);
        add_into(grad(n.params[1]), bg.beta);
        accumulate(n.parents[0], std::move(bg.input));
        break;
      }
      case OpKind::Relu:
        accumulate(n.parents[0], relu_backward(in(0), g));
        break;
      case OpKind::MaxPool:
        accumulate(n.parents[0], maxpool2_backward(in(0).shape(), argmax_[n.id.value], g));
        break;
      case OpKind::NearestUp:
        accumulate(n.parents[0], nearest_up2_backward(g, n.factor_log2));
        break;
      case OpKind::TransposedConv: {
        auto cg = transposed_conv2_backward(in(0), weight(n.params[0]), g);
        add_into(grad(n.params[0]), cg.weight.values());
        add_into(grad(n.params[1]), cg.bias);
        accumulate(n.parents[0], std::move(cg.input));
        break;
      }
      case OpKind::Concat: {
        std::vector<std::int64_t> channels;
        channels.reserve(n.parents.size());
        for (auto p : n.parents) channels.push_back(outputs_[p.value].shape().c);
        auto parts = split_channels<T>(g, channels);
        for (std::size_t k = 0; k < parts.size(); ++k) accumulate(n.parents[k], std::move(parts[k]));
        break;
      }
      case OpKind::Output:
        accumulate(n.parents[0], std::move(g));
        break;
    }
  }
  const NodeId in_id = graph_->input();
  if (!has[in_id.value]) return BasicTensor<T>(outputs_[in_id.value].shape());
  return std::move(grads[in_id.value]);
}

template class Executor<float>;
template class Executor<double>;

Tensor forward(ModelGraph& graph, const Tensor& input, Mode mode) {
  Executor<float> exec(graph);
  return exec.forward(input, mode);
}

}  // namespace mdunet
