#include "mdunet/train.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "mdunet/executor.hpp"

namespace mdunet {

void TrainConfig::validate() const {
  if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (max_iterations < 0) throw ConfigError("max_iterations must be non-negative");
  if (!std::is_sorted(lr_milestones.begin(), lr_milestones.end()) ||
      std::adjacent_find(lr_milestones.begin(), lr_milestones.end()) != lr_milestones.end()) {
    throw ConfigError("lr_milestones must be strictly ascending");
  }
}

double lr_at(std::int64_t iteration, const TrainConfig& config) {
  const auto passed = std::count_if(config.lr_milestones.begin(), config.lr_milestones.end(),
                                    [iteration](std::int64_t m) { return m <= iteration; });
  return config.base_lr * std::pow(10.0, -static_cast<double>(passed));
}

void sgd_step(std::span<Parameter> params, double lr) {
  for (auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    auto w = p.tensor.values();
    auto g = p.tensor.grad();
    const auto step = static_cast<float>(lr);
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (p.frozen_mask[i] == 0) w[i] -= step * g[i];
    }
    p.tensor.zero_grad();
  }
}

void sgd_step(std::span<Parameter> params, std::span<const std::vector<float>> grads, double lr) {
  if (grads.size() != params.size()) throw ShapeError("sgd_step: gradient count does not match parameter count");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].size() != params[k].size()) {
      throw ShapeError("sgd_step: gradient for " + params[k].name + " has wrong length");
    }
  }
  const auto step = static_cast<float>(lr);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].tensor.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (params[k].frozen_mask[i] == 0) w[i] -= step * grads[k][i];
    }
    params[k].tensor.zero_grad();
  }
}

void assemble_batch(const Dataset& data, std::span<const std::size_t> indices, Tensor& images, LabelMask& labels) {
  const Shape& first = data.samples.at(indices.front()).image.shape();
  const auto n = static_cast<std::int64_t>(indices.size());
  images = Tensor(Shape{n, first.c, first.h, first.w});
  labels = LabelMask(n, first.h, first.w);
  const std::size_t per_image = static_cast<std::size_t>(first.c * first.h * first.w);
  const std::size_t per_mask = static_cast<std::size_t>(first.h * first.w);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Sample& s = data.samples.at(indices[k]);
    if (s.image.shape().c != first.c || s.image.shape().h != first.h || s.image.shape().w != first.w) {
      throw ShapeError("sample " + s.name + " has shape " + s.image.shape().str() + ", expected " + first.str());
    }
    std::copy(s.image.values().begin(), s.image.values().end(), images.values().begin() + k * per_image);
    std::copy(s.mask.labels.begin(), s.mask.labels.end(), labels.labels.begin() + k * per_mask);
  }
}

TrainResult train_loop(ModelGraph& model, const Dataset& data, const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  if (data.empty()) throw std::invalid_argument("train_loop: dataset is empty");
  TrainResult result;
  Executor<float> exec(model);
  exec.zero_grad();
  std::mt19937_64 rng(config.seed);
  const auto batch = static_cast<std::size_t>(config.batch_size);
  std::vector<std::size_t> order(data.size());
  std::int64_t iteration = 0;
  Tensor images;
  LabelMask labels;
  auto done = [&](std::int64_t epoch) {
    if (config.max_iterations > 0) return iteration >= config.max_iterations;
    return epoch >= config.epochs;
  };
  for (std::int64_t epoch = 0; !done(epoch); ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    // Fisher-Yates with explicit draws keeps the permutation identical across
    // standard library implementations.
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng() % i);
      std::swap(order[i - 1], order[j]);
    }
    std::vector<std::size_t> indices;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      if (config.max_iterations > 0 && iteration >= config.max_iterations) break;
      indices.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + batch)));
      if (order.size() < batch) {
        for (std::size_t k = 0; indices.size() < batch; ++k) indices.push_back(order[k % order.size()]);
      }
      assemble_batch(data, indices, images, labels);
      const Tensor logits = exec.forward(images, Mode::Train);
      const auto loss = softmax_cross_entropy(logits, labels);
      if (std::isnan(loss.loss)) {
        throw NumericError("training diverged: loss is NaN at iteration " + std::to_string(iteration));
      }
      exec.backward(loss.grad);
      const double lr = lr_at(iteration, config);
      sgd_step(model.parameters(), lr);
      TrainRecord rec{iteration, lr, loss.loss};
      result.history.push_back(rec);
      if (hooks.on_iteration) hooks.on_iteration(rec);
      ++iteration;
    }
  }
  return result;
}

ImageMetrics metrics_pair(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size()) throw ShapeError("metrics_pair: mask sizes differ");
  std::size_t inter = 0;
  std::size_t p = 0;
  std::size_t g = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0;
    const bool b = truth[i] != 0;
    p += a;
    g += b;
    inter += a && b;
  }
  if (p == 0 && g == 0) return {1.0, 1.0};
  const double uni = static_cast<double>(p + g - inter);
  return {static_cast<double>(inter) / uni, 2.0 * static_cast<double>(inter) / static_cast<double>(p + g)};
}

std::vector<std::uint8_t> predict_mask(const Tensor& logits) {
  const Shape& s = logits.shape();
  const std::int64_t hw = s.h * s.w;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(s.n * hw), 0);
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t p = 0; p < hw; ++p) {
      std::int64_t best = 0;
      float best_v = logits[logits.index(n, 0, 0, 0) + static_cast<std::size_t>(p)];
      for (std::int64_t c = 1; c < s.c; ++c) {
        const float v = logits[logits.index(n, c, 0, 0) + static_cast<std::size_t>(p)];
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      out[static_cast<std::size_t>(n * hw + p)] = best != 0 ? 1 : 0;
    }
  }
  return out;
}

Metrics evaluate(ModelGraph& model, const Dataset& data) {
  Metrics m;
  Executor<float> exec(model);
  for (const auto& s : data.samples) {
    const Tensor logits = exec.forward(s.image, Mode::Infer);
    const auto pred = predict_mask(logits);
    std::vector<std::uint8_t> truth(s.mask.labels.size());
    std::transform(s.mask.labels.begin(), s.mask.labels.end(), truth.begin(),
                   [](std::int32_t v) { return static_cast<std::uint8_t>(v != 0); });
    const auto im = metrics_pair(pred, truth);
    m.per_image.push_back(im);
    m.mean_iou += im.iou;
    m.dice += im.dice;
  }
  if (!m.per_image.empty()) {
    m.mean_iou /= static_cast<double>(m.per_image.size());
    m.dice /= static_cast<double>(m.per_image.size());
  }
  return m;
}

void write_history_csv(std::ostream& os, std::span<const TrainRecord> history) {
  os << "iteration,lr,loss\n";
  for (const auto& r : history) {
    std::ostringstream line;
    line << r.iteration << ',' << std::setprecision(9) << r.lr << ',' << std::setprecision(9) << r.loss << '\n';
    os << line.str();
  }
}

std::string format_metrics(const Metrics& m) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << "mean_iou: " << m.mean_iou << "\ndice: " << m.dice << '\n';
  return os.str();
}

}  // namespace mdunet
