#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mdunet/arch.hpp"
#include "mdunet/ops.hpp"
#include "mdunet/tensor.hpp"

namespace mdunet {

/// One image (1, C, H, W) with its binary foreground mask (1, H, W).
struct Sample {
  std::string name;
  Tensor image;
  LabelMask mask;
};

struct Dataset {
  std::vector<Sample> samples;
  [[nodiscard]] std::size_t size() const { return samples.size(); }
  [[nodiscard]] bool empty() const { return samples.empty(); }
};

enum class LossKind { CrossEntropy };

struct TrainConfig {
  double base_lr = 0.005;
  /// Iterations at which the learning rate is divided by 10.
  std::vector<std::int64_t> lr_milestones;
  std::int64_t batch_size = 4;
  std::int64_t epochs = 1;
  /// When positive, training stops after this many iterations, running as
  /// many epochs as needed.
  std::int64_t max_iterations = 0;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::CrossEntropy;

  void validate() const;
};

/// base_lr * 10^-m, m = number of milestones <= iteration.
double lr_at(std::int64_t iteration, const TrainConfig& config);

/// w <- w - lr * g for every unfrozen element, using each parameter's gradient
/// slot; gradients are cleared afterwards.
void sgd_step(std::span<Parameter> params, double lr);

/// Same update with explicitly supplied gradients (one per parameter, same
/// length). Throws ShapeError on a length mismatch.
void sgd_step(std::span<Parameter> params, std::span<const std::vector<float>> grads, double lr);

struct TrainRecord {
  std::int64_t iteration = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainHooks {
  /// Runs after every optimizer step.
  std::function<void(const TrainRecord&)> on_iteration;
};

struct TrainResult {
  std::vector<TrainRecord> history;
};

/// Builds batches of `indices` into one (N, C, H, W) tensor and label mask.
void assemble_batch(const Dataset& data, std::span<const std::size_t> indices, Tensor& images, LabelMask& labels);

/// Plain SGD over shuffled mini-batches. A trailing partial batch is used as
/// is; a dataset smaller than the batch size is repeated to fill the batch.
/// Throws NumericError when the loss becomes NaN.
TrainResult train_loop(ModelGraph& model, const Dataset& data, const TrainConfig& config, const TrainHooks& hooks = {});

struct ImageMetrics {
  double iou = 0.0;
  double dice = 0.0;
};

struct Metrics {
  double mean_iou = 0.0;
  double dice = 0.0;
  std::vector<ImageMetrics> per_image;
};

/// Pixel-level IoU and Dice of two binary masks; both are 1 when the masks are
/// empty.
ImageMetrics metrics_pair(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);

/// Argmax over the class channel; any non-zero class counts as foreground.
std::vector<std::uint8_t> predict_mask(const Tensor& logits);

/// Infer-mode evaluation, one image at a time, averaged over images.
Metrics evaluate(ModelGraph& model, const Dataset& data);

void write_history_csv(std::ostream& os, std::span<const TrainRecord> history);
std::string format_metrics(const Metrics& m);

}  // namespace mdunet
