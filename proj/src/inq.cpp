#include "mdunet/inq.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mdunet {

void QuantConfig::validate() const {
  if (bits != 3 && bits != 5 && bits != 7) throw ConfigError("quant_bits must be 3, 5 or 7");
  if (schedule.empty()) throw ConfigError("quant_schedule must not be empty");
  double prev = 0.0;
  for (double f : schedule) {
    if (!(f > prev) || f > 1.0) throw ConfigError("quant_schedule must be strictly ascending within (0, 1]");
    prev = f;
  }
  if (retrain_iterations < 0) throw ConfigError("retrain_iterations must be non-negative");
  if (stop_after < 0.0 || stop_after > 1.0) throw ConfigError("quant_stop_after must lie in [0, 1]");
}

std::vector<float> QuantBounds::codebook() const {
  std::vector<float> out;
  for (int p = n1; p >= n2; --p) out.push_back(-std::ldexp(1.0f, p));
  out.push_back(0.0f);
  for (int p = n2; p <= n1; ++p) out.push_back(std::ldexp(1.0f, p));
  return out;
}

bool QuantBounds::contains(float v) const {
  if (v == 0.0f) return true;
  int e = 0;
  const float m = std::frexp(std::abs(v), &e);
  // |v| = 0.5 * 2^e exactly, i.e. 2^(e-1).
  return m == 0.5f && e - 1 >= n2 && e - 1 <= n1;
}

QuantBounds compute_bounds(std::span<const float> weights, int bits) {
  if (bits < 2 || bits > 16) throw std::invalid_argument("unsupported bit width " + std::to_string(bits));
  float max_abs = 0.0f;
  for (float w : weights) max_abs = std::max(max_abs, std::abs(w));
  if (max_abs == 0.0f) throw std::invalid_argument("compute_bounds: all weights are zero");
  QuantBounds b;
  b.n1 = static_cast<int>(std::floor(std::log2(4.0 * static_cast<double>(max_abs) / 3.0)));
  b.n2 = b.n1 - ((1 << (bits - 1)) - 2);
  return b;
}

QuantBounds compute_bounds(const Parameter& weights, int bits) { return compute_bounds(weights.tensor.values(), bits); }

float quantize_value(float w, const QuantBounds& bounds) {
  if (w == 0.0f || !std::isfinite(w)) return 0.0f;
  const double a = std::abs(static_cast<double>(w));
  int e = 0;
  std::frexp(a, &e);  // a in [2^(e-1), 2^e)
  int p = a >= 3.0 * std::ldexp(1.0, e - 2) ? e : e - 1;
  p = std::min(p, bounds.n1);
  if (p < bounds.n2) {
    if (a < std::ldexp(1.0, bounds.n2 - 1)) return 0.0f;
    p = bounds.n2;
  }
  return std::copysign(std::ldexp(1.0f, p), w);
}

std::vector<std::size_t> partition_weights(const Parameter& param, double target_fraction, PartitionStrategy) {
  if (target_fraction < 0.0 || target_fraction > 1.0) {
    throw std::invalid_argument("partition_weights: fraction outside [0, 1]");
  }
  const std::size_t n = param.size();
  const auto target = static_cast<std::size_t>(std::floor(target_fraction * static_cast<double>(n) + 0.5));
  const std::size_t frozen = param.frozen_count();
  if (target < frozen) {
    throw std::invalid_argument("partition_weights: target fraction " + std::to_string(target_fraction) +
                                " is below the already quantized fraction of " + param.name);
  }
  std::vector<std::size_t> candidates;
  candidates.reserve(n - frozen);
  for (std::size_t i = 0; i < n; ++i) {
    if (param.frozen_mask[i] == 0) candidates.push_back(i);
  }
  const auto values = param.tensor.values();
  const std::size_t take = target - frozen;
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take), candidates.end(),
                    [&](std::size_t a, std::size_t b) {
                      const float ma = std::abs(values[a]);
                      const float mb = std::abs(values[b]);
                      return ma != mb ? ma > mb : a < b;
                    });
  candidates.resize(take);
  std::sort(candidates.begin(), candidates.end());
  return candidates;
}

const ParamQuantState* QuantState::find(std::string_view name) const {
  for (const auto& p : params) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

std::vector<Parameter*> quantizable_parameters(ModelGraph& graph, const QuantConfig& config) {
  std::vector<Parameter*> out;
  for (const auto& node : graph.nodes()) {
    if (config.skip_batch_norm && node.kind == OpKind::BatchNorm) continue;
    for (auto p : node.params) out.push_back(&graph.parameters()[p]);
  }
  return out;
}

QuantState apply_quant_step(std::span<Parameter* const> params, QuantState state, double target_fraction) {
  for (Parameter* param : params) {
    auto it = std::find_if(state.params.begin(), state.params.end(),
                           [&](const ParamQuantState& s) { return s.name == param->name; });
    if (it == state.params.end()) {
      ParamQuantState fresh;
      fresh.name = param->name;
      const auto values = param->tensor.values();
      if (std::any_of(values.begin(), values.end(), [](float v) { return v != 0.0f; })) {
        fresh.bounds = compute_bounds(*param, state.bits);
      }
      state.params.push_back(std::move(fresh));
      it = std::prev(state.params.end());
    }
    const auto chosen = partition_weights(*param, target_fraction);
    auto values = param->tensor.values();
    for (std::size_t i : chosen) {
      values[i] = it->bounds ? quantize_value(values[i], *it->bounds) : 0.0f;
      param->frozen_mask[i] = 1;
    }
    it->quantized_fraction =
        param->size() == 0 ? 1.0 : static_cast<double>(param->frozen_count()) / static_cast<double>(param->size());
  }
  return state;
}

bool frozen_values_in_codebook(std::span<const Parameter* const> params, const QuantState& state) {
  for (const Parameter* param : params) {
    const ParamQuantState* s = state.find(param->name);
    const auto values = param->tensor.values();
    for (std::size_t i = 0; i < param->size(); ++i) {
      if (param->frozen_mask[i] == 0) continue;
      if (s == nullptr) return false;
      if (s->bounds ? !s->bounds->contains(values[i]) : values[i] != 0.0f) return false;
    }
  }
  return true;
}

std::uint64_t frozen_checksum(std::span<const Parameter* const> params) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xffu;
      h *= 1099511628211ull;
    }
  };
  for (const Parameter* param : params) {
    const auto values = param->tensor.values();
    for (std::size_t i = 0; i < param->size(); ++i) {
      if (param->frozen_mask[i] == 0) continue;
      mix(i);
      mix(std::bit_cast<std::uint32_t>(values[i]));
    }
  }
  return h;
}

InqResult run_inq_schedule(ModelGraph& graph, const QuantConfig& config, const RetrainFn& retrain,
                           const SnapshotFn& on_snapshot) {
  config.validate();
  InqResult result;
  result.state.bits = config.bits;
  const auto params = quantizable_parameters(graph, config);
  const std::vector<const Parameter*> view(params.begin(), params.end());
  for (std::size_t step = 0; step < config.schedule.size(); ++step) {
    const double fraction = config.schedule[step];
    std::vector<Parameter> rollback;
    rollback.reserve(params.size());
    for (const Parameter* p : params) rollback.push_back(*p);
    try {
      QuantState next = apply_quant_step(params, result.state, fraction);
      const bool all_frozen = std::all_of(params.begin(), params.end(),
                                          [](const Parameter* p) { return p->frozen_count() == p->size(); });
      if (retrain && !all_frozen) retrain(step);
      InqSnapshot snap;
      snap.fraction = fraction;
      for (const Parameter* p : params) {
        snap.frozen += p->frozen_count();
        snap.total += p->size();
      }
      snap.frozen_checksum = frozen_checksum(view);
      if (on_snapshot) on_snapshot(step, snap, next);
      result.state = std::move(next);
      result.snapshots.push_back(snap);
    } catch (const std::exception& e) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        params[i]->tensor = std::move(rollback[i].tensor);
        params[i]->frozen_mask = std::move(rollback[i].frozen_mask);
      }
      result.error = "quantization step " + std::to_string(step) + " (fraction " + std::to_string(fraction) +
                     ") aborted: " + e.what();
      return result;
    }
    if (config.stop_after > 0.0 && fraction >= config.stop_after) break;
  }
  return result;
}

}  // namespace mdunet
