#pragma once

// Construction, validation and accounting of U-Net and its multi-scale dense
// variants (dense encoder, dense decoder, dense cross connections, and their
// combination).

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mdunet/ops.hpp"
#include "mdunet/tensor.hpp"

namespace mdunet {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense-connection setting for one side of the network: a degree n in
/// [0, depth-1], or the multi-scale special case (Min on the encoder, Mout on
/// the decoder).
struct DenseSetting {
  int degree = 0;
  bool multi = false;

  static constexpr DenseSetting none() { return {}; }
  static constexpr DenseSetting of(int n) { return {n, false}; }
  static constexpr DenseSetting multi_scale() { return {0, true}; }

  [[nodiscard]] bool active() const { return multi || degree > 0; }
  friend constexpr bool operator==(const DenseSetting&, const DenseSetting&) = default;
};

enum class CrossMode { Skip, Upper, Lower, Cross3, Cross5 };
enum class UpsampleMode { TransposedConv2, NearestUp2 };

struct ArchConfig {
  int depth = 5;
  std::int64_t base_channels = 32;
  std::int64_t num_classes = 2;
  std::int64_t input_channels = 1;
  DenseSetting enc_dense{};
  DenseSetting dec_dense{};
  CrossMode cross_mode = CrossMode::Skip;
  UpsampleMode upsample_mode = UpsampleMode::TransposedConv2;

  /// Throws ConfigError on a violated invariant.
  void validate() const;
  /// Channels at a 1-based level: base * 2^(level-1).
  [[nodiscard]] std::int64_t channels_at(int level) const { return base_channels << (level - 1); }
  /// Short variant name, e.g. "U-Net", "Min", "cross_5", "encoder_4-cross_5-decoder_4".
  [[nodiscard]] std::string variant_name() const;

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

std::string to_string(CrossMode mode);
std::string to_string(UpsampleMode mode);
std::optional<CrossMode> parse_cross_mode(std::string_view text);
std::optional<UpsampleMode> parse_upsample_mode(std::string_view text);

// ---------------------------------------------------------------------------
// Source enumeration

/// Where a dense or cross fusion draws a feature map from.
struct SourceRef {
  enum class Kind { NetworkInput, Encoder, Decoder };
  Kind kind = Kind::Encoder;
  /// Resolution level (1 = full resolution). Decoder sources are named by the
  /// level their block runs at; the bottleneck counts as decoder level `depth`.
  int level = 1;
  friend constexpr bool operator==(const SourceRef&, const SourceRef&) = default;
};

/// Dense-encoder sources feeding the input of encoder level `level` (>= 2).
/// Degree n draws encoder block outputs of levels max(1, level-1-n)..level-2;
/// Min draws the network input.
std::vector<SourceRef> encoder_dense_sources(const ArchConfig& cfg, int level);

/// Dense-decoder sources for the decoder block at `level` (< depth). Decoder
/// steps run t = 1 (bottleneck) .. depth (level 1); degree n at step t draws
/// steps max(1, t-1-n)..t-2. Mout draws all earlier steps, at level 1 only.
std::vector<SourceRef> decoder_dense_sources(const ArchConfig& cfg, int level);

/// Encoder levels fused into the skip path of decoder `level`, clamped to
/// [1, depth-1]. Empty in Skip mode.
std::vector<SourceRef> cross_sources(const ArchConfig& cfg, int level);

// ---------------------------------------------------------------------------
// Graph

struct NodeId {
  std::uint32_t value = 0;
  friend constexpr auto operator<=>(const NodeId&, const NodeId&) = default;
};

enum class OpKind { Input, Conv, BatchNorm, Relu, MaxPool, NearestUp, TransposedConv, Concat, Output };
enum class Side { Input, Encoder, Decoder, Head };
/// Which architectural family introduced a node; drives parameter attribution.
enum class Family { Baseline, DenseEncoder, DenseDecoder, Cross };

std::string to_string(OpKind kind);
std::string to_string(Family family);

struct GraphNode {
  NodeId id;
  OpKind kind = OpKind::Input;
  std::vector<NodeId> parents;
  /// Indices into ModelGraph::parameters(): (weight[, bias]) or (gamma, beta).
  std::vector<std::size_t> params;
  ConvSpec conv{};
  int factor_log2 = 1;
  /// Index into ModelGraph::running_stats() for BatchNorm nodes.
  int stats_index = -1;
  /// Resolution level of the output (1 = full resolution).
  int level = 1;
  Side side = Side::Input;
  Family family = Family::Baseline;
  std::int64_t channels = 0;
  std::string name;
};

struct NamedStats {
  std::string name;
  RunningStats stats;
};

class ModelGraph {
 public:
  ModelGraph() = default;
  ModelGraph(ArchConfig config, std::uint64_t init_seed);

  [[nodiscard]] const ArchConfig& config() const { return config_; }
  [[nodiscard]] std::uint64_t init_seed() const { return init_seed_; }
  [[nodiscard]] std::span<const GraphNode> nodes() const { return nodes_; }
  [[nodiscard]] const GraphNode& node(NodeId id) const { return nodes_.at(id.value); }
  [[nodiscard]] NodeId input() const;
  [[nodiscard]] NodeId output() const;

  [[nodiscard]] std::span<Parameter> parameters() { return parameters_; }
  [[nodiscard]] std::span<const Parameter> parameters() const { return parameters_; }
  [[nodiscard]] Parameter* find_parameter(std::string_view name);
  [[nodiscard]] const Parameter* find_parameter(std::string_view name) const;

  [[nodiscard]] std::span<NamedStats> running_stats() { return stats_; }
  [[nodiscard]] std::span<const NamedStats> running_stats() const { return stats_; }

  /// Appends a node. Parents must already exist, which keeps the node list in
  /// topological order.
  NodeId add_node(GraphNode node);
  std::size_t add_parameter(Parameter p);
  int add_running_stats(std::string name, std::size_t channels);

  /// Checks acyclicity, a single input and output, and that each parameter is
  /// referenced by exactly one node. Throws std::logic_error on failure.
  void validate() const;

 private:
  ArchConfig config_{};
  std::uint64_t init_seed_ = 0;
  std::vector<GraphNode> nodes_;
  std::vector<Parameter> parameters_;
  std::map<std::string, std::size_t, std::less<>> parameter_index_;
  std::vector<NamedStats> stats_;
};

// ---------------------------------------------------------------------------
// Building blocks

/// Placement metadata shared by the nodes a builder helper emits.
struct Placement {
  std::string prefix;
  Side side = Side::Encoder;
  Family family = Family::Baseline;
};

/// conv (+ BN + ReLU) as used by every block. Returns the ReLU node.
NodeId conv_bn_relu(ModelGraph& g, NodeId input, const ConvSpec& spec, const Placement& at, const std::string& tag);

/// F(): [conv3x3, BN, ReLU] x 2.
NodeId conv_block(ModelGraph& g, NodeId input, std::int64_t out_channels, const Placement& at);

/// H(): channel concatenation of `sources` followed by a 1x1 conv (+BN+ReLU)
/// mapping the summed channels to `target_channels`. Sources must sit at one
/// resolution level.
NodeId fuse_H(ModelGraph& g, std::span<const NodeId> sources, std::int64_t target_channels, const Placement& at);

/// Parameter-free resampling of `source` (at its own level) to `target_level`:
/// one maxpool2 stage per level down, one nearest_up2 stage per level up.
NodeId rescale_to_level(ModelGraph& g, NodeId source, int target_level, const Placement& at);

// ---------------------------------------------------------------------------
// Variants

/// Classic U-Net (requires a config with no dense settings and Skip mode).
ModelGraph build_unet(const ArchConfig& config, std::uint64_t seed = 0);

/// Any variant: dense encoder, dense cross and dense decoder are applied in
/// that order according to `config`.
ModelGraph build_mdunet(const ArchConfig& config, std::uint64_t seed = 0);

/// Rebuild `graph` with the given dense/cross setting. Parameters that exist in
/// both graphs (same name) carry their current values and masks over.
ModelGraph add_dense_encoder(const ModelGraph& graph, DenseSetting setting);
ModelGraph add_dense_decoder(const ModelGraph& graph, DenseSetting setting);
ModelGraph add_dense_cross(const ModelGraph& graph, CrossMode mode);

// ---------------------------------------------------------------------------
// Analysis

/// Output shape of every node for an (N, C, H, W) input. Throws ShapeError on
/// indivisible extents or any internal mismatch (message names the node).
std::vector<Shape> shape_infer(const ModelGraph& graph, const Shape& input);

struct ParamBreakdown {
  std::int64_t total = 0;
  std::int64_t baseline = 0;
  std::int64_t dense_encoder = 0;
  std::int64_t dense_decoder = 0;
  std::int64_t cross = 0;
};

ParamBreakdown param_count(const ModelGraph& graph);

/// DOT digraph; labels carry op kind, level and output shape (channels only
/// when `input` is not given).
std::string export_dot(const ModelGraph& graph, std::optional<Shape> input = std::nullopt);

}  // namespace mdunet
