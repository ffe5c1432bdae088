#include "mdunet/arch.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace mdunet {
namespace {

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

// Zero-mean uniform init with bound sqrt(6 / (fan_in + fan_out)), drawn from a
// generator keyed by (seed, parameter name) so a parameter's initial value
// does not depend on which other parameters the variant creates.
Tensor init_uniform(const Shape& s, std::int64_t fan_in, std::int64_t fan_out, std::uint64_t seed,
                    std::string_view name) {
  std::mt19937_64 rng(seed ^ fnv1a(name));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t(s);
  for (auto& v : t.values()) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    v = static_cast<float>((2.0 * u - 1.0) * bound);
  }
  return t;
}

Tensor filled(std::int64_t channels, float value) { return Tensor(Shape{channels, 1, 1, 1}, value); }

int level_of(const ModelGraph& g, NodeId id) { return g.node(id).level; }
std::int64_t channels_of(const ModelGraph& g, NodeId id) { return g.node(id).channels; }

}  // namespace

// ---------------------------------------------------------------------------
// ArchConfig

void ArchConfig::validate() const {
  if (depth < 2) throw ConfigError("depth must be at least 2");
  if (depth > 16) throw ConfigError("depth must be at most 16");
  if (base_channels < 1) throw ConfigError("base_channels must be positive");
  if (num_classes < 1) throw ConfigError("num_classes must be positive");
  if (input_channels < 1) throw ConfigError("input_channels must be positive");
  auto check_dense = [&](const DenseSetting& d, const char* what) {
    if (d.multi) return;
    if (d.degree < 0 || d.degree > depth - 1) {
      throw ConfigError(std::string(what) + " degree " + std::to_string(d.degree) + " outside [0, " +
                        std::to_string(depth - 1) + "]");
    }
  };
  check_dense(enc_dense, "enc_dense");
  check_dense(dec_dense, "dec_dense");
  if (cross_mode == CrossMode::Cross5 && depth < 3) throw ConfigError("cross5 requires depth >= 3");
}

std::string ArchConfig::variant_name() const {
  std::vector<std::string> parts;
  if (enc_dense.multi) {
    parts.emplace_back("Min");
  } else if (enc_dense.degree > 0) {
    parts.push_back("encoder_" + std::to_string(enc_dense.degree));
  }
  switch (cross_mode) {
    case CrossMode::Skip:
      break;
    case CrossMode::Upper:
      parts.emplace_back("upper");
      break;
    case CrossMode::Lower:
      parts.emplace_back("lower");
      break;
    case CrossMode::Cross3:
      parts.emplace_back("cross_3");
      break;
    case CrossMode::Cross5:
      parts.emplace_back("cross_5");
      break;
  }
  if (dec_dense.multi) {
    parts.emplace_back("Mout");
  } else if (dec_dense.degree > 0) {
    parts.push_back("decoder_" + std::to_string(dec_dense.degree));
  }
  if (parts.empty()) return "U-Net";
  std::string out = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) out += "-" + parts[i];
  return out;
}

std::string to_string(CrossMode mode) {
  switch (mode) {
    case CrossMode::Skip:
      return "skip";
    case CrossMode::Upper:
      return "upper";
    case CrossMode::Lower:
      return "lower";
    case CrossMode::Cross3:
      return "cross3";
    case CrossMode::Cross5:
      return "cross5";
  }
  return "?";
}

std::string to_string(UpsampleMode mode) {
  return mode == UpsampleMode::TransposedConv2 ? "transposed_conv2" : "nearest_up2";
}

std::optional<CrossMode> parse_cross_mode(std::string_view text) {
  for (auto m : {CrossMode::Skip, CrossMode::Upper, CrossMode::Lower, CrossMode::Cross3, CrossMode::Cross5}) {
    if (text == to_string(m)) return m;
  }
  return std::nullopt;
}

std::optional<UpsampleMode> parse_upsample_mode(std::string_view text) {
  for (auto m : {UpsampleMode::TransposedConv2, UpsampleMode::NearestUp2}) {
    if (text == to_string(m)) return m;
  }
  return std::nullopt;
}

std::string to_string(OpKind kind) {
  switch (kind) {
    case OpKind::Input:
      return "input";
    case OpKind::Conv:
      return "conv";
    case OpKind::BatchNorm:
      return "batch_norm";
    case OpKind::Relu:
      return "relu";
    case OpKind::MaxPool:
      return "maxpool2";
    case OpKind::NearestUp:
      return "nearest_up2";
    case OpKind::TransposedConv:
      return "transposed_conv2";
    case OpKind::Concat:
      return "concat";
    case OpKind::Output:
      return "output";
  }
  return "?";
}

std::string to_string(Family family) {
  switch (family) {
    case Family::Baseline:
      return "baseline";
    case Family::DenseEncoder:
      return "dense_encoder";
    case Family::DenseDecoder:
      return "dense_decoder";
    case Family::Cross:
      return "cross";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Source enumeration

std::vector<SourceRef> encoder_dense_sources(const ArchConfig& cfg, int level) {
  std::vector<SourceRef> out;
  if (level < 2 || level > cfg.depth) return out;
  if (cfg.enc_dense.multi) {
    out.push_back({SourceRef::Kind::NetworkInput, 1});
    return out;
  }
  const int n = cfg.enc_dense.degree;
  if (n <= 0) return out;
  for (int j = std::max(1, level - 1 - n); j <= level - 2; ++j) out.push_back({SourceRef::Kind::Encoder, j});
  return out;
}

std::vector<SourceRef> decoder_dense_sources(const ArchConfig& cfg, int level) {
  std::vector<SourceRef> out;
  const int depth = cfg.depth;
  if (level < 1 || level >= depth) return out;
  const int step = depth + 1 - level;
  auto step_level = [depth](int s) { return depth + 1 - s; };
  if (cfg.dec_dense.multi) {
    if (level != 1) return out;
    for (int s = 1; s <= step - 1; ++s) out.push_back({SourceRef::Kind::Decoder, step_level(s)});
    return out;
  }
  const int n = cfg.dec_dense.degree;
  if (n <= 0) return out;
  for (int s = std::max(1, step - 1 - n); s <= step - 2; ++s) out.push_back({SourceRef::Kind::Decoder, step_level(s)});
  return out;
}

std::vector<SourceRef> cross_sources(const ArchConfig& cfg, int level) {
  int lo = level;
  int hi = level;
  switch (cfg.cross_mode) {
    case CrossMode::Skip:
      return {};
    case CrossMode::Cross3:
      lo = level - 1;
      hi = level + 1;
      break;
    case CrossMode::Cross5:
      lo = level - 2;
      hi = level + 2;
      break;
    case CrossMode::Upper:
      hi = level + 2;
      break;
    case CrossMode::Lower:
      lo = level - 2;
      break;
  }
  lo = std::max(lo, 1);
  hi = std::min(hi, cfg.depth - 1);
  std::vector<SourceRef> out;
  for (int j = lo; j <= hi; ++j) out.push_back({SourceRef::Kind::Encoder, j});
  return out;
}

// ---------------------------------------------------------------------------
// ModelGraph

ModelGraph::ModelGraph(ArchConfig config, std::uint64_t init_seed) : config_(config), init_seed_(init_seed) {
  config_.validate();
}

NodeId ModelGraph::input() const {
  for (const auto& n : nodes_) {
    if (n.kind == OpKind::Input) return n.id;
  }
  throw std::logic_error("graph has no input node");
}

NodeId ModelGraph::output() const {
  for (const auto& n : nodes_) {
    if (n.kind == OpKind::Output) return n.id;
  }
  throw std::logic_error("graph has no output node");
}

Parameter* ModelGraph::find_parameter(std::string_view name) {
  auto it = parameter_index_.find(name);
  return it == parameter_index_.end() ? nullptr : &parameters_[it->second];
}

const Parameter* ModelGraph::find_parameter(std::string_view name) const {
  auto it = parameter_index_.find(name);
  return it == parameter_index_.end() ? nullptr : &parameters_[it->second];
}

NodeId ModelGraph::add_node(GraphNode node) {
  node.id = NodeId{static_cast<std::uint32_t>(nodes_.size())};
  for (auto p : node.parents) {
    if (p.value >= node.id.value) throw std::logic_error("node " + node.name + " references a later node");
  }
  nodes_.push_back(std::move(node));
  return nodes_.back().id;
}

std::size_t ModelGraph::add_parameter(Parameter p) {
  if (parameter_index_.contains(p.name)) throw std::logic_error("duplicate parameter name " + p.name);
  parameter_index_.emplace(p.name, parameters_.size());
  parameters_.push_back(std::move(p));
  return parameters_.size() - 1;
}

int ModelGraph::add_running_stats(std::string name, std::size_t channels) {
  stats_.push_back({std::move(name), RunningStats(channels)});
  return static_cast<int>(stats_.size() - 1);
}

void ModelGraph::validate() const {
  std::size_t inputs = 0;
  std::size_t outputs = 0;
  std::vector<int> refs(parameters_.size(), 0);
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& n = nodes_[i];
    if (n.id.value != i) throw std::logic_error("node ids are not dense");
    inputs += n.kind == OpKind::Input;
    outputs += n.kind == OpKind::Output;
    for (auto p : n.parents) {
      if (p.value >= i) throw std::logic_error("graph is not topologically ordered at node " + n.name);
    }
    for (auto p : n.params) ++refs.at(p);
  }
  if (inputs != 1 || outputs != 1) throw std::logic_error("graph must have exactly one input and one output");
  for (std::size_t p = 0; p < refs.size(); ++p) {
    if (refs[p] != 1) {
      throw std::logic_error("parameter " + parameters_[p].name + " referenced " + std::to_string(refs[p]) +
                             " times");
    }
  }
}

// ---------------------------------------------------------------------------
// Building blocks

NodeId conv_bn_relu(ModelGraph& g, NodeId input, const ConvSpec& spec, const Placement& at, const std::string& tag) {
  spec.validate();
  const std::int64_t in_c = channels_of(g, input);
  const int level = level_of(g, input);
  const std::uint64_t seed = g.init_seed();
  const std::string conv_name = at.prefix + ".conv" + tag;
  const std::string bn_name = at.prefix + ".bn" + tag;

  GraphNode conv;
  conv.kind = OpKind::Conv;
  conv.parents = {input};
  conv.conv = spec;
  conv.level = level;
  conv.side = at.side;
  conv.family = at.family;
  conv.channels = spec.out_channels;
  conv.name = conv_name;
  const std::int64_t k2 = std::int64_t{spec.kernel} * spec.kernel;
  const std::string wname = conv_name + ".weight";
  conv.params.push_back(g.add_parameter(
      Parameter(wname, init_uniform({spec.out_channels, in_c, spec.kernel, spec.kernel}, in_c * k2,
                                    spec.out_channels * k2, seed, wname),
                4)));
  if (spec.has_bias) {
    conv.params.push_back(g.add_parameter(Parameter(conv_name + ".bias", filled(spec.out_channels, 0.0f), 1)));
  }
  const NodeId conv_id = g.add_node(std::move(conv));

  GraphNode bn;
  bn.kind = OpKind::BatchNorm;
  bn.parents = {conv_id};
  bn.level = level;
  bn.side = at.side;
  bn.family = at.family;
  bn.channels = spec.out_channels;
  bn.name = bn_name;
  bn.params.push_back(g.add_parameter(Parameter(bn_name + ".gamma", filled(spec.out_channels, 1.0f), 1)));
  bn.params.push_back(g.add_parameter(Parameter(bn_name + ".beta", filled(spec.out_channels, 0.0f), 1)));
  bn.stats_index = g.add_running_stats(bn_name, static_cast<std::size_t>(spec.out_channels));
  const NodeId bn_id = g.add_node(std::move(bn));

  GraphNode act;
  act.kind = OpKind::Relu;
  act.parents = {bn_id};
  act.level = level;
  act.side = at.side;
  act.family = at.family;
  act.channels = spec.out_channels;
  act.name = at.prefix + ".relu" + tag;
  return g.add_node(std::move(act));
}

NodeId conv_block(ModelGraph& g, NodeId input, std::int64_t out_channels, const Placement& at) {
  const NodeId first = conv_bn_relu(g, input, ConvSpec::conv3x3(out_channels), at, "1");
  return conv_bn_relu(g, first, ConvSpec::conv3x3(out_channels), at, "2");
}

NodeId fuse_H(ModelGraph& g, std::span<const NodeId> sources, std::int64_t target_channels, const Placement& at) {
  if (sources.empty()) throw ShapeError("fuse_H: no sources at " + at.prefix);
  const int level = level_of(g, sources.front());
  std::int64_t channels = 0;
  for (auto s : sources) {
    if (level_of(g, s) != level) {
      throw ShapeError("fuse_H: source " + g.node(s).name + " at level " + std::to_string(level_of(g, s)) +
                       " does not match level " + std::to_string(level));
    }
    channels += channels_of(g, s);
  }
  NodeId merged = sources.front();
  if (sources.size() > 1) {
    GraphNode cat;
    cat.kind = OpKind::Concat;
    cat.parents.assign(sources.begin(), sources.end());
    cat.level = level;
    cat.side = at.side;
    cat.family = at.family;
    cat.channels = channels;
    cat.name = at.prefix + ".concat";
    merged = g.add_node(std::move(cat));
  }
  return conv_bn_relu(g, merged, ConvSpec::conv1x1(target_channels), at, "");
}

NodeId rescale_to_level(ModelGraph& g, NodeId source, int target_level, const Placement& at) {
  const int depth = g.config().depth;
  if (target_level < 1 || target_level > depth) {
    throw std::out_of_range("rescale_to_level: level " + std::to_string(target_level) + " outside [1, " +
                            std::to_string(depth) + "]");
  }
  NodeId cur = source;
  const std::string base = at.prefix + ".from_" + g.node(source).name;
  int stage = 0;
  while (level_of(g, cur) != target_level) {
    const bool down = level_of(g, cur) < target_level;
    GraphNode r;
    r.kind = down ? OpKind::MaxPool : OpKind::NearestUp;
    r.parents = {cur};
    r.factor_log2 = 1;
    r.level = level_of(g, cur) + (down ? 1 : -1);
    r.side = at.side;
    r.family = at.family;
    r.channels = channels_of(g, cur);
    r.name = base + (down ? ".pool" : ".up") + std::to_string(++stage);
    cur = g.add_node(std::move(r));
  }
  return cur;
}

// ---------------------------------------------------------------------------
// Variants

namespace {

NodeId add_maxpool(ModelGraph& g, NodeId input, const Placement& at) {
  GraphNode r;
  r.kind = OpKind::MaxPool;
  r.parents = {input};
  r.level = level_of(g, input) + 1;
  r.side = at.side;
  r.family = at.family;
  r.channels = channels_of(g, input);
  r.name = at.prefix + ".down";
  return g.add_node(std::move(r));
}

// U(): main-path upsampling between decoder levels.
NodeId add_upsample(ModelGraph& g, NodeId input, std::int64_t out_channels, const Placement& at) {
  GraphNode r;
  r.parents = {input};
  r.level = level_of(g, input) - 1;
  r.side = at.side;
  r.family = at.family;
  r.name = at.prefix + ".up";
  if (g.config().upsample_mode == UpsampleMode::NearestUp2) {
    r.kind = OpKind::NearestUp;
    r.channels = channels_of(g, input);
    return g.add_node(std::move(r));
  }
  const std::int64_t in_c = channels_of(g, input);
  r.kind = OpKind::TransposedConv;
  r.channels = out_channels;
  const std::string wname = r.name + ".weight";
  r.params.push_back(g.add_parameter(
      Parameter(wname, init_uniform({in_c, out_channels, 2, 2}, out_channels * 4, in_c * 4, g.init_seed(), wname), 4)));
  r.params.push_back(g.add_parameter(Parameter(r.name + ".bias", filled(out_channels, 0.0f), 1)));
  return g.add_node(std::move(r));
}

std::vector<NodeId> gather(ModelGraph& g, std::span<const SourceRef> refs, NodeId network_input,
                           std::span<const NodeId> encoder, std::span<const NodeId> decoder, int target_level,
                           const Placement& at) {
  std::vector<NodeId> out;
  out.reserve(refs.size());
  for (const auto& r : refs) {
    NodeId src{};
    switch (r.kind) {
      case SourceRef::Kind::NetworkInput:
        src = network_input;
        break;
      case SourceRef::Kind::Encoder:
        src = encoder[static_cast<std::size_t>(r.level)];
        break;
      case SourceRef::Kind::Decoder:
        src = decoder[static_cast<std::size_t>(r.level)];
        break;
    }
    out.push_back(rescale_to_level(g, src, target_level, at));
  }
  return out;
}

ModelGraph carry_over(const ModelGraph& from, ArchConfig config) {
  ModelGraph to = build_mdunet(config, from.init_seed());
  for (auto& p : to.parameters()) {
    if (const Parameter* old = from.find_parameter(p.name); old != nullptr && old->tensor.shape() == p.tensor.shape()) {
      p.tensor = old->tensor;
      p.frozen_mask = old->frozen_mask;
    }
  }
  for (auto& s : to.running_stats()) {
    for (const auto& o : from.running_stats()) {
      if (o.name == s.name && o.stats.mean.size() == s.stats.mean.size()) s.stats = o.stats;
    }
  }
  return to;
}

}  // namespace

ModelGraph build_unet(const ArchConfig& config, std::uint64_t seed) {
  if (config.enc_dense.active() || config.dec_dense.active() || config.cross_mode != CrossMode::Skip) {
    throw ConfigError("build_unet requires enc_dense = 0, dec_dense = 0 and cross_mode = skip");
  }
  return build_mdunet(config, seed);
}

ModelGraph build_mdunet(const ArchConfig& config, std::uint64_t seed) {
  ModelGraph g(config, seed);
  const int depth = config.depth;

  GraphNode in;
  in.kind = OpKind::Input;
  in.level = 1;
  in.side = Side::Input;
  in.channels = config.input_channels;
  in.name = "input";
  const NodeId input = g.add_node(std::move(in));

  // Index by level; slot 0 unused.
  std::vector<NodeId> encoder(static_cast<std::size_t>(depth + 1));
  std::vector<NodeId> decoder(static_cast<std::size_t>(depth + 1));

  encoder[1] = conv_block(g, input, config.channels_at(1), {"enc1", Side::Encoder, Family::Baseline});
  for (int i = 2; i <= depth; ++i) {
    const std::string prefix = "enc" + std::to_string(i);
    NodeId main = add_maxpool(g, encoder[static_cast<std::size_t>(i - 1)], {prefix, Side::Encoder, Family::Baseline});
    const auto refs = encoder_dense_sources(config, i);
    if (!refs.empty()) {
      const Placement dense{prefix + ".dense", Side::Encoder, Family::DenseEncoder};
      const auto sources = gather(g, refs, input, encoder, decoder, i, dense);
      const NodeId fused = fuse_H(g, sources, channels_of(g, main), dense);
      const std::array<NodeId, 2> pair{fused, main};
      main = fuse_H(g, pair, channels_of(g, main), {prefix + ".merge", Side::Encoder, Family::DenseEncoder});
    }
    encoder[static_cast<std::size_t>(i)] =
        conv_block(g, main, config.channels_at(i), {prefix, Side::Encoder, Family::Baseline});
  }

  decoder[static_cast<std::size_t>(depth)] = encoder[static_cast<std::size_t>(depth)];
  NodeId y = encoder[static_cast<std::size_t>(depth)];
  for (int i = depth - 1; i >= 1; --i) {
    const std::string prefix = "dec" + std::to_string(i);
    const std::int64_t c = config.channels_at(i);
    NodeId up = add_upsample(g, y, c, {prefix, Side::Decoder, Family::Baseline});
    const NodeId skip = encoder[static_cast<std::size_t>(i)];
    const std::int64_t site_channels = c + channels_of(g, up);

    const auto dec_refs = decoder_dense_sources(config, i);
    const auto cross_refs = cross_sources(config, i);
    NodeId block_input{};
    if (!cross_refs.empty()) {
      const Placement cross{prefix + ".cross", Side::Decoder, Family::Cross};
      const auto sources = gather(g, cross_refs, input, encoder, decoder, i, cross);
      NodeId skip_feature = fuse_H(g, sources, c, cross);
      if (!dec_refs.empty()) {
        const Placement dense{prefix + ".dense", Side::Decoder, Family::DenseDecoder};
        const auto dsources = gather(g, dec_refs, input, encoder, decoder, i, dense);
        const NodeId dense_feature = fuse_H(g, dsources, channels_of(g, up), dense);
        const std::array<NodeId, 2> pair{skip_feature, dense_feature};
        skip_feature = fuse_H(g, pair, c, {prefix + ".dense_cross", Side::Decoder, Family::DenseDecoder});
      }
      const std::array<NodeId, 2> pair{skip_feature, up};
      block_input = fuse_H(g, pair, site_channels, {prefix + ".cross_merge", Side::Decoder, Family::Cross});
    } else {
      if (!dec_refs.empty()) {
        const Placement dense{prefix + ".dense", Side::Decoder, Family::DenseDecoder};
        const auto dsources = gather(g, dec_refs, input, encoder, decoder, i, dense);
        const NodeId dense_feature = fuse_H(g, dsources, channels_of(g, up), dense);
        const std::array<NodeId, 2> pair{dense_feature, up};
        up = fuse_H(g, pair, channels_of(g, up), {prefix + ".merge", Side::Decoder, Family::DenseDecoder});
      }
      GraphNode cat;
      cat.kind = OpKind::Concat;
      cat.parents = {skip, up};
      cat.level = i;
      cat.side = Side::Decoder;
      cat.family = Family::Baseline;
      cat.channels = site_channels;
      cat.name = prefix + ".skip";
      block_input = g.add_node(std::move(cat));
    }
    y = conv_block(g, block_input, c, {prefix, Side::Decoder, Family::Baseline});
    decoder[static_cast<std::size_t>(i)] = y;
  }

  GraphNode head;
  head.kind = OpKind::Conv;
  head.parents = {y};
  head.conv = ConvSpec::conv1x1(config.num_classes);
  head.level = 1;
  head.side = Side::Head;
  head.channels = config.num_classes;
  head.name = "head";
  const std::int64_t in_c = channels_of(g, y);
  head.params.push_back(g.add_parameter(Parameter(
      "head.weight",
      init_uniform({config.num_classes, in_c, 1, 1}, in_c, config.num_classes, seed, "head.weight"), 4)));
  head.params.push_back(g.add_parameter(Parameter("head.bias", filled(config.num_classes, 0.0f), 1)));
  const NodeId head_id = g.add_node(std::move(head));

  GraphNode out;
  out.kind = OpKind::Output;
  out.parents = {head_id};
  out.level = 1;
  out.side = Side::Head;
  out.channels = config.num_classes;
  out.name = "output";
  g.add_node(std::move(out));

  g.validate();
  return g;
}

ModelGraph add_dense_encoder(const ModelGraph& graph, DenseSetting setting) {
  ArchConfig cfg = graph.config();
  cfg.enc_dense = setting;
  return carry_over(graph, cfg);
}

ModelGraph add_dense_decoder(const ModelGraph& graph, DenseSetting setting) {
  ArchConfig cfg = graph.config();
  cfg.dec_dense = setting;
  return carry_over(graph, cfg);
}

ModelGraph add_dense_cross(const ModelGraph& graph, CrossMode mode) {
  ArchConfig cfg = graph.config();
  cfg.cross_mode = mode;
  return carry_over(graph, cfg);
}

// ---------------------------------------------------------------------------
// Analysis

std::vector<Shape> shape_infer(const ModelGraph& graph, const Shape& input) {
  const ArchConfig& cfg = graph.config();
  const std::int64_t factor = std::int64_t{1} << (cfg.depth - 1);
  if (input.h <= 0 || input.w <= 0 || input.n <= 0) throw ShapeError("input extents must be positive: " + input.str());
  if (input.h % factor != 0 || input.w % factor != 0) {
    throw ShapeError("input " + input.str() + " not divisible by 2^(depth-1) = " + std::to_string(factor));
  }
  if (input.c != cfg.input_channels) {
    throw ShapeError("input has " + std::to_string(input.c) + " channels, model expects " +
                     std::to_string(cfg.input_channels));
  }
  std::vector<Shape> shapes(graph.nodes().size());
  for (const auto& n : graph.nodes()) {
    auto fail = [&](const std::string& why) -> ShapeError {
      return ShapeError("shape inference failed at node " + std::to_string(n.id.value) + " (" + n.name + "): " + why);
    };
    auto parent = [&](std::size_t k) -> const Shape& { return shapes[n.parents.at(k).value]; };
    Shape s{};
    switch (n.kind) {
      case OpKind::Input:
        s = input;
        break;
      case OpKind::Conv: {
        const Shape& w = graph.parameters()[n.params.at(0)].tensor.shape();
        try {
          s = conv2d_output_shape(parent(0), w, n.conv);
        } catch (const ShapeError& e) {
          throw fail(e.what());
        }
        break;
      }
      case OpKind::BatchNorm:
      case OpKind::Relu:
      case OpKind::Output:
        s = parent(0);
        break;
      case OpKind::MaxPool: {
        const std::int64_t f = std::int64_t{1} << n.factor_log2;
        s = parent(0);
        if (s.h % f != 0 || s.w % f != 0) throw fail("spatial extent " + s.str() + " not divisible by pooling");
        s.h /= f;
        s.w /= f;
        break;
      }
      case OpKind::NearestUp: {
        const std::int64_t f = std::int64_t{1} << n.factor_log2;
        s = parent(0);
        s.h *= f;
        s.w *= f;
        break;
      }
      case OpKind::TransposedConv: {
        const Shape& w = graph.parameters()[n.params.at(0)].tensor.shape();
        s = parent(0);
        if (w.n != s.c) throw fail("transposed conv weight expects " + std::to_string(w.n) + " input channels");
        s.c = w.c;
        s.h *= 2;
        s.w *= 2;
        break;
      }
      case OpKind::Concat: {
        s = parent(0);
        s.c = 0;
        for (std::size_t k = 0; k < n.parents.size(); ++k) {
          const Shape& p = parent(k);
          if (p.n != s.n || p.h != s.h || p.w != s.w) throw fail("concat operands " + p.str() + " vs " + parent(0).str());
          s.c += p.c;
        }
        break;
      }
    }
    if (s.c != n.channels) {
      throw fail("inferred " + std::to_string(s.c) + " channels, graph records " + std::to_string(n.channels));
    }
    shapes[n.id.value] = s;
  }
  const Shape& out = shapes[graph.output().value];
  if (out != Shape{input.n, cfg.num_classes, input.h, input.w}) {
    throw ShapeError("output shape " + out.str() + " does not match input spatial extents");
  }
  return shapes;
}

ParamBreakdown param_count(const ModelGraph& graph) {
  ParamBreakdown b;
  for (const auto& n : graph.nodes()) {
    std::int64_t count = 0;
    for (auto p : n.params) count += static_cast<std::int64_t>(graph.parameters()[p].size());
    b.total += count;
    switch (n.family) {
      case Family::Baseline:
        b.baseline += count;
        break;
      case Family::DenseEncoder:
        b.dense_encoder += count;
        break;
      case Family::DenseDecoder:
        b.dense_decoder += count;
        break;
      case Family::Cross:
        b.cross += count;
        break;
    }
  }
  return b;
}

std::string export_dot(const ModelGraph& graph, std::optional<Shape> input) {
  std::vector<Shape> shapes;
  if (input) shapes = shape_infer(graph, *input);
  std::ostringstream os;
  os << "digraph \"" << graph.config().variant_name() << "\" {\n";
  os << "  rankdir=TB;\n";
  for (const auto& n : graph.nodes()) {
    os << "  n" << n.id.value << " [label=\"" << n.name << "\\n" << to_string(n.kind) << " L" << n.level << "\\n";
    if (input) {
      os << shapes[n.id.value].str();
    } else {
      os << "C=" << n.channels;
    }
    os << "\"];\n";
  }
  for (const auto& n : graph.nodes()) {
    for (auto p : n.parents) os << "  n" << p.value << " -> n" << n.id.value << ";\n";
  }
  os << "}\n";
  return os.str();
}

}  // namespace mdunet
