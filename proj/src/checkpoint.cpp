#include "mdunet/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

#include <zlib.h>

#include "mdunet/image_io.hpp"

namespace mdunet {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf.insert(buf.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf.insert(buf.end(), p, p + n);
  }
  std::vector<std::uint8_t> buf;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint truncated");
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  [[nodiscard]] std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

std::uint64_t product(std::span<const std::uint64_t> dims) {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

}  // namespace

const CheckpointTensor* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<const CheckpointTensor*> order;
  order.reserve(ckpt.tensors.size());
  for (const auto& t : ckpt.tensors) order.push_back(&t);
  std::sort(order.begin(), order.end(), [](const auto* a, const auto* b) { return a->name < b->name; });
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (order[i]->name == order[i - 1]->name) throw CheckpointError("duplicate tensor name " + order[i]->name);
  }

  Writer w;
  w.put_bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint32_t>(order.size()));
  for (const auto* t : order) {
    if (t->name.size() > 0xFFFF) throw CheckpointError("tensor name too long: " + t->name);
    if (t->dims.size() > 0xFF) throw CheckpointError("tensor rank too large: " + t->name);
    if (product(t->dims) != t->values.size()) throw CheckpointError("dims do not match value count for " + t->name);
    w.put(static_cast<std::uint16_t>(t->name.size()));
    w.put_bytes(t->name.data(), t->name.size());
    w.put(static_cast<std::uint8_t>(t->dims.size()));
    for (auto d : t->dims) w.put(d);
    w.put_bytes(t->values.data(), t->values.size() * sizeof(float));
    if (t->frozen_mask) {
      if (t->frozen_mask->size() != t->values.size()) throw CheckpointError("mask size mismatch for " + t->name);
      w.put(std::uint8_t{1});
      std::vector<std::uint8_t> bits((t->values.size() + 7) / 8, 0);
      for (std::size_t i = 0; i < t->values.size(); ++i) {
        if ((*t->frozen_mask)[i] != 0) bits[i / 8] |= static_cast<std::uint8_t>(1U << (i % 8));
      }
      w.put_bytes(bits.data(), bits.size());
    } else {
      w.put(std::uint8_t{0});
    }
  }
  const std::uint32_t crc = crc32_of(std::span(w.buf).subspan(sizeof(kCheckpointMagic)));
  w.put(crc);
  return std::move(w.buf);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CheckpointError("not a checkpoint (magic mismatch)");
  }
  if (bytes.size() < sizeof(kCheckpointMagic) + 12) throw CheckpointError("checkpoint truncated");
  const auto payload = bytes.subspan(sizeof(kCheckpointMagic), bytes.size() - sizeof(kCheckpointMagic) - 4);
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  if (crc32_of(payload) != stored) throw CheckpointError("checkpoint CRC mismatch");

  Reader r(payload);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw CheckpointError("unknown checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  Checkpoint ckpt;
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointTensor t;
    const auto name_len = r.get<std::uint16_t>();
    const auto* name = r.take(name_len);
    t.name.assign(reinterpret_cast<const char*>(name), name_len);
    const auto rank = r.get<std::uint8_t>();
    for (int d = 0; d < rank; ++d) t.dims.push_back(r.get<std::uint64_t>());
    const std::uint64_t n = product(t.dims);
    if (n > r.remaining() / sizeof(float)) throw CheckpointError("checkpoint truncated in " + t.name);
    t.values.resize(static_cast<std::size_t>(n));
    std::memcpy(t.values.data(), r.take(t.values.size() * sizeof(float)), t.values.size() * sizeof(float));
    const auto has_mask = r.get<std::uint8_t>();
    if (has_mask > 1) throw CheckpointError("bad mask flag in " + t.name);
    if (has_mask == 1) {
      const auto* bits = r.take((t.values.size() + 7) / 8);
      std::vector<std::uint8_t> mask(t.values.size());
      for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (bits[i / 8] >> (i % 8)) & 1U;
      t.frozen_mask = std::move(mask);
    }
    ckpt.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw CheckpointError("trailing bytes after checkpoint entries");
  return ckpt;
}

Checkpoint checkpoint_from_graph(const ModelGraph& graph) {
  Checkpoint ckpt;
  for (const auto& p : graph.parameters()) {
    const auto v = p.tensor.values();
    ckpt.tensors.push_back({p.name, p.dims(), {v.begin(), v.end()}, p.frozen_mask});
  }
  for (const auto& s : graph.running_stats()) {
    const std::uint64_t c = s.stats.mean.size();
    ckpt.tensors.push_back({s.name + ".running_mean", {c}, s.stats.mean, std::nullopt});
    ckpt.tensors.push_back({s.name + ".running_var", {c}, s.stats.var, std::nullopt});
  }
  std::sort(ckpt.tensors.begin(), ckpt.tensors.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  return ckpt;
}

namespace {

const CheckpointTensor& require(const Checkpoint& ckpt, const std::string& name, std::span<const std::uint64_t> dims) {
  const auto* t = ckpt.find(name);
  if (t == nullptr) throw CheckpointError("checkpoint is missing tensor " + name);
  if (!std::equal(t->dims.begin(), t->dims.end(), dims.begin(), dims.end())) {
    throw CheckpointError("checkpoint tensor " + name + " has mismatched dims");
  }
  return *t;
}

}  // namespace

void restore_checkpoint(ModelGraph& graph, const Checkpoint& ckpt) {
  // Validate everything first so a failed load leaves the graph untouched.
  for (const auto& p : graph.parameters()) require(ckpt, p.name, p.dims());
  for (const auto& s : graph.running_stats()) {
    const std::uint64_t c[1] = {s.stats.mean.size()};
    require(ckpt, s.name + ".running_mean", c);
    require(ckpt, s.name + ".running_var", c);
  }
  for (auto& p : graph.parameters()) {
    const auto& t = *ckpt.find(p.name);
    std::copy(t.values.begin(), t.values.end(), p.tensor.values().begin());
    if (t.frozen_mask) {
      p.frozen_mask = *t.frozen_mask;
    } else {
      std::fill(p.frozen_mask.begin(), p.frozen_mask.end(), 0);
    }
    p.tensor.zero_grad();
  }
  for (auto& s : graph.running_stats()) {
    s.stats.mean = ckpt.find(s.name + ".running_mean")->values;
    s.stats.var = ckpt.find(s.name + ".running_var")->values;
  }
}

void save_checkpoint(const std::filesystem::path& path, const ModelGraph& graph) {
  write_file(path, encode_checkpoint(checkpoint_from_graph(graph)));
}

void load_checkpoint(const std::filesystem::path& path, ModelGraph& graph) {
  try {
    restore_checkpoint(graph, decode_checkpoint(read_file(path)));
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace mdunet
