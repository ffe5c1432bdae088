#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdunet/arch.hpp"

namespace mdunet {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'M', 'D', 'U', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> values;
  std::optional<std::vector<std::uint8_t>> frozen_mask;

  friend bool operator==(const CheckpointTensor&, const CheckpointTensor&) = default;
};

struct Checkpoint {
  std::vector<CheckpointTensor> tensors;

  [[nodiscard]] const CheckpointTensor* find(std::string_view name) const;
};

/// Layout (little-endian):
///   "MDUCKPT1" | u32 version | u32 count | entries | u32 crc32
/// entry: u16 name_len | name | u8 rank | u64 dims[rank] | f32 values |
///        u8 has_mask | mask bitset (LSB first, ceil(n/8) bytes)
/// The CRC covers every byte between the magic and the CRC itself. Entries
/// are written sorted by name.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Parameters (with masks) plus BatchNorm running statistics, stored as
/// "<bn>.running_mean" / "<bn>.running_var".
Checkpoint checkpoint_from_graph(const ModelGraph& graph);
/// Throws CheckpointError when a tensor of the graph is missing or has a
/// different shape.
void restore_checkpoint(ModelGraph& graph, const Checkpoint& ckpt);

void save_checkpoint(const std::filesystem::path& path, const ModelGraph& graph);
void load_checkpoint(const std::filesystem::path& path, ModelGraph& graph);

}  // namespace mdunet
