#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include "mdunet/arch.hpp"
#include "mdunet/dataset.hpp"
#include "mdunet/inq.hpp"
#include "mdunet/train.hpp"

namespace mdunet {

/// Everything a CLI run needs. `seed` drives parameter initialization and,
/// unless overridden, the training shuffle.
struct RunConfig {
  ArchConfig arch;
  TrainConfig train;
  QuantConfig quant;
  SyntheticSpec synthetic;
  /// Size of the held-out synthetic split (drawn with synthetic.seed + 1).
  std::int64_t synthetic_test_count = 20;
  std::uint64_t seed = 0;
};

/// Flat `key = value` lines; `#` starts a comment. Unknown keys, unparsable
/// values and violated invariants raise ConfigError with the line number.
///
/// Keys: depth, base_channels, num_classes, input_channels,
/// enc_dense (0..depth-1 | min), dec_dense (0..depth-1 | mout),
/// cross_mode (skip|upper|lower|cross3|cross5),
/// upsample_mode (transposed_conv2|nearest_up2), seed, base_lr,
/// lr_milestones (comma list), batch_size, epochs, max_iterations,
/// quant_bits, quant_schedule (comma list), retrain_iterations,
/// skip_batch_norm (true|false), quant_stop_after, synthetic_count,
/// synthetic_test_count, synthetic_size, synthetic_max_shapes,
/// synthetic_noise, synthetic_seed.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::string& path);

}  // namespace mdunet
