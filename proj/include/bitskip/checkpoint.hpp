#pragma once

// Binary checkpoint format, little-endian throughout:
//
//   magic        8 bytes  "BITSKIP1"
//   version      u32      kCheckpointVersion
//   config       layers u32, hidden/heads/kv_heads/ffn_dim/vocab/max_seq u64,
//                p_max f64, schedule mode u8, variant u8, weight mode u8,
//                activation bits u8, hadamard u8, seed u64, norm_eps f64,
//                rope_base f64
//   step         u64      completed optimizer steps
//   adam_step    u64
//   count        u32      number of tensor records
//   tensors      name_len u32, name bytes, rank u32, dims u64[rank],
//                values f32[numel]
//
// Model parameters use their parameter names; Adam moments are stored as
// "adam.m.<name>" and "adam.v.<name>".

#include <cstdint>
#include <filesystem>
#include <optional>

#include "bitskip/model.hpp"
#include "bitskip/training.hpp"

namespace bitskip {

inline constexpr char kCheckpointMagic[8] = {'B', 'I', 'T', 'S', 'K', 'I', 'P', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Model<float> model;
  AdamState<float> optimizer;
  std::int64_t step = 0;
};

// Writes to a temporary file next to `path`, then renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Model<float>& model,
                     const AdamState<float>& optimizer, std::int64_t step);

// FormatError on bad magic/version, truncation or inconsistent shapes;
// VariantMismatchError when `expected` is given and its variant differs;
// FormatError when its shape differs.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<ModelConfig>& expected = std::nullopt);

}  // namespace bitskip
