#pragma once

// Binary checkpoint container.
//
// Layout (all integers little-endian):
//   "TUPE" | u32 version | u32 json_len | json_len bytes of UTF-8 JSON
//   then records until end of file:
//   u32 name_len | name | u8 dtype (0 = f32, 1 = f64) | u32 rank |
//   rank x u64 dims | raw little-endian payload
// The JSON block holds {"config": {...}, "step": N}.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "tupe/model.hpp"

namespace tupe {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kIo, kVersion, kTruncated, kFormat, kShape, kUnknownName, kMissingName };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct CheckpointTensor {
  std::string name;
  DType dtype = DType::kF64;
  Shape shape;
  /// f32 payloads are widened exactly; writing narrows them back losslessly.
  std::vector<double> values;
};

struct Checkpoint {
  ModelConfig config;
  std::uint64_t step = 0;
  std::vector<CheckpointTensor> tensors;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Snapshot of every named parameter as f64 tensors.
Checkpoint make_checkpoint(const ModelParams& params, const ModelConfig& config,
                           std::uint64_t step);

/// Rebuilds parameters for ckpt.config. Unknown or missing names and shape
/// mismatches raise CheckpointError.
ModelParams params_from_checkpoint(const Checkpoint& ckpt);

void save_checkpoint(const ModelParams& params, const ModelConfig& config, std::uint64_t step,
                     const std::filesystem::path& path);

struct LoadedModel {
  ModelConfig config;
  ModelParams params;
  std::uint64_t step = 0;
};
LoadedModel load_checkpoint(const std::filesystem::path& path);

}  // namespace tupe
