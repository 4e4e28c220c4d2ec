#pragma once

// Checkpoint = JSON manifest (tensor names, shapes, byte offsets) next to a
// little-endian float32 blob.

#include "protodet/detector.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace protodet {

struct TrainState {
  int epoch = 0;           // completed epochs
  std::int64_t step = 0;   // completed optimizer steps
  std::vector<Tensor> momentum;  // one per parameter, empty before the first step
};

struct Checkpoint {
  ModelParams params;
  TrainState state;
  std::vector<std::string> class_names;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes <stem>.json and <stem>.bin.
void save_checkpoint(const std::filesystem::path& json_path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& json_path);

}  // namespace protodet
