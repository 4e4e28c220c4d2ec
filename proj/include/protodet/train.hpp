#pragma once

// SGD training of the toy detector with per-step JSON-lines logging and a
// checkpoint after every epoch.

#include "protodet/checkpoint.hpp"
#include "protodet/data.hpp"
#include "protodet/detector.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>

namespace protodet {

struct TrainConfig {
  ModelConfig model;
  int epochs = 12;
  double lr = 0.01;
  double momentum = 0.937;
  double weight_decay = 0.0005;  // decoupled, weights only
  int batch_size = 8;
  std::uint64_t seed = 5;
  LossToggles toggles;
  int warmup_steps = 0;    // linear lr ramp
  double lr_final = 1.0;   // lr fraction reached linearly at the last step; 1 keeps it constant
  double grad_clip = 0.0;  // global L2 norm; 0 disables
};

void validate(const TrainConfig& config);

struct StepRecord {
  std::int64_t step = 0;
  int epoch = 0;
  double lr = 0;
  LossReport loss;
};

std::string to_json_line(const StepRecord& record);

using ProgressFn = std::function<void(const StepRecord&)>;

/// Trains on the "train" split. Writes out_dir/train_log.jsonl and
/// out_dir/checkpoint.{json,bin}. A resume checkpoint continues epoch and
/// step numbering and appends to the log.
Checkpoint train(const TrainConfig& config, const Dataset& dataset, const std::filesystem::path& out_dir,
                 const std::optional<Checkpoint>& resume = std::nullopt, const ProgressFn& progress = {});

/// One optimizer step on a batch; exposed for tests. Returns the batch-mean
/// loss report and updates params and momentum in place.
LossReport train_step(const TrainConfig& config, ModelParams& params, std::vector<Tensor>& momentum,
                      const std::vector<const DatasetSample*>& batch, double lr);

}  // namespace protodet
