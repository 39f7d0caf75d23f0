#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gaternet/data.hpp"
#include "gaternet/model.hpp"
#include "gaternet/train.hpp"

namespace gaternet {

enum class DatasetKind { synthetic, cifar10_binary };

struct DatasetConfig {
  DatasetKind kind = DatasetKind::synthetic;
  // synthetic
  SyntheticOptions synthetic{};
  std::size_t train_size = 1000;
  std::size_t eval_size = 500;
  // cifar10-binary; relative paths resolve against the config file
  std::vector<std::filesystem::path> train_files;
  std::vector<std::filesystem::path> eval_files;
  std::size_t train_limit = 0;  // 0 keeps every record
  std::size_t eval_limit = 0;
  std::optional<Normalization> normalization;
  AugmentFlags augment{};
};

struct PhaseSchedule {
  std::size_t epochs = 10;
  std::vector<LrPoint> lr_schedule{{0, 0.05}};
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs";
  DatasetConfig dataset;
  ModelSpec model;
  // Shared optimizer settings; phase-specific epochs and lr live in `phases`.
  double lambda = 0.1;
  std::size_t batch_size = 64;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  Reduction reduction = Reduction::batch_mean;
  GateDropoutSchedule dropout{};
  std::map<Phase, PhaseSchedule> phases;

  TrainConfig train_config(Phase phase) const;
};

// Strict JSON parsing: unknown keys, wrong types and missing read inputs
// throw ConfigError naming the offending key path. The GATERNET_OUT_DIR
// environment variable, when set, replaces output_dir.
RunConfig parse_run_config(std::string_view text, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

struct DatasetSplit {
  Dataset train;
  Dataset eval;
};

DatasetSplit load_datasets(const RunConfig& config);

}  // namespace gaternet
