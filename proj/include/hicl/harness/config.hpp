#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "hicl/baselines/baselines.hpp"
#include "hicl/blocks/blocks.hpp"
#include "hicl/eval/eval.hpp"
#include "hicl/models/model.hpp"
#include "hicl/numerics/adam.hpp"
#include "hicl/tasks/tasks.hpp"

namespace hicl {

struct TrainConfig {
  std::size_t steps = 500000;
  std::size_t batch_size = 64;
  AdamConfig adam;  // learning rate resolved per task
  CurriculumSchedule curriculum;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 1000;
  std::size_t log_interval = 100;
  int precision = 32;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct EvalConfig {
  std::size_t n_prompts = 1280;
  std::uint64_t seed = 1;
  std::size_t score_begin = 0;  // resolved per task
  CiMethod ci = CiMethod::kNormal;
  std::size_t bootstrap_resamples = 1000;
  std::size_t threads = 1;
  BaselineSpec baseline;  // resolved per task
  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct ExperimentConfig {
  ArchitectureSpec model;  // input/output dims and max points follow the task
  BlockConfig block;
  TaskSpec task;
  TrainConfig train;
  EvalConfig eval;
  std::string output_dir = "runs/default";

  void validate() const;
  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

// Defaults for a task before any file values: full-scale model, task table
// sizes and the per-task learning rate, step count and model overrides.
ExperimentConfig default_config(TaskKind kind);

// Throws ConfigError naming the offending field, e.g. "train.learning_rate".
ExperimentConfig parse_config_text(const std::string& yaml, const std::string& source = "<config>");
ExperimentConfig parse_config(const std::filesystem::path& path);

// Fully resolved YAML; parse_config_text(write_config(c)) == c.
std::string write_config(const ExperimentConfig& config);

// Hex SHA-256 of write_config(config) with output_dir left empty.
std::string config_hash(const ExperimentConfig& config);

}  // namespace hicl
