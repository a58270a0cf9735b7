#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "hicl/eval/eval.hpp"
#include "hicl/harness/config.hpp"

namespace hicl {

inline constexpr int kRunRecordFormat = 1;

struct LossEntry {
  std::size_t step = 0;  // steps completed
  double loss = 0;       // mean over the preceding log interval
};

struct RunRecord {
  int format_version = kRunRecordFormat;
  std::string config_hash;
  std::vector<LossEntry> losses;
  std::vector<std::string> checkpoints;
  std::string started_at;  // UTC, ISO 8601
  double wall_seconds = 0;
  bool aborted = false;
  std::string abort_reason;
};

struct TrainHooks {
  std::function<void(const LossEntry&)> on_log;
};

// Writes config.yaml, loss.csv, run.json and checkpoints/step_NNNNNNNN under
// config.output_dir. A non-finite loss or gradient stops the run, records
// the reason and rethrows NonFiniteError; earlier checkpoints stay on disk.
RunRecord run_training(const ExperimentConfig& config, const TrainHooks& hooks = {});

std::string checkpoint_dir_name(std::size_t step);
std::string loss_log_csv(const std::vector<LossEntry>& losses);

struct EvalResult {
  ErrorProfile model;
  ErrorProfile baseline;
  ErrorProfile zero;
  RegressionScore score;
};

// Model, baseline and zero profiles on one prompt set, written as
// profiles.csv, score.txt and profiles.svg under `out_dir`.
EvalResult run_eval(const ExperimentConfig& config, const std::filesystem::path& checkpoint,
                    const std::filesystem::path& out_dir);

struct PlotStyle {
  int width = 640;
  int height = 400;
  std::string title;
  std::string y_label = "squared error";
};

// Static SVG, x = context length, y = mean with shaded CI bands. Curves are
// drawn in data coordinates under one transform, so band vertices are the
// CSV values verbatim. Byte-identical for identical inputs.
std::string export_plot(const std::vector<ErrorProfile>& profiles, const PlotStyle& style = {});

}  // namespace hicl
