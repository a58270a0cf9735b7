#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "hicl/baselines/baselines.hpp"
#include "hicl/models/model.hpp"
#include "hicl/tasks/tasks.hpp"

namespace hicl {

inline constexpr double kCiZ99 = 2.576;

struct ErrorProfile {
  std::string task;
  std::string predictor;
  std::optional<std::size_t> checkpoint_step;
  std::vector<double> mean;  // one entry per context length 0..N-1
  std::vector<double> ci_low;
  std::vector<double> ci_high;
  std::size_t n_prompts = 0;

  std::size_t size() const { return mean.size(); }
  void validate() const;
};

// Squared error of every prompt at every context length, [n_prompts, N].
// Vector targets contribute the mean over output coordinates.
struct ErrorSamples {
  std::string task;
  std::string predictor;
  std::optional<std::size_t> checkpoint_step;
  NdArray<double> errors;
};

// Maps a batch to predictions [B, N, out]; `first_prompt` is the global
// index of the batch's first prompt.
using PredictFn = std::function<NdArray<double>(const PromptBatch&, std::size_t first_prompt)>;

struct Predictor {
  std::string id;
  PredictFn predict;
  std::optional<std::size_t> checkpoint_step;
};

Predictor zero_predictor();
Predictor baseline_predictor(std::shared_ptr<const Baseline> baseline);
// Runs the model `max_batch` prompts at a time to bound graph memory.
Predictor model_predictor(std::shared_ptr<const CheckpointedModel> model, std::string id,
                          std::size_t max_batch = 8);
template <typename T>
Predictor model_predictor(std::shared_ptr<const Model<T>> model, std::string id,
                          std::size_t max_batch = 8);

enum class CiMethod { kNormal, kBootstrap };

struct EvalOptions {
  std::size_t n_prompts = 1280;
  std::size_t chunk = 64;  // prompts per work item
  std::size_t threads = 1;
  CiMethod ci = CiMethod::kNormal;
  std::size_t bootstrap_resamples = 1000;
  std::uint64_t bootstrap_seed = 0;
};

// One prompt set shared by every predictor it is handed to.
struct PromptSet {
  TaskSpec spec;
  std::vector<TaskBatch> chunks;
  std::size_t n_prompts = 0;
};

PromptSet sample_prompts(const TaskSpec& spec, std::size_t n_prompts, RngStream& rng,
                         std::size_t chunk = 64);

// Work is sharded by chunk; results do not depend on `threads`.
ErrorSamples evaluate(const Predictor& predictor, const PromptSet& prompts, std::size_t threads = 1);
ErrorProfile summarize(const ErrorSamples& samples, const EvalOptions& opt = {});

ErrorProfile error_profile(const Predictor& predictor, const TaskSpec& spec, RngStream& rng,
                           const EvalOptions& opt = {});

struct RegressionScore {
  double value = 0;
  double numerator = 0;
  double denominator = 0;
  bool valid = false;
  std::size_t begin = 0;  // first context length in the sums
};

// S = sum(model - zero) / sum(base - zero) over context lengths begin..N-1.
// Invalid (value NaN) when |denominator| < 1e-9 * sum(zero).
RegressionScore regression_score(const ErrorProfile& model, const ErrorProfile& base,
                                 const ErrorProfile& zero, std::size_t begin = 0);
RegressionScore regression_score(const std::vector<double>& model, const std::vector<double>& base,
                                 const std::vector<double>& zero, std::size_t begin = 0);

std::string format_score_report(const RegressionScore& score,
                                const std::map<std::string, std::string>& provenance);

// Difference profiles reuse ErrorProfile with predictor "A - B".
// Paired: CI from per-prompt differences; the samples must share a prompt set.
ErrorProfile difference_profile(const ErrorSamples& a, const ErrorSamples& b);
// Unpaired: CI half-widths combine as independent errors.
ErrorProfile difference_profile(const ErrorProfile& a, const ErrorProfile& b);

// One profile per checkpoint on one shared prompt set.
std::vector<ErrorProfile> checkpoint_sweep(const std::vector<std::filesystem::path>& checkpoints,
                                           const TaskSpec& spec, RngStream& rng,
                                           const EvalOptions& opt = {});

ErrorProfile cross_task_eval(const std::filesystem::path& checkpoint, const TaskSpec& spec,
                             RngStream& rng, const EvalOptions& opt = {});

// Columns: task, predictor, checkpoint_step, context_index, mean_sq_err, ci_low, ci_high, n_prompts.
void write_profiles_csv(const std::filesystem::path& path, const std::vector<ErrorProfile>& profiles);
std::string profiles_csv(const std::vector<ErrorProfile>& profiles);
std::vector<ErrorProfile> read_profiles_csv(const std::filesystem::path& path);

}  // namespace hicl
