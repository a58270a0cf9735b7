#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "hicl/models/checkpoint.hpp"
#include "hicl/models/model.hpp"
#include "hicl/numerics/rng.hpp"
#include "hicl/tasks/tasks.hpp"

namespace hicl {

enum class BaselineKind { kZero, kLeastSquares, kLasso, kNnOracle, kCheckpointedModel };

std::string to_string(BaselineKind kind);
BaselineKind parse_baseline_kind(const std::string& name);

struct BaselineSpec {
  BaselineKind kind = BaselineKind::kZero;
  double lasso_alpha = 1e-3;
  std::size_t nn_steps = 1000;
  double nn_lr = 0.001;
  std::size_t nn_width = 100;
  std::string checkpoint_path;

  void validate() const;
  friend bool operator==(const BaselineSpec&, const BaselineSpec&) = default;
};

// linear -> least-squares, sparse-linear -> lasso, mlp2 -> nn-oracle,
// decision-tree / sparse-parity -> checkpointed model (path left empty),
// vector-mqar -> zero.
BaselineSpec default_baseline(TaskKind kind);

// n context pairs, rows of length d, row-major.
struct Context {
  const double* xs = nullptr;
  const double* ys = nullptr;
  std::size_t n = 0;
  std::size_t d = 0;
};

// Minimum-norm least squares; n = 0 gives w = 0.
std::vector<double> least_squares_fit(const Context& c);
double least_squares_predict(const Context& c, const double* query);

struct LassoOptions {
  double alpha = 1e-3;
  double tolerance = 1e-7;  // on the largest coordinate change in a sweep
  std::size_t max_sweeps = 10000;
};

struct LassoFit {
  std::vector<double> w;
  std::size_t sweeps = 0;
  bool converged = true;
};

// Minimizes (1/2n)|Xw - y|^2 + alpha |w|_1 by cyclic coordinate descent.
LassoFit lasso_fit(const Context& c, const LassoOptions& opt, const std::vector<double>* warm = nullptr);

struct NnOracleOptions {
  std::size_t steps = 1000;
  double lr = 0.001;
  std::size_t width = 100;
};

// Fresh ReLU net trained by single-point SGD on the context; empty context predicts 0.
double nn_oracle_predict(const Context& c, const double* query, const NnOracleOptions& opt,
                         RngStream& rng);

// A trained model loaded from disk at whatever precision it was saved in.
class CheckpointedModel {
 public:
  explicit CheckpointedModel(const std::filesystem::path& dir);

  const ArchitectureSpec& spec() const;
  const CheckpointMeta& meta() const { return meta_; }
  // Throws ShapeError when the prompt does not fit the model.
  void check_compatible(const PromptBatch& batch) const;
  NdArray<double> predict(const PromptBatch& batch) const;

 private:
  CheckpointMeta meta_;  // filled while model_ loads
  std::variant<Model<float>, Model<double>> model_;
};

struct BaselinePredictions {
  NdArray<double> values;  // [B, N, out]; entry (b, i) sees pairs 0..i-1 only
  std::size_t non_converged = 0;
};

class Baseline {
 public:
  // `seed` drives the nn-oracle; prompt p uses stream p.
  Baseline(BaselineSpec spec, std::uint64_t seed = 0);

  const BaselineSpec& spec() const { return spec_; }
  std::string id() const;
  // `first_prompt` is the global index of prompt 0 in the batch.
  BaselinePredictions predict(const PromptBatch& batch, std::size_t first_prompt = 0) const;

 private:
  BaselineSpec spec_;
  std::uint64_t seed_;
  std::shared_ptr<const CheckpointedModel> model_;
};

}  // namespace hicl
