#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "hicl/models/model.hpp"
#include "hicl/numerics/ndarray.hpp"
#include "hicl/numerics/rng.hpp"

namespace hicl {

enum class TaskKind { kLinear, kSparseLinear, kMlp2, kDecisionTree, kSparseParity, kVectorMqar };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& name);
const std::vector<TaskKind>& all_task_kinds();

struct TaskSpec {
  TaskKind kind = TaskKind::kLinear;
  std::size_t input_dim = 20;
  std::size_t n_points = 41;
  std::size_t k = 3;        // sparse-linear / sparse-parity
  std::size_t width = 100;  // mlp2
  std::size_t depth = 4;    // decision-tree

  static TaskSpec defaults(TaskKind kind);
  std::string name() const { return to_string(kind); }
  std::size_t output_dim() const { return kind == TaskKind::kVectorMqar ? input_dim : 1; }
  // First context length that counts toward loss and scores (recall positions for MQAR).
  std::size_t score_begin() const { return kind == TaskKind::kVectorMqar ? n_points / 2 : 0; }
  bool uses_curriculum() const {
    return kind != TaskKind::kSparseParity && kind != TaskKind::kVectorMqar;
  }
  void validate() const;
  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

struct DecisionTree {
  std::size_t depth = 0;
  std::vector<std::size_t> split_coords;  // 0-based, 2^depth - 1 entries, heap order
  std::vector<double> leaf_values;        // 2^depth entries
};

struct TreeVisit {
  double value = 0;
  std::size_t leaf = 0;
  std::size_t splits_visited = 0;
};

// Left when x[split] < 0.
TreeVisit eval_tree(const DecisionTree& tree, const double* x);

// Split coordinates drawn independently from [0, active_dims).
DecisionTree sample_decision_tree(const TaskSpec& spec, RngStream& rng, std::size_t active_dims);

// The function behind one prompt.
struct TaskFunction {
  TaskKind kind = TaskKind::kLinear;
  std::vector<double> w;          // linear, sparse-linear: d
  std::vector<double> w1;         // mlp2: width x d
  std::vector<double> w2;         // mlp2: width
  DecisionTree tree;              // decision-tree
  std::vector<std::size_t> theta; // sparse-parity, 0-based

  // Scalar tasks only.
  double operator()(const double* x, std::size_t d) const;
};

struct CurriculumSchedule {
  bool enabled = true;
  std::size_t dims_start = 5;
  std::size_t dims_increment = 1;
  std::size_t points_start = 11;
  std::size_t points_increment = 2;
  std::size_t interval = 2000;
  friend bool operator==(const CurriculumSchedule&, const CurriculumSchedule&) = default;
};

struct CurriculumState {
  std::size_t active_dims = 0;
  std::size_t active_points = 0;
  friend bool operator==(const CurriculumState&, const CurriculumState&) = default;
};

CurriculumState curriculum_state(std::size_t step, const CurriculumSchedule& schedule,
                                 const TaskSpec& spec);
CurriculumState full_state(const TaskSpec& spec);

// [batch, n_points, d]; coordinates at or beyond active_dims are zero.
NdArray<double> sample_xs(const TaskSpec& spec, std::size_t batch, std::size_t n_points,
                          RngStream& rng, std::size_t active_dims);

// Each returns targets [batch, n_points, 1] and fills one function per prompt.
NdArray<double> sample_linear(const TaskSpec& spec, const NdArray<double>& xs, RngStream& rng,
                              std::vector<TaskFunction>* fns = nullptr);
NdArray<double> sample_sparse_linear(const TaskSpec& spec, const NdArray<double>& xs,
                                     RngStream& rng, std::size_t active_dims,
                                     std::vector<TaskFunction>* fns = nullptr);
NdArray<double> sample_mlp2(const TaskSpec& spec, const NdArray<double>& xs, RngStream& rng,
                            std::vector<TaskFunction>* fns = nullptr);
NdArray<double> sample_tree_targets(const TaskSpec& spec, const NdArray<double>& xs,
                                    RngStream& rng, std::size_t active_dims,
                                    std::vector<TaskFunction>* fns = nullptr);
NdArray<double> sample_sparse_parity(const TaskSpec& spec, const NdArray<double>& xs,
                                     RngStream& rng, std::vector<TaskFunction>* fns = nullptr);

// 2N sphere points as N (key, value) pairs; pairs N/2.. re-present a uniformly
// chosen earlier key with its bound value.
struct MqarPrompts {
  NdArray<double> keys;    // [batch, N, d]
  NdArray<double> values;  // [batch, N, d]
  std::vector<std::vector<std::size_t>> source;  // per prompt, per point: binding index
};
MqarPrompts sample_mqar(const TaskSpec& spec, std::size_t batch, RngStream& rng);

struct TaskBatch {
  PromptBatch prompts;
  std::vector<TaskFunction> functions;  // empty for MQAR
};

// A full training/eval batch at the given curriculum state.
TaskBatch sample_batch(const TaskSpec& spec, std::size_t batch, RngStream& rng,
                       const CurriculumState& state);

}  // namespace hicl
