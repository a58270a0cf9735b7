#include "hicl/tasks/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hicl/error.hpp"

namespace hicl {

namespace {

struct TaskName {
  TaskKind kind;
  const char* name;
};

constexpr TaskName kNames[] = {
    {TaskKind::kLinear, "linear"},
    {TaskKind::kSparseLinear, "sparse-linear"},
    {TaskKind::kMlp2, "mlp2"},
    {TaskKind::kDecisionTree, "decision-tree"},
    {TaskKind::kSparseParity, "sparse-parity"},
    {TaskKind::kVectorMqar, "vector-mqar"},
};

// k distinct indices from [0, n), in draw order.
std::vector<std::size_t> choose(RngStream& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(n - 1)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

void check_xs(const TaskSpec& spec, const NdArray<double>& xs) {
  if (xs.rank() != 3 || xs.dim(2) != spec.input_dim) {
    throw ShapeError(spec.name() + ": xs must be [B, N, " + std::to_string(spec.input_dim) +
                     "], got " + shape_str(xs.shape()));
  }
}

// Applies one function per prompt to every point.
NdArray<double> targets(const NdArray<double>& xs, const std::vector<TaskFunction>& fns) {
  const std::size_t b = xs.dim(0), n = xs.dim(1), d = xs.dim(2);
  NdArray<double> ys(Shape{b, n, 1});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t p = 0; p < n; ++p) ys[i * n + p] = fns[i](xs.ptr() + (i * n + p) * d, d);
  }
  return ys;
}

NdArray<double> finish(const NdArray<double>& xs, std::vector<TaskFunction>& made,
                       std::vector<TaskFunction>* out) {
  auto ys = targets(xs, made);
  if (out != nullptr) *out = std::move(made);
  return ys;
}

}  // namespace

std::string to_string(TaskKind kind) {
  for (const auto& n : kNames) {
    if (n.kind == kind) return n.name;
  }
  return "?";
}

TaskKind parse_task_kind(const std::string& name) {
  for (const auto& n : kNames) {
    if (name == n.name) return n.kind;
  }
  throw ConfigError("unknown task '" + name + "'");
}

const std::vector<TaskKind>& all_task_kinds() {
  static const std::vector<TaskKind> kinds = {TaskKind::kLinear,       TaskKind::kSparseLinear,
                                              TaskKind::kMlp2,         TaskKind::kDecisionTree,
                                              TaskKind::kSparseParity, TaskKind::kVectorMqar};
  return kinds;
}

TaskSpec TaskSpec::defaults(TaskKind kind) {
  TaskSpec s;
  s.kind = kind;
  switch (kind) {
    case TaskKind::kLinear: s.input_dim = 20; s.n_points = 41; break;
    case TaskKind::kSparseLinear: s.input_dim = 20; s.n_points = 41; s.k = 3; break;
    case TaskKind::kMlp2: s.input_dim = 20; s.n_points = 101; s.width = 100; break;
    case TaskKind::kDecisionTree: s.input_dim = 20; s.n_points = 101; s.depth = 4; break;
    case TaskKind::kSparseParity: s.input_dim = 10; s.n_points = 140; s.k = 2; break;
    case TaskKind::kVectorMqar: s.input_dim = 20; s.n_points = 128; break;
  }
  return s;
}

void TaskSpec::validate() const {
  if (input_dim == 0 || n_points == 0) throw ConfigError(name() + ": d and N must be positive");
  if ((kind == TaskKind::kSparseLinear || kind == TaskKind::kSparseParity) &&
      (k == 0 || k > input_dim)) {
    throw ConfigError(name() + ": k=" + std::to_string(k) + " outside [1, " +
                      std::to_string(input_dim) + "]");
  }
  if (kind == TaskKind::kMlp2 && width == 0) throw ConfigError("mlp2: width must be positive");
  if (kind == TaskKind::kDecisionTree && (depth == 0 || depth > 20)) {
    throw ConfigError("decision-tree: depth must be in [1, 20]");
  }
  if (kind == TaskKind::kVectorMqar && (n_points < 2 || n_points % 2 != 0)) {
    throw ConfigError("vector-mqar: N must be even and >= 2");
  }
}

// ------------------------------------------------------------------ trees

TreeVisit eval_tree(const DecisionTree& tree, const double* x) {
  TreeVisit v;
  std::size_t node = 0;
  for (std::size_t level = 0; level < tree.depth; ++level) {
    const bool right = !(x[tree.split_coords[node]] < 0.0);
    node = 2 * node + 1 + (right ? 1 : 0);
    ++v.splits_visited;
  }
  v.leaf = node - (tree.split_coords.size());
  v.value = tree.leaf_values[v.leaf];
  return v;
}

DecisionTree sample_decision_tree(const TaskSpec& spec, RngStream& rng, std::size_t active_dims) {
  if (active_dims == 0 || active_dims > spec.input_dim) {
    throw ShapeError("decision-tree: active dims " + std::to_string(active_dims) + " out of range");
  }
  DecisionTree t;
  t.depth = spec.depth;
  const std::size_t leaves = std::size_t{1} << spec.depth;
  t.split_coords.resize(leaves - 1);
  for (auto& c : t.split_coords) {
    c = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(active_dims) - 1));
  }
  t.leaf_values.resize(leaves);
  for (auto& v : t.leaf_values) v = rng.normal();
  return t;
}

double TaskFunction::operator()(const double* x, std::size_t d) const {
  switch (kind) {
    case TaskKind::kLinear:
    case TaskKind::kSparseLinear: {
      double y = 0;
      for (std::size_t j = 0; j < d; ++j) y += w[j] * x[j];
      return y;
    }
    case TaskKind::kMlp2: {
      const std::size_t width = w2.size();
      double y = 0;
      for (std::size_t h = 0; h < width; ++h) {
        double a = 0;
        for (std::size_t j = 0; j < d; ++j) a += w1[h * d + j] * x[j];
        if (a > 0) y += w2[h] * a;
      }
      return y;
    }
    case TaskKind::kDecisionTree:
      return eval_tree(tree, x).value;
    case TaskKind::kSparseParity: {
      double y = 1;
      for (std::size_t i : theta) y *= x[i];
      return y;
    }
    case TaskKind::kVectorMqar:
      break;
  }
  throw Error("task function: vector-mqar has no scalar form");
}

// ------------------------------------------------------------- curriculum

CurriculumState full_state(const TaskSpec& spec) { return {spec.input_dim, spec.n_points}; }

CurriculumState curriculum_state(std::size_t step, const CurriculumSchedule& schedule,
                                 const TaskSpec& spec) {
  if (!schedule.enabled || !spec.uses_curriculum()) return full_state(spec);
  const std::size_t rounds = schedule.interval == 0 ? 0 : step / schedule.interval;
  auto grow = [rounds](std::size_t start, std::size_t inc, std::size_t cap) {
    start = std::min(start, cap);
    if (inc == 0) return start;
    // Saturate before multiplying so huge step counts cannot overflow.
    const std::size_t needed = (cap - start + inc - 1) / inc;
    return rounds >= needed ? cap : start + rounds * inc;
  };
  return {grow(schedule.dims_start, schedule.dims_increment, spec.input_dim),
          grow(schedule.points_start, schedule.points_increment, spec.n_points)};
}

// ---------------------------------------------------------------- samplers

NdArray<double> sample_xs(const TaskSpec& spec, std::size_t batch, std::size_t n_points,
                          RngStream& rng, std::size_t active_dims) {
  if (active_dims > spec.input_dim) {
    throw ShapeError(spec.name() + ": active dims " + std::to_string(active_dims) + " exceed d=" +
                     std::to_string(spec.input_dim));
  }
  const std::size_t d = spec.input_dim;
  DistributionSpec dist{Distribution::kStandardNormal};
  if (spec.kind == TaskKind::kSparseParity) dist.kind = Distribution::kRademacher;
  if (spec.kind == TaskKind::kVectorMqar) {
    dist.kind = Distribution::kUniformSphere;
    dist.radius = std::sqrt(static_cast<double>(d));
  }
  auto xs = rng_draw(rng, dist, {batch, n_points, d});
  if (active_dims < d) {
    for (std::size_t r = 0; r < batch * n_points; ++r) {
      std::fill(xs.ptr() + r * d + active_dims, xs.ptr() + (r + 1) * d, 0.0);
    }
  }
  return xs;
}

NdArray<double> sample_linear(const TaskSpec& spec, const NdArray<double>& xs, RngStream& rng,
                              std::vector<TaskFunction>* fns) {
  check_xs(spec, xs);
  std::vector<TaskFunction> made(xs.dim(0));
  for (auto& f : made) {
    f.kind = TaskKind::kLinear;
    f.w.resize(spec.input_dim);
    for (double& v : f.w) v = rng.normal();
  }
  return finish(xs, made, fns);
}

NdArray<double> sample_sparse_linear(const TaskSpec& spec, const NdArray<double>& xs,
                                     RngStream& rng, std::size_t active_dims,
                                     std::vector<TaskFunction>* fns) {
  check_xs(spec, xs);
  if (spec.k == 0 || spec.k > spec.input_dim) {
    throw ConfigError("sparse-linear: k=" + std::to_string(spec.k) + " out of range");
  }
  active_dims = std::min(std::max(active_dims, spec.k), spec.input_dim);
  std::vector<TaskFunction> made(xs.dim(0));
  for (auto& f : made) {
    f.kind = TaskKind::kSparseLinear;
    f.w.assign(spec.input_dim, 0.0);
    for (std::size_t j : choose(rng, active_dims, spec.k)) f.w[j] = rng.normal();
  }
  return finish(xs, made, fns);
}

NdArray<double> sample_mlp2(const TaskSpec& spec, const NdArray<double>& xs, RngStream& rng,
                            std::vector<TaskFunction>* fns) {
  check_xs(spec, xs);
  std::vector<TaskFunction> made(xs.dim(0));
  for (auto& f : made) {
    f.kind = TaskKind::kMlp2;
    f.w1.resize(spec.width * spec.input_dim);
    f.w2.resize(spec.width);
    for (double& v : f.w1) v = rng.normal();
    for (double& v : f.w2) v = rng.normal();
  }
  return finish(xs, made, fns);
}

NdArray<double> sample_tree_targets(const TaskSpec& spec, const NdArray<double>& xs,
                                    RngStream& rng, std::size_t active_dims,
                                    std::vector<TaskFunction>* fns) {
  check_xs(spec, xs);
  std::vector<TaskFunction> made(xs.dim(0));
  for (auto& f : made) {
    f.kind = TaskKind::kDecisionTree;
    f.tree = sample_decision_tree(spec, rng, active_dims);
  }
  return finish(xs, made, fns);
}

NdArray<double> sample_sparse_parity(const TaskSpec& spec, const NdArray<double>& xs,
                                     RngStream& rng, std::vector<TaskFunction>* fns) {
  check_xs(spec, xs);
  if (spec.k == 0 || spec.k > spec.input_dim) {
    throw ConfigError("sparse-parity: k=" + std::to_string(spec.k) + " exceeds d=" +
                      std::to_string(spec.input_dim));
  }
  std::vector<TaskFunction> made(xs.dim(0));
  for (auto& f : made) {
    f.kind = TaskKind::kSparseParity;
    f.theta = choose(rng, spec.input_dim, spec.k);
  }
  return finish(xs, made, fns);
}

MqarPrompts sample_mqar(const TaskSpec& spec, std::size_t batch, RngStream& rng) {
  spec.validate();
  const std::size_t n = spec.n_points, d = spec.input_dim, half = n / 2;
  // [B, N, 2, d]: slot 0 key, slot 1 value.
  const auto points = sample_xs(spec, batch, 2 * n, rng, d);
  MqarPrompts out;
  out.keys = NdArray<double>(Shape{batch, n, d});
  out.values = NdArray<double>(Shape{batch, n, d});
  out.source.assign(batch, std::vector<std::size_t>(n));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t p = 0; p < n; ++p) {
      std::size_t src = p;
      if (p >= half) src = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(half) - 1));
      out.source[b][p] = src;
      const double* pair = points.ptr() + ((b * n + src) * 2) * d;
      std::copy(pair, pair + d, out.keys.ptr() + (b * n + p) * d);
      std::copy(pair + d, pair + 2 * d, out.values.ptr() + (b * n + p) * d);
    }
  }
  return out;
}

TaskBatch sample_batch(const TaskSpec& spec, std::size_t batch, RngStream& rng,
                       const CurriculumState& state) {
  spec.validate();
  TaskBatch out;
  PromptBatch& p = out.prompts;
  p.active_points = state.active_points;
  p.active_dims = state.active_dims;
  p.loss_begin = std::min(spec.score_begin(), state.active_points - 1);
  const std::size_t n = state.active_points, dims = state.active_dims;
  switch (spec.kind) {
    case TaskKind::kLinear:
      p.xs = sample_xs(spec, batch, n, rng, dims);
      p.ys = sample_linear(spec, p.xs, rng, &out.functions);
      break;
    case TaskKind::kSparseLinear:
      p.xs = sample_xs(spec, batch, n, rng, dims);
      p.ys = sample_sparse_linear(spec, p.xs, rng, dims, &out.functions);
      break;
    case TaskKind::kMlp2:
      p.xs = sample_xs(spec, batch, n, rng, dims);
      p.ys = sample_mlp2(spec, p.xs, rng, &out.functions);
      break;
    case TaskKind::kDecisionTree:
      p.xs = sample_xs(spec, batch, n, rng, dims);
      p.ys = sample_tree_targets(spec, p.xs, rng, dims, &out.functions);
      break;
    case TaskKind::kSparseParity:
      p.xs = sample_xs(spec, batch, n, rng, dims);
      p.ys = sample_sparse_parity(spec, p.xs, rng, &out.functions);
      break;
    case TaskKind::kVectorMqar: {
      TaskSpec full = spec;
      full.n_points = n;
      auto m = sample_mqar(full, batch, rng);
      p.xs = std::move(m.keys);
      p.ys = std::move(m.values);
      break;
    }
  }
  p.validate();
  return out;
}

}  // namespace hicl
