#include "hicl/baselines/baselines.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "hicl/error.hpp"
#include "hicl/models/checkpoint.hpp"

namespace hicl {

namespace {

struct KindName {
  BaselineKind kind;
  const char* name;
};
constexpr KindName kNames[] = {{BaselineKind::kZero, "zero"},
                               {BaselineKind::kLeastSquares, "least-squares"},
                               {BaselineKind::kLasso, "lasso"},
                               {BaselineKind::kNnOracle, "nn-oracle"},
                               {BaselineKind::kCheckpointedModel, "checkpointed-model"}};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0;
  for (std::size_t j = 0; j < n; ++j) s += a[j] * b[j];
  return s;
}

double soft_threshold(double v, double t) {
  if (v > t) return v - t;
  if (v < -t) return v + t;
  return 0.0;
}

}  // namespace

std::string to_string(BaselineKind kind) {
  for (const auto& n : kNames) {
    if (n.kind == kind) return n.name;
  }
  return "?";
}

BaselineKind parse_baseline_kind(const std::string& name) {
  for (const auto& n : kNames) {
    if (name == n.name) return n.kind;
  }
  throw ConfigError("unknown baseline '" + name + "'");
}

void BaselineSpec::validate() const {
  if (!(lasso_alpha > 0)) throw ConfigError("lasso alpha must be positive");
  if (!(nn_lr > 0) || !std::isfinite(nn_lr)) throw ConfigError("nn-oracle lr must be positive");
  if (nn_width == 0) throw ConfigError("nn-oracle width must be positive");
  if (kind == BaselineKind::kCheckpointedModel && checkpoint_path.empty()) {
    throw ConfigError("checkpointed-model baseline needs a checkpoint path");
  }
}

BaselineSpec default_baseline(TaskKind kind) {
  BaselineSpec s;
  switch (kind) {
    case TaskKind::kLinear: s.kind = BaselineKind::kLeastSquares; break;
    case TaskKind::kSparseLinear: s.kind = BaselineKind::kLasso; break;
    case TaskKind::kMlp2: s.kind = BaselineKind::kNnOracle; break;
    case TaskKind::kDecisionTree:
    case TaskKind::kSparseParity: s.kind = BaselineKind::kCheckpointedModel; break;
    case TaskKind::kVectorMqar: s.kind = BaselineKind::kZero; break;
  }
  return s;
}

std::vector<double> least_squares_fit(const Context& c) {
  std::vector<double> w(c.d, 0.0);
  if (c.n == 0) return w;
  const Eigen::Map<const RowMatrix> x(c.xs, static_cast<Eigen::Index>(c.n),
                                      static_cast<Eigen::Index>(c.d));
  const Eigen::Map<const Eigen::VectorXd> y(c.ys, static_cast<Eigen::Index>(c.n));
  const Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(x);
  Eigen::Map<Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(c.d)) = cod.solve(y);
  return w;
}

double least_squares_predict(const Context& c, const double* query) {
  if (c.n == 0) return 0.0;
  const auto w = least_squares_fit(c);
  return dot(w.data(), query, c.d);
}

LassoFit lasso_fit(const Context& c, const LassoOptions& opt, const std::vector<double>* warm) {
  if (!(opt.alpha > 0)) throw ConfigError("lasso alpha must be positive");
  LassoFit fit;
  fit.w.assign(c.d, 0.0);
  if (c.n == 0) return fit;
  if (warm != nullptr && warm->size() == c.d) fit.w = *warm;

  const std::size_t n = c.n, d = c.d;
  const double inv_n = 1.0 / static_cast<double>(n);
  // Column-major copy so each coordinate update walks contiguous memory.
  std::vector<double> cols(n * d), norm(d, 0.0), r(c.ys, c.ys + n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const double v = c.xs[i * d + j];
      cols[j * n + i] = v;
      norm[j] += v * v * inv_n;
      r[i] -= v * fit.w[j];
    }
  }
  auto objective = [&](const std::vector<double>& res, const std::vector<double>& w) {
    double q = 0, l1 = 0;
    for (double v : res) q += v * v;
    for (double v : w) l1 += std::abs(v);
    return 0.5 * q * inv_n + opt.alpha * l1;
  };
  // Anderson extrapolation over the last kHistory sweeps; kept only when it
  // lowers the objective, so the fixed point is unchanged.
  constexpr std::size_t kHistory = 5;
  std::vector<std::vector<double>> history{fit.w};
  fit.converged = false;
  for (fit.sweeps = 1; fit.sweeps <= opt.max_sweeps; ++fit.sweeps) {
    double biggest = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double* col = &cols[j * n];
      const double old = fit.w[j];
      double next = 0;
      if (norm[j] > 0) {
        const double rho = dot(col, r.data(), n) * inv_n + norm[j] * old;
        next = soft_threshold(rho, opt.alpha) / norm[j];
      }
      const double delta = next - old;
      if (delta != 0) {
        for (std::size_t i = 0; i < n; ++i) r[i] -= col[i] * delta;
        fit.w[j] = next;
      }
      biggest = std::max(biggest, std::abs(delta));
    }
    if (biggest < opt.tolerance) {
      fit.converged = true;
      break;
    }
    history.push_back(fit.w);
    if (history.size() == kHistory + 1) {
      Eigen::MatrixXd u(d, kHistory);
      for (std::size_t k = 0; k < kHistory; ++k) {
        for (std::size_t j = 0; j < d; ++j) u(j, k) = history[k + 1][j] - history[k][j];
      }
      const Eigen::VectorXd z =
          (u.transpose() * u).ldlt().solve(Eigen::VectorXd::Ones(kHistory));
      if (z.allFinite() && std::abs(z.sum()) > 0) {
        std::vector<double> w(d, 0.0), res(c.ys, c.ys + n);
        for (std::size_t k = 0; k < kHistory; ++k) {
          for (std::size_t j = 0; j < d; ++j) w[j] += z(k) / z.sum() * history[k + 1][j];
        }
        for (std::size_t i = 0; i < n; ++i) res[i] -= dot(c.xs + i * d, w.data(), d);
        if (objective(res, w) < objective(r, fit.w)) {
          fit.w = std::move(w);
          r = std::move(res);
        }
      }
      history.assign(1, fit.w);
    }
  }
  if (!fit.converged) fit.sweeps = opt.max_sweeps;
  return fit;
}

double nn_oracle_predict(const Context& c, const double* query, const NnOracleOptions& opt,
                         RngStream& rng) {
  if (c.n == 0) return 0.0;
  const std::size_t d = c.d, h = opt.width;
  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike.
  const double a1 = 1.0 / std::sqrt(static_cast<double>(d));
  const double a2 = 1.0 / std::sqrt(static_cast<double>(h));
  std::vector<double> w1(h * d), b1(h), w2(h), pre(h), act(h);
  for (double& v : w1) v = (2 * rng.uniform() - 1) * a1;
  for (double& v : b1) v = (2 * rng.uniform() - 1) * a1;
  for (double& v : w2) v = (2 * rng.uniform() - 1) * a2;
  double b2 = (2 * rng.uniform() - 1) * a2;

  auto forward = [&](const double* x) {
    double y = b2;
    for (std::size_t k = 0; k < h; ++k) {
      pre[k] = dot(&w1[k * d], x, d) + b1[k];
      act[k] = pre[k] > 0 ? pre[k] : 0.0;
      y += w2[k] * act[k];
    }
    return y;
  };

  for (std::size_t step = 0; step < opt.steps; ++step) {
    const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(c.n) - 1));
    const double* x = c.xs + i * d;
    // d/dy of (y - target)^2
    const double g = 2.0 * (forward(x) - c.ys[i]);
    for (std::size_t k = 0; k < h; ++k) {
      const double gh = pre[k] > 0 ? g * w2[k] : 0.0;
      w2[k] -= opt.lr * g * act[k];
      if (gh != 0) {
        double* row = &w1[k * d];
        for (std::size_t j = 0; j < d; ++j) row[j] -= opt.lr * gh * x[j];
        b1[k] -= opt.lr * gh;
      }
    }
    b2 -= opt.lr * g;
  }
  return forward(query);
}

namespace {

std::variant<Model<float>, Model<double>> load_any(const std::filesystem::path& dir,
                                                    CheckpointMeta* meta) {
  if (checkpoint_precision(dir) == 32) return load_checkpoint<float>(dir, meta);
  return load_checkpoint<double>(dir, meta);
}

}  // namespace

CheckpointedModel::CheckpointedModel(const std::filesystem::path& dir)
    : model_(load_any(dir, &meta_)) {}

const ArchitectureSpec& CheckpointedModel::spec() const {
  return std::visit([](const auto& m) -> const ArchitectureSpec& { return m.spec(); }, model_);
}

void CheckpointedModel::check_compatible(const PromptBatch& batch) const {
  const auto& s = spec();
  if (s.input_dim != batch.input_dim() || s.output_dim != batch.output_dim()) {
    throw ShapeError("checkpoint expects input_dim " + std::to_string(s.input_dim) +
                     " and output_dim " + std::to_string(s.output_dim) + ", prompt has " +
                     std::to_string(batch.input_dim()) + " and " +
                     std::to_string(batch.output_dim()));
  }
  if (s.variant().pos == PosEmb::kAbsolute && batch.n_points() > s.max_points) {
    throw ShapeError("checkpoint accepts at most " + std::to_string(s.max_points) +
                     " points, prompt has " + std::to_string(batch.n_points()));
  }
}

NdArray<double> CheckpointedModel::predict(const PromptBatch& batch) const {
  check_compatible(batch);
  return std::visit([&](const auto& m) { return m.predict(batch).template cast<double>(); },
                    model_);
}

Baseline::Baseline(BaselineSpec spec, std::uint64_t seed) : spec_(std::move(spec)), seed_(seed) {
  spec_.validate();
  if (spec_.kind == BaselineKind::kCheckpointedModel) {
    model_ = std::make_shared<CheckpointedModel>(spec_.checkpoint_path);
  }
}

std::string Baseline::id() const {
  if (spec_.kind == BaselineKind::kCheckpointedModel) {
    return "checkpoint:" + std::filesystem::path(spec_.checkpoint_path).filename().string();
  }
  return to_string(spec_.kind);
}

BaselinePredictions Baseline::predict(const PromptBatch& batch, std::size_t first_prompt) const {
  batch.validate();
  const std::size_t b = batch.batch(), n = batch.n_points(), d = batch.input_dim();
  BaselinePredictions out;
  if (spec_.kind == BaselineKind::kZero) {
    out.values = NdArray<double>(Shape{b, n, batch.output_dim()});
    return out;
  }
  if (spec_.kind == BaselineKind::kCheckpointedModel) {
    out.values = model_->predict(batch);
    return out;
  }
  if (batch.output_dim() != 1) {
    throw ShapeError(to_string(spec_.kind) + " baseline needs scalar targets");
  }
  out.values = NdArray<double>(Shape{b, n, 1});
  const LassoOptions lasso{spec_.lasso_alpha};
  const NnOracleOptions nn{spec_.nn_steps, spec_.nn_lr, spec_.nn_width};
  for (std::size_t p = 0; p < b; ++p) {
    const double* xs = batch.xs.ptr() + p * n * d;
    const double* ys = batch.ys.ptr() + p * n;
    RngStream rng(seed_, first_prompt + p);
    std::vector<double> warm;
    for (std::size_t i = 0; i < n; ++i) {
      const Context c{xs, ys, i, d};
      const double* q = xs + i * d;
      double& y = out.values[p * n + i];
      switch (spec_.kind) {
        case BaselineKind::kLeastSquares: y = least_squares_predict(c, q); break;
        case BaselineKind::kLasso: {
          auto fit = lasso_fit(c, lasso, &warm);
          out.non_converged += !fit.converged;
          y = dot(fit.w.data(), q, d);
          warm = std::move(fit.w);
          break;
        }
        case BaselineKind::kNnOracle: y = nn_oracle_predict(c, q, nn, rng); break;
        default: break;
      }
    }
  }
  return out;
}

}  // namespace hicl
