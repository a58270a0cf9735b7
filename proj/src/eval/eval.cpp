#include "hicl/eval/eval.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "hicl/error.hpp"

namespace hicl {

namespace fs = std::filesystem;

namespace {

std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

double parse_num(const std::string& s, const std::string& what) {
  double v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw ConfigError("bad number '" + s + "' in " + what);
  }
  return v;
}

std::size_t parse_count(const std::string& s, const std::string& what) {
  std::size_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw ConfigError("bad integer '" + s + "' in " + what);
  }
  return v;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else if (c != '\r') {
      out.back() += c;
    }
  }
  return out;
}

// Squared errors of one chunk into rows [first, first + B) of `out`.
void score_chunk(const Predictor& predictor, const TaskBatch& chunk, std::size_t first,
                 NdArray<double>& out) {
  const PromptBatch& p = chunk.prompts;
  const std::size_t b = p.batch(), n = p.n_points(), o = p.output_dim();
  const NdArray<double> pred = predictor.predict(p, first);
  if (pred.shape() != p.ys.shape()) {
    throw ShapeError("predictor " + predictor.id + " returned " + shape_str(pred.shape()) +
                     " for targets " + shape_str(p.ys.shape()));
  }
  for (std::size_t k = 0; k < b; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < o; ++j) {
        const double e = pred[(k * n + i) * o + j] - p.ys[(k * n + i) * o + j];
        s += e * e;
      }
      out[(first + k) * n + i] = s / static_cast<double>(o);
    }
  }
}

// Rethrows a chunk failure naming the first prompt that fails on its own.
[[noreturn]] void blame_prompt(const Predictor& predictor, const TaskBatch& chunk,
                               std::size_t first, const std::exception& original) {
  const PromptBatch& p = chunk.prompts;
  for (std::size_t k = 0; k < p.batch(); ++k) {
    PromptBatch one = p;
    one.xs = p.xs.rows(k, k + 1);
    one.ys = p.ys.rows(k, k + 1);
    try {
      predictor.predict(one, first + k);
    } catch (const std::exception& e) {
      throw Error("predictor " + predictor.id + " failed on prompt " + std::to_string(first + k) +
                  ": " + e.what());
    }
  }
  throw Error("predictor " + predictor.id + " failed on prompts " + std::to_string(first) + ".." +
              std::to_string(first + p.batch() - 1) + ": " + original.what());
}

void check_same_shape(const ErrorProfile& a, const ErrorProfile& b, const char* what) {
  if (a.task != b.task) {
    throw ConfigError(std::string(what) + ": task " + a.task + " vs " + b.task);
  }
  if (a.size() != b.size()) {
    throw ShapeError(std::string(what) + ": " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + " context lengths");
  }
}

}  // namespace

void ErrorProfile::validate() const {
  if (ci_low.size() != mean.size() || ci_high.size() != mean.size()) {
    throw ShapeError("profile " + predictor + ": column lengths differ");
  }
  for (std::size_t i = 0; i < mean.size(); ++i) {
    if (!(ci_low[i] <= mean[i] && mean[i] <= ci_high[i])) {
      throw Error("profile " + predictor + ": CI does not bracket the mean at " + std::to_string(i));
    }
  }
}

Predictor zero_predictor() {
  return {"zero",
          [](const PromptBatch& b, std::size_t) { return NdArray<double>(b.ys.shape()); },
          std::nullopt};
}

Predictor baseline_predictor(std::shared_ptr<const Baseline> baseline) {
  const std::string id = baseline->id();
  return {id,
          [baseline](const PromptBatch& b, std::size_t first) {
            return baseline->predict(b, first).values;
          },
          std::nullopt};
}

namespace {

template <typename Fn>
NdArray<double> in_slices(const PromptBatch& batch, std::size_t max_batch, Fn&& fn) {
  const std::size_t b = batch.batch();
  if (b <= max_batch) return fn(batch);
  NdArray<double> out(batch.ys.shape());
  const std::size_t stride = batch.n_points() * batch.output_dim();
  for (std::size_t lo = 0; lo < b; lo += max_batch) {
    const std::size_t hi = std::min(b, lo + max_batch);
    PromptBatch part = batch;
    part.xs = batch.xs.rows(lo, hi);
    part.ys = batch.ys.rows(lo, hi);
    const auto pred = fn(part);
    std::copy(pred.ptr(), pred.ptr() + pred.size(), out.ptr() + lo * stride);
  }
  return out;
}

}  // namespace

Predictor model_predictor(std::shared_ptr<const CheckpointedModel> model, std::string id,
                          std::size_t max_batch) {
  const std::size_t step = model->meta().step;
  return {std::move(id),
          [model, max_batch](const PromptBatch& b, std::size_t) {
            model->check_compatible(b);
            return in_slices(b, std::max<std::size_t>(1, max_batch),
                             [&](const PromptBatch& part) { return model->predict(part); });
          },
          step};
}

template <typename T>
Predictor model_predictor(std::shared_ptr<const Model<T>> model, std::string id,
                          std::size_t max_batch) {
  return {std::move(id),
          [model, max_batch](const PromptBatch& b, std::size_t) {
            return in_slices(b, std::max<std::size_t>(1, max_batch), [&](const PromptBatch& part) {
              return model->predict(part).template cast<double>();
            });
          },
          std::nullopt};
}

template Predictor model_predictor<float>(std::shared_ptr<const Model<float>>, std::string,
                                          std::size_t);
template Predictor model_predictor<double>(std::shared_ptr<const Model<double>>, std::string,
                                           std::size_t);

PromptSet sample_prompts(const TaskSpec& spec, std::size_t n_prompts, RngStream& rng,
                         std::size_t chunk) {
  if (n_prompts < 2) throw ConfigError("evaluation needs at least 2 prompts");
  if (chunk == 0) throw ConfigError("chunk size must be positive");
  PromptSet set;
  set.spec = spec;
  set.n_prompts = n_prompts;
  const CurriculumState full = full_state(spec);
  for (std::size_t lo = 0; lo < n_prompts; lo += chunk) {
    set.chunks.push_back(sample_batch(spec, std::min(chunk, n_prompts - lo), rng, full));
  }
  return set;
}

ErrorSamples evaluate(const Predictor& predictor, const PromptSet& prompts, std::size_t threads) {
  ErrorSamples out;
  out.task = prompts.spec.name();
  out.predictor = predictor.id;
  out.checkpoint_step = predictor.checkpoint_step;
  out.errors = NdArray<double>(Shape{prompts.n_prompts, prompts.spec.n_points});

  std::vector<std::size_t> first(prompts.chunks.size());
  for (std::size_t c = 1; c < first.size(); ++c) {
    first[c] = first[c - 1] + prompts.chunks[c - 1].prompts.batch();
  }
  auto run = [&](std::size_t c) {
    try {
      score_chunk(predictor, prompts.chunks[c], first[c], out.errors);
    } catch (const std::exception& e) {
      blame_prompt(predictor, prompts.chunks[c], first[c], e);
    }
  };

  const std::size_t workers = std::min(std::max<std::size_t>(threads, 1), prompts.chunks.size());
  if (workers <= 1) {
    for (std::size_t c = 0; c < prompts.chunks.size(); ++c) run(c);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::size_t failed_chunk = std::numeric_limits<std::size_t>::max();
    std::mutex mu;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t c = next++; c < prompts.chunks.size(); c = next++) {
          try {
            run(c);
          } catch (...) {
            std::lock_guard<std::mutex> lock(mu);
            // Report the earliest failing chunk, as a serial run would.
            if (c < failed_chunk) {
              failed_chunk = c;
              failure = std::current_exception();
            }
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }
  return out;
}

ErrorProfile summarize(const ErrorSamples& samples, const EvalOptions& opt) {
  const std::size_t n = samples.errors.dim(0), len = samples.errors.dim(1);
  if (n < 2) throw ConfigError("a profile needs at least 2 prompts");
  ErrorProfile p;
  p.task = samples.task;
  p.predictor = samples.predictor;
  p.checkpoint_step = samples.checkpoint_step;
  p.n_prompts = n;
  p.mean.resize(len);
  p.ci_low.resize(len);
  p.ci_high.resize(len);
  const double nd = static_cast<double>(n);
  for (std::size_t i = 0; i < len; ++i) {
    double sum = 0;
    for (std::size_t k = 0; k < n; ++k) sum += samples.errors[k * len + i];
    const double mean = sum / nd;
    p.mean[i] = mean;
    if (opt.ci == CiMethod::kNormal) {
      double sq = 0;
      for (std::size_t k = 0; k < n; ++k) {
        const double e = samples.errors[k * len + i] - mean;
        sq += e * e;
      }
      const double half = kCiZ99 * std::sqrt(sq / (nd - 1)) / std::sqrt(nd);
      p.ci_low[i] = mean - half;
      p.ci_high[i] = mean + half;
    } else {
      if (opt.bootstrap_resamples < 2) throw ConfigError("bootstrap needs at least 2 resamples");
      RngStream rng(opt.bootstrap_seed, i);
      std::vector<double> means(opt.bootstrap_resamples);
      for (double& m : means) {
        double s = 0;
        for (std::size_t k = 0; k < n; ++k) {
          s += samples.errors[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1)) * len + i];
        }
        m = s / nd;
      }
      std::sort(means.begin(), means.end());
      const auto at = [&](double q) {
        return means[static_cast<std::size_t>(q * static_cast<double>(means.size() - 1))];
      };
      p.ci_low[i] = std::min(mean, at(0.005));
      p.ci_high[i] = std::max(mean, at(0.995));
    }
  }
  return p;
}

ErrorProfile error_profile(const Predictor& predictor, const TaskSpec& spec, RngStream& rng,
                           const EvalOptions& opt) {
  const PromptSet set = sample_prompts(spec, opt.n_prompts, rng, opt.chunk);
  return summarize(evaluate(predictor, set, opt.threads), opt);
}

RegressionScore regression_score(const std::vector<double>& model, const std::vector<double>& base,
                                 const std::vector<double>& zero, std::size_t begin) {
  if (model.size() != base.size() || model.size() != zero.size()) {
    throw ShapeError("regression_score: profiles of different lengths");
  }
  if (begin >= model.size()) throw ConfigError("regression_score: start index past the profile");
  RegressionScore s;
  s.begin = begin;
  double zero_sum = 0;
  for (std::size_t i = begin; i < model.size(); ++i) {
    s.numerator += model[i] - zero[i];
    s.denominator += base[i] - zero[i];
    zero_sum += zero[i];
  }
  s.valid = std::abs(s.denominator) >= 1e-9 * zero_sum && s.denominator != 0;
  s.value = s.valid ? s.numerator / s.denominator : std::numeric_limits<double>::quiet_NaN();
  return s;
}

RegressionScore regression_score(const ErrorProfile& model, const ErrorProfile& base,
                                 const ErrorProfile& zero, std::size_t begin) {
  check_same_shape(model, base, "regression_score");
  check_same_shape(model, zero, "regression_score");
  return regression_score(model.mean, base.mean, zero.mean, begin);
}

std::string format_score_report(const RegressionScore& score,
                                const std::map<std::string, std::string>& provenance) {
  std::ostringstream out;
  out << "S = " << (score.valid ? num(score.value) : std::string("invalid")) << "\n"
      << "numerator = " << num(score.numerator) << "\n"
      << "denominator = " << num(score.denominator) << "\n"
      << "valid = " << (score.valid ? "true" : "false") << "\n"
      << "begin = " << score.begin << "\n";
  for (const auto& [k, v] : provenance) out << k << " = " << v << "\n";
  return out.str();
}

ErrorProfile difference_profile(const ErrorSamples& a, const ErrorSamples& b) {
  if (a.task != b.task) throw ConfigError("difference_profile: task " + a.task + " vs " + b.task);
  if (a.errors.shape() != b.errors.shape()) {
    throw ShapeError("difference_profile: paired samples " + shape_str(a.errors.shape()) + " vs " +
                     shape_str(b.errors.shape()));
  }
  ErrorSamples d;
  d.task = a.task;
  d.predictor = a.predictor + " - " + b.predictor;
  d.errors = NdArray<double>(a.errors.shape());
  for (std::size_t k = 0; k < d.errors.size(); ++k) d.errors[k] = a.errors[k] - b.errors[k];
  return summarize(d);
}

ErrorProfile difference_profile(const ErrorProfile& a, const ErrorProfile& b) {
  check_same_shape(a, b, "difference_profile");
  ErrorProfile d;
  d.task = a.task;
  d.predictor = a.predictor + " - " + b.predictor;
  d.n_prompts = std::min(a.n_prompts, b.n_prompts);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double ha = a.ci_high[i] - a.mean[i], hb = b.ci_high[i] - b.mean[i];
    const double la = a.mean[i] - a.ci_low[i], lb = b.mean[i] - b.ci_low[i];
    const double delta = a.mean[i] - b.mean[i];
    // Upper end widens with a's upper and b's lower half-widths (and vice versa).
    d.mean.push_back(delta);
    d.ci_low.push_back(delta - std::sqrt(la * la + hb * hb));
    d.ci_high.push_back(delta + std::sqrt(ha * ha + lb * lb));
  }
  return d;
}

std::vector<ErrorProfile> checkpoint_sweep(const std::vector<fs::path>& checkpoints,
                                           const TaskSpec& spec, RngStream& rng,
                                           const EvalOptions& opt) {
  if (checkpoints.empty()) throw ConfigError("checkpoint_sweep: no checkpoints");
  std::vector<std::shared_ptr<const CheckpointedModel>> models;
  for (const auto& path : checkpoints) {
    models.push_back(std::make_shared<CheckpointedModel>(path));
    const auto& s0 = models.front()->spec();
    const auto& s = models.back()->spec();
    if (s.variant_id != s0.variant_id || s.n_layers != s0.n_layers ||
        s.input_dim != s0.input_dim || s.output_dim != s0.output_dim ||
        s.max_points != s0.max_points) {
      throw ConfigError("checkpoint_sweep: " + path.string() + " has a different architecture than " +
                        checkpoints.front().string());
    }
  }
  const PromptSet set = sample_prompts(spec, opt.n_prompts, rng, opt.chunk);
  std::vector<ErrorProfile> out;
  for (std::size_t c = 0; c < models.size(); ++c) {
    const auto pred = model_predictor(models[c], checkpoints[c].filename().string());
    out.push_back(summarize(evaluate(pred, set, opt.threads), opt));
  }
  return out;
}

ErrorProfile cross_task_eval(const fs::path& checkpoint, const TaskSpec& spec, RngStream& rng,
                             const EvalOptions& opt) {
  auto model = std::make_shared<const CheckpointedModel>(checkpoint);
  const auto& s = model->spec();
  if (s.input_dim != spec.input_dim || s.output_dim != spec.output_dim()) {
    throw ShapeError("cross_task_eval: checkpoint is " + std::to_string(s.input_dim) + " -> " +
                     std::to_string(s.output_dim) + ", task " + spec.name() + " is " +
                     std::to_string(spec.input_dim) + " -> " + std::to_string(spec.output_dim()));
  }
  return error_profile(model_predictor(model, checkpoint.filename().string()), spec, rng, opt);
}

std::string profiles_csv(const std::vector<ErrorProfile>& profiles) {
  std::string out =
      "task,predictor,checkpoint_step,context_index,mean_sq_err,ci_low,ci_high,n_prompts\n";
  for (const auto& p : profiles) {
    p.validate();
    const std::string head = csv_field(p.task) + "," + csv_field(p.predictor) + "," +
                             (p.checkpoint_step ? std::to_string(*p.checkpoint_step) : "") + ",";
    for (std::size_t i = 0; i < p.size(); ++i) {
      out += head + std::to_string(i) + "," + num(p.mean[i]) + "," + num(p.ci_low[i]) + "," +
             num(p.ci_high[i]) + "," + std::to_string(p.n_prompts) + "\n";
    }
  }
  return out;
}

void write_profiles_csv(const fs::path& path, const std::vector<ErrorProfile>& profiles) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << profiles_csv(profiles);
}

std::vector<ErrorProfile> read_profiles_csv(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open profile CSV " + path.string());
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "task,predictor,checkpoint_step,context_index,mean_sq_err,ci_low,ci_high,n_prompts") {
    throw ConfigError(path.string() + ": unexpected header '" + line + "'");
  }
  std::vector<ErrorProfile> out;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    const std::string where = path.string() + ":" + std::to_string(row);
    if (f.size() != 8) throw ConfigError(where + ": expected 8 fields, got " + std::to_string(f.size()));
    std::optional<std::size_t> step;
    if (!f[2].empty()) step = parse_count(f[2], where);
    const std::size_t index = parse_count(f[3], where);
    if (out.empty() || out.back().task != f[0] || out.back().predictor != f[1] ||
        out.back().checkpoint_step != step) {
      ErrorProfile p;
      p.task = f[0];
      p.predictor = f[1];
      p.checkpoint_step = step;
      p.n_prompts = parse_count(f[7], where);
      out.push_back(std::move(p));
    }
    ErrorProfile& p = out.back();
    if (index != p.size()) {
      throw ConfigError(where + ": context_index " + std::to_string(index) + ", expected " +
                        std::to_string(p.size()));
    }
    p.mean.push_back(parse_num(f[4], where));
    p.ci_low.push_back(parse_num(f[5], where));
    p.ci_high.push_back(parse_num(f[6], where));
  }
  for (const auto& p : out) p.validate();
  return out;
}

}  // namespace hicl
