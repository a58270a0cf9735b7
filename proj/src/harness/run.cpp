#include "hicl/harness/run.hpp"

#include <chrono>
#include <charconv>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "hicl/error.hpp"
#include "hicl/models/checkpoint.hpp"
#include "hicl/numerics/graph.hpp"
#include "json.hpp"

namespace hicl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << text;
    if (!out) throw Error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

json record_json(const RunRecord& r) {
  json losses = json::array();
  for (const auto& e : r.losses) losses.push_back({e.step, e.loss});
  return {{"format_version", r.format_version},
          {"config_hash", r.config_hash},
          {"started_at", r.started_at},
          {"wall_seconds", r.wall_seconds},
          {"aborted", r.aborted},
          {"abort_reason", r.abort_reason},
          {"checkpoints", r.checkpoints},
          {"losses", losses}};
}

template <typename T>
RunRecord train(const ExperimentConfig& c, const TrainHooks& hooks) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path out = c.output_dir;
  fs::create_directories(out / "checkpoints");
  write_text(out / "config.yaml", write_config(c));

  RunRecord rec;
  rec.config_hash = config_hash(c);
  rec.started_at = utc_now();
  auto flush = [&] {
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_text(out / "loss.csv", loss_log_csv(rec.losses));
    write_text(out / "run.json", record_json(rec).dump(2) + "\n");
  };

  RngStream init(c.train.seed, 0), data(c.train.seed, 1);
  Model<T> model = Model<T>::build(c.model, c.block, init);
  AdamState<T> adam = make_adam_state(model.params(), c.train.adam);
  const json task_json = {{"name", c.task.name()},
                          {"input_dim", c.task.input_dim},
                          {"n_points", c.task.n_points},
                          {"k", c.task.k},
                          {"width", c.task.width},
                          {"depth", c.task.depth}};
  auto save = [&](std::size_t step) {
    const std::string name = checkpoint_dir_name(step);
    save_checkpoint(out / "checkpoints" / name, model,
                    {step, data.state(), {{"task", task_json}, {"config_hash", rec.config_hash}}});
    rec.checkpoints.push_back((fs::path("checkpoints") / name).string());
  };
  save(0);
  flush();

  double acc = 0;
  std::size_t count = 0;
  for (std::size_t step = 0; step < c.train.steps; ++step) {
    const CurriculumState state = c.train.curriculum.enabled
                                      ? curriculum_state(step, c.train.curriculum, c.task)
                                      : full_state(c.task);
    const TaskBatch batch = sample_batch(c.task, c.train.batch_size, data, state);
    double loss = 0;
    try {
      Graph<T> g;
      const VarMap<T> vars = model.bind(g);
      const Var<T> l = prompt_loss(model.predict(g, vars, batch.prompts), batch.prompts);
      loss = static_cast<double>(l.value().item());
      if (!std::isfinite(loss)) throw NonFiniteError("loss is " + num(loss));
      adam_step(model.params(), g.backward(l), adam);
    } catch (const NonFiniteError& e) {
      rec.aborted = true;
      rec.abort_reason = "step " + std::to_string(step) + ": " + e.what();
      flush();
      throw NonFiniteError("training aborted at " + rec.abort_reason + "; last checkpoint " +
                               rec.checkpoints.back(),
                           e.node());
    }
    acc += loss;
    ++count;
    if ((step + 1) % c.train.log_interval == 0) {
      rec.losses.push_back({step + 1, acc / static_cast<double>(count)});
      acc = 0;
      count = 0;
      if (hooks.on_log) hooks.on_log(rec.losses.back());
    }
    if ((step + 1) % c.train.checkpoint_every == 0 || step + 1 == c.train.steps) {
      save(step + 1);
      flush();
    }
  }
  flush();
  return rec;
}

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

// Round-number tick spacing covering `span` with about `target` ticks.
double tick_step(double span, int target) {
  const double raw = span / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (m * mag >= raw) return m * mag;
  }
  return 10 * mag;
}

}  // namespace

std::string checkpoint_dir_name(std::size_t step) {
  std::ostringstream s;
  s << "step_" << std::setw(8) << std::setfill('0') << step;
  return s.str();
}

std::string loss_log_csv(const std::vector<LossEntry>& losses) {
  std::string out = "step,loss\n";
  for (const auto& e : losses) out += std::to_string(e.step) + "," + num(e.loss) + "\n";
  return out;
}

RunRecord run_training(const ExperimentConfig& config, const TrainHooks& hooks) {
  config.validate();
  return config.train.precision == 64 ? train<double>(config, hooks) : train<float>(config, hooks);
}

EvalResult run_eval(const ExperimentConfig& config, const fs::path& checkpoint,
                    const fs::path& out_dir) {
  config.validate();
  auto model = std::make_shared<const CheckpointedModel>(checkpoint);
  const auto& arch = model->spec();
  if (arch.input_dim != config.task.input_dim || arch.output_dim != config.task.output_dim()) {
    throw ShapeError("checkpoint " + checkpoint.string() + " maps " +
                     std::to_string(arch.input_dim) + " -> " + std::to_string(arch.output_dim) +
                     " but task " + config.task.name() + " is " +
                     std::to_string(config.task.input_dim) + " -> " +
                     std::to_string(config.task.output_dim()));
  }
  // Distinct seed so baseline randomness never mirrors the prompt stream.
  auto baseline = std::make_shared<const Baseline>(config.eval.baseline,
                                                   config.eval.seed ^ 0x9e3779b97f4a7c15ull);

  EvalOptions opt;
  opt.n_prompts = config.eval.n_prompts;
  opt.threads = config.eval.threads;
  opt.ci = config.eval.ci;
  opt.bootstrap_resamples = config.eval.bootstrap_resamples;
  opt.bootstrap_seed = config.eval.seed;
  RngStream rng(config.eval.seed, 0);
  const PromptSet prompts = sample_prompts(config.task, opt.n_prompts, rng, opt.chunk);

  EvalResult r;
  r.model = summarize(evaluate(model_predictor(model, arch.variant().name), prompts, opt.threads), opt);
  r.baseline = summarize(evaluate(baseline_predictor(baseline), prompts, opt.threads), opt);
  r.zero = summarize(evaluate(zero_predictor(), prompts, opt.threads), opt);
  r.score = regression_score(r.model, r.baseline, r.zero, config.eval.score_begin);

  fs::create_directories(out_dir);
  write_profiles_csv(out_dir / "profiles.csv", {r.model, r.baseline, r.zero});
  std::map<std::string, std::string> prov = {
      {"checkpoint", checkpoint.string()},
      {"checkpoint_step", std::to_string(model->meta().step)},
      {"profiles", (out_dir / "profiles.csv").string()},
      {"task", config.task.name()},
      {"baseline", baseline->id()},
      {"n_prompts", std::to_string(opt.n_prompts)},
      {"eval_seed", std::to_string(config.eval.seed)},
      {"config_hash", config_hash(config)}};
  if (config.eval.baseline.kind == BaselineKind::kLasso) {
    prov["lasso_alpha"] = num(config.eval.baseline.lasso_alpha);
  }
  if (config.eval.baseline.kind == BaselineKind::kNnOracle) {
    prov["nn_steps"] = std::to_string(config.eval.baseline.nn_steps);
    prov["nn_lr"] = num(config.eval.baseline.nn_lr);
    prov["nn_width"] = std::to_string(config.eval.baseline.nn_width);
  }
  write_text(out_dir / "score.txt", format_score_report(r.score, prov));
  PlotStyle style;
  style.title = config.task.name() + ": " + r.model.predictor;
  write_text(out_dir / "profiles.svg", export_plot({r.model, r.baseline, r.zero}, style));
  return r;
}

std::string export_plot(const std::vector<ErrorProfile>& profiles, const PlotStyle& style) {
  if (profiles.empty()) throw ConfigError("export_plot: no profiles");
  const std::size_t n = profiles.front().size();
  double lo = 0, hi = 0;
  for (const auto& p : profiles) {
    p.validate();
    if (p.size() != n) {
      throw ShapeError("export_plot: " + p.predictor + " has " + std::to_string(p.size()) +
                       " context lengths, " + profiles.front().predictor + " has " +
                       std::to_string(n));
    }
    for (std::size_t i = 0; i < n; ++i) {
      lo = std::min(lo, p.ci_low[i]);
      hi = std::max(hi, p.ci_high[i]);
    }
  }
  if (n == 0) throw ShapeError("export_plot: empty profiles");
  if (hi - lo <= 0) hi = lo + 1;
  const double pad = 0.05 * (hi - lo);
  if (lo < 0) lo -= pad;
  hi += pad;
  const double x_max = n > 1 ? static_cast<double>(n - 1) : 1.0;

  const double left = 64, right = 170, top = 36, bottom = 44;
  const double pw = style.width - left - right, ph = style.height - top - bottom;
  const double sx = pw / x_max, sy = ph / (hi - lo);
  auto px = [&](double x) { return left + x * sx; };
  auto py = [&](double y) { return top + ph - (y - lo) * sy; };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << style.width << "\" height=\""
    << style.height << "\" viewBox=\"0 0 " << style.width << " " << style.height << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!style.title.empty()) {
    s << "<text x=\"" << num(left + pw / 2) << "\" y=\"22\" text-anchor=\"middle\" "
      << "font-family=\"sans-serif\" font-size=\"14\">" << xml_escape(style.title) << "</text>\n";
  }
  s << "<g font-family=\"sans-serif\" font-size=\"11\" stroke-width=\"1\">\n";
  const double ys = tick_step(hi - lo, 5);
  for (double y = std::ceil(lo / ys) * ys; y <= hi + 1e-12 * ys; y += ys) {
    const double v = std::abs(y) < 1e-12 * ys ? 0.0 : y;
    s << "<line x1=\"" << num(left) << "\" x2=\"" << num(left + pw) << "\" y1=\"" << num(py(v))
      << "\" y2=\"" << num(py(v)) << "\" stroke=\"#e0e0e0\"/>\n";
    s << "<text x=\"" << num(left - 6) << "\" y=\"" << num(py(v) + 4)
      << "\" text-anchor=\"end\">" << num(v) << "</text>\n";
  }
  const double xs = std::max(1.0, tick_step(x_max, 8));
  for (double x = 0; x <= x_max + 1e-9; x += xs) {
    s << "<text x=\"" << num(px(x)) << "\" y=\"" << num(top + ph + 16)
      << "\" text-anchor=\"middle\">" << num(x) << "</text>\n";
  }
  s << "<rect x=\"" << num(left) << "\" y=\"" << num(top) << "\" width=\"" << num(pw)
    << "\" height=\"" << num(ph) << "\" fill=\"none\" stroke=\"black\"/>\n";
  s << "<text x=\"" << num(left + pw / 2) << "\" y=\"" << num(style.height - 8)
    << "\" text-anchor=\"middle\">context length</text>\n";
  s << "<text transform=\"translate(16 " << num(top + ph / 2)
    << ") rotate(-90)\" text-anchor=\"middle\">" << xml_escape(style.y_label) << "</text>\n";
  s << "</g>\n";

  // Data coordinates: x = context index, y = value.
  s << "<g transform=\"matrix(" << num(sx) << " 0 0 " << num(-sy) << " " << num(left) << " "
    << num(top + ph + lo * sy) << ")\">\n";
  for (std::size_t k = 0; k < profiles.size(); ++k) {
    const auto& p = profiles[k];
    const char* color = kPalette[k % std::size(kPalette)];
    s << "<polygon class=\"ci\" fill=\"" << color << "\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
    for (std::size_t i = 0; i < n; ++i) s << i << "," << num(p.ci_low[i]) << " ";
    for (std::size_t i = n; i-- > 0;) s << i << "," << num(p.ci_high[i]) << (i ? " " : "");
    s << "\"/>\n";
    s << "<polyline class=\"mean\" fill=\"none\" stroke=\"" << color
      << "\" stroke-width=\"1.5\" vector-effect=\"non-scaling-stroke\" points=\"";
    for (std::size_t i = 0; i < n; ++i) s << i << "," << num(p.mean[i]) << (i + 1 < n ? " " : "");
    s << "\"/>\n";
  }
  s << "</g>\n";

  s << "<g font-family=\"sans-serif\" font-size=\"11\">\n";
  for (std::size_t k = 0; k < profiles.size(); ++k) {
    const double y = top + 10 + 18 * static_cast<double>(k);
    s << "<rect x=\"" << num(left + pw + 12) << "\" y=\"" << num(y - 8) << "\" width=\"14\" height=\"10\" fill=\""
      << kPalette[k % std::size(kPalette)] << "\"/>\n";
    s << "<text x=\"" << num(left + pw + 32) << "\" y=\"" << num(y) << "\">"
      << xml_escape(profiles[k].predictor) << "</text>\n";
  }
  s << "</g>\n</svg>\n";
  return s.str();
}

}  // namespace hicl
