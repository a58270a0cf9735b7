// hicl: train, evaluate and score in-context regression models.
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "hicl/harness/run.hpp"
#include "hicl/harness/verify.hpp"

namespace fs = std::filesystem;
using namespace hicl;

namespace {

constexpr int kUsageError = 2;

struct Common {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> precision;
  std::optional<std::size_t> threads;
};

void add_common(CLI::App* cmd, Common& c, bool checkpoint) {
  cmd->add_option("--config", c.config, "experiment config (YAML)")->check(CLI::ExistingFile);
  if (checkpoint) cmd->add_option("--checkpoint", c.checkpoint, "checkpoint directory");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--seed", c.seed, "overrides the train or eval seed");
  cmd->add_option("--precision", c.precision, "32 or 64")->check(CLI::IsMember({32, 64}));
  cmd->add_option("--threads", c.threads, "evaluation worker threads")->check(CLI::PositiveNumber);
}

ExperimentConfig load_config(const Common& c) {
  if (c.config.empty()) throw ConfigError("--config is required");
  return parse_config(c.config);
}

std::string fixed3(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

void print_score(const RegressionScore& s) {
  if (s.valid) {
    std::cout << "S = " << fixed3(s.value) << "\n";
  } else {
    std::cout << "S = invalid (baseline error equals zero-estimator error)\n";
  }
}

int cmd_train(Common c) {
  auto config = load_config(c);
  if (!c.out.empty()) config.output_dir = c.out;
  if (c.seed) config.train.seed = *c.seed;
  if (c.precision) config.train.precision = *c.precision;
  config.validate();
  TrainHooks hooks;
  hooks.on_log = [](const LossEntry& e) {
    std::cout << "step " << e.step << " loss " << e.loss << "\n" << std::flush;
  };
  const RunRecord r = run_training(config, hooks);
  std::cout << "wrote " << r.checkpoints.size() << " checkpoints to " << config.output_dir << " ("
            << r.wall_seconds << " s)\n";
  return 0;
}

int cmd_eval(Common c) {
  auto config = load_config(c);
  if (c.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  if (c.seed) config.eval.seed = *c.seed;
  if (c.threads) config.eval.threads = *c.threads;
  const fs::path out = c.out.empty() ? fs::path(config.output_dir) / "eval" : fs::path(c.out);
  const EvalResult r = run_eval(config, c.checkpoint, out);
  print_score(r.score);
  std::cout << "wrote " << (out / "profiles.csv").string() << "\n";
  return 0;
}

// A single file supplies all its profiles; with several files each supplies
// its first one.
std::vector<ErrorProfile> read_all(const std::vector<std::string>& files) {
  if (files.size() == 1) return read_profiles_csv(files[0]);
  std::vector<ErrorProfile> all;
  for (const auto& f : files) {
    auto p = read_profiles_csv(f);
    if (p.empty()) throw ConfigError(f + ": no profiles");
    all.push_back(std::move(p.front()));
  }
  return all;
}

// Model, baseline and zero, in that order.
int cmd_score(const std::vector<std::string>& files, std::size_t begin) {
  const auto p = read_all(files);
  if (p.size() != 3) {
    throw ConfigError("score: expected 3 profiles (model, baseline, zero), got " +
                      std::to_string(p.size()));
  }
  const auto s = regression_score(p[0], p[1], p[2], begin);
  print_score(s);
  std::cout << "numerator = " << s.numerator << "\ndenominator = " << s.denominator << "\n";
  return 0;
}

int cmd_compare(const std::vector<std::string>& files, const std::string& out,
                const std::string& svg) {
  const auto p = read_all(files);
  if (p.size() != 2) {
    throw ConfigError("compare: expected 2 profiles, got " + std::to_string(p.size()));
  }
  const ErrorProfile d = difference_profile(p[0], p[1]);
  if (out.empty()) {
    std::cout << profiles_csv({d});
  } else {
    write_profiles_csv(out, {d});
  }
  if (!svg.empty()) {
    PlotStyle style;
    style.title = d.task + ": " + d.predictor;
    style.y_label = "difference in squared error";
    std::ofstream(svg, std::ios::binary) << export_plot({d}, style);
  }
  return 0;
}

// A directory of step_* checkpoints expands to all of them in step order.
std::vector<fs::path> expand_checkpoints(const std::vector<std::string>& args) {
  std::vector<fs::path> out;
  for (const auto& a : args) {
    const fs::path p(a);
    if (fs::exists(p / "manifest.json")) {
      out.push_back(p);
      continue;
    }
    if (!fs::is_directory(p)) throw ConfigError("not a checkpoint or directory: " + a);
    std::vector<fs::path> found;
    for (const auto& e : fs::directory_iterator(p)) {
      if (e.is_directory() && e.path().filename().string().rfind("step_", 0) == 0) {
        found.push_back(e.path());
      }
    }
    std::sort(found.begin(), found.end());
    if (found.empty()) throw ConfigError("no step_* checkpoints under " + a);
    out.insert(out.end(), found.begin(), found.end());
  }
  return out;
}

int cmd_sweep(Common c, const std::vector<std::string>& checkpoints) {
  auto config = load_config(c);
  if (c.seed) config.eval.seed = *c.seed;
  if (c.threads) config.eval.threads = *c.threads;
  const auto paths = expand_checkpoints(checkpoints);
  EvalOptions opt;
  opt.n_prompts = config.eval.n_prompts;
  opt.threads = config.eval.threads;
  opt.ci = config.eval.ci;
  opt.bootstrap_resamples = config.eval.bootstrap_resamples;
  opt.bootstrap_seed = config.eval.seed;
  RngStream rng(config.eval.seed, 0);
  const auto profiles = checkpoint_sweep(paths, config.task, rng, opt);
  const fs::path out = c.out.empty() ? fs::path(config.output_dir) / "sweep" : fs::path(c.out);
  fs::create_directories(out);
  write_profiles_csv(out / "sweep.csv", profiles);
  PlotStyle style;
  style.title = config.task.name() + " checkpoints";
  std::ofstream(out / "sweep.svg", std::ios::binary) << export_plot(profiles, style);
  for (const auto& p : profiles) {
    double total = 0;
    for (double v : p.mean) total += v;
    std::cout << "step " << p.checkpoint_step.value_or(0) << " mean " << total / p.size() << "\n";
  }
  std::cout << "wrote " << (out / "sweep.csv").string() << "\n";
  return 0;
}

// Rows are (prompt, point); columns x_0.., y_0...
int cmd_sample(Common c, std::size_t batch, std::optional<std::size_t> step) {
  auto config = load_config(c);
  if (c.seed) config.train.seed = *c.seed;
  RngStream rng(config.train.seed, 1);
  const CurriculumState state = step ? curriculum_state(*step, config.train.curriculum, config.task)
                                     : full_state(config.task);
  const PromptBatch b = sample_batch(config.task, batch, rng, state).prompts;
  std::ostringstream csv;
  csv << "prompt,point";
  for (std::size_t j = 0; j < b.input_dim(); ++j) csv << ",x_" << j;
  for (std::size_t j = 0; j < b.output_dim(); ++j) csv << ",y_" << j;
  csv << "\n";
  csv.precision(17);
  for (std::size_t p = 0; p < b.batch(); ++p) {
    for (std::size_t n = 0; n < b.n_points(); ++n) {
      csv << p << "," << n;
      for (std::size_t j = 0; j < b.input_dim(); ++j) csv << "," << b.xs.at({p, n, j});
      for (std::size_t j = 0; j < b.output_dim(); ++j) csv << "," << b.ys.at({p, n, j});
      csv << "\n";
    }
  }
  if (c.out.empty()) {
    std::cout << csv.str();
  } else {
    std::ofstream(c.out, std::ios::binary) << csv.str();
  }
  return 0;
}

int cmd_gradcheck(bool all, std::size_t seeds, bool verbose) {
  GradcheckSuiteOptions opt;
  opt.seeds = seeds;
  opt.variants = all;
  std::size_t failed = 0;
  std::map<std::string, double> worst;
  const auto cases = run_gradcheck_suite(opt, [&](const GradcheckCase& c) {
    worst[c.name] = std::max(worst[c.name], c.report.max_relative_error);
    if (!c.report.pass) {
      ++failed;
      std::cout << "FAIL " << c.name << " seed " << c.seed << ": rel err "
                << c.report.max_relative_error << " at " << c.report.worst_parameter << "["
                << c.report.worst_index << "] analytic " << c.report.worst_analytic << " numeric "
                << c.report.worst_numeric << "\n";
    } else if (verbose) {
      std::cout << "ok   " << c.name << " seed " << c.seed << " " << c.report.max_relative_error
                << "\n";
    }
  });
  for (const auto& [name, err] : worst) std::cout << name << ": worst rel err " << err << "\n";
  std::cout << cases.size() - failed << "/" << cases.size() << " cases passed\n";
  return failed == 0 ? 0 : 1;
}

int cmd_list_archs() {
  for (const auto& v : variant_table()) {
    std::cout << v.id << "\t" << v.name << "\tpos=" << to_string(v.pos)
              << " ffn=" << to_string(v.ffn) << " norm=" << to_string(v.norm)
              << " mixer=" << to_string(v.attn) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"In-context regression: train, evaluate and score sequence models", "hicl"};
  app.require_subcommand(1);

  Common train_opt, eval_opt, sweep_opt, sample_opt;
  auto* train = app.add_subcommand("train", "train a model from a config");
  add_common(train, train_opt, false);

  auto* eval = app.add_subcommand("eval", "model, baseline and zero profiles plus the score");
  add_common(eval, eval_opt, true);

  std::vector<std::string> score_files;
  std::size_t score_begin = 0;
  auto* score = app.add_subcommand("score", "recompute S from profile CSVs");
  score->add_option("profiles", score_files, "model.csv base.csv zero.csv, or one file with all three")
      ->required()
      ->check(CLI::ExistingFile);
  score->add_option("--begin", score_begin, "first context length in the sums");

  std::vector<std::string> compare_files;
  std::string compare_out, compare_svg;
  auto* compare = app.add_subcommand("compare", "difference profile A - B");
  compare->add_option("profiles", compare_files, "a.csv b.csv")->required()->check(CLI::ExistingFile);
  compare->add_option("--out", compare_out, "CSV path (default stdout)");
  compare->add_option("--svg", compare_svg, "also write a plot");

  std::vector<std::string> sweep_ckpts;
  auto* sweep = app.add_subcommand("sweep", "profiles for a series of checkpoints");
  add_common(sweep, sweep_opt, false);
  sweep->add_option("--checkpoint", sweep_ckpts, "checkpoint, or a directory of step_* checkpoints")
      ->required();

  std::size_t sample_batch_size = 4;
  std::optional<std::size_t> sample_step;
  auto* sample = app.add_subcommand("sample", "dump task prompts as CSV");
  add_common(sample, sample_opt, false);
  sample->add_option("--batch", sample_batch_size, "prompts")->check(CLI::PositiveNumber);
  sample->add_option("--step", sample_step, "curriculum step (default: full size)");

  bool gc_all = false, gc_verbose = false;
  std::size_t gc_seeds = 10;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gradcheck->add_flag("--all", gc_all, "also check every architecture variant end to end");
  gradcheck->add_option("--seeds", gc_seeds, "seeds per case")->check(CLI::PositiveNumber);
  gradcheck->add_flag("-v,--verbose", gc_verbose);

  auto* list_archs = app.add_subcommand("list-archs", "print the architecture variants");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "hicl: " << e.what() << "\n\n" << app.help();
    return kUsageError;
  }

  try {
    if (*train) return cmd_train(train_opt);
    if (*eval) return cmd_eval(eval_opt);
    if (*score) return cmd_score(score_files, score_begin);
    if (*compare) return cmd_compare(compare_files, compare_out, compare_svg);
    if (*sweep) return cmd_sweep(sweep_opt, sweep_ckpts);
    if (*sample) return cmd_sample(sample_opt, sample_batch_size, sample_step);
    if (*gradcheck) return cmd_gradcheck(gc_all, gc_seeds, gc_verbose);
    if (*list_archs) return cmd_list_archs();
  } catch (const std::exception& e) {
    std::cerr << "hicl: " << e.what() << "\n";
    return 1;
  }
  return kUsageError;
}
