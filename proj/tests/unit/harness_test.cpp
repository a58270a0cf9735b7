#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "hicl/harness/run.hpp"
#include "hicl/harness/verify.hpp"
#include "hicl/models/checkpoint.hpp"

using namespace hicl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() /
                     ("hicl_harness_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

ExperimentConfig tiny(const fs::path& out) {
  ExperimentConfig c = parse_config_text(R"(
task: {name: linear, input_dim: 4, n_points: 9}
model: {variant: "1", n_layers: 2, embed_dim: 16, n_heads: 2}
train: {steps: 12, batch_size: 4, checkpoint_every: 5, log_interval: 4}
eval: {n_prompts: 32}
)");
  c.output_dir = out.string();
  return c;
}

struct Cli {
  int status;
  std::string out;
};

Cli cli(const std::string& args) {
  const std::string cmd = std::string(HICL_CLI) + " " + args + " 2>/dev/null";
  FILE* f = ::popen(cmd.c_str(), "r");
  REQUIRE(f);
  std::string out;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) out.append(buf, n);
  const int st = ::pclose(f);
  return {WIFEXITED(st) ? WEXITSTATUS(st) : -1, out};
}

ErrorProfile flat(const std::string& who, double v, std::size_t n = 5) {
  ErrorProfile p;
  p.task = "linear";
  p.predictor = who;
  p.mean.assign(n, v);
  p.ci_low.assign(n, v - 0.5);
  p.ci_high.assign(n, v + 0.25);
  p.n_prompts = 100;
  return p;
}

}  // namespace

TEST_CASE("config defaults follow the task") {
  CHECK(parse_config_text("task: {name: sparse-parity}").train.adam.learning_rate == 4e-4);
  CHECK(parse_config_text("task: {name: sparse-parity}").train.steps == 200000);
  const auto m = parse_config_text("task: {name: vector-mqar}");
  CHECK(m.block.embed_dim == 128);
  CHECK(m.model.n_layers == 2);
  CHECK(m.train.adam.learning_rate == 2e-4);
  for (const char* t : {"linear", "sparse-linear", "mlp2", "decision-tree"}) {
    CHECK(parse_config_text(std::string("task: {name: ") + t + "}").train.adam.learning_rate == 1e-4);
  }
  const auto explicit_lr =
      parse_config_text("task: {name: sparse-parity}\ntrain: {learning_rate: 0.003}");
  CHECK(explicit_lr.train.adam.learning_rate == 0.003);
  CHECK(explicit_lr.train.steps == 200000);
}

TEST_CASE("config round trip") {
  for (TaskKind k : all_task_kinds()) {
    const auto c = default_config(k);
    CHECK(parse_config_text(write_config(c)) == c);
  }
  auto c = tiny("x");
  c.train.adam.weight_decay = 0.01;
  c.train.adam.grad_clip = 1.5;
  c.train.curriculum.enabled = false;
  c.eval.ci = CiMethod::kBootstrap;
  c.eval.baseline.kind = BaselineKind::kLasso;
  c.eval.baseline.lasso_alpha = 0.1 + 0.2;  // not exactly representable in short form
  c.model.variant_id = "2.3";
  c.block.rope_base = 500.0;
  CHECK(parse_config_text(write_config(c)) == c);
  CHECK(config_hash(c) == config_hash(parse_config_text(write_config(c))));
  auto d = c;
  d.train.seed = 1;
  CHECK(config_hash(c) != config_hash(d));
  d = c;
  d.output_dir = "elsewhere";
  CHECK(config_hash(c) == config_hash(d));
}

TEST_CASE("config errors name the field") {
  auto message = [](const std::string& text) {
    try {
      parse_config_text(text, "f.yaml");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(message("task: {name: linear}\ntrain: {learning_rate: 1e-4x}").find("train.learning_rate") !=
        std::string::npos);
  CHECK(message("task: {name: linear}\ntrain: {steps: -3}").find("train.steps") != std::string::npos);
  CHECK(message("task: {name: linear}\ntrain: {curriculum: {intervl: 5}}")
            .find("train.curriculum.intervl: unknown key") != std::string::npos);
  CHECK(message("task: {name: linear}\nbogus: 1").find("bogus: unknown key") != std::string::npos);
  CHECK(message("task: {name: cubic}").find("task.name") != std::string::npos);
  CHECK(message("task: {name: linear}\neval: {ci: wide}").find("eval.ci") != std::string::npos);
  CHECK_THROWS_AS(parse_config("/nonexistent/c.yaml"), ConfigError);
}

TEST_CASE("zero steps writes only the initial checkpoint") {
  auto c = tiny(scratch("zero"));
  c.train.steps = 0;
  const RunRecord r = run_training(c);
  REQUIRE(r.checkpoints.size() == 1);
  CHECK(r.checkpoints[0] == "checkpoints/step_00000000");
  CHECK(r.losses.empty());
  CHECK(fs::exists(fs::path(c.output_dir) / "config.yaml"));
  CHECK(slurp(fs::path(c.output_dir) / "loss.csv") == "step,loss\n");
}

TEST_CASE("training records, checkpoints and determinism") {
  const auto a = tiny(scratch("a")), b = tiny(scratch("b"));
  const RunRecord ra = run_training(a), rb = run_training(b);
  CHECK(ra.losses.size() == a.train.steps / a.train.log_interval);
  CHECK(ra.losses.back().step == 12);
  std::vector<std::string> want = {"checkpoints/step_00000000", "checkpoints/step_00000005",
                                   "checkpoints/step_00000010", "checkpoints/step_00000012"};
  CHECK(ra.checkpoints == want);
  CHECK(ra.config_hash == config_hash(parse_config(fs::path(a.output_dir) / "config.yaml")));
  CHECK(parse_config(fs::path(a.output_dir) / "config.yaml") == a);

  CHECK(slurp(fs::path(a.output_dir) / "loss.csv") == slurp(fs::path(b.output_dir) / "loss.csv"));
  for (const auto& ck : ra.checkpoints) {
    for (const auto& e : fs::directory_iterator(fs::path(a.output_dir) / ck)) {
      CHECK(slurp(e.path()) == slurp(fs::path(b.output_dir) / ck / e.path().filename()));
    }
  }
  CheckpointMeta meta;
  load_checkpoint<float>(fs::path(a.output_dir) / ra.checkpoints.back(), &meta);
  CHECK(meta.step == 12);

  auto c = tiny(scratch("c"));
  c.train.seed = 5;
  run_training(c);
  CHECK(slurp(fs::path(a.output_dir) / "loss.csv") != slurp(fs::path(c.output_dir) / "loss.csv"));
}

TEST_CASE("non-finite loss aborts and keeps the last checkpoint") {
  auto c = tiny(scratch("nan"));
  c.train.adam.learning_rate = 1e36;
  c.train.steps = 50;
  c.train.checkpoint_every = 1;
  bool threw = false;
  try {
    run_training(c);
  } catch (const NonFiniteError& e) {
    threw = true;
    CHECK(std::string(e.what()).find("last checkpoint checkpoints/step_") != std::string::npos);
  }
  REQUIRE(threw);
  const std::string record = slurp(fs::path(c.output_dir) / "run.json");
  CHECK(record.find("\"aborted\": true") != std::string::npos);
  CHECK(fs::exists(fs::path(c.output_dir) / "checkpoints" / "step_00000001"));
}

TEST_CASE("run_eval") {
  const auto dir = scratch("eval");
  auto c = tiny(dir / "run");
  c.train.steps = 5;
  run_training(c);
  const fs::path ck = dir / "run" / "checkpoints" / "step_00000005";

  SUBCASE("least-squares baseline matches the baselines module") {
    const EvalResult r = run_eval(c, ck, dir / "ls");
    RngStream rng(c.eval.seed, 0);
    const PromptSet prompts = sample_prompts(c.task, c.eval.n_prompts, rng);
    auto base = std::make_shared<const Baseline>(c.eval.baseline, c.eval.seed ^ 0x9e3779b97f4a7c15ull);
    const ErrorProfile direct = summarize(evaluate(baseline_predictor(base), prompts));
    CHECK(direct.mean == r.baseline.mean);
    CHECK(direct.ci_low == r.baseline.ci_low);
    CHECK(r.score.valid);
    const auto csv = read_profiles_csv(dir / "ls" / "profiles.csv");
    REQUIRE(csv.size() == 3);
    CHECK(csv[1].mean == r.baseline.mean);
    CHECK(slurp(dir / "ls" / "score.txt").rfind("S = ", 0) == 0);
  }
  SUBCASE("zero baseline is flagged invalid") {
    c.eval.baseline.kind = BaselineKind::kZero;
    const EvalResult r = run_eval(c, ck, dir / "z");
    CHECK_FALSE(r.score.valid);
    CHECK(std::isnan(r.score.value));
    CHECK(slurp(dir / "z" / "score.txt").rfind("S = invalid\n", 0) == 0);
  }
  SUBCASE("checkpoint scored against itself") {
    c.eval.baseline.kind = BaselineKind::kCheckpointedModel;
    c.eval.baseline.checkpoint_path = ck.string();
    const EvalResult r = run_eval(c, ck, dir / "self");
    REQUIRE(r.score.valid);
    CHECK(r.score.value == 1.0);
  }
  SUBCASE("incompatible task") {
    auto other = c;
    other.task.input_dim = 6;
    other.model.input_dim = 6;
    CHECK_THROWS_AS(run_eval(other, ck, dir / "bad"), ShapeError);
  }
}

TEST_CASE("plot export") {
  const auto a = flat("model", 2.0), b = flat("least-squares", 1.0);
  const std::string svg = export_plot({a, b});
  CHECK(svg == export_plot({a, b}));
  CHECK(svg.rfind("<svg", 0) == 0);
  // Band vertices are the CSV columns verbatim: lows forward, highs back.
  CHECK(svg.find("points=\"0,1.5 1,1.5 2,1.5 3,1.5 4,1.5 4,2.25 3,2.25 2,2.25 1,2.25 0,2.25\"") !=
        std::string::npos);
  CHECK(svg.find(">least-squares<") != std::string::npos);
  CHECK_THROWS_AS(export_plot({a, flat("short", 1.0, 4)}), ShapeError);
  CHECK_THROWS(export_plot({}));
}

TEST_CASE("gradient suite runs block cases") {
  GradcheckSuiteOptions opt;
  opt.seeds = 2;
  opt.variants = false;
  std::size_t seen = 0;
  const auto cases = run_gradcheck_suite(opt, [&](const GradcheckCase&) { ++seen; });
  CHECK(cases.size() == 14);
  CHECK(seen == 14);
  for (const auto& c : cases) CHECK_MESSAGE(c.report.pass, c.name);
}

TEST_CASE("cli") {
  const Cli list = cli("list-archs");
  CHECK(list.status == 0);
  CHECK(std::count(list.out.begin(), list.out.end(), '\n') == 12);
  CHECK(list.out.rfind("1\tGPT-2\t", 0) == 0);
  CHECK(list.out.find("\n3\tMamba\t") != std::string::npos);

  CHECK(cli("").status == 2);
  CHECK(cli("fly").status == 2);
  CHECK(cli("list-archs --wings").status == 2);
  CHECK(cli("train --precision 16").status == 2);
  CHECK(cli("train --config /nonexistent.yaml").status == 2);
  CHECK(cli("train").status == 1);  // parses, then lacks a config

  const auto dir = scratch("cli");
  write_profiles_csv(dir / "p.csv", {flat("m", 1.0), flat("b", 1.0), flat("zero", 4.0)});
  const Cli s = cli("score " + (dir / "p.csv").string());
  CHECK(s.status == 0);
  CHECK(s.out.rfind("S = 1.000\n", 0) == 0);
  write_profiles_csv(dir / "m.csv", {flat("m", 3.0)});
  write_profiles_csv(dir / "b.csv", {flat("b", 2.0)});
  write_profiles_csv(dir / "z.csv", {flat("z", 4.0)});
  CHECK(cli("score " + (dir / "m.csv").string() + " " + (dir / "b.csv").string() + " " +
            (dir / "z.csv").string())
            .out.rfind("S = 0.500\n", 0) == 0);
  CHECK(cli("score " + (dir / "m.csv").string() + " " + (dir / "b.csv").string()).status == 1);

  const Cli cmp = cli("compare " + (dir / "m.csv").string() + " " + (dir / "b.csv").string() +
                      " --svg " + (dir / "d.svg").string());
  CHECK(cmp.status == 0);
  CHECK(cmp.out.find("linear,m - b,,0,1,") != std::string::npos);
  CHECK(fs::exists(dir / "d.svg"));

  std::ofstream(dir / "c.yaml") << "task: {name: linear, input_dim: 3, n_points: 4}\n";
  const Cli smp = cli("sample --config " + (dir / "c.yaml").string() + " --batch 2 --seed 9");
  CHECK(smp.status == 0);
  CHECK(smp.out.rfind("prompt,point,x_0,x_1,x_2,y_0\n", 0) == 0);
  CHECK(std::count(smp.out.begin(), smp.out.end(), '\n') == 9);
  CHECK(smp.out == cli("sample --config " + (dir / "c.yaml").string() + " --batch 2 --seed 9").out);
}
