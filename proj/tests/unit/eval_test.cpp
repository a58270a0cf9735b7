#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "hicl/error.hpp"
#include "hicl/eval/eval.hpp"
#include "hicl/models/checkpoint.hpp"

using namespace hicl;
namespace fs = std::filesystem;

namespace {

ErrorProfile flat(const std::string& id, std::vector<double> mean) {
  ErrorProfile p;
  p.task = "linear";
  p.predictor = id;
  p.ci_low = mean;
  p.ci_high = mean;
  p.mean = std::move(mean);
  p.n_prompts = 2;
  return p;
}

Predictor echo_targets() {
  return {"oracle", [](const PromptBatch& b, std::size_t) { return b.ys; }, std::nullopt};
}

TaskSpec small_linear() {
  TaskSpec s = TaskSpec::defaults(TaskKind::kLinear);
  s.input_dim = 5;
  s.n_points = 11;
  return s;
}

fs::path save_tiny(const fs::path& dir, std::uint64_t seed, bool random_readout, std::size_t step) {
  ArchitectureSpec arch;
  arch.n_layers = 1;
  arch.input_dim = 5;
  arch.max_points = 11;
  BlockConfig cfg;
  cfg.embed_dim = 16;
  RngStream rng(seed, 0);
  auto m = Model<double>::build(arch, cfg, rng);
  if (random_readout) {
    m.params()["read_out.w"] =
        rng_draw(rng, {Distribution::kStandardNormal}, m.params().at("read_out.w").shape());
  }
  save_checkpoint(dir, m, {step});
  return dir;
}

}  // namespace

TEST_CASE("score identities and the hand example") {
  const auto zero = flat("zero", {4, 4});
  const auto base = flat("base", {2, 1});
  const auto model = flat("model", {3, 2});
  CHECK(regression_score(base, base, zero).value == 1.0);
  CHECK(regression_score(zero, base, zero).value == 0.0);
  const auto s = regression_score(model, base, zero);
  CHECK(s.valid);
  CHECK(s.numerator == -3.0);
  CHECK(s.denominator == -5.0);
  CHECK(std::abs(s.value - 0.6) < 1e-12);

  // Adding c to model and base at one context length shifts both sums by c.
  auto m2 = model, b2 = base;
  m2.mean[1] += 0.5;
  b2.mean[1] += 0.5;
  const auto shifted = regression_score(m2, b2, zero);
  CHECK(shifted.numerator - s.numerator == 0.5);
  CHECK(shifted.denominator - s.denominator == 0.5);

  const auto bad = regression_score(model, zero, zero);
  CHECK_FALSE(bad.valid);
  CHECK(std::isnan(bad.value));
  CHECK_FALSE(regression_score(model, flat("b", {4, 4 + 1e-12}), zero).valid);

  const auto tail = regression_score(model, base, zero, 1);
  CHECK(tail.value == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK_THROWS_AS(regression_score(model, base, zero, 2), ConfigError);
  CHECK_THROWS_AS(regression_score(model, flat("x", {1, 2, 3}), zero), ShapeError);
  auto other = base;
  other.task = "mlp2";
  CHECK_THROWS_AS(regression_score(model, other, zero), ConfigError);

  const auto report = format_score_report(s, {{"model", "m.csv"}});
  CHECK(report.find("S = 0.6") == 0);
  CHECK(report.find("valid = true") != std::string::npos);
  CHECK(report.find("model = m.csv") != std::string::npos);
  CHECK(format_score_report(bad, {}).find("S = invalid") == 0);
}

TEST_CASE("normal confidence interval by hand") {
  ErrorSamples s;
  s.task = "linear";
  s.predictor = "p";
  s.errors = NdArray<double>(Shape{4, 2}, {1, 0, 2, 0, 3, 0, 6, 0});
  const auto p = summarize(s);
  // mean 3, sample variance (4 + 1 + 0 + 9) / 3
  const double half = 2.576 * std::sqrt(14.0 / 3.0) / 2.0;
  CHECK(p.mean[0] == 3.0);
  CHECK(p.ci_low[0] == doctest::Approx(3.0 - half).epsilon(1e-15));
  CHECK(p.ci_high[0] == doctest::Approx(3.0 + half).epsilon(1e-15));
  CHECK(p.mean[1] == 0.0);
  CHECK(p.ci_low[1] == 0.0);
  CHECK(p.ci_high[1] == 0.0);

  EvalOptions boot;
  boot.ci = CiMethod::kBootstrap;
  const auto b = summarize(s, boot);
  CHECK(b.ci_low[0] <= 3.0);
  CHECK(b.ci_high[0] >= 3.0);
  CHECK(b.ci_low[0] >= 1.0);
  CHECK(b.ci_high[0] <= 6.0);
  CHECK(summarize(s, boot).ci_low == b.ci_low);

  s.errors = NdArray<double>(Shape{1, 2});
  CHECK_THROWS_AS(summarize(s), ConfigError);
}

TEST_CASE("zero and oracle profiles on the linear task") {
  const TaskSpec spec = TaskSpec::defaults(TaskKind::kLinear);
  EvalOptions opt;
  opt.n_prompts = 10000;
  RngStream r1(1, 0), r2(1, 0);
  const auto zero = error_profile(zero_predictor(), spec, r1, opt);
  const auto oracle = error_profile(echo_targets(), spec, r2, opt);
  REQUIRE(zero.size() == 41);
  // sd of each mean is sqrt(920 / 1e4) ~ 0.3
  double avg = 0;
  for (std::size_t i = 0; i < 41; ++i) {
    avg += zero.mean[i] / 41;
    CHECK(std::abs(zero.mean[i] - 20.0) < 1.5);
    CHECK(zero.ci_low[i] < zero.mean[i]);
    CHECK(oracle.mean[i] == 0.0);
  }
  CHECK(std::abs(avg - 20.0) < 1.0);
  zero.validate();
  CHECK(zero.n_prompts == 10000);

  RngStream r3(1, 0);
  opt.n_prompts = 1;
  CHECK_THROWS_AS(error_profile(zero_predictor(), spec, r3, opt), ConfigError);
}

TEST_CASE("least squares profile interpolates past d") {
  const TaskSpec spec = TaskSpec::defaults(TaskKind::kLinear);
  EvalOptions opt;
  opt.n_prompts = 200;
  RngStream rng(2, 0);
  const auto ls = error_profile(
      baseline_predictor(std::make_shared<Baseline>(BaselineSpec{BaselineKind::kLeastSquares})),
      spec, rng, opt);
  CHECK(ls.predictor == "least-squares");
  for (std::size_t i = 20; i < 41; ++i) CHECK(ls.mean[i] < 1e-8);
  CHECK(ls.mean[0] > 10);
}

TEST_CASE("profiles are deterministic and independent of thread count") {
  const TaskSpec spec = TaskSpec::defaults(TaskKind::kSparseLinear);
  auto lasso = baseline_predictor(std::make_shared<Baseline>(BaselineSpec{BaselineKind::kLasso}));
  EvalOptions one;
  one.n_prompts = 50;
  one.chunk = 7;
  EvalOptions many = one;
  many.threads = 3;
  RngStream a(3, 0), b(3, 0), c(3, 0);
  const auto pa = error_profile(lasso, spec, a, one);
  const auto pb = error_profile(lasso, spec, b, one);
  const auto pc = error_profile(lasso, spec, c, many);
  CHECK(pa.mean == pb.mean);
  CHECK(pa.ci_high == pb.ci_high);
  CHECK(pa.mean == pc.mean);
  CHECK(pa.ci_low == pc.ci_low);
}

TEST_CASE("predictor failures name the prompt") {
  Predictor flaky{"flaky",
                  [](const PromptBatch& b, std::size_t first) {
                    for (std::size_t k = 0; k < b.batch(); ++k) {
                      if (first + k == 37) throw Error("boom");
                    }
                    return NdArray<double>(b.ys.shape());
                  },
                  std::nullopt};
  const TaskSpec spec = small_linear();
  for (std::size_t threads : {1, 2}) {
    EvalOptions opt;
    opt.n_prompts = 100;
    opt.chunk = 16;
    opt.threads = threads;
    RngStream rng(4, 0);
    try {
      error_profile(flaky, spec, rng, opt);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("prompt 37") != std::string::npos);
    }
  }
}

TEST_CASE("difference profiles") {
  const TaskSpec spec = TaskSpec::defaults(TaskKind::kLinear);
  RngStream rng(5, 0);
  const PromptSet set = sample_prompts(spec, 1000, rng, 64);
  const auto zero = evaluate(zero_predictor(), set);
  const auto oracle = evaluate(echo_targets(), set);

  const auto same = difference_profile(zero, zero);
  for (std::size_t i = 0; i < same.size(); ++i) {
    CHECK(same.mean[i] == 0.0);
    CHECK(same.ci_low[i] == 0.0);
    CHECK(same.ci_high[i] == 0.0);
  }
  const auto d = difference_profile(zero, oracle);
  CHECK(d.predictor == "zero - oracle");
  CHECK(d.mean == summarize(zero).mean);
  for (double v : d.mean) CHECK(std::abs(v - 20.0) < 5.0);

  const auto r = difference_profile(oracle, zero);
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(r.mean[i] == -d.mean[i]);
    CHECK(r.ci_low[i] == -d.ci_high[i]);
    CHECK(r.ci_high[i] == -d.ci_low[i]);
  }

  const auto pz = summarize(zero), po = summarize(oracle);
  const auto u = difference_profile(pz, po), ur = difference_profile(po, pz);
  for (std::size_t i = 0; i < u.size(); ++i) {
    CHECK(u.mean[i] == d.mean[i]);
    CHECK(ur.mean[i] == -u.mean[i]);
    CHECK(ur.ci_low[i] == -u.ci_high[i]);
    CHECK(u.ci_high[i] - u.mean[i] == doctest::Approx(pz.ci_high[i] - pz.mean[i]));
  }
  auto wrong = zero;
  wrong.task = "mlp2";
  CHECK_THROWS_AS(difference_profile(wrong, oracle), ConfigError);
}

TEST_CASE("profile CSV round trip") {
  auto a = flat("GPT-2", {0.1, 1.0 / 3.0, 1e-300});
  a.ci_low = {0.0, 0.25, 0.0};
  a.ci_high = {0.2, 0.5, 2e-300};
  a.n_prompts = 1280;
  auto b = flat("Llama RoPE,SwiGLU-less \"q\"", {5, 6, 7});
  b.checkpoint_step = 1000;
  const fs::path path = fs::temp_directory_path() / "hicl_eval_test" / "p.csv";
  write_profiles_csv(path, {a, b});
  const auto back = read_profiles_csv(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].mean == a.mean);
  CHECK(back[0].ci_low == a.ci_low);
  CHECK(back[0].ci_high == a.ci_high);
  CHECK(back[0].n_prompts == 1280);
  CHECK_FALSE(back[0].checkpoint_step.has_value());
  CHECK(back[1].predictor == b.predictor);
  CHECK(back[1].checkpoint_step == 1000);

  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "task,predictor,checkpoint_step,context_index,mean_sq_err,ci_low,ci_high,n_prompts");
  std::string first;
  std::getline(in, first);
  CHECK(first == "linear,GPT-2,,0,0.1,0,0.2,1280");

  std::ofstream(path) << "task,predictor\n";
  CHECK_THROWS_AS(read_profiles_csv(path), ConfigError);
  std::ofstream(path) << header << "\nlinear,p,,0,abc,0,1,2\n";
  CHECK_THROWS_AS(read_profiles_csv(path), ConfigError);
  fs::remove_all(path.parent_path());
}

TEST_CASE("checkpoint sweeps and cross-task evaluation") {
  const fs::path dir = fs::temp_directory_path() / "hicl_sweep_test";
  fs::remove_all(dir);
  const auto init = save_tiny(dir / "step0", 1, false, 0);
  const auto trained = save_tiny(dir / "step5", 1, true, 5);
  EvalOptions opt;
  opt.n_prompts = 40;
  opt.chunk = 16;
  const TaskSpec spec = small_linear();

  RngStream rng(6, 0);
  const auto sweep = checkpoint_sweep({init, trained, trained}, spec, rng, opt);
  REQUIRE(sweep.size() == 3);
  CHECK(sweep[0].checkpoint_step == 0);
  CHECK(sweep[1].checkpoint_step == 5);
  CHECK(sweep[1].mean == sweep[2].mean);
  RngStream zr(6, 0);
  CHECK(sweep[0].mean == error_profile(zero_predictor(), spec, zr, opt).mean);

  RngStream c1(7, 0), c2(7, 0);
  const auto cross = cross_task_eval(trained, spec, c1, opt);
  const auto direct =
      error_profile(model_predictor(std::make_shared<CheckpointedModel>(trained), "m"), spec, c2, opt);
  CHECK(cross.mean == direct.mean);

  RngStream c3(7, 0);
  CHECK_THROWS_AS(cross_task_eval(trained, TaskSpec::defaults(TaskKind::kLinear), c3, opt),
                  ShapeError);

  ArchitectureSpec arch;
  arch.n_layers = 2;
  arch.input_dim = 5;
  arch.max_points = 11;
  BlockConfig cfg;
  cfg.embed_dim = 16;
  RngStream mr(1, 0);
  save_checkpoint(dir / "deeper", Model<double>::build(arch, cfg, mr), {});
  RngStream sr(6, 0);
  CHECK_THROWS_AS(checkpoint_sweep({init, dir / "deeper"}, spec, sr, opt), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("vector targets average over output coordinates") {
  TaskSpec mq = TaskSpec::defaults(TaskKind::kVectorMqar);
  mq.n_points = 16;
  EvalOptions opt;
  opt.n_prompts = 10;
  RngStream rng(8, 0);
  const auto z = error_profile(zero_predictor(), mq, rng, opt);
  // values lie on the sphere of radius sqrt(d): mean square coordinate is 1
  for (double v : z.mean) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
}
