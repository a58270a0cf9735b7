#include "hicl/harness/config.hpp"

#include <openssl/evp.h>
#include <yaml-cpp/yaml.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "hicl/error.hpp"

namespace hicl {

namespace {

std::string num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, r.ptr);
  // Keep floats recognisable as floats when read back by other tools.
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

// One mapping in the file; remembers which keys were read so leftovers can
// be reported as unknown.
class Section {
 public:
  Section(YAML::Node node, std::string path) : node_(std::move(node)), path_(std::move(path)) {
    if (node_ && !node_.IsNull() && !node_.IsMap()) {
      throw ConfigError(where() + ": expected a mapping");
    }
  }

  Section sub(const std::string& key) { return {take(key), join(key)}; }

  template <typename U>
  void read(const std::string& key, U& out) {
    const YAML::Node n = take(key);
    if (!n || n.IsNull()) return;
    if (!n.IsScalar()) throw ConfigError(join(key) + ": expected a scalar");
    out = convert<U>(n.Scalar(), join(key));
  }

  void finish() const {
    if (!node_ || !node_.IsMap()) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!seen_.count(key)) throw ConfigError(join(key) + ": unknown key");
    }
  }

 private:
  YAML::Node take(const std::string& key) {
    seen_.insert(key);
    if (!node_ || !node_.IsMap()) return YAML::Node();
    return node_[key];
  }

  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "<root>" : path_; }

  template <typename U>
  static U convert(const std::string& s, const std::string& field) {
    if constexpr (std::is_same_v<U, std::string>) {
      return s;
    } else if constexpr (std::is_same_v<U, bool>) {
      if (s == "true" || s == "yes" || s == "on") return true;
      if (s == "false" || s == "no" || s == "off") return false;
      throw ConfigError(field + ": expected true or false, got '" + s + "'");
    } else if constexpr (std::is_floating_point_v<U>) {
      double v = 0;
      const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
      if (r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v)) {
        throw ConfigError(field + ": expected a number, got '" + s + "'");
      }
      return static_cast<U>(v);
    } else {
      U v{};
      const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
      if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        throw ConfigError(field + ": expected a non-negative integer, got '" + s + "'");
      }
      return v;
    }
  }

  YAML::Node node_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_task(Section s, TaskSpec& t) {
  s.read("input_dim", t.input_dim);
  s.read("n_points", t.n_points);
  s.read("k", t.k);
  s.read("width", t.width);
  s.read("depth", t.depth);
  s.finish();
}

void read_model(Section s, ArchitectureSpec& m, BlockConfig& b) {
  s.read("variant", m.variant_id);
  s.read("n_layers", m.n_layers);
  s.read("mamba_layer_multiplier", m.mamba_layer_multiplier);
  s.read("prefix_depth", m.prefix_depth);
  s.read("embed_dim", b.embed_dim);
  s.read("n_heads", b.n_heads);
  s.read("ffn_hidden_dim", b.ffn_hidden_dim);
  s.read("mamba_state_dim", b.mamba_state_dim);
  s.read("mamba_conv_kernel", b.mamba_conv_kernel);
  s.read("mamba_expand", b.mamba_expand);
  s.read("mamba_dt_rank", b.mamba_dt_rank);
  s.read("rope_base", b.rope_base);
  s.read("norm_epsilon", b.norm_epsilon);
  s.finish();
}

void read_train(Section s, TrainConfig& t) {
  s.read("steps", t.steps);
  s.read("batch_size", t.batch_size);
  s.read("learning_rate", t.adam.learning_rate);
  s.read("beta1", t.adam.beta1);
  s.read("beta2", t.adam.beta2);
  s.read("epsilon", t.adam.epsilon);
  s.read("weight_decay", t.adam.weight_decay);
  s.read("grad_clip", t.adam.grad_clip);
  s.read("seed", t.seed);
  s.read("checkpoint_every", t.checkpoint_every);
  s.read("log_interval", t.log_interval);
  s.read("precision", t.precision);
  Section c = s.sub("curriculum");
  c.read("enabled", t.curriculum.enabled);
  c.read("dims_start", t.curriculum.dims_start);
  c.read("dims_increment", t.curriculum.dims_increment);
  c.read("points_start", t.curriculum.points_start);
  c.read("points_increment", t.curriculum.points_increment);
  c.read("interval", t.curriculum.interval);
  c.finish();
  s.finish();
}

void read_eval(Section s, EvalConfig& e) {
  s.read("n_prompts", e.n_prompts);
  s.read("seed", e.seed);
  s.read("score_begin", e.score_begin);
  std::string ci;
  s.read("ci", ci);
  if (ci == "bootstrap") {
    e.ci = CiMethod::kBootstrap;
  } else if (ci == "normal") {
    e.ci = CiMethod::kNormal;
  } else if (!ci.empty()) {
    throw ConfigError("eval.ci: expected normal or bootstrap, got '" + ci + "'");
  }
  s.read("bootstrap_resamples", e.bootstrap_resamples);
  s.read("threads", e.threads);
  Section b = s.sub("baseline");
  std::string kind;
  b.read("kind", kind);
  if (!kind.empty()) {
    try {
      e.baseline.kind = parse_baseline_kind(kind);
    } catch (const ConfigError& err) {
      throw ConfigError(std::string("eval.baseline.kind: ") + err.what());
    }
  }
  b.read("lasso_alpha", e.baseline.lasso_alpha);
  b.read("nn_steps", e.baseline.nn_steps);
  b.read("nn_lr", e.baseline.nn_lr);
  b.read("nn_width", e.baseline.nn_width);
  b.read("checkpoint", e.baseline.checkpoint_path);
  b.finish();
  s.finish();
}

void sync_model_to_task(ExperimentConfig& c) {
  c.model.input_dim = c.task.input_dim;
  c.model.output_dim = c.task.output_dim();
  c.model.max_points = c.task.n_points;
}

}  // namespace

ExperimentConfig default_config(TaskKind kind) {
  ExperimentConfig c;
  c.task = TaskSpec::defaults(kind);
  c.model.n_layers = 12;
  c.block.embed_dim = 256;
  c.block.n_heads = 8;
  c.train.adam.learning_rate = 1e-4;
  c.train.curriculum.enabled = c.task.uses_curriculum();
  switch (kind) {
    case TaskKind::kSparseParity:
      c.train.adam.learning_rate = 4e-4;
      c.train.steps = 200000;
      break;
    case TaskKind::kVectorMqar:
      c.block.embed_dim = 128;
      c.model.n_layers = 2;
      c.train.adam.learning_rate = 2e-4;
      break;
    default: break;
  }
  c.eval.baseline = default_baseline(kind);
  c.eval.score_begin = c.task.score_begin();
  c.output_dir = "runs/" + to_string(kind);
  sync_model_to_task(c);
  return c;
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError(field + ": " + why);
  };
  try {
    task.validate();
  } catch (const ConfigError& e) {
    fail("task", e.what());
  }
  try {
    model.validate(block);
  } catch (const Error& e) {
    fail("model", e.what());
  }
  if (model.input_dim != task.input_dim || model.output_dim != task.output_dim() ||
      model.max_points != task.n_points) {
    fail("model", "dimensions do not follow the task");
  }
  if (train.batch_size == 0) fail("train.batch_size", "must be positive");
  if (!(train.adam.learning_rate > 0)) fail("train.learning_rate", "must be positive");
  if (train.log_interval == 0) fail("train.log_interval", "must be positive");
  if (train.checkpoint_every == 0) fail("train.checkpoint_every", "must be positive");
  if (train.precision != 32 && train.precision != 64) fail("train.precision", "must be 32 or 64");
  if (train.curriculum.enabled && train.curriculum.interval == 0) {
    fail("train.curriculum.interval", "must be positive");
  }
  if (eval.n_prompts < 2) fail("eval.n_prompts", "must be at least 2");
  if (eval.score_begin >= task.n_points) fail("eval.score_begin", "must be below task.n_points");
  if (eval.threads == 0) fail("eval.threads", "must be positive");
  BaselineSpec b = eval.baseline;
  if (b.kind == BaselineKind::kCheckpointedModel && b.checkpoint_path.empty()) {
    b.checkpoint_path = "-";  // checked when evaluation needs it
  }
  try {
    b.validate();
  } catch (const ConfigError& e) {
    fail("eval.baseline", e.what());
  }
  if (output_dir.empty()) fail("output.dir", "must not be empty");
}

ExperimentConfig parse_config_text(const std::string& yaml, const std::string& source) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml);
  } catch (const YAML::Exception& e) {
    throw ConfigError(source + ": " + e.what());
  }
  try {
    Section top(root, "");
    Section task = top.sub("task");
    std::string name = "linear";
    task.read("name", name);
    TaskKind kind;
    try {
      kind = parse_task_kind(name);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("task.name: ") + e.what());
    }
    ExperimentConfig c = default_config(kind);
    read_task(std::move(task), c.task);
    c.eval.score_begin = c.task.score_begin();
    read_model(top.sub("model"), c.model, c.block);
    sync_model_to_task(c);
    read_train(top.sub("train"), c.train);
    read_eval(top.sub("eval"), c.eval);
    Section out = top.sub("output");
    out.read("dir", c.output_dir);
    out.finish();
    top.finish();
    c.validate();
    return c;
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

std::string write_config(const ExperimentConfig& c) {
  YAML::Emitter y;
  auto kv = [&](const char* k, const std::string& v) { y << YAML::Key << k << YAML::Value << v; };
  auto kn = [&](const char* k, std::size_t v) { kv(k, std::to_string(v)); };
  auto kd = [&](const char* k, double v) { kv(k, num(v)); };
  auto kb = [&](const char* k, bool v) { kv(k, v ? "true" : "false"); };
  y << YAML::BeginMap;
  y << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
  y << YAML::Key << "variant" << YAML::Value << YAML::DoubleQuoted << c.model.variant_id;
  kn("n_layers", c.model.n_layers);
  kn("mamba_layer_multiplier", c.model.mamba_layer_multiplier);
  kn("prefix_depth", c.model.prefix_depth);
  kn("embed_dim", c.block.embed_dim);
  kn("n_heads", c.block.n_heads);
  kn("ffn_hidden_dim", c.block.ffn_hidden_dim);
  kn("mamba_state_dim", c.block.mamba_state_dim);
  kn("mamba_conv_kernel", c.block.mamba_conv_kernel);
  kn("mamba_expand", c.block.mamba_expand);
  kn("mamba_dt_rank", c.block.mamba_dt_rank);
  kd("rope_base", c.block.rope_base);
  kd("norm_epsilon", c.block.norm_epsilon);
  y << YAML::EndMap;

  y << YAML::Key << "task" << YAML::Value << YAML::BeginMap;
  kv("name", c.task.name());
  kn("input_dim", c.task.input_dim);
  kn("n_points", c.task.n_points);
  kn("k", c.task.k);
  kn("width", c.task.width);
  kn("depth", c.task.depth);
  y << YAML::EndMap;

  y << YAML::Key << "train" << YAML::Value << YAML::BeginMap;
  kn("steps", c.train.steps);
  kn("batch_size", c.train.batch_size);
  kd("learning_rate", c.train.adam.learning_rate);
  kd("beta1", c.train.adam.beta1);
  kd("beta2", c.train.adam.beta2);
  kd("epsilon", c.train.adam.epsilon);
  kd("weight_decay", c.train.adam.weight_decay);
  kd("grad_clip", c.train.adam.grad_clip);
  kn("seed", c.train.seed);
  kn("checkpoint_every", c.train.checkpoint_every);
  kn("log_interval", c.train.log_interval);
  kn("precision", static_cast<std::size_t>(c.train.precision));
  y << YAML::Key << "curriculum" << YAML::Value << YAML::BeginMap;
  kb("enabled", c.train.curriculum.enabled);
  kn("dims_start", c.train.curriculum.dims_start);
  kn("dims_increment", c.train.curriculum.dims_increment);
  kn("points_start", c.train.curriculum.points_start);
  kn("points_increment", c.train.curriculum.points_increment);
  kn("interval", c.train.curriculum.interval);
  y << YAML::EndMap << YAML::EndMap;

  y << YAML::Key << "eval" << YAML::Value << YAML::BeginMap;
  kn("n_prompts", c.eval.n_prompts);
  kn("seed", c.eval.seed);
  kn("score_begin", c.eval.score_begin);
  kv("ci", c.eval.ci == CiMethod::kBootstrap ? "bootstrap" : "normal");
  kn("bootstrap_resamples", c.eval.bootstrap_resamples);
  kn("threads", c.eval.threads);
  y << YAML::Key << "baseline" << YAML::Value << YAML::BeginMap;
  kv("kind", to_string(c.eval.baseline.kind));
  kd("lasso_alpha", c.eval.baseline.lasso_alpha);
  kn("nn_steps", c.eval.baseline.nn_steps);
  kd("nn_lr", c.eval.baseline.nn_lr);
  kn("nn_width", c.eval.baseline.nn_width);
  y << YAML::Key << "checkpoint" << YAML::Value << YAML::DoubleQuoted
    << c.eval.baseline.checkpoint_path;
  y << YAML::EndMap << YAML::EndMap;

  y << YAML::Key << "output" << YAML::Value << YAML::BeginMap;
  y << YAML::Key << "dir" << YAML::Value << YAML::DoubleQuoted << c.output_dir;
  y << YAML::EndMap << YAML::EndMap;
  return std::string(y.c_str()) + "\n";
}

std::string config_hash(const ExperimentConfig& config) {
  // Where a run is written does not change what it computes.
  ExperimentConfig c = config;
  c.output_dir.clear();
  const std::string text = write_config(c);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

}  // namespace hicl
