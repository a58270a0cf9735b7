#include "hicl/models/model.hpp"

#include "hicl/error.hpp"
#include "hicl/numerics/ops.hpp"

namespace hicl {

namespace O = ops;

std::string to_string(PosEmb v) {
  switch (v) {
    case PosEmb::kAbsolute: return "absolute";
    case PosEmb::kRope: return "rope";
    case PosEmb::kNone: return "none";
    case PosEmb::kMambaPrefix: return "mamba-prefix";
  }
  return "?";
}

std::string to_string(FfnKind v) {
  switch (v) {
    case FfnKind::kGeluMlp: return "gelu-mlp";
    case FfnKind::kSwiglu: return "swiglu";
    case FfnKind::kMambaMixer: return "mamba-mixer";
    case FfnKind::kNone: return "none";
  }
  return "?";
}

std::string to_string(NormKind v) { return v == NormKind::kLayer ? "layer" : "rms"; }
std::string to_string(AttnKind v) { return v == AttnKind::kMha ? "mha" : "none"; }

const std::vector<VariantInfo>& variant_table() {
  using P = PosEmb;
  using F = FfnKind;
  using N = NormKind;
  static const std::vector<VariantInfo> table = {
      {"1", "GPT-2", P::kAbsolute, F::kGeluMlp, N::kLayer, AttnKind::kMha},
      {"1.1", "GPT-2 RMS", P::kAbsolute, F::kGeluMlp, N::kRms, AttnKind::kMha},
      {"1.2", "GPT-2 RoPE", P::kRope, F::kGeluMlp, N::kLayer, AttnKind::kMha},
      {"1.3", "GPT-2 SwiGLU", P::kAbsolute, F::kSwiglu, N::kLayer, AttnKind::kMha},
      {"1.4", "GPT-2 RMS SwiGLU", P::kAbsolute, F::kSwiglu, N::kRms, AttnKind::kMha},
      {"1.5", "GPT-2 RMS RoPE", P::kRope, F::kGeluMlp, N::kRms, AttnKind::kMha},
      {"1.6", "GPT-2 RoPE SwiGLU", P::kRope, F::kSwiglu, N::kLayer, AttnKind::kMha},
      {"2", "Llama", P::kRope, F::kSwiglu, N::kRms, AttnKind::kMha},
      {"2.1", "Llama RoPE-less", P::kMambaPrefix, F::kSwiglu, N::kRms, AttnKind::kMha},
      {"2.2", "Llama SwiGLU-less", P::kRope, F::kMambaMixer, N::kRms, AttnKind::kMha},
      {"2.3", "Llama RoPE,SwiGLU-less", P::kMambaPrefix, F::kMambaMixer, N::kRms, AttnKind::kMha},
      {"3", "Mamba", P::kNone, F::kMambaMixer, N::kRms, AttnKind::kNone},
  };
  return table;
}

const VariantInfo& find_variant(const std::string& id) {
  for (const auto& v : variant_table()) {
    if (v.id == id) return v;
  }
  throw ConfigError("unknown variant id '" + id + "'");
}

std::size_t ArchitectureSpec::layer_count() const {
  return variant().attn == AttnKind::kNone ? n_layers * mamba_layer_multiplier : n_layers;
}

void ArchitectureSpec::validate(const BlockConfig& cfg) const {
  const auto& v = variant();
  if (n_layers == 0) throw ConfigError("n-layers must be positive");
  if (input_dim == 0 || output_dim == 0) throw ConfigError("input/output dims must be positive");
  if (output_dim > input_dim) {
    throw ConfigError("output-dim " + std::to_string(output_dim) + " exceeds input-dim " +
                      std::to_string(input_dim));
  }
  if (max_points == 0) throw ConfigError("max-points must be positive");
  if (mamba_layer_multiplier == 0) throw ConfigError("mamba layer multiplier must be positive");
  if (v.pos == PosEmb::kMambaPrefix && prefix_depth == 0) {
    throw ConfigError("mamba-prefix needs at least one block");
  }
  cfg.validate(v.pos == PosEmb::kRope);
}

void PromptBatch::validate() const {
  if (xs.rank() != 3 || ys.rank() != 3 || xs.dim(0) != ys.dim(0) || xs.dim(1) != ys.dim(1)) {
    throw ShapeError("prompt batch: xs " + shape_str(xs.shape()) + " vs ys " +
                     shape_str(ys.shape()));
  }
  if (active_points == 0 || active_points > n_points()) {
    throw ShapeError("prompt batch: active points " + std::to_string(active_points) +
                     " outside [1, " + std::to_string(n_points()) + "]");
  }
  if (active_dims > input_dim()) throw ShapeError("prompt batch: active dims exceed input dim");
  if (loss_begin >= active_points) throw ShapeError("prompt batch: loss_begin past active points");
}

template <typename T>
NdArray<T> embed_prompt(const PromptBatch& batch) {
  const std::size_t b = batch.batch(), n = batch.n_points(), d = batch.input_dim();
  const std::size_t out = batch.output_dim();
  if (out > d) {
    throw ShapeError("embed_prompt: output dim " + std::to_string(out) + " exceeds input dim " +
                     std::to_string(d));
  }
  NdArray<T> tokens(Shape{b, 2 * n, d});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t p = 0; p < n; ++p) {
      T* xt = tokens.ptr() + ((i * 2 * n) + 2 * p) * d;
      T* yt = xt + d;
      const double* xs = batch.xs.ptr() + (i * n + p) * d;
      const double* ys = batch.ys.ptr() + (i * n + p) * out;
      for (std::size_t j = 0; j < d; ++j) xt[j] = static_cast<T>(xs[j]);
      for (std::size_t j = 0; j < out; ++j) yt[j] = static_cast<T>(ys[j]);
    }
  }
  return tokens;
}

// ----------------------------------------------------------------- params

namespace {

void add_norm_params(NormKind kind, auto& out, const std::string& prefix, std::size_t dim) {
  if (kind == NormKind::kLayer) {
    init_layer_norm(out, prefix, dim);
  } else {
    init_rms_norm(out, prefix, dim);
  }
}

template <typename T>
Var<T> apply_norm(NormKind kind, Var<T> x, const VarMap<T>& p, const std::string& prefix,
                  double eps) {
  if (kind == NormKind::kLayer) {
    return layer_norm(x, p.at(prefix + ".gain"), p.at(prefix + ".bias"), eps);
  }
  return rms_norm(x, p.at(prefix + ".gain"), eps);
}

std::string layer_prefix(std::size_t i) { return "layers." + std::to_string(i); }

}  // namespace

template <typename T>
ParamMap<T> init_params(const ArchitectureSpec& spec, const BlockConfig& cfg, RngStream& rng) {
  spec.validate(cfg);
  const auto& v = spec.variant();
  const std::size_t e = cfg.embed_dim;
  ParamMap<T> p;
  init_linear(p, "read_in.w", spec.input_dim, e, rng);
  init_bias(p, "read_in.b", e);
  if (v.pos == PosEmb::kAbsolute) init_linear(p, "pos_table", spec.max_tokens(), e, rng);
  if (v.pos == PosEmb::kMambaPrefix) {
    for (std::size_t i = 0; i < spec.prefix_depth; ++i) {
      const std::string pre = "prefix." + std::to_string(i);
      add_norm_params(v.norm, p, pre + ".norm", e);
      init_mamba(p, pre + ".mixer", cfg, rng);
    }
  }
  for (std::size_t i = 0; i < spec.layer_count(); ++i) {
    const std::string pre = layer_prefix(i);
    if (v.attn == AttnKind::kMha) {
      add_norm_params(v.norm, p, pre + ".norm1", e);
      init_attention(p, pre + ".attn", cfg, rng);
    }
    switch (v.ffn) {
      case FfnKind::kGeluMlp:
        add_norm_params(v.norm, p, pre + ".norm2", e);
        init_gelu_mlp(p, pre + ".ffn", cfg, rng);
        break;
      case FfnKind::kSwiglu:
        add_norm_params(v.norm, p, pre + ".norm2", e);
        init_swiglu(p, pre + ".ffn", cfg, rng);
        break;
      case FfnKind::kMambaMixer:
        add_norm_params(v.norm, p, pre + ".norm2", e);
        init_mamba(p, pre + ".mixer", cfg, rng);
        break;
      case FfnKind::kNone:
        break;
    }
  }
  add_norm_params(v.norm, p, "final_norm", e);
  // Zero read-out: an untrained model is exactly the zero estimator.
  p["read_out.w"] = NdArray<T>(Shape{e, spec.output_dim});
  init_bias(p, "read_out.b", spec.output_dim);
  return p;
}

// ------------------------------------------------------------------ model

template <typename T>
Model<T>::Model(ArchitectureSpec spec, BlockConfig cfg, ParamMap<T> params)
    : spec_(std::move(spec)), cfg_(cfg), params_(std::move(params)) {
  spec_.validate(cfg_);
  RngStream probe(0, 0);
  const auto expected = init_params<T>(spec_, cfg_, probe);
  if (expected.size() != params_.size()) {
    throw ShapeError("model: expected " + std::to_string(expected.size()) + " tensors, got " +
                     std::to_string(params_.size()));
  }
  for (const auto& [name, arr] : expected) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ShapeError("model: missing parameter " + name);
    if (it->second.shape() != arr.shape()) {
      throw ShapeError("model: parameter " + name + " has shape " +
                       shape_str(it->second.shape()) + ", expected " + shape_str(arr.shape()));
    }
  }
}

template <typename T>
Model<T> Model<T>::build(const ArchitectureSpec& spec, const BlockConfig& cfg, RngStream& rng) {
  return Model(spec, cfg, init_params<T>(spec, cfg, rng));
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, arr] : params_) n += arr.size();
  return n;
}

template <typename T>
VarMap<T> Model<T>::bind(Graph<T>& g) const {
  VarMap<T> vars;
  for (const auto& [name, arr] : params_) vars[name] = g.parameter(name, arr);
  return vars;
}

template <typename T>
Var<T> Model<T>::forward(Var<T> tokens, const VarMap<T>& p) const {
  const auto& v = spec_.variant();
  const double eps = cfg_.norm_epsilon;
  if (tokens.shape().size() != 3 || tokens.dim(2) != spec_.input_dim) {
    throw ShapeError("model: tokens " + shape_str(tokens.shape()) + " for input dim " +
                     std::to_string(spec_.input_dim));
  }
  const std::size_t len = tokens.dim(1);
  if (len > spec_.max_tokens()) {
    throw ShapeError("model: sequence of " + std::to_string(len) + " tokens exceeds limit " +
                     std::to_string(spec_.max_tokens()));
  }

  Var<T> h = linear(tokens, p.at("read_in.w"), p.at("read_in.b"));
  if (v.pos == PosEmb::kAbsolute) h = O::add(h, absolute_pos_embed(p.at("pos_table"), len));
  if (v.pos == PosEmb::kMambaPrefix) {
    for (std::size_t i = 0; i < spec_.prefix_depth; ++i) {
      const std::string pre = "prefix." + std::to_string(i);
      auto normed = apply_norm(v.norm, h, p, pre + ".norm", eps);
      h = O::add(h, mamba_mixer(normed, MambaParams<T>::bind(p, pre + ".mixer"), cfg_));
    }
  }

  const AttentionOptions attn{cfg_.n_heads, v.pos == PosEmb::kRope, cfg_.rope_base};
  for (std::size_t i = 0; i < spec_.layer_count(); ++i) {
    const std::string pre = layer_prefix(i);
    if (v.attn == AttnKind::kMha) {
      auto normed = apply_norm(v.norm, h, p, pre + ".norm1", eps);
      h = O::add(h, causal_attention(normed, p.at(pre + ".attn.wq"), p.at(pre + ".attn.wk"),
                                     p.at(pre + ".attn.wv"), p.at(pre + ".attn.wo"), attn));
    }
    if (v.ffn == FfnKind::kNone) continue;
    auto normed = apply_norm(v.norm, h, p, pre + ".norm2", eps);
    switch (v.ffn) {
      case FfnKind::kGeluMlp:
        h = O::add(h, gelu_mlp(normed, p.at(pre + ".ffn.w_in"), p.at(pre + ".ffn.b_in"),
                               p.at(pre + ".ffn.w_out"), p.at(pre + ".ffn.b_out")));
        break;
      case FfnKind::kSwiglu:
        h = O::add(h, swiglu_ffn(normed, p.at(pre + ".ffn.w_gate"), p.at(pre + ".ffn.w_up"),
                                 p.at(pre + ".ffn.w_down")));
        break;
      case FfnKind::kMambaMixer:
        h = O::add(h, mamba_mixer(normed, MambaParams<T>::bind(p, pre + ".mixer"), cfg_));
        break;
      case FfnKind::kNone:
        break;
    }
  }
  h = apply_norm(v.norm, h, p, "final_norm", eps);
  return linear(h, p.at("read_out.w"), p.at("read_out.b"));
}

template <typename T>
Var<T> Model<T>::predict(Graph<T>& g, const VarMap<T>& p, const PromptBatch& batch) const {
  if (batch.input_dim() != spec_.input_dim || batch.output_dim() != spec_.output_dim) {
    throw ShapeError("model: prompt dims (" + std::to_string(batch.input_dim()) + ", " +
                     std::to_string(batch.output_dim()) + ") do not match model (" +
                     std::to_string(spec_.input_dim) + ", " + std::to_string(spec_.output_dim) +
                     ")");
  }
  const std::size_t b = batch.batch(), n = batch.n_points(), out = spec_.output_dim;
  auto y = forward(g.constant(embed_prompt<T>(batch)), p);
  // [B, 2N, out] -> [B, N, 2, out]; keep the x-token slot.
  auto pairs = O::reshape(y, {b, n, 2, out});
  return O::reshape(O::slice(pairs, 2, 0, 1), {b, n, out});
}

template <typename T>
NdArray<T> Model<T>::predict(const PromptBatch& batch) const {
  Graph<T> g;
  VarMap<T> vars;
  for (const auto& [name, arr] : params_) vars[name] = g.constant(arr);
  return predict(g, vars, batch).value();
}

template <typename T>
std::vector<std::string> Model<T>::describe() const {
  const auto& v = spec_.variant();
  const std::string norm = to_string(v.norm) + "-norm";
  std::vector<std::string> lines;
  lines.push_back("variant " + v.id + " (" + v.name + ")");
  lines.push_back("read-in: linear " + std::to_string(spec_.input_dim) + " -> " +
                  std::to_string(cfg_.embed_dim) + " +bias");
  if (v.pos == PosEmb::kAbsolute) {
    lines.push_back("positional: absolute table " + std::to_string(spec_.max_tokens()));
  }
  for (std::size_t i = 0; v.pos == PosEmb::kMambaPrefix && i < spec_.prefix_depth; ++i) {
    lines.push_back("prefix " + std::to_string(i) + ": " + norm + " -> mamba-mixer");
  }
  for (std::size_t i = 0; i < spec_.layer_count(); ++i) {
    std::string line = "layer " + std::to_string(i) + ":";
    if (v.attn == AttnKind::kMha) {
      line += " " + norm + " -> mha(" + (v.pos == PosEmb::kRope ? "rope" : "plain") + ")";
    }
    if (v.ffn != FfnKind::kNone) {
      if (v.attn == AttnKind::kMha) line += ";";
      line += " " + norm + " -> " + to_string(v.ffn);
    }
    lines.push_back(line);
  }
  lines.push_back("final: " + norm);
  lines.push_back("read-out: linear " + std::to_string(cfg_.embed_dim) + " -> " +
                  std::to_string(spec_.output_dim) + " +bias");
  return lines;
}

template <typename T>
Var<T> prompt_loss(Var<T> predictions, const PromptBatch& batch) {
  batch.validate();
  const Shape s = predictions.shape();
  if (s.size() != 3 || s[0] != batch.batch() || s[1] != batch.n_points() ||
      s[2] != batch.output_dim()) {
    throw ShapeError("prompt_loss: predictions " + shape_str(s) + " vs targets " +
                     shape_str(batch.ys.shape()));
  }
  const std::size_t lo = batch.loss_begin, hi = batch.active_points;
  NdArray<T> target(Shape{s[0], hi - lo, s[2]});
  for (std::size_t i = 0; i < s[0]; ++i) {
    for (std::size_t p = lo; p < hi; ++p) {
      for (std::size_t j = 0; j < s[2]; ++j) {
        target[(i * (hi - lo) + (p - lo)) * s[2] + j] = static_cast<T>(batch.ys.at({i, p, j}));
      }
    }
  }
  auto& g = predictions.graph();
  auto diff = O::sub(O::slice(predictions, 1, lo, hi), g.constant(std::move(target)));
  return O::mean_all(O::mul(diff, diff));
}

#define HICL_INSTANTIATE(T)                                                                     \
  template NdArray<T> embed_prompt<T>(const PromptBatch&);                                      \
  template class Model<T>;                                                                      \
  template ParamMap<T> init_params<T>(const ArchitectureSpec&, const BlockConfig&, RngStream&); \
  template Var<T> prompt_loss<T>(Var<T>, const PromptBatch&);

HICL_INSTANTIATE(float)
HICL_INSTANTIATE(double)

#undef HICL_INSTANTIATE

}  // namespace hicl
