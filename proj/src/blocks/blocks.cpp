#include "hicl/blocks/blocks.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "hicl/error.hpp"
#include "hicl/numerics/ops.hpp"

namespace hicl {

namespace O = ops;

std::size_t BlockConfig::state_dim() const {
  if (mamba_state_dim != 0) return mamba_state_dim;
  return std::max<std::size_t>(1, embed_dim / 16);
}

std::size_t BlockConfig::dt_rank() const {
  if (mamba_dt_rank != 0) return mamba_dt_rank;
  return (embed_dim + 15) / 16;
}

void BlockConfig::validate(bool uses_rope) const {
  if (embed_dim == 0 || n_heads == 0) throw ConfigError("embed-dim and n-heads must be positive");
  if (embed_dim % n_heads != 0) {
    throw ConfigError("embed-dim " + std::to_string(embed_dim) + " not divisible by n-heads " +
                      std::to_string(n_heads));
  }
  if (uses_rope && head_dim() % 2 != 0) {
    throw ConfigError("rope needs an even per-head dim, got " + std::to_string(head_dim()));
  }
  if (mamba_conv_kernel == 0 || mamba_expand == 0) {
    throw ConfigError("mamba conv kernel and expand must be positive");
  }
  if (!(rope_base > 0) || !(norm_epsilon > 0)) {
    throw ConfigError("rope-base and norm-epsilon must be positive");
  }
}

std::size_t gelu_hidden_dim(const BlockConfig& cfg) {
  return cfg.ffn_hidden_dim != 0 ? cfg.ffn_hidden_dim : 4 * cfg.embed_dim;
}

std::size_t swiglu_hidden_dim(const BlockConfig& cfg) {
  if (cfg.ffn_hidden_dim != 0) return cfg.ffn_hidden_dim;
  const auto h = static_cast<std::size_t>(std::llround(8.0 * cfg.embed_dim / 3.0));
  return (h + 7) / 8 * 8;
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w) {
  return O::matmul(x, w);
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return O::add(O::matmul(x, w), b);
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, double eps) {
  const std::size_t last = x.shape().size() - 1;
  auto xc = O::sub(x, O::mean(x, last, true));
  auto var = O::mean(O::mul(xc, xc), last, true);
  auto normed = O::div(xc, O::sqrt(O::add_scalar(var, static_cast<T>(eps))));
  return O::add(O::mul(normed, gain), bias);
}

template <typename T>
Var<T> rms_norm(Var<T> x, Var<T> gain, double eps) {
  const std::size_t last = x.shape().size() - 1;
  auto ms = O::mean(O::mul(x, x), last, true);
  return O::mul(O::div(x, O::sqrt(O::add_scalar(ms, static_cast<T>(eps)))), gain);
}

template <typename T>
Var<T> gelu_mlp(Var<T> x, Var<T> w_in, Var<T> b_in, Var<T> w_out, Var<T> b_out) {
  return linear(O::gelu(linear(x, w_in, b_in)), w_out, b_out);
}

template <typename T>
Var<T> swiglu_ffn(Var<T> x, Var<T> w_gate, Var<T> w_up, Var<T> w_down) {
  return linear(O::mul(O::silu(linear(x, w_gate)), linear(x, w_up)), w_down);
}

template <typename T>
Var<T> absolute_pos_embed(Var<T> table, std::size_t seq_len) {
  if (table.shape().size() != 2) {
    throw ShapeError("absolute_pos_embed: table must be [max_len, embed], got " +
                     shape_str(table.shape()));
  }
  if (seq_len > table.dim(0)) {
    throw ShapeError("absolute_pos_embed: sequence length " + std::to_string(seq_len) +
                     " exceeds table length " + std::to_string(table.dim(0)));
  }
  return O::slice(table, 0, 0, seq_len);
}

template <typename T>
Var<T> rope_apply(Var<T> x, const std::vector<double>& positions, double base) {
  const Shape s = x.shape();
  if (s.size() < 2) throw ShapeError("rope_apply: needs [..., L, D], got " + shape_str(s));
  const std::size_t d = s.back();
  const std::size_t len = s[s.size() - 2];
  if (d % 2 != 0) throw ShapeError("rope_apply: odd head dim " + std::to_string(d));
  if (positions.size() != len) {
    throw ShapeError("rope_apply: " + std::to_string(positions.size()) +
                     " positions for sequence length " + std::to_string(len));
  }
  // cos/sin per (position, pair), computed in double then rounded once.
  auto cs = std::make_shared<std::vector<T>>(len * d);
  for (std::size_t l = 0; l < len; ++l) {
    for (std::size_t p = 0; p < d / 2; ++p) {
      const double theta =
          positions[l] * std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(d));
      (*cs)[l * d + 2 * p] = static_cast<T>(std::cos(theta));
      (*cs)[l * d + 2 * p + 1] = static_cast<T>(std::sin(theta));
    }
  }
  const std::size_t idx = x.id();
  return x.graph().record(
      "rope", {idx},
      [=](Graph<T>& g, std::size_t self) {
        const auto& in = g.value(idx);
        NdArray<T> out(in.shape());
        for (std::size_t i = 0; i < in.size(); i += 2) {
          const std::size_t off = ((i / d) % len) * d + (i % d);
          const T c = (*cs)[off], sn = (*cs)[off + 1];
          out[i] = in[i] * c - in[i + 1] * sn;
          out[i + 1] = in[i] * sn + in[i + 1] * c;
        }
        g.mutable_value(self) = std::move(out);
      },
      [=](Graph<T>& g, std::size_t self) {
        const auto& gy = g.grad(self);
        auto& gx = g.grad(idx);
        for (std::size_t i = 0; i < gy.size(); i += 2) {
          const std::size_t off = ((i / d) % len) * d + (i % d);
          const T c = (*cs)[off], sn = (*cs)[off + 1];
          gx[i] += gy[i] * c + gy[i + 1] * sn;
          gx[i + 1] += gy[i + 1] * c - gy[i] * sn;
        }
      });
}

template <typename T>
Var<T> causal_attention(Var<T> x, Var<T> wq, Var<T> wk, Var<T> wv, Var<T> wo,
                        const AttentionOptions& opt) {
  const Shape s = x.shape();
  if (s.size() != 3) throw ShapeError("causal_attention: x must be [B, L, E], got " + shape_str(s));
  const std::size_t b = s[0], len = s[1], e = s[2], h = opt.n_heads;
  if (h == 0 || e % h != 0) throw ShapeError("causal_attention: embed not divisible by heads");
  const std::size_t dh = e / h;

  std::vector<double> pos(len);
  for (std::size_t i = 0; i < len; ++i) pos[i] = static_cast<double>(i);
  auto heads = [&](Var<T> w, bool rotate) {
    auto t = O::permute(O::reshape(linear(x, w), {b, len, h, dh}), {0, 2, 1, 3});
    if (rotate) t = rope_apply(t, pos, opt.rope_base);
    return O::reshape(t, {b * h, len, dh});
  };
  auto q = heads(wq, opt.rope);
  auto k = heads(wk, opt.rope);
  auto v = heads(wv, false);

  auto scores = O::scale(O::bmm(q, k, true), static_cast<T>(1.0 / std::sqrt(double(dh))));
  auto ctx = O::bmm(O::softmax(scores, true), v);
  auto merged = O::reshape(O::permute(O::reshape(ctx, {b, h, len, dh}), {0, 2, 1, 3}),
                           {b, len, e});
  return linear(merged, wo);
}

template <typename T>
MambaParams<T> MambaParams<T>::bind(const VarMap<T>& vars, const std::string& prefix) {
  auto get = [&](const char* leaf) {
    auto it = vars.find(prefix + "." + leaf);
    if (it == vars.end()) throw Error("missing parameter " + prefix + "." + leaf);
    return it->second;
  };
  return {get("in_proj"), get("conv_w"), get("conv_b"), get("x_proj"), get("dt_w"),
          get("dt_b"),    get("a_log"),  get("d"),      get("out_proj")};
}

template <typename T>
Var<T> causal_conv1d(Var<T> x, Var<T> w, Var<T> b) {
  const Shape s = x.shape();
  if (s.size() != 3 || w.shape().size() != 2 || w.dim(1) != s[2]) {
    throw ShapeError("causal_conv1d: x " + shape_str(s) + " vs weight " + shape_str(w.shape()));
  }
  const std::size_t k = w.dim(0), len = s[1], c = s[2];
  Var<T> padded = x;
  if (k > 1) {
    auto zeros = x.graph().constant(NdArray<T>(Shape{s[0], k - 1, c}));
    padded = O::concat(std::vector<Var<T>>{zeros, x}, 1);
  }
  // Tap j sees the input shifted back by (k - 1 - j) steps.
  Var<T> acc = O::add(O::mul(O::slice(padded, 1, 0, len), O::reshape(O::slice(w, 0, 0, 1), {c})), b);
  for (std::size_t j = 1; j < k; ++j) {
    auto tap = O::reshape(O::slice(w, 0, j, j + 1), {c});
    acc = O::add(acc, O::mul(O::slice(padded, 1, j, j + len), tap));
  }
  return acc;
}

template <typename T>
Var<T> mamba_mixer(Var<T> x, const MambaParams<T>& p, const BlockConfig& cfg) {
  const std::size_t inner = cfg.mamba_inner();
  const std::size_t rank = cfg.dt_rank(), state = cfg.state_dim();
  auto xz = linear(x, p.in_proj);
  if (xz.shape().back() != 2 * inner) {
    throw ShapeError("mamba_mixer: in_proj width " + std::to_string(xz.shape().back()) +
                     ", expected " + std::to_string(2 * inner));
  }
  auto u = O::silu(causal_conv1d(O::slice(xz, 2, 0, inner), p.conv_w, p.conv_b));
  auto gate = O::slice(xz, 2, inner, 2 * inner);

  auto dbc = linear(u, p.x_proj);
  auto delta = O::softplus(linear(O::slice(dbc, 2, 0, rank), p.dt_w, p.dt_b));
  auto bm = O::slice(dbc, 2, rank, rank + state);
  auto cm = O::slice(dbc, 2, rank + state, rank + 2 * state);
  auto a = O::scale(O::exp(p.a_log), T(-1));

  auto y = O::ssm_scan(u, delta, a, bm, cm, p.d);
  return linear(O::mul(y, O::silu(gate)), p.out_proj);
}

// ------------------------------------------------------------------ init

namespace {

template <typename T>
NdArray<T> draw(RngStream& rng, DistributionSpec spec, Shape shape, double scale,
                double shift = 0.0) {
  auto a = rng_draw(rng, spec, shape);
  for (double& v : a.data()) v = v * scale + shift;
  return a.template cast<T>();
}

}  // namespace

template <typename T>
void init_layer_norm(ParamMap<T>& out, const std::string& prefix, std::size_t dim) {
  out[prefix + ".gain"] = NdArray<T>(Shape{dim}, T(1));
  out[prefix + ".bias"] = NdArray<T>(Shape{dim});
}

template <typename T>
void init_rms_norm(ParamMap<T>& out, const std::string& prefix, std::size_t dim) {
  out[prefix + ".gain"] = NdArray<T>(Shape{dim}, T(1));
}

template <typename T>
void init_linear(ParamMap<T>& out, const std::string& name, std::size_t in, std::size_t out_dim,
                 RngStream& rng, double std) {
  out[name] = draw<T>(rng, {Distribution::kStandardNormal}, {in, out_dim}, std);
}

template <typename T>
void init_bias(ParamMap<T>& out, const std::string& name, std::size_t dim) {
  out[name] = NdArray<T>(Shape{dim});
}

template <typename T>
void init_gelu_mlp(ParamMap<T>& out, const std::string& prefix, const BlockConfig& cfg,
                   RngStream& rng) {
  const std::size_t e = cfg.embed_dim, h = gelu_hidden_dim(cfg);
  init_linear(out, prefix + ".w_in", e, h, rng);
  init_bias(out, prefix + ".b_in", h);
  init_linear(out, prefix + ".w_out", h, e, rng);
  init_bias(out, prefix + ".b_out", e);
}

template <typename T>
void init_swiglu(ParamMap<T>& out, const std::string& prefix, const BlockConfig& cfg,
                 RngStream& rng) {
  const std::size_t e = cfg.embed_dim, h = swiglu_hidden_dim(cfg);
  init_linear(out, prefix + ".w_gate", e, h, rng);
  init_linear(out, prefix + ".w_up", e, h, rng);
  init_linear(out, prefix + ".w_down", h, e, rng);
}

template <typename T>
void init_attention(ParamMap<T>& out, const std::string& prefix, const BlockConfig& cfg,
                    RngStream& rng) {
  const std::size_t e = cfg.embed_dim;
  for (const char* w : {".wq", ".wk", ".wv", ".wo"}) init_linear(out, prefix + w, e, e, rng);
}

template <typename T>
void init_mamba(ParamMap<T>& out, const std::string& prefix, const BlockConfig& cfg,
                RngStream& rng) {
  const std::size_t e = cfg.embed_dim, inner = cfg.mamba_inner();
  const std::size_t rank = cfg.dt_rank(), state = cfg.state_dim(), k = cfg.mamba_conv_kernel;
  init_linear(out, prefix + ".in_proj", e, 2 * inner, rng);
  const double bound = 1.0 / std::sqrt(static_cast<double>(k));
  out[prefix + ".conv_w"] = draw<T>(rng, {Distribution::kUniformUnit}, {k, inner}, 2 * bound, -bound);
  init_bias(out, prefix + ".conv_b", inner);
  init_linear(out, prefix + ".x_proj", inner, rank + 2 * state, rng);
  init_linear(out, prefix + ".dt_w", rank, inner, rng);

  // dt = softplus(dt_b) lands log-uniformly in [1e-3, 1e-1].
  const double lo = std::log(1e-3), hi = std::log(1e-1);
  auto u = rng_draw(rng, {Distribution::kUniformUnit}, {inner});
  NdArray<T> dt_b(Shape{inner});
  for (std::size_t i = 0; i < inner; ++i) {
    const double dt = std::exp(lo + u[i] * (hi - lo));
    dt_b[i] = static_cast<T>(dt + std::log(-std::expm1(-dt)));
  }
  out[prefix + ".dt_b"] = std::move(dt_b);

  NdArray<T> a_log(Shape{inner, state});
  for (std::size_t i = 0; i < inner; ++i) {
    for (std::size_t n = 0; n < state; ++n) {
      a_log[i * state + n] = static_cast<T>(std::log(static_cast<double>(n + 1)));
    }
  }
  out[prefix + ".a_log"] = std::move(a_log);
  out[prefix + ".d"] = NdArray<T>(Shape{inner}, T(1));
  init_linear(out, prefix + ".out_proj", inner, e, rng);
}

#define HICL_INSTANTIATE(T)                                                                    \
  template Var<T> linear<T>(Var<T>, Var<T>);                                                   \
  template Var<T> linear<T>(Var<T>, Var<T>, Var<T>);                                           \
  template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, double);                               \
  template Var<T> rms_norm<T>(Var<T>, Var<T>, double);                                         \
  template Var<T> gelu_mlp<T>(Var<T>, Var<T>, Var<T>, Var<T>, Var<T>);                         \
  template Var<T> swiglu_ffn<T>(Var<T>, Var<T>, Var<T>, Var<T>);                               \
  template Var<T> absolute_pos_embed<T>(Var<T>, std::size_t);                                  \
  template Var<T> rope_apply<T>(Var<T>, const std::vector<double>&, double);                   \
  template Var<T> causal_attention<T>(Var<T>, Var<T>, Var<T>, Var<T>, Var<T>,                  \
                                      const AttentionOptions&);                                \
  template struct MambaParams<T>;                                                              \
  template Var<T> causal_conv1d<T>(Var<T>, Var<T>, Var<T>);                                    \
  template Var<T> mamba_mixer<T>(Var<T>, const MambaParams<T>&, const BlockConfig&);           \
  template void init_layer_norm<T>(ParamMap<T>&, const std::string&, std::size_t);             \
  template void init_rms_norm<T>(ParamMap<T>&, const std::string&, std::size_t);               \
  template void init_linear<T>(ParamMap<T>&, const std::string&, std::size_t, std::size_t,     \
                               RngStream&, double);                                            \
  template void init_bias<T>(ParamMap<T>&, const std::string&, std::size_t);                   \
  template void init_gelu_mlp<T>(ParamMap<T>&, const std::string&, const BlockConfig&,         \
                                 RngStream&);                                                  \
  template void init_swiglu<T>(ParamMap<T>&, const std::string&, const BlockConfig&,           \
                               RngStream&);                                                    \
  template void init_attention<T>(ParamMap<T>&, const std::string&, const BlockConfig&,        \
                                  RngStream&);                                                 \
  template void init_mamba<T>(ParamMap<T>&, const std::string&, const BlockConfig&, RngStream&);

HICL_INSTANTIATE(float)
HICL_INSTANTIATE(double)

#undef HICL_INSTANTIATE

}  // namespace hicl
