#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "hicl/numerics/adam.hpp"
#include "hicl/numerics/graph.hpp"
#include "hicl/numerics/rng.hpp"

namespace hicl {

template <typename T>
using VarMap = std::map<std::string, Var<T>>;

// Zero in the size fields means "derive from embed_dim" (see resolved()).
struct BlockConfig {
  std::size_t embed_dim = 64;
  std::size_t n_heads = 2;
  std::size_t ffn_hidden_dim = 0;
  std::size_t mamba_state_dim = 0;
  std::size_t mamba_conv_kernel = 4;
  std::size_t mamba_expand = 4;
  std::size_t mamba_dt_rank = 0;
  double rope_base = 10000.0;
  double norm_epsilon = 1e-5;

  std::size_t head_dim() const { return embed_dim / n_heads; }
  std::size_t mamba_inner() const { return mamba_expand * embed_dim; }
  std::size_t state_dim() const;
  std::size_t dt_rank() const;
  // Throws ConfigError when the invariants fail.
  void validate(bool uses_rope) const;
  friend bool operator==(const BlockConfig&, const BlockConfig&) = default;
};

std::size_t gelu_hidden_dim(const BlockConfig& cfg);
std::size_t swiglu_hidden_dim(const BlockConfig& cfg);

// Weights are stored [in, out]; x is [..., in].
template <typename T>
Var<T> linear(Var<T> x, Var<T> w);
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b);

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, double eps);
template <typename T>
Var<T> rms_norm(Var<T> x, Var<T> gain, double eps);

template <typename T>
Var<T> gelu_mlp(Var<T> x, Var<T> w_in, Var<T> b_in, Var<T> w_out, Var<T> b_out);
template <typename T>
Var<T> swiglu_ffn(Var<T> x, Var<T> w_gate, Var<T> w_up, Var<T> w_down);

// Rows [0, seq_len) of a learned [max_len, embed] table.
template <typename T>
Var<T> absolute_pos_embed(Var<T> table, std::size_t seq_len);

// Rotates interleaved pairs (2i, 2i+1) of the last axis. x is [..., L, D];
// positions has one entry per L.
template <typename T>
Var<T> rope_apply(Var<T> x, const std::vector<double>& positions, double base);

struct AttentionOptions {
  std::size_t n_heads = 1;
  bool rope = false;
  double rope_base = 10000.0;
};

// x is [B, L, E]; no projection biases.
template <typename T>
Var<T> causal_attention(Var<T> x, Var<T> wq, Var<T> wk, Var<T> wv, Var<T> wo,
                        const AttentionOptions& opt);

template <typename T>
struct MambaParams {
  Var<T> in_proj;   // [E, 2I]
  Var<T> conv_w;    // [K, I]
  Var<T> conv_b;    // [I]
  Var<T> x_proj;    // [I, R + 2S]
  Var<T> dt_w;      // [R, I]
  Var<T> dt_b;      // [I]
  Var<T> a_log;     // [I, S]
  Var<T> d;         // [I]
  Var<T> out_proj;  // [I, E]

  static MambaParams bind(const VarMap<T>& vars, const std::string& prefix);
};

// Depthwise causal convolution along axis 1 of [B, L, C]; w is [K, C].
template <typename T>
Var<T> causal_conv1d(Var<T> x, Var<T> w, Var<T> b);

template <typename T>
Var<T> mamba_mixer(Var<T> x, const MambaParams<T>& p, const BlockConfig& cfg);

// Parameter initialization. Each adds named arrays under `prefix`.
template <typename T>
void init_layer_norm(ParamMap<T>& out, const std::string& prefix, std::size_t dim);
template <typename T>
void init_rms_norm(ParamMap<T>& out, const std::string& prefix, std::size_t dim);
template <typename T>
void init_linear(ParamMap<T>& out, const std::string& name, std::size_t in, std::size_t out_dim,
                 RngStream& rng, double std = 0.02);
template <typename T>
void init_bias(ParamMap<T>& out, const std::string& name, std::size_t dim);
template <typename T>
void init_gelu_mlp(ParamMap<T>& out, const std::string& prefix, const BlockConfig& cfg,
                   RngStream& rng);
template <typename T>
void init_swiglu(ParamMap<T>& out, const std::string& prefix, const BlockConfig& cfg,
                 RngStream& rng);
template <typename T>
void init_attention(ParamMap<T>& out, const std::string& prefix, const BlockConfig& cfg,
                    RngStream& rng);
template <typename T>
void init_mamba(ParamMap<T>& out, const std::string& prefix, const BlockConfig& cfg,
                RngStream& rng);

}  // namespace hicl
