#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "hicl/blocks/blocks.hpp"
#include "hicl/numerics/adam.hpp"
#include "hicl/numerics/graph.hpp"
#include "hicl/numerics/ndarray.hpp"
#include "hicl/numerics/rng.hpp"

namespace hicl {

enum class PosEmb { kAbsolute, kRope, kNone, kMambaPrefix };
enum class FfnKind { kGeluMlp, kSwiglu, kMambaMixer, kNone };
enum class NormKind { kLayer, kRms };
enum class AttnKind { kMha, kNone };

std::string to_string(PosEmb v);
std::string to_string(FfnKind v);
std::string to_string(NormKind v);
std::string to_string(AttnKind v);

struct VariantInfo {
  std::string id;
  std::string name;
  PosEmb pos;
  FfnKind ffn;
  NormKind norm;
  AttnKind attn;
};

// The 12 variants, in table order.
const std::vector<VariantInfo>& variant_table();
// Throws ConfigError for unknown ids.
const VariantInfo& find_variant(const std::string& id);

struct ArchitectureSpec {
  std::string variant_id = "1";
  std::size_t n_layers = 3;
  std::size_t input_dim = 20;
  std::size_t output_dim = 1;
  // Longest prompt (in points) the model accepts; sizes the absolute table.
  std::size_t max_points = 41;
  // Layer multiplier for attention-free stacks (variant 3).
  std::size_t mamba_layer_multiplier = 1;
  std::size_t prefix_depth = 1;

  const VariantInfo& variant() const { return find_variant(variant_id); }
  std::size_t layer_count() const;
  std::size_t max_tokens() const { return 2 * max_points; }
  void validate(const BlockConfig& cfg) const;
  friend bool operator==(const ArchitectureSpec&, const ArchitectureSpec&) = default;
};

// Prompts in 64-bit regardless of model precision.
struct PromptBatch {
  NdArray<double> xs;  // [B, N, d]
  NdArray<double> ys;  // [B, N, out]
  std::size_t active_points = 0;
  std::size_t active_dims = 0;
  // First point index that counts toward the loss.
  std::size_t loss_begin = 0;

  std::size_t batch() const { return xs.dim(0); }
  std::size_t n_points() const { return xs.dim(1); }
  std::size_t input_dim() const { return xs.dim(2); }
  std::size_t output_dim() const { return ys.dim(2); }
  void validate() const;
};

// Interleaves x_0, y_0, x_1, y_1, ... into [B, 2N, d]. Scalar y sits in
// coordinate 0 of its token.
template <typename T>
NdArray<T> embed_prompt(const PromptBatch& batch);

template <typename T>
class Model {
 public:
  Model(ArchitectureSpec spec, BlockConfig cfg, ParamMap<T> params);
  static Model build(const ArchitectureSpec& spec, const BlockConfig& cfg, RngStream& rng);

  const ArchitectureSpec& spec() const { return spec_; }
  const BlockConfig& config() const { return cfg_; }
  const ParamMap<T>& params() const { return params_; }
  ParamMap<T>& params() { return params_; }
  std::size_t parameter_count() const;

  // Registers every parameter as a graph leaf.
  VarMap<T> bind(Graph<T>& g) const;
  // tokens [B, L, d] -> outputs [B, L, out] at every position.
  Var<T> forward(Var<T> tokens, const VarMap<T>& p) const;
  // Outputs read at the x-token positions: [B, N, out].
  Var<T> predict(Graph<T>& g, const VarMap<T>& p, const PromptBatch& batch) const;
  NdArray<T> predict(const PromptBatch& batch) const;

  // One line per structural element, e.g. "layer 0: layer-norm -> mha(rope)".
  std::vector<std::string> describe() const;

 private:
  ArchitectureSpec spec_;
  BlockConfig cfg_;
  ParamMap<T> params_;
};

template <typename T>
ParamMap<T> init_params(const ArchitectureSpec& spec, const BlockConfig& cfg, RngStream& rng);

// Mean squared error over points [loss_begin, active_points) and all outputs.
template <typename T>
Var<T> prompt_loss(Var<T> predictions, const PromptBatch& batch);

}  // namespace hicl
