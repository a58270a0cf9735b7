#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "hicl/numerics/ndarray.hpp"

namespace hicl {

template <typename T>
using ParamMap = std::map<std::string, NdArray<T>>;

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Both default to off; the original training recipe states neither.
  double weight_decay = 0.0;  // decoupled (AdamW-style) when > 0
  double grad_clip = 0.0;     // global L2 norm clip when > 0
  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  ParamMap<T> first_moment;
  ParamMap<T> second_moment;
};

template <typename T>
AdamState<T> make_adam_state(const ParamMap<T>& params, const AdamConfig& config);

// One bias-corrected Adam update of every parameter in place.
// Throws ShapeError on mismatched names/shapes, NonFiniteError on NaN/Inf
// gradients (parameters and state are left untouched in both cases).
template <typename T>
void adam_step(ParamMap<T>& params, const ParamMap<T>& grads, AdamState<T>& state);

}  // namespace hicl
