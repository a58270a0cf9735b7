#include "hicl/numerics/adam.hpp"

#include <cmath>

namespace hicl {

template <typename T>
AdamState<T> make_adam_state(const ParamMap<T>& params, const AdamConfig& config) {
  AdamState<T> s;
  s.config = config;
  for (const auto& [name, p] : params) {
    s.first_moment.emplace(name, NdArray<T>(p.shape()));
    s.second_moment.emplace(name, NdArray<T>(p.shape()));
  }
  return s;
}

template <typename T>
void adam_step(ParamMap<T>& params, const ParamMap<T>& grads, AdamState<T>& state) {
  if (grads.size() != params.size()) {
    throw ShapeError("adam_step: " + std::to_string(grads.size()) +
                     " gradients for " + std::to_string(params.size()) +
                     " parameters");
  }
  double norm2 = 0.0;
  for (const auto& [name, p] : params) {
    auto g = grads.find(name);
    if (g == grads.end()) throw ShapeError("adam_step: no gradient for '" + name + "'");
    auto m = state.first_moment.find(name);
    auto v = state.second_moment.find(name);
    if (m == state.first_moment.end() || v == state.second_moment.end()) {
      throw ShapeError("adam_step: no moment state for '" + name + "'");
    }
    if (g->second.shape() != p.shape() || m->second.shape() != p.shape() ||
        v->second.shape() != p.shape()) {
      throw ShapeError("adam_step: shape mismatch for '" + name + "'");
    }
    for (T x : g->second.data()) {
      if (!std::isfinite(x)) {
        throw NonFiniteError("adam_step: non-finite gradient for '" + name + "'");
      }
      norm2 += static_cast<double>(x) * x;
    }
  }

  const AdamConfig& cfg = state.config;
  double clip_scale = 1.0;
  if (cfg.grad_clip > 0.0) {
    const double norm = std::sqrt(norm2);
    if (norm > cfg.grad_clip) clip_scale = cfg.grad_clip / norm;
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T bc1 = static_cast<T>(1.0 - std::pow(cfg.beta1, t));
  const T bc2 = static_cast<T>(1.0 - std::pow(cfg.beta2, t));
  const T lr = static_cast<T>(cfg.learning_rate);
  const T eps = static_cast<T>(cfg.epsilon);
  const T wd = static_cast<T>(cfg.weight_decay);
  const T cs = static_cast<T>(clip_scale);

  for (auto& [name, p] : params) {
    const auto& g = grads.at(name);
    auto& m = state.first_moment.at(name);
    auto& v = state.second_moment.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T gi = g[i] * cs;
      m[i] = b1 * m[i] + (T(1) - b1) * gi;
      v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
      const T mhat = m[i] / bc1;
      const T vhat = v[i] / bc2;
      p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]);
    }
  }
}

template AdamState<float> make_adam_state(const ParamMap<float>&, const AdamConfig&);
template AdamState<double> make_adam_state(const ParamMap<double>&, const AdamConfig&);
template void adam_step(ParamMap<float>&, const ParamMap<float>&, AdamState<float>&);
template void adam_step(ParamMap<double>&, const ParamMap<double>&, AdamState<double>&);

}  // namespace hicl
