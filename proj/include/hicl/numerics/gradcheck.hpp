#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "hicl/numerics/adam.hpp"
#include "hicl/numerics/graph.hpp"

namespace hicl {

// Builds a scalar loss on `graph` from the bound parameter leaves.
using LossBuilder = std::function<Var<double>(
    Graph<double>& graph, const std::map<std::string, Var<double>>& params)>;

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor);
  // the floor keeps near-zero gradients from turning roundoff into failures.
  double magnitude_floor = 1e-3;
  // Coordinates checked per parameter tensor; larger tensors are subsampled.
  std::size_t max_coords_per_param = 16;
  std::uint64_t seed = 0;
};

struct GradcheckReport {
  double max_relative_error = 0.0;
  bool pass = false;
  std::size_t coordinates_checked = 0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Compares backward() against central finite differences obtained by
// re-executing the recorded graph with perturbed parameter bindings.
GradcheckReport gradcheck(const ParamMap<double>& params,
                          const LossBuilder& build,
                          const GradcheckOptions& options = {});

}  // namespace hicl
