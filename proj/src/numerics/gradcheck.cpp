#include "hicl/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "hicl/numerics/rng.hpp"

namespace hicl {

GradcheckReport gradcheck(const ParamMap<double>& params,
                          const LossBuilder& build,
                          const GradcheckOptions& options) {
  Graph<double> graph;
  std::map<std::string, Var<double>> vars;
  for (const auto& [name, value] : params) vars[name] = graph.parameter(name, value);
  Var<double> loss = build(graph, vars);
  if (loss.value().size() != 1) {
    throw ShapeError("gradcheck: loss must be scalar, got " + shape_str(loss.shape()));
  }
  graph.mark_output("loss", loss);
  const auto analytic = graph.backward(loss);

  RngStream rng(options.seed, 0x67726164ull);
  GradcheckReport report;
  for (const auto& [name, value] : params) {
    std::vector<std::size_t> coords(value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > options.max_coords_per_param) {
      // Partial Fisher-Yates: the first max_coords entries become the sample.
      for (std::size_t i = 0; i < options.max_coords_per_param; ++i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(
            static_cast<std::int64_t>(i), static_cast<std::int64_t>(coords.size() - 1)));
        std::swap(coords[i], coords[j]);
      }
      coords.resize(options.max_coords_per_param);
    }
    NdArray<double> probe = value;
    for (std::size_t idx : coords) {
      const double orig = value[idx];
      probe[idx] = orig + options.step;
      const double plus = graph.forward({{name, probe}}).at("loss").item();
      probe[idx] = orig - options.step;
      const double minus = graph.forward({{name, probe}}).at("loss").item();
      probe[idx] = orig;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double exact = analytic.at(name)[idx];
      const double denom =
          std::max({std::abs(exact), std::abs(numeric), options.magnitude_floor});
      const double rel = std::abs(exact - numeric) / denom;
      ++report.coordinates_checked;
      if (rel > report.max_relative_error || report.worst_parameter.empty()) {
        report.max_relative_error = std::max(rel, report.max_relative_error);
        if (rel >= report.max_relative_error) {
          report.worst_parameter = name;
          report.worst_index = idx;
          report.worst_analytic = exact;
          report.worst_numeric = numeric;
        }
      }
    }
    graph.forward({{name, value}});
  }
  report.pass = report.max_relative_error < options.tolerance;
  return report;
}

}  // namespace hicl
