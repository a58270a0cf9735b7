#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hicl/numerics/gradcheck.hpp"

namespace hicl {

struct GradcheckCase {
  std::string name;  // block name or "variant <id>"
  std::uint64_t seed = 0;
  GradcheckReport report;
};

struct GradcheckSuiteOptions {
  std::size_t seeds = 10;
  bool blocks = true;
  bool variants = true;
  std::size_t block_coords = 16;   // per tensor
  std::size_t variant_coords = 6;  // per tensor
};

// Blocks: layer_norm, rms_norm, gelu_mlp, swiglu_ffn, attention with and
// without rope, mamba_mixer. Variants: all 12 at 2 layers, embed 32, 2 heads.
// 64-bit, step 1e-5, tolerance 1e-4.
std::vector<GradcheckCase> run_gradcheck_suite(
    const GradcheckSuiteOptions& options,
    const std::function<void(const GradcheckCase&)>& on_case = {});

}  // namespace hicl
