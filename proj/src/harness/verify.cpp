#include "hicl/harness/verify.hpp"

#include "hicl/blocks/blocks.hpp"
#include "hicl/models/model.hpp"
#include "hicl/numerics/ops.hpp"

namespace hicl {

namespace O = ops;

namespace {

using Arr = NdArray<double>;

Arr randn(RngStream& rng, Shape shape, double scale = 1.0) {
  auto a = rng_draw(rng, {Distribution::kStandardNormal}, std::move(shape));
  for (double& v : a.data()) v *= scale;
  return a;
}

// Random linear functional of a block output, so every output entry matters.
Var<double> project(Var<double> out, std::uint64_t seed) {
  RngStream rng(seed, 99);
  auto r = rng_draw(rng, {Distribution::kStandardNormal}, out.shape());
  return O::sum_all(O::mul(out, out.graph().constant(std::move(r))));
}

struct BlockCase {
  const char* name;
  std::function<ParamMap<double>(RngStream&)> params;
  LossBuilder build;
};

std::vector<BlockCase> block_cases() {
  BlockConfig m;
  m.embed_dim = 4;
  m.mamba_expand = 2;
  m.mamba_state_dim = 3;
  m.mamba_conv_kernel = 3;
  auto attention = [](RngStream& r) {
    return ParamMap<double>{{"x", randn(r, {2, 4, 4})}, {"q", randn(r, {4, 4}, 0.7)},
                            {"k", randn(r, {4, 4}, 0.7)}, {"v", randn(r, {4, 4})},
                            {"o", randn(r, {4, 4})}};
  };
  auto attend = [](bool rope, double base, std::uint64_t proj) -> LossBuilder {
    return [=](Graph<double>&, const VarMap<double>& p) {
      return project(causal_attention(p.at("x"), p.at("q"), p.at("k"), p.at("v"), p.at("o"),
                                      {2, rope, base}),
                     proj);
    };
  };
  return {
      {"layer_norm",
       [](RngStream& r) {
         return ParamMap<double>{{"x", randn(r, {2, 3, 5})}, {"g", randn(r, {5})}, {"b", randn(r, {5})}};
       },
       [](Graph<double>&, const VarMap<double>& p) {
         return project(layer_norm(p.at("x"), p.at("g"), p.at("b"), 1e-5), 1);
       }},
      {"rms_norm",
       [](RngStream& r) { return ParamMap<double>{{"x", randn(r, {2, 3, 5})}, {"g", randn(r, {5})}}; },
       [](Graph<double>&, const VarMap<double>& p) {
         return project(rms_norm(p.at("x"), p.at("g"), 1e-5), 2);
       }},
      {"gelu_mlp",
       [](RngStream& r) {
         return ParamMap<double>{{"x", randn(r, {2, 3, 4})}, {"wi", randn(r, {4, 6})},
                                 {"bi", randn(r, {6})}, {"wo", randn(r, {6, 4})},
                                 {"bo", randn(r, {4})}};
       },
       [](Graph<double>&, const VarMap<double>& p) {
         return project(gelu_mlp(p.at("x"), p.at("wi"), p.at("bi"), p.at("wo"), p.at("bo")), 3);
       }},
      {"swiglu_ffn",
       [](RngStream& r) {
         return ParamMap<double>{{"x", randn(r, {2, 3, 4})}, {"wg", randn(r, {4, 6})},
                                 {"wu", randn(r, {4, 6})}, {"wd", randn(r, {6, 4})}};
       },
       [](Graph<double>&, const VarMap<double>& p) {
         return project(swiglu_ffn(p.at("x"), p.at("wg"), p.at("wu"), p.at("wd")), 4);
       }},
      {"causal_attention", attention, attend(false, 1e4, 7)},
      {"rope_attention", attention, attend(true, 10.0, 8)},
      {"mamba_mixer",
       [m](RngStream& r) {
         ParamMap<double> p;
         init_mamba(p, "m", m, r);
         for (const char* w : {"m.in_proj", "m.x_proj", "m.dt_w", "m.out_proj", "m.conv_b"}) {
           p[w] = randn(r, p[w].shape(), 0.5);
         }
         p["x"] = randn(r, {2, 5, 4});
         return p;
       },
       [m](Graph<double>&, const VarMap<double>& p) {
         return project(mamba_mixer(p.at("x"), MambaParams<double>::bind(p, "m"), m), 9);
       }},
  };
}

}  // namespace

std::vector<GradcheckCase> run_gradcheck_suite(
    const GradcheckSuiteOptions& options,
    const std::function<void(const GradcheckCase&)>& on_case) {
  std::vector<GradcheckCase> out;
  auto record = [&](GradcheckCase c) {
    if (on_case) on_case(c);
    out.push_back(std::move(c));
  };

  if (options.blocks) {
    const auto cases = block_cases();
    for (std::size_t k = 0; k < cases.size(); ++k) {
      for (std::uint64_t seed = 0; seed < options.seeds; ++seed) {
        RngStream rng(seed, 1000 + k);
        GradcheckOptions g;
        g.seed = seed;
        g.max_coords_per_param = options.block_coords;
        record({cases[k].name, seed, gradcheck(cases[k].params(rng), cases[k].build, g)});
      }
    }
  }

  if (options.variants) {
    ArchitectureSpec spec;
    spec.n_layers = 2;
    spec.input_dim = 3;
    spec.max_points = 4;
    BlockConfig cfg;
    cfg.embed_dim = 32;
    cfg.n_heads = 2;
    for (const auto& v : variant_table()) {
      spec.variant_id = v.id;
      for (std::uint64_t seed = 0; seed < options.seeds; ++seed) {
        RngStream rng(seed, 2000);
        auto model = Model<double>::build(spec, cfg, rng);
        // The zero-initialised read-out would hide every upstream gradient.
        model.params()["read_out.w"] = randn(rng, model.params().at("read_out.w").shape());
        PromptBatch batch;
        batch.xs = randn(rng, {1, 3, 3});
        batch.ys = randn(rng, {1, 3, 1});
        batch.active_points = 3;
        batch.active_dims = 3;
        GradcheckOptions g;
        g.seed = seed;
        g.max_coords_per_param = options.variant_coords;
        const LossBuilder loss = [&](Graph<double>& graph, const VarMap<double>& p) {
          return prompt_loss(model.predict(graph, p, batch), batch);
        };
        record({"variant " + v.id, seed, gradcheck(model.params(), loss, g)});
      }
    }
  }
  return out;
}

}  // namespace hicl
