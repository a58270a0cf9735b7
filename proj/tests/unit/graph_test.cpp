#include <bit>
#include <cmath>
#include <cstring>
#include <functional>

#include "doctest.h"
#include "hicl/numerics/gradcheck.hpp"
#include "hicl/numerics/graph.hpp"
#include "hicl/numerics/ops.hpp"
#include "hicl/numerics/rng.hpp"

using namespace hicl;
namespace O = hicl::ops;

namespace {

NdArray<double> randn(RngStream& rng, Shape shape, double scale = 1.0) {
  auto a = rng_draw(rng, {Distribution::kStandardNormal}, shape);
  for (double& v : a.data()) v *= scale;
  return a;
}

NdArray<double> positive(RngStream& rng, Shape shape) {
  auto a = rng_draw(rng, {Distribution::kUniformUnit}, shape);
  for (double& v : a.data()) v = 0.5 + v;
  return a;
}

// sum(out * R) with a fixed random R, so every output coordinate matters.
Var<double> project(Var<double> out, std::uint64_t seed) {
  RngStream rng(seed, 99);
  auto r = rng_draw(rng, {Distribution::kStandardNormal}, out.shape());
  return O::sum_all(O::mul(out, out.graph().constant(std::move(r))));
}

// Central-difference oracle written directly against a scalar function.
double finite_difference(const std::function<double(const NdArray<double>&)>& f,
                         NdArray<double> x, std::size_t i, double h = 1e-5) {
  const double orig = x[i];
  x[i] = orig + h;
  const double plus = f(x);
  x[i] = orig - h;
  const double minus = f(x);
  return (plus - minus) / (2 * h);
}

}  // namespace

TEST_CASE("forward examples") {
  Graph<double> g;
  auto leaf = g.input("x", NdArray<double>(Shape{1, 2}, {1, 2}));
  auto id = O::reshape(leaf, {1, 2});
  CHECK(id.value() == NdArray<double>(Shape{1, 2}, {1, 2}));

  auto sm = O::softmax(g.input("z", NdArray<double>(Shape{2}, {0, 0})));
  CHECK(sm.value()[0] == doctest::Approx(0.5));
  CHECK(sm.value()[1] == doctest::Approx(0.5));

  RngStream rng(1, 0);
  NdArray<double> eye(Shape{3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.at({i, i}) = 1;
  auto b = randn(rng, {3, 3});
  auto prod = O::matmul(g.input("I", eye), g.input("B", b));
  CHECK(prod.value() == b);
}

TEST_CASE("backward examples") {
  Graph<double> g;
  auto p = g.parameter("p", NdArray<double>(Shape{2}, {1, -2}));
  auto q = g.parameter("q", NdArray<double>(Shape{2}, {3, 4}));
  auto loss = O::sum_all(O::mul(p, p));
  auto grads = g.backward(loss);
  CHECK(grads.at("p") == NdArray<double>(Shape{2}, {2, -4}));
  CHECK(grads.at("q") == NdArray<double>(Shape{2}));  // unused -> zeros

  Graph<double> g2;
  auto r = g2.parameter("r", NdArray<double>(Shape{3}, {1, 2, 3}));
  (void)r;
  auto c = O::sum_all(g2.constant(NdArray<double>(Shape{2}, {5, 6})));
  CHECK(g2.backward(c).at("r") == NdArray<double>(Shape{3}));
}

TEST_CASE("backward errors") {
  Graph<double> g;
  auto p = g.parameter("p", NdArray<double>(Shape{2}, {1, 2}));
  CHECK_THROWS_AS(g.backward(O::exp(p)), ShapeError);

  auto neg = g.constant(NdArray<double>(Shape{1}, {-1.0}));
  try {
    O::log(neg);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(e.node() == g.size() - 1);
  }
  CHECK_THROWS_AS(O::matmul(p, p), ShapeError);
  CHECK_THROWS_AS(g.input("p", NdArray<double>(Shape{1})), Error);
}

TEST_CASE("random 3-layer composite matches finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(seed, 1);
    const auto x = randn(rng, {4, 3});
    const auto w1 = randn(rng, {3, 5}, 0.5), w2 = randn(rng, {5, 4}, 0.5),
               w3 = randn(rng, {4, 1}, 0.5);
    auto f = [&](const NdArray<double>& w1v, Graph<double>& g, bool param) {
      auto xin = g.constant(x);
      auto a = param ? g.parameter("w1", w1v) : g.constant(w1v);
      auto h1 = O::tanh(O::matmul(xin, a));
      auto h2 = O::gelu(O::matmul(h1, g.constant(w2)));
      return O::mean_all(O::exp(O::matmul(h2, g.constant(w3))));
    };
    Graph<double> g;
    auto loss = f(w1, g, true);
    const auto grads = g.backward(loss);
    auto scalar_f = [&](const NdArray<double>& w) {
      Graph<double> h;
      return f(w, h, false).value().item();
    };
    for (std::size_t i = 0; i < w1.size(); ++i) {
      const double fd = finite_difference(scalar_f, w1, i);
      const double an = grads.at("w1")[i];
      CHECK(std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-3}) < 1e-4);
    }
  }
}

TEST_CASE("re-execution is bit-reproducible") {
  RngStream rng(2, 0);
  Graph<double> g;
  auto x = g.input("x", randn(rng, {3, 4}));
  auto w = g.parameter("w", randn(rng, {4, 4}));
  auto y = O::softmax(O::matmul(O::silu(x), w));
  g.mark_output("y", y);
  const auto first = y.value();
  const auto again = g.forward({});
  CHECK(std::memcmp(first.ptr(), again.at("y").ptr(), first.size() * sizeof(double)) == 0);

  auto x2 = randn(rng, {3, 4});
  const auto rebound = g.forward({{"x", x2}});
  const auto rebound2 = g.forward({{"x", x2}});
  CHECK(rebound.at("y") == rebound2.at("y"));
  CHECK_FALSE(rebound.at("y") == first);
  CHECK_THROWS_AS(g.forward({{"x", randn(rng, {2, 4})}}), ShapeError);
}

TEST_CASE("linearity: gradient of a sum is the sum of gradients") {
  RngStream rng(4, 0);
  const auto pv = randn(rng, {3, 3});
  auto l1 = [](Var<double> p) { return O::sum_all(O::tanh(p)); };
  auto l2 = [](Var<double> p) { return O::mean_all(O::mul(p, O::sigmoid(p))); };
  Graph<double> ga, gb, gc;
  const auto g1 = ga.backward(l1(ga.parameter("p", pv)));
  const auto g2 = gb.backward(l2(gb.parameter("p", pv)));
  auto pc = gc.parameter("p", pv);
  const auto g12 = gc.backward(O::add(l1(pc), l2(pc)));
  for (std::size_t i = 0; i < pv.size(); ++i) {
    CHECK(g12.at("p")[i] == doctest::Approx(g1.at("p")[i] + g2.at("p")[i]).epsilon(1e-12));
  }
}

TEST_CASE("every primitive passes gradcheck over 20 seeds") {
  using Builder = std::function<Var<double>(Graph<double>&,
                                            const std::map<std::string, Var<double>>&)>;
  struct Case {
    const char* name;
    std::function<ParamMap<double>(RngStream&)> params;
    Builder build;
  };
  const std::vector<Case> cases = {
      {"matmul", [](RngStream& r) { return ParamMap<double>{{"a", randn(r, {2, 3, 4})}, {"b", randn(r, {4, 5})}}; },
       [](auto&, auto& p) { return project(O::matmul(p.at("a"), p.at("b")), 1); }},
      {"bmm", [](RngStream& r) { return ParamMap<double>{{"a", randn(r, {2, 3, 4})}, {"b", randn(r, {2, 4, 5})}}; },
       [](auto&, auto& p) { return project(O::bmm(p.at("a"), p.at("b")), 2); }},
      {"bmm_t", [](RngStream& r) { return ParamMap<double>{{"a", randn(r, {2, 3, 4})}, {"b", randn(r, {2, 5, 4})}}; },
       [](auto&, auto& p) { return project(O::bmm(p.at("a"), p.at("b"), true), 3); }},
      {"add_broadcast", [](RngStream& r) { return ParamMap<double>{{"a", randn(r, {2, 3, 4})}, {"b", randn(r, {4})}}; },
       [](auto&, auto& p) { return project(O::add(p.at("a"), p.at("b")), 4); }},
      {"sub_keepdim", [](RngStream& r) { return ParamMap<double>{{"a", randn(r, {2, 3, 4})}, {"b", randn(r, {2, 3, 1})}}; },
       [](auto&, auto& p) { return project(O::sub(p.at("a"), p.at("b")), 5); }},
      {"mul_div", [](RngStream& r) { return ParamMap<double>{{"a", randn(r, {3, 4})}, {"b", positive(r, {3, 4})}}; },
       [](auto&, auto& p) { return project(O::div(O::mul(p.at("a"), p.at("b")), p.at("b")), 6); }},
      {"maximum", [](RngStream& r) { return ParamMap<double>{{"a", randn(r, {3, 4})}, {"b", randn(r, {3, 4})}}; },
       [](auto&, auto& p) { return project(O::maximum(p.at("a"), p.at("b")), 7); }},
      {"unary", [](RngStream& r) { return ParamMap<double>{{"a", positive(r, {3, 4})}, {"b", randn(r, {3, 4})}}; },
       [](auto&, auto& p) {
         auto a = p.at("a");
         auto b = p.at("b");
         auto t = O::add(O::log(a), O::sqrt(a));
         t = O::add(t, O::exp(O::scale(b, 0.5)));
         t = O::add(t, O::tanh(b));
         t = O::add(t, O::sigmoid(b));
         t = O::add(t, O::silu(b));
         t = O::add(t, O::softplus(b));
         t = O::add(t, O::gelu(b));
         t = O::add(t, O::relu(O::add_scalar(b, 0.1)));
         return project(t, 8);
       }},
      {"reductions", [](RngStream& r) { return ParamMap<double>{{"a", randn(r, {2, 3, 4})}}; },
       [](auto&, auto& p) {
         auto a = p.at("a");
         return O::add(O::add(project(O::sum(a, 1), 9), project(O::mean(a, 2, true), 10)),
                       O::mean_all(O::mul(a, a)));
       }},
      {"layout", [](RngStream& r) { return ParamMap<double>{{"a", randn(r, {2, 3, 4})}, {"b", randn(r, {2, 2, 4})}}; },
       [](auto&, auto& p) {
         auto a = O::permute(p.at("a"), {2, 0, 1});
         auto s = O::slice(p.at("a"), 1, 1, 3);
         auto c = O::concat(std::vector<Var<double>>{s, p.at("b")}, 1);
         return O::add(project(a, 11), project(O::reshape(c, {32}), 12));
       }},
      {"softmax", [](RngStream& r) { return ParamMap<double>{{"a", randn(r, {2, 5, 5})}}; },
       [](auto&, auto& p) { return O::add(project(O::softmax(p.at("a")), 13),
                                          project(O::softmax(p.at("a"), true), 14)); }},
      {"ssm_scan",
       [](RngStream& r) {
         auto delta = positive(r, {2, 4, 3});
         auto a = positive(r, {3, 2});
         for (double& v : a.data()) v = -v;
         return ParamMap<double>{{"u", randn(r, {2, 4, 3})}, {"delta", delta}, {"A", a},
                                 {"B", randn(r, {2, 4, 2})}, {"C", randn(r, {2, 4, 2})},
                                 {"D", randn(r, {3})}};
       },
       [](auto&, auto& p) {
         return project(O::ssm_scan(p.at("u"), p.at("delta"), p.at("A"), p.at("B"),
                                    p.at("C"), p.at("D")), 15);
       }},
  };
  for (const auto& c : cases) {
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      RngStream rng(seed, 1234);
      GradcheckOptions opt;
      opt.seed = seed;
      const auto rep = gradcheck(c.params(rng), c.build, opt);
      worst = std::max(worst, rep.max_relative_error);
      CHECK_MESSAGE(rep.pass, std::string(c.name) << " seed " << seed << " err " << rep.max_relative_error
                                     << " at " << rep.worst_parameter);
    }
    MESSAGE(std::string(c.name) << ": worst relative error " << worst);
  }
}

TEST_CASE("gradcheck flags a corrupted backward rule") {
  RngStream rng(7, 0);
  ParamMap<double> params{{"w", randn(rng, {3, 4})}};
  auto build = [](Graph<double>& g, const std::map<std::string, Var<double>>& p) {
    auto t = O::tanh(p.at("w"));
    // Drop the (1 - y^2) factor.
    g.override_backward(t.id(), [in = p.at("w").id()](Graph<double>& gr, std::size_t self) {
      const auto& gy = gr.grad(self);
      auto& gx = gr.grad(in);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    });
    return project(t, 3);
  };
  const auto rep = gradcheck(params, build);
  CHECK_FALSE(rep.pass);
  CHECK(rep.max_relative_error > 1e-2);
}
