#include <cmath>
#include <limits>

#include "doctest.h"
#include "hicl/numerics/adam.hpp"

using namespace hicl;

TEST_CASE("zero gradient leaves parameters unchanged and decays moments") {
  ParamMap<double> p{{"w", NdArray<double>(Shape{2}, {1.0, -3.0})}};
  auto state = make_adam_state(p, AdamConfig{});
  state.first_moment.at("w") = NdArray<double>(Shape{2}, {0.5, 0.5});
  state.second_moment.at("w") = NdArray<double>(Shape{2}, {0.25, 0.25});
  ParamMap<double> g{{"w", NdArray<double>(Shape{2})}};
  const auto before = p.at("w");
  state.step = 0;
  // With zero gradient the moments shrink geometrically; the update is
  // lr * mhat / (sqrt(vhat) + eps), so parameters only stay put once m is 0.
  state.first_moment.at("w").fill(0.0);
  adam_step(p, g, state);
  CHECK(p.at("w") == before);
  CHECK(state.second_moment.at("w")[0] == doctest::Approx(0.25 * 0.999));
  CHECK(state.step == 1);
}

TEST_CASE("first step matches the textbook update") {
  AdamConfig cfg;
  cfg.learning_rate = 0.1;
  ParamMap<double> p{{"w", NdArray<double>(Shape{3}, {1.0, 2.0, 3.0})}};
  ParamMap<double> g{{"w", NdArray<double>(Shape{3}, {0.5, -2.0, 0.0})}};
  auto state = make_adam_state(p, cfg);
  adam_step(p, g, state);
  for (std::size_t i = 0; i < 3; ++i) {
    const double gi = g.at("w")[i];
    const double m = (1 - cfg.beta1) * gi;
    const double v = (1 - cfg.beta2) * gi * gi;
    const double mhat = m / (1 - cfg.beta1);
    const double vhat = v / (1 - cfg.beta2);
    const double expected = (i + 1.0) - cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    CHECK(p.at("w")[i] == doctest::Approx(expected).epsilon(1e-14));
  }
  // Step 1 moves each coordinate by ~lr against the gradient sign.
  CHECK(p.at("w")[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(p.at("w")[1] == doctest::Approx(2.1).epsilon(1e-6));
  CHECK(p.at("w")[2] == 3.0);
}

TEST_CASE("adam is deterministic") {
  ParamMap<float> p{{"w", NdArray<float>(Shape{2}, {1.0f, 2.0f})}};
  ParamMap<float> g{{"w", NdArray<float>(Shape{2}, {0.3f, -0.7f})}};
  auto s1 = make_adam_state(p, AdamConfig{});
  auto s2 = s1;
  auto p1 = p, p2 = p;
  for (int i = 0; i < 5; ++i) {
    adam_step(p1, g, s1);
    adam_step(p2, g, s2);
  }
  CHECK(p1 == p2);
  CHECK(s1.first_moment == s2.first_moment);
  CHECK(s1.step == 5);
}

TEST_CASE("adam errors") {
  ParamMap<double> p{{"w", NdArray<double>(Shape{2}, {1.0, 2.0})}};
  auto state = make_adam_state(p, AdamConfig{});
  ParamMap<double> bad_shape{{"w", NdArray<double>(Shape{3})}};
  CHECK_THROWS_AS(adam_step(p, bad_shape, state), ShapeError);
  ParamMap<double> nan{{"w", NdArray<double>(Shape{2}, {1.0, std::nan("")})}};
  CHECK_THROWS_AS(adam_step(p, nan, state), NonFiniteError);
  CHECK(state.step == 0);
  CHECK(p.at("w")[0] == 1.0);
}

TEST_CASE("gradient clipping and weight decay are opt-in") {
  AdamConfig cfg;
  cfg.grad_clip = 1.0;
  cfg.weight_decay = 0.5;
  cfg.learning_rate = 0.1;
  ParamMap<double> p{{"w", NdArray<double>(Shape{1}, {2.0})}};
  ParamMap<double> g{{"w", NdArray<double>(Shape{1}, {10.0})}};
  auto state = make_adam_state(p, cfg);
  adam_step(p, g, state);
  // Clipped gradient 1.0 -> normalized step 1, plus decay 0.5 * 2.0.
  CHECK(p.at("w")[0] == doctest::Approx(2.0 - 0.1 * (1.0 + 1.0)).epsilon(1e-6));
}
