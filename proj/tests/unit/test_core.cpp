#include <cmath>
#include <random>

#include "doctest.h"
#include "etm/core/ops.hpp"
#include "etm/core/optim.hpp"
#include "etm/core/random.hpp"

using namespace etm;

namespace {

ParameterGroup scalar_group(float value, float grad) {
  Var p = Var::parameter(Tensor({1}, {value}), "p");
  p.mutable_grad()[0] = grad;
  return {"g", {p}, 1.0f};
}

}  // namespace

TEST_CASE("sgd_step plain gradient step") {
  auto group = scalar_group(1.0f, 0.5f);
  SgdState state{0.0f, 0.0f, {}};
  sgd_step(group, state, 0.1f);
  CHECK(group.tensors[0].value()[0] == doctest::Approx(0.95f).epsilon(1e-7));
}

TEST_CASE("sgd_step zero gradient with momentum leaves the parameter") {
  auto group = scalar_group(1.0f, 0.0f);
  SgdState state{0.97f, 0.0f, {}};
  sgd_step(group, state, 0.1f);
  CHECK(group.tensors[0].value()[0] == 1.0f);
}

TEST_CASE("sgd_step two momentum steps match the hand recurrence") {
  // Oracle: v <- 0.97 v + (g + 5e-4 p); p <- p - 0.1 v, run twice in double.
  double p_ref = 1.0, v_ref = 0.0;
  for (int i = 0; i < 2; ++i) {
    v_ref = 0.97 * v_ref + (1.0 + 5e-4 * p_ref);
    p_ref -= 0.1 * v_ref;
  }
  CHECK(p_ref == doctest::Approx(0.7028565025).epsilon(1e-12));

  auto group = scalar_group(1.0f, 1.0f);
  SgdState state{0.97f, 5e-4f, {}};
  sgd_step(group, state, 0.1f);
  group.tensors[0].mutable_grad()[0] = 1.0f;
  sgd_step(group, state, 0.1f);
  CHECK(std::abs(group.tensors[0].value()[0] - 0.7028565025) < 1e-6);
}

TEST_CASE("sgd_step honours lr_scale and errors on missing or non-finite gradients") {
  auto group = scalar_group(1.0f, 1.0f);
  group.lr_scale = 0.1f;
  SgdState state{0.0f, 0.0f, {}};
  sgd_step(group, state, 1.0f);
  CHECK(group.tensors[0].value()[0] == doctest::Approx(0.9f));

  Var missing = Var::parameter(Tensor({2}), "encoder.w");
  ParameterGroup bad{"bad", {missing}, 1.0f};
  SgdState s2{0.9f, 0.0f, {}};
  CHECK_THROWS_WITH_AS(sgd_step(bad, s2, 0.1f), doctest::Contains("encoder.w"), std::runtime_error);

  auto nan_group = scalar_group(1.0f, std::nanf(""));
  SgdState s3{0.9f, 0.0f, {}};
  CHECK_THROWS_AS(sgd_step(nan_group, s3, 0.1f), std::runtime_error);
}

TEST_CASE("sgd without momentum equals gradient descent on a quadratic") {
  // f(p) = 0.5 * sum a_i p_i^2, gradient a_i p_i; compare against the closed form p_i (1 - lr a_i)^k.
  const std::vector<float> a{0.5f, 1.0f, 2.0f};
  Var p = Var::parameter(Tensor({3}, {1.0f, -2.0f, 0.5f}), "p");
  ParameterGroup group{"q", {p}, 1.0f};
  SgdState state{0.0f, 0.0f, {}};
  std::vector<float> expected{1.0f, -2.0f, 0.5f};
  for (int step = 0; step < 10; ++step) {
    for (int i = 0; i < 3; ++i) p.mutable_grad()[i] = a[i] * p.value()[i];
    sgd_step(group, state, 0.1f);
    for (int i = 0; i < 3; ++i) expected[i] = expected[i] - 0.1f * (a[i] * expected[i]);
  }
  // FMA contraction may round the fused update differently from the reference loop.
  for (int i = 0; i < 3; ++i) CHECK(p.value()[i] == doctest::Approx(expected[i]).epsilon(1e-6));
}

TEST_CASE("adam_step first step is a unit sign step") {
  // Oracle: m_hat = g and v_hat = g^2 after one step, so the update is lr * g / (|g| + eps).
  for (float g : {1.0f, -2.0f}) {
    auto group = scalar_group(0.0f, g);
    AdamState state;
    adam_step(group, state, 1e-4f);
    const double expected = -1e-4 * g / (std::abs(g) + 1e-8);
    CHECK(std::abs(group.tensors[0].value()[0] - expected) < 1e-10);
    CHECK(state.step_count == 1);
  }
  auto zero = scalar_group(3.0f, 0.0f);
  AdamState state;
  adam_step(zero, state, 1e-4f);
  CHECK(zero.tensors[0].value()[0] == 3.0f);
}

TEST_CASE("optimizers only touch their own group") {
  Var inside = Var::parameter(Tensor({2}, 1.0f), "in");
  Var outside = Var::parameter(Tensor({2}, 1.0f), "out");
  inside.mutable_grad().fill(1.0f);
  outside.mutable_grad().fill(1.0f);
  ParameterGroup group{"g", {inside}, 1.0f};
  SgdState sgd{0.9f, 5e-4f, {}};
  AdamState adam;
  sgd_step(group, sgd, 0.1f);
  adam_step(group, adam, 0.1f);
  CHECK(outside.value()[0] == 1.0f);
  CHECK(outside.value()[1] == 1.0f);
}

TEST_CASE("param_count") {
  CHECK(param_count(ParameterGroup{"a", {Var::parameter(Tensor({3, 3}), "w")}, 1.0f}) == 9);
  CHECK_THROWS_AS(param_count(ParameterGroup{"empty", {}, 1.0f}), std::invalid_argument);

  ParameterGroup a{"a", {Var::parameter(Tensor({4, 5}), "x")}, 1.0f};
  ParameterGroup b{"b", {Var::parameter(Tensor({7}), "y"), Var::parameter(Tensor({2, 2, 2}), "z")}, 1.0f};
  ParameterGroup joined{"ab", a.tensors, 1.0f};
  joined.tensors.insert(joined.tensors.end(), b.tensors.begin(), b.tensors.end());
  CHECK(param_count(joined) == param_count(a) + param_count(b));

  std::vector<ParameterGroup> dup{a, a};
  CHECK_THROWS_AS(validate_groups(dup), std::invalid_argument);
}

TEST_CASE("upsample_nearest broadcasts a 1x1 map") {
  Var x(Tensor({1, 2, 1, 1}, {3.0f, -1.0f}));
  Var up = ops::upsample_nearest(x, 2, 3);
  for (int i = 0; i < 6; ++i) {
    CHECK(up.value()[i] == 3.0f);
    CHECK(up.value()[6 + i] == -1.0f);
  }
}

TEST_CASE("softmax over channels sums to one and resize keeps identity") {
  Rng rng(3);
  Var x(normal_tensor({1, 5, 4, 4}, 3.0f, rng));
  Var s = ops::softmax_channels(x);
  for (int p = 0; p < 16; ++p) {
    double total = 0.0;
    for (int c = 0; c < 5; ++c) total += s.value()[c * 16 + p];
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  }
  CHECK(bitwise_equal(ops::resize_bilinear(x, 4, 4).value(), x.value()));
}

TEST_CASE("no-grad mode records nothing") {
  Var w = Var::parameter(Tensor({1}, 2.0f), "w");
  NoGradGuard guard;
  Var y = ops::mul(w, w);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("backward accumulates through shared inputs") {
  Var x = Var::parameter(Tensor({1}, 3.0f), "x");
  Var y = ops::add(ops::mul(x, x), x);  // x^2 + x
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(7.0f));
}
