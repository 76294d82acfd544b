// AdamW and the warmup/decay learning-rate schedule.

#include <cmath>
#include <vector>

#include "doctest.h"
#include "scimult/optim.hpp"

using namespace scimult;

TEST_CASE("schedule is piecewise linear with the required anchors") {
  const double peak = 3e-4;
  const std::int64_t total = 1000;
  const double warmup = 0.05;  // warm-up ends at step 50
  CHECK(scheduled_lr(peak, warmup, total, 0) == 0.0);
  CHECK(scheduled_lr(peak, warmup, total, 50) == doctest::Approx(peak));
  CHECK(scheduled_lr(peak, warmup, total, total) == 0.0);
  // Linear in both segments.
  CHECK(scheduled_lr(peak, warmup, total, 25) == doctest::Approx(peak / 2));
  CHECK(scheduled_lr(peak, warmup, total, 525) == doctest::Approx(peak / 2));
  // Monotone up then down.
  double prev = -1;
  for (std::int64_t s = 0; s <= 50; ++s) {
    const double lr = scheduled_lr(peak, warmup, total, s);
    CHECK(lr >= prev);
    prev = lr;
  }
  for (std::int64_t s = 50; s <= total; ++s) {
    const double lr = scheduled_lr(peak, warmup, total, s);
    CHECK(lr <= prev + 1e-18);
    prev = lr;
  }
}

TEST_CASE("schedule rejects bad arguments") {
  CHECK_THROWS_AS(scheduled_lr(1e-3, 0.05, 0, 0), config_error);
  CHECK_THROWS_AS(scheduled_lr(1e-3, -0.1, 10, 0), config_error);
  CHECK_THROWS_AS(scheduled_lr(1e-3, 1.5, 10, 0), config_error);
  CHECK_THROWS_AS(scheduled_lr(1e-3, 0.05, 10, 11), contract_error);
  CHECK_THROWS_AS(scheduled_lr(1e-3, 0.05, 10, -1), contract_error);
  // All-warm-up schedule stays at peak after the ramp.
  CHECK(scheduled_lr(1e-3, 1.0, 10, 10) == doctest::Approx(1e-3));
}

TEST_CASE("zero gradient with zero weight decay leaves the parameter unchanged") {
  auto p = Tensor<double>::from_data({3}, {1.0, -2.0, 0.5});
  p.set_requires_grad(true);
  p.zero_grad();
  std::vector<Tensor<double>> params = {p};
  OptimizerState<double> st;
  st.weight_decay = 0.0;
  st.init(params);
  adamw_step(params, st, 0.1);
  CHECK(p.data()[0] == 1.0);
  CHECK(p.data()[1] == -2.0);
  CHECK(p.data()[2] == 0.5);
  CHECK(st.step_count == 1);
}

TEST_CASE("single AdamW step with unit gradient moves by -lr") {
  auto p = Tensor<double>::from_data({1}, {0.0});
  p.set_requires_grad(true);
  p.zero_grad();
  p.grad()[0] = 1.0;
  std::vector<Tensor<double>> params = {p};
  OptimizerState<double> st;
  st.weight_decay = 0.0;
  st.init(params);
  adamw_step(params, st, 0.1);
  // Bias-corrected moments give a unit-magnitude update direction.
  CHECK(p.data()[0] == doctest::Approx(-0.1).epsilon(1e-6));
}

TEST_CASE("100 steps on a convex quadratic decrease the objective after warm-up") {
  auto p = Tensor<double>::from_data({2}, {1.0, -1.5});
  p.set_requires_grad(true);
  std::vector<Tensor<double>> params = {p};
  OptimizerState<double> st;
  st.weight_decay = 0.0;
  // Adam steps have near-unit direction magnitude, so total travel is the
  // lr-sum; keep it below |p0| to stay on one side of the optimum.
  st.peak_lr = 0.01;
  st.warmup_fraction = 0.1;  // warm-up ends at step 10
  st.total_steps = 100;
  st.init(params);
  const auto objective = [&] {
    return 0.5 * (p.data()[0] * p.data()[0] + p.data()[1] * p.data()[1]);
  };
  std::vector<double> trace;
  for (int s = 0; s < 100; ++s) {
    p.zero_grad();
    p.grad()[0] = p.data()[0];
    p.grad()[1] = p.data()[1];
    adamw_step(params, st, st.lr_at(st.step_count));
    trace.push_back(objective());
  }
  for (std::size_t i = 10; i + 1 < trace.size(); ++i)
    CHECK(trace[i + 1] < trace[i]);
  CHECK(trace.back() < trace[10]);
}

TEST_CASE("decoupled weight decay shrinks parameters independently of the gradient") {
  auto p = Tensor<double>::from_data({1}, {2.0});
  p.set_requires_grad(true);
  p.zero_grad();  // zero gradient: only decay acts
  std::vector<Tensor<double>> params = {p};
  OptimizerState<double> st;
  st.weight_decay = 0.01;
  st.init(params);
  adamw_step(params, st, 0.5);
  CHECK(p.data()[0] == doctest::Approx(2.0 - 0.5 * 0.01 * 2.0));
}

TEST_CASE("missing gradients and unallocated moments are contract violations") {
  auto p = Tensor<double>::from_data({1}, {0.0});  // grad never allocated
  std::vector<Tensor<double>> params = {p};
  OptimizerState<double> st;
  CHECK_THROWS_AS(adamw_step(params, st, 0.1), contract_error);
  st.init(params);
  CHECK_THROWS_AS(adamw_step(params, st, 0.1), contract_error);  // no grad
}

TEST_CASE("the active mask freezes parameters and their moments completely") {
  auto a = Tensor<double>::from_data({1}, {1.0});
  auto b = Tensor<double>::from_data({1}, {1.0});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  std::vector<Tensor<double>> params = {a, b};
  OptimizerState<double> st;
  st.weight_decay = 0.01;
  st.init(params);
  const std::vector<std::uint8_t> mask = {1, 0};
  for (int s = 0; s < 5; ++s) {
    a.zero_grad();
    b.zero_grad();
    a.grad()[0] = 0.3;
    b.grad()[0] = 0.3;
    adamw_step(params, st, 0.05, &mask);
  }
  CHECK(a.data()[0] != 1.0);
  CHECK(b.data()[0] == 1.0);          // untouched by update AND decay
  CHECK(st.m[1][0] == 0.0);           // moments never move either
  CHECK(st.v[1][0] == 0.0);
  const std::vector<std::uint8_t> short_mask = {1};
  CHECK_THROWS_AS(adamw_step(params, st, 0.05, &short_mask), contract_error);
}

TEST_CASE("moments track parameter shapes") {
  auto p = Tensor<double>::zeros({3, 4});
  p.set_requires_grad(true);
  std::vector<Tensor<double>> params = {p};
  OptimizerState<double> st;
  st.init(params);
  REQUIRE(st.m.size() == 1);
  CHECK(st.m[0].size() == p.numel());
  CHECK(st.v[0].size() == p.numel());
}
