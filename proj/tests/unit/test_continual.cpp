#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "lenc/continual.hpp"
#include "lenc/error.hpp"
#include "oracles.hpp"

using namespace lenc;

namespace {

ConsolidatedTask task(Vector anchor, Vector fisher, double lambda) {
  ConsolidatedTask t;
  t.anchor = std::move(anchor);
  t.fisher_diagonal = std::move(fisher);
  t.lambda = lambda;
  return t;
}

Learner trained_like(std::uint64_t seed, std::vector<std::size_t> sizes, std::size_t classes) {
  Rng rng(seed);
  Learner l = Learner::create(std::move(sizes), rng);
  l.append_decision_head(classes, rng);
  Vector p = l.parameters();
  for (double& x : p) x = rng.uniform(-1.0, 1.0);
  l.set_parameters(p);
  return l;
}

}  // namespace

TEST_SUITE("continual") {
  TEST_CASE("ewc penalty values") {
    const std::vector<ConsolidatedTask> one{task({1.0}, {2.0}, 4.0)};
    CHECK(ewc_penalty(Vector{1.0}, one) == 0.0);
    CHECK(ewc_penalty(Vector{1.5}, one) == doctest::Approx(1.0));
    CHECK(ewc_penalty(Vector{0.5}, one) == doctest::Approx(1.0));

    const std::vector<ConsolidatedTask> a{task({0.0}, {3.0}, 2.0)};
    const std::vector<ConsolidatedTask> b{task({1.0}, {0.5}, 2.0)};
    const std::vector<ConsolidatedTask> ab{task({0.0, 1.0}, {3.0, 0.5}, 2.0)};
    const double sum = ewc_penalty(Vector{0.7}, a) + ewc_penalty(Vector{-0.2}, b);
    CHECK(ewc_penalty(Vector{0.7, -0.2}, ab) == doctest::Approx(sum).epsilon(1e-14));

    // several consolidated tasks add up
    const std::vector<ConsolidatedTask> both{task({1.0}, {2.0}, 4.0), task({0.0}, {1.0}, 2.0)};
    CHECK(ewc_penalty(Vector{1.5}, both) == doctest::Approx(1.0 + 2.25));
  }

  TEST_CASE("ewc penalty matches the oracle and covers only the anchored prefix") {
    Rng rng(3);
    Vector anchor(6), fisher(6), theta(9);
    for (double& x : anchor) x = rng.normal();
    for (double& x : fisher) x = rng.uniform(0.0, 2.0);
    for (double& x : theta) x = rng.normal();
    const std::vector<ConsolidatedTask> t{task(anchor, fisher, 7.5)};
    CHECK(ewc_penalty(theta, t) ==
          doctest::Approx(oracle::ewc(theta, anchor, fisher, 7.5)).epsilon(1e-13));

    Vector moved = theta;
    moved[8] += 100.0;
    CHECK(ewc_penalty(moved, t) == ewc_penalty(theta, t));

    CHECK_THROWS(ewc_penalty(Vector{1.0, 2.0}, t));
  }

  TEST_CASE("ewc gradient matches finite differences") {
    Rng rng(5);
    Vector anchor(5), fisher(5), theta(7);
    for (double& x : anchor) x = rng.normal();
    for (double& x : fisher) x = rng.uniform(0.1, 2.0);
    for (double& x : theta) x = rng.normal();
    const std::vector<ConsolidatedTask> t{task(anchor, fisher, 3.0), task(Vector(theta.begin(), theta.begin() + 5), fisher, 1.0)};
    const Vector g = ewc_gradient(theta, t);
    const Vector n = oracle::numeric_gradient([&](const oracle::Vec& p) { return ewc_penalty(p, t); },
                                              theta);
    CHECK(oracle::max_relative_error(g, n) < 1e-6);
    CHECK(g[6] == 0.0);
  }

  TEST_CASE("fisher of a saturated head is zero") {
    // p = (1, 0) exactly, so every log-likelihood gradient vanishes.
    Learner l = trained_like(1, {2, 4}, 2);
    auto& h = l.head(0).linear;
    std::fill(h.weights.begin(), h.weights.end(), 0.0);
    h.bias = {1000.0, 0.0};
    Rng rng(2);
    const std::vector<Vector> xs{{0.1, 0.2}, {-1.0, 3.0}, {2.0, 2.0}};
    for (double f : compute_fisher_diagonal(l, 0, xs, 0, rng)) CHECK(f == 0.0);
  }

  TEST_CASE("fisher matches per-point gradients of a logistic model") {
    // Identity feature module on 1-D inputs: logits z_k = w_k x + b_k, so
    // d log p(y|x) / d w_k = (1[k=y] - p_k) x and d / d b_k = 1[k=y] - p_k.
    Learner l = trained_like(4, {1}, 2);
    const std::vector<Vector> xs{{0.5}, {-1.25}, {2.0}};
    Rng rng(1);
    const Vector f = compute_fisher_diagonal(l, 0, xs, 0, rng);

    const DecisionHead& h = l.head(0);
    REQUIRE(f.size() == 4);
    Vector expected(4, 0.0);
    for (const auto& x : xs) {
      const oracle::Vec p =
          oracle::softmax({h.linear.weights[0] * x[0] + h.linear.bias[0],
                           h.linear.weights[1] * x[0] + h.linear.bias[1]},
                          1.0);
      for (std::size_t y = 0; y < 2; ++y) {
        for (std::size_t k = 0; k < 2; ++k) {
          const double d = (k == y ? 1.0 : 0.0) - p[k];
          expected[k] += p[y] * (d * x[0]) * (d * x[0]) / 3.0;
          expected[2 + k] += p[y] * d * d / 3.0;
        }
      }
    }
    for (std::size_t i = 0; i < 4; ++i) CHECK(f[i] == doctest::Approx(expected[i]).epsilon(1e-8));
  }

  TEST_CASE("fisher is a mean over inputs") {
    const Learner l = trained_like(6, {2, 3}, 3);
    const std::vector<Vector> xs{{0.3, -0.1}, {1.0, 0.4}};
    std::vector<Vector> doubled = xs;
    doubled.insert(doubled.end(), xs.begin(), xs.end());
    Rng r1(1);
    Rng r2(1);
    const Vector a = compute_fisher_diagonal(l, 0, xs, 0, r1);
    const Vector b = compute_fisher_diagonal(l, 0, doubled, 0, r2);
    CHECK(oracle::max_relative_error(a, b) < 1e-14);

    Rng r3(1);
    CHECK_THROWS_AS(compute_fisher_diagonal(l, 0, std::span<const Vector>{}, 0, r3),
                    InvalidArgument);
  }

  TEST_CASE("fisher subsampling is seeded") {
    const Learner l = trained_like(7, {2, 3}, 2);
    std::vector<Vector> xs;
    Rng src(8);
    for (int i = 0; i < 40; ++i) xs.push_back({src.normal(), src.normal()});
    Rng a(5);
    Rng b(5);
    CHECK(compute_fisher_diagonal(l, 0, xs, 10, a) == compute_fisher_diagonal(l, 0, xs, 10, b));
  }

  TEST_CASE("consolidate anchors at the current parameters") {
    const Learner l = trained_like(9, {2, 4}, 2);
    const std::vector<Vector> xs{{0.3, -0.1}, {1.0, 0.4}, {0.0, 0.0}};
    Rng rng(1);
    const ConsolidatedTask t = consolidate(l, 0, xs, 250.0, 0, rng);
    CHECK(t.head_index == 0);
    CHECK(t.anchor == l.parameters());
    CHECK(t.lambda == 250.0);
    const std::vector<ConsolidatedTask> ts{t};
    CHECK(ewc_penalty(l.parameters(), ts) == 0.0);
    CHECK(t.as_penalty().weight[0] == doctest::Approx(250.0 * t.fisher_diagonal[0]));
    CHECK_THROWS_AS(consolidate(l, 0, xs, -1.0, 0, rng), InvalidArgument);
  }

  TEST_CASE("penalty pulls training back toward the anchor") {
    // One training objective moving a head away; the EWC term limits drift.
    Learner l = trained_like(10, {2, 4}, 2);
    const std::vector<Vector> xs{{0.5, 0.5}, {-0.5, -0.5}, {0.5, -0.5}, {-0.5, 0.5}};
    Rng rng(1);
    const std::vector<ConsolidatedTask> ts{consolidate(l, 0, xs, 20.0, 0, rng)};
    std::vector<TrainingSample> flipped;
    for (const auto& x : xs) {
      TrainingSample s;
      s.input = x;
      s.label = 1 - l.predict(0, x);
      flipped.push_back(s);
    }
    LossSpec plain;
    plain.ce_weight = 1.0;
    LossSpec guarded = plain;
    guarded.penalties = as_penalties(ts);
    FitOptions fo;
    fo.epochs = 200;
    fo.learning_rate = 0.05;
    fo.momentum = 0.0;
    Learner a = l;
    Learner b = l;
    Rng ra(3);
    Rng rb(3);
    fit(a, 0, flipped, plain, fo, ra);
    fit(b, 0, flipped, guarded, fo, rb);
    auto drift = [&](const Learner& x) {
      double s = 0.0;
      const Vector p = x.parameters();
      const Vector q = l.parameters();
      for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] - q[i]) * (p[i] - q[i]);
      return s;
    };
    CHECK(drift(b) < drift(a));
  }
}
