#include "helpers.hpp"
#include "ssf/stack.hpp"

#include <doctest.h>

#include <random>

using namespace ssf::stack;

namespace {
Stacker random_stacker(StackTask task, int p, int outputs, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Stacker s;
  s.task = task;
  s.alpha = 0.8;
  s.in_min = Eigen::VectorXd::Zero(p);
  s.in_max = Eigen::VectorXd::Ones(p);
  s.W1.resize(5, p);
  s.b1.resize(5);
  s.W2.resize(outputs, 5);
  s.b2.resize(outputs);
  std::vector<double> flat = s.flat_params();
  for (double& v : flat) v = nd(rng);
  s.set_flat_params(flat);
  return s;
}
}  // namespace

TEST_CASE("stacker gradient") {
  const Eigen::MatrixXd P = (Eigen::MatrixXd::Random(20, 3).array() + 1.0) / 2.0;
  Eigen::VectorXd y = Eigen::VectorXd::Random(20);
  for (auto [task, outputs] : {std::pair{StackTask::regression, 1}, {StackTask::quantile, 1}, {StackTask::tercile, 3}}) {
    if (task == StackTask::tercile)
      for (int i = 0; i < 20; ++i) y(i) = i % 3 - 1;
    Stacker s = random_stacker(task, 3, outputs, 2);
    std::vector<double> g;
    stacker_loss(s, P, y, &g);
    const std::vector<double> w = s.flat_params();
    REQUIRE(g.size() == w.size());
    for (size_t i = 0; i < w.size(); ++i) {
      const double h = 1e-6;
      auto wp = w, wm = w;
      wp[i] += h;
      wm[i] -= h;
      s.set_flat_params(wp);
      const double lp = stacker_loss(s, P, y, nullptr);
      s.set_flat_params(wm);
      const double lm = stacker_loss(s, P, y, nullptr);
      s.set_flat_params(w);
      CHECK(g[i] == doctest::Approx((lp - lm) / (2 * h)).epsilon(1e-5));
    }
  }
}

TEST_CASE("stacker learns a convex combination") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  Eigen::MatrixXd P(400, 2);
  Eigen::VectorXd y(400);
  for (int i = 0; i < 400; ++i) {
    y(i) = nd(rng);
    P(i, 0) = y(i) + 0.3 * nd(rng);
    P(i, 1) = y(i) + 0.3 * nd(rng);
  }
  StackerOptions o;
  o.hidden = 8;
  o.seed = 1;
  const Stacker s = stacker_fit(P, y, StackTask::regression, o);
  const double mse = (s.predict(P) - y).squaredNorm() / 400;
  const double single = (P.col(0) - y).squaredNorm() / 400;
  CHECK(mse < single);
  CHECK(stacker_fit(P, y, StackTask::regression, o).flat_params() == s.flat_params());

  testutil::TempDir dir("stacker");
  s.save(dir / "s.json");
  CHECK(Stacker::load(dir / "s.json").predict(P) == s.predict(P));
}

TEST_CASE("stack training uses the chronological half split") {
  std::vector<int> train(40);
  for (int i = 0; i < 40; ++i) train[i] = i;
  std::vector<std::vector<int>> seen;
  BaseSpec base{"echo", [&](std::span<const int> steps) -> BasePredictor {
                  seen.emplace_back(steps.begin(), steps.end());
                  return [](std::span<const int> s) {
                    Eigen::MatrixXd m(s.size(), 1);
                    for (size_t i = 0; i < s.size(); ++i) m(i, 0) = s[i] * 0.5;
                    return m;
                  };
                }};
  auto truth = [](std::span<const int> s) {
    Eigen::VectorXd v(s.size());
    for (size_t i = 0; i < s.size(); ++i) v(i) = s[i] * 0.5;
    return v;
  };
  StackerOptions o;
  o.hidden = 4;
  o.max_epochs = 50;
  BaseSpec twin = base;
  twin.id = "twin";
  const StackedModel m = stack_train({base, twin}, train, truth, StackTask::regression, o);
  REQUIRE(seen.size() == 4);
  CHECK(seen[0].size() == 20);
  CHECK(seen[0].back() == 19);
  CHECK(seen[2].size() == 40);
  CHECK(m.base_ids == std::vector<std::string>{"echo", "twin"});
  CHECK_THROWS(stack_train({base}, train, truth, StackTask::regression, o));
}
