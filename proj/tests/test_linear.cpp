#include "ssf/linear.hpp"

#include <doctest.h>

#include <random>

using namespace ssf::linear;

namespace {
struct Problem {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
};

Problem make_problem(int n, int p, double noise, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Problem pr{Eigen::MatrixXd(n, p), Eigen::VectorXd(n)};
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < p; ++j) pr.X(i, j) = nd(rng);
    pr.y(i) = 1.5 - 2.0 * pr.X(i, 0) + (p > 1 ? 0.5 * pr.X(i, 1) : 0.0) + noise * nd(rng);
  }
  return pr;
}
}  // namespace

TEST_CASE("pinball loss") {
  CHECK(pinball_loss(2.0, 0.9) == doctest::Approx(1.8));
  CHECK(pinball_loss(-2.0, 0.9) == doctest::Approx(0.2));
  CHECK(pinball_loss(0.0, 0.3) == 0.0);
  CHECK(pinball_loss(1.0, 0.5) == pinball_loss(-1.0, 0.5));
}

TEST_CASE("least squares recovers exact coefficients") {
  const Problem pr = make_problem(200, 3, 0.0, 1);
  const LinearModel m = ols_fit(pr.X, pr.y);
  CHECK(m.intercept == doctest::Approx(1.5));
  CHECK(m.weights(0) == doctest::Approx(-2.0));
  CHECK(m.weights(1) == doctest::Approx(0.5));
  CHECK(std::abs(m.weights(2)) < 1e-10);
  CHECK((m.predict(pr.X) - pr.y).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("least squares with a duplicated column") {
  Problem pr = make_problem(50, 2, 0.1, 2);
  Eigen::MatrixXd X(50, 3);
  X << pr.X, pr.X.col(0);
  const LinearModel m = ols_fit(X, pr.y);
  CHECK(std::isfinite(m.intercept));
  CHECK(m.weights(0) == doctest::Approx(m.weights(2)));
  const LinearModel ref = ols_fit(pr.X, pr.y);
  CHECK((m.predict(X) - ref.predict(pr.X)).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("ridge shrinks toward zero") {
  const Problem pr = make_problem(100, 2, 0.5, 3);
  const double w0 = ols_fit(pr.X, pr.y).weights.norm();
  const double w1 = ols_fit(pr.X, pr.y, 100.0).weights.norm();
  CHECK(w1 < w0);
}

TEST_CASE("linear quantile regression") {
  const Problem pr = make_problem(400, 2, 1.0, 4);
  const LinearModel q5 = linear_qr_fit(pr.X, pr.y, 0.5);
  const LinearModel q9 = linear_qr_fit(pr.X, pr.y, 0.9);
  CHECK(q5.task == LinearTask::quantile);
  CHECK(q5.weights(0) == doctest::Approx(-2.0).epsilon(0.1));
  // empirical coverage near the requested level
  const double cover = ((pr.y - q9.predict(pr.X)).array() <= 0.0).cast<double>().mean();
  CHECK(cover == doctest::Approx(0.9).epsilon(0.05));
  CHECK((q9.predict(pr.X).array() >= q5.predict(pr.X).array()).cast<double>().mean() > 0.95);
  // the fit does not lose to its least-squares warm start
  const LinearModel ls = ols_fit(pr.X, pr.y);
  CHECK(mean_pinball_loss(pr.y - q5.predict(pr.X), 0.5) <= mean_pinball_loss(pr.y - ls.predict(pr.X), 0.5) + 1e-9);
}

TEST_CASE("logistic regression") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  Eigen::MatrixXd X(300, 1);
  std::vector<int> lab(300);
  for (int i = 0; i < 300; ++i) {
    X(i, 0) = u(rng);
    lab[i] = X(i, 0) < -1 ? -1 : (X(i, 0) > 1 ? 1 : 0);
  }
  const LinearModel m = logistic_fit(X, lab);
  const Eigen::MatrixXd p = logistic_predict(m, X);
  CHECK((p.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
  int correct = 0;
  for (int i = 0; i < 300; ++i) {
    Eigen::Index k;
    p.row(i).maxCoeff(&k);
    correct += static_cast<int>(k) - 1 == lab[i];
  }
  CHECK(correct > 270);
  CHECK_THROWS(logistic_fit(X, std::vector<int>(300, 0)));
}

TEST_CASE("per-location failures are isolated") {
  const Problem a = make_problem(40, 2, 0.1, 6);
  std::vector<Eigen::MatrixXd> X{a.X, Eigen::MatrixXd(0, 2), a.X};
  std::vector<Eigen::VectorXd> y{a.y, Eigen::VectorXd(0), a.y};
  const PerLocationFit fit = per_location_fit(X, y, LinearTask::regression);
  CHECK(fit.models[0].has_value());
  CHECK_FALSE(fit.models[1].has_value());
  CHECK(fit.models[2].has_value());
  REQUIRE(fit.errors.size() == 1);
  CHECK(fit.errors[0].location == 1);
}
