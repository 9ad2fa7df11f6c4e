#include "helpers.hpp"
#include "ssf/forest.hpp"

#include <doctest.h>

#include <numeric>
#include <random>

using namespace ssf::forest;

namespace {
void make_data(int n, unsigned seed, Eigen::MatrixXd& X, Eigen::VectorXd& y) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  X.resize(n, 3);
  y.resize(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 3; ++j) X(i, j) = u(rng);
    y(i) = (X(i, 0) > 0.5 ? 2.0 : 0.0) + X(i, 1);
  }
}
}  // namespace

TEST_CASE("weighted quantile") {
  const std::vector<double> y{1, 2, 3, 4};
  const std::vector<double> w{0.25, 0.25, 0.25, 0.25};
  CHECK(weighted_quantile(y, w, 0.5) == 2.0);
  CHECK(weighted_quantile(y, w, 0.51) == 3.0);
  CHECK(weighted_quantile(y, w, 0.99) == 4.0);
  CHECK(weighted_quantile(y, w, 0.01) == 1.0);
  CHECK_THROWS(weighted_quantile(y, w, 1.0));
  const std::vector<double> shuffled{4, 1, 3, 2}, w2{0.1, 0.6, 0.1, 0.2};
  CHECK(weighted_quantile(shuffled, w2, 0.7) == 2.0);
}

TEST_CASE("single tree without bootstrap interpolates") {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  make_data(60, 1, X, y);
  ForestParams p;
  p.n_trees = 1;
  p.bootstrap = false;
  const Forest f = rf_fit(X, y, p, ForestTask::regression);
  CHECK((f.predict(X) - y).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("forest generalizes on a step function") {
  Eigen::MatrixXd X, Xt;
  Eigen::VectorXd y, yt;
  make_data(400, 2, X, y);
  make_data(200, 3, Xt, yt);
  ForestParams p;
  p.n_trees = 30;
  p.seed = 9;
  const Forest f = rf_fit(X, y, p, ForestTask::regression);
  CHECK((f.predict(Xt) - yt).squaredNorm() / 200 < 0.05);
  CHECK(oob_mse(f, X, y) < 0.1);
  CHECK_THROWS(f.predict(std::vector<double>{1.0, 2.0}));
}

TEST_CASE("seeded fits are reproducible and thread-count independent") {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  make_data(150, 4, X, y);
  ForestParams p;
  p.n_trees = 12;
  p.seed = 3;
  const Forest a = rf_fit(X, y, p, ForestTask::regression);
  p.threads = 3;
  const Forest b = rf_fit(X, y, p, ForestTask::regression);
  CHECK(a.predict(X) == b.predict(X));
  p.seed = 4;
  CHECK(rf_fit(X, y, p, ForestTask::regression).predict(X) != a.predict(X));
}

TEST_CASE("qrf weights sum to one") {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  make_data(120, 5, X, y);
  ForestParams p;
  p.n_trees = 20;
  p.store_samples = true;
  const Forest f = rf_fit(X, y, p, ForestTask::regression);
  const std::vector<double> x{0.3, 0.6, 0.2};
  const auto w = f.qrf_weights(x);
  CHECK(std::accumulate(w.begin(), w.end(), 0.0) == doctest::Approx(1.0));
  CHECK(qrf_predict(f, x, 0.9) >= qrf_predict(f, x, 0.5));
  CHECK(qrf_predict(f, x, 0.1) <= qrf_predict(f, x, 0.5));
  p.store_samples = false;
  const Forest bare = rf_fit(X, y, p, ForestTask::regression);
  CHECK_THROWS(qrf_predict(bare, x, 0.5));
}

TEST_CASE("classification forest") {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  make_data(300, 6, X, y);
  Eigen::VectorXd lab(300);
  for (int i = 0; i < 300; ++i) lab(i) = X(i, 0) < 0.33 ? -1 : (X(i, 0) > 0.66 ? 1 : 0);
  ForestParams p;
  p.n_trees = 25;
  const Forest f = rf_fit(X, lab, p, ForestTask::classification);
  const Eigen::MatrixXd pr = f.predict_proba(X);
  CHECK((pr.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-6);
  int ok = 0;
  for (int i = 0; i < 300; ++i) ok += f.predict_label(std::vector<double>{X(i, 0), X(i, 1), X(i, 2)}) == lab(i);
  CHECK(ok > 280);
}

TEST_CASE("save and load round trip") {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  make_data(80, 7, X, y);
  ForestParams p;
  p.n_trees = 5;
  p.store_samples = true;
  const Forest f = rf_fit(X, y, p, ForestTask::regression);
  testutil::TempDir dir("forest");
  f.save(dir / "f.bin");
  const Forest g = Forest::load(dir / "f.bin");
  CHECK(g.predict(X) == f.predict(X));
  CHECK(qrf_predict(g, X, 0.7) == qrf_predict(f, X, 0.7));
}
