#include "helpers.hpp"
#include "ssf/baselines.hpp"

#include <doctest.h>

using namespace ssf;
using namespace ssf::baselines;

TEST_CASE("ensemble mean and percentile") {
  const std::vector<double> m{4, 1, 3, 2};
  CHECK(predict_ensemble_mean(m) == 2.5);
  CHECK(predict_ensemble_quantile(m, 0.5) == doctest::Approx(2.5));
  CHECK(predict_ensemble_quantile(m, 0.0) == 1.0);
  CHECK(predict_ensemble_quantile(m, 1.0) == 4.0);
  CHECK(predict_ensemble_quantile(m, 0.9) == doctest::Approx(3.7));
  CHECK(predict_historical_quantile(std::vector<double>{10, 20, 30}, 0.25) == doctest::Approx(15.0));
}

TEST_CASE("baseline matrices") {
  const Dataset ds = synth_generate(testutil::small_config());
  const SplitView train(ds, Split::train), test(ds, Split::test);
  const auto steps = test.steps();
  const Eigen::MatrixXd em = ensemble_mean_matrix(ds, steps);
  CHECK(em.rows() == static_cast<int>(steps.size()));
  CHECK(em.cols() == ds.mask().n_locations());
  const Eigen::MatrixXd q = ensemble_quantile_matrix(ds, steps, 0.9);
  const Eigen::MatrixXd lo = ensemble_quantile_matrix(ds, steps, 0.1);
  CHECK((q.array() >= lo.array()).all());

  const Eigen::MatrixXd y = ds.target_matrix(train.steps());
  const auto tm = months_of(ds, train.steps());
  const Climatology clim = monthly_climatology(y, tm);
  const Eigen::MatrixXd h = historical_matrix(ds, clim, steps);
  const auto sm = months_of(ds, steps);
  for (int i = 0; i < h.rows(); ++i) CHECK(h(i, 2) == predict_historical(clim, sm[i], 2));

  const HistoricalQuantile hq(y, tm, 0.5);
  const HistoricalQuantile hq9(y, tm, 0.9);
  CHECK((hq9.table().array() >= hq.table().array()).all());
  CHECK(hq.predict(sm).rows() == static_cast<int>(steps.size()));
}

TEST_CASE("oracle debias") {
  std::vector<int> months(36);
  for (int t = 0; t < 36; ++t) months[t] = t % 12 + 1;
  const Eigen::MatrixXd truth = Eigen::MatrixXd::Random(36, 3);
  Eigen::MatrixXd pred = truth;
  for (int t = 0; t < 36; ++t) pred.row(t).array() += months[t];
  const DebiasResult r = oracle_debias(pred, truth, months);
  CHECK(r.predictions.isApprox(truth, 1e-12));
  CHECK(r.untouched_months.empty());

  std::vector<int> partial(months.begin(), months.begin() + 6);
  const DebiasResult p = oracle_debias(pred.topRows(6), truth.topRows(6), partial);
  CHECK(p.untouched_months.size() == 6);
}
