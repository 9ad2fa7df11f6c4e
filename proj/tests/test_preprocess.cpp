#include "helpers.hpp"
#include "ssf/baselines.hpp"
#include "ssf/preprocess.hpp"

#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

using namespace ssf;

namespace {
std::vector<int> calendar(int T, int start_month = 1) {
  std::vector<int> m(T);
  for (int t = 0; t < T; ++t) m[t] = (start_month - 1 + t) % 12 + 1;
  return m;
}
}  // namespace

TEST_CASE("monthly climatology") {
  const auto months = calendar(24);
  Eigen::MatrixXd y = Eigen::MatrixXd::Constant(24, 2, 1.0);
  y(0, 0) = 5.0;
  y(12, 0) = 5.0;
  y(0, 1) = 2.0;
  y(12, 1) = 4.0;
  const Climatology c = monthly_climatology(y, months);
  CHECK(c.at(1, 0) == 5.0);
  CHECK(c.at(1, 1) == 3.0);
  CHECK(c.at(7, 1) == 1.0);

  const auto short_months = calendar(12);
  std::vector<int> no_march = short_months;
  no_march[2] = 4;
  CHECK_THROWS_WITH_AS(monthly_climatology(Eigen::MatrixXd::Ones(12, 1), no_march), doctest::Contains("Mar"),
                       std::invalid_argument);
}

TEST_CASE("model climatology") {
  const auto months = calendar(24);
  CHECK(model_climatology(Eigen::MatrixXd::Constant(24, 3, 7.0), months).values().isConstant(7.0));

  Eigen::MatrixXd alt(24, 1);
  for (int t = 0; t < 24; ++t) alt(t, 0) = months[t] % 2 ? 1.0 : 3.0;
  const Climatology c = model_climatology(alt, months);
  CHECK(c.at(1, 0) == 1.0);
  CHECK(c.at(8, 0) == 3.0);
  CHECK(c.source() == ClimatologySource::model);
}

TEST_CASE("shifted predictions shift the model climatology") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  const auto months = calendar(240);
  Eigen::MatrixXd y(240, 3);
  for (int t = 0; t < 240; ++t)
    for (int l = 0; l < 3; ++l) y(t, l) = 2.0 * std::cos(months[t]) + nd(rng);
  const Eigen::MatrixXd shifted = y.array() + 0.75;
  const Climatology s = monthly_climatology(y, months), sh = model_climatology(shifted, months);
  CHECK((sh.values() - s.values()).isConstant(0.75, 1e-12));
}

TEST_CASE("detrend") {
  const auto months = calendar(24);
  Eigen::MatrixXd clim_v(12, 2);
  for (int m = 0; m < 12; ++m) clim_v.row(m) << m, -m;
  const Climatology c(clim_v, ClimatologySource::observed);
  Eigen::MatrixXd y(24, 2);
  for (int t = 0; t < 24; ++t) y.row(t) = clim_v.row(months[t] - 1);
  CHECK(detrend(y, c, months).isZero());
  CHECK(detrend(y.array() + 1.0, c, months).isOnes());
  const Eigen::MatrixXd z = Eigen::MatrixXd::Random(24, 2);
  CHECK(add_climatology(detrend(z, c, months), c, months).isApprox(z, 1e-14));
}

TEST_CASE("tercile thresholds") {
  // 30 years; April runs 1..30, other months are constant
  const auto months = calendar(360);
  Eigen::MatrixXd ref = Eigen::MatrixXd::Zero(360, 1);
  for (int t = 0; t < 360; ++t)
    if (months[t] == 4) ref(t, 0) = t / 12 + 1;
  const TercileThresholds th = tercile_thresholds(ref, months);
  CHECK(th.q33(4, 0) == doctest::Approx(10.57));
  CHECK(th.q66(4, 0) == doctest::Approx(20.14));
  CHECK(th.label(5.0, 4, 0) == -1);
  CHECK(th.label(th.q33(4, 0), 4, 0) == 0);
  CHECK(th.label(th.q66(4, 0), 4, 0) == 0);
  CHECK(th.label(25.0, 4, 0) == 1);
  CHECK(tercile_label(3.0, 3.0, 3.0) == 0);
  CHECK(tercile_label(2.0, 3.0, 3.0) == -1);
}

TEST_CASE("pca") {
  SUBCASE("rank one") {
    Eigen::VectorXd u(12), v(9);
    for (int i = 0; i < 12; ++i) u(i) = std::sin(i + 1.0);
    for (int j = 0; j < 9; ++j) v(j) = j - 3.0;
    const Eigen::MatrixXd X = u * v.transpose();
    const PcaModel m = pca_fit(X, 8);
    CHECK(m.explained_variance_ratio(0) == doctest::Approx(1.0));
    const Eigen::MatrixXd s = pca_transform(m, X);
    CHECK(s.rightCols(7).cwiseAbs().maxCoeff() < 1e-8);
    CHECK(pca_transform(m, Eigen::RowVectorXd(m.mean)).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("matches the covariance eigenvectors") {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd X(5, 4);
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 4; ++j) X(i, j) = nd(rng) * (j + 1);
    const PcaModel m = pca_fit(X, 2);
    const Eigen::MatrixXd Xc = X.rowwise() - X.colwise().mean();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Xc.transpose() * Xc);
    for (int k = 0; k < 2; ++k) {
      const Eigen::VectorXd oracle = Xc * es.eigenvectors().col(3 - k);
      const Eigen::VectorXd got = pca_transform(m, X).col(k);
      CHECK(std::min((oracle - got).cwiseAbs().maxCoeff(), (oracle + got).cwiseAbs().maxCoeff()) < 1e-8);
    }
  }
  SUBCASE("too many components") { CHECK_THROWS(pca_fit(Eigen::MatrixXd::Random(3, 4), 4)); }
}

TEST_CASE("normalization") {
  Eigen::MatrixXd X(3, 3);
  X << 0, 5, 1, 5, 5, 2, 10, 5, 3;
  const auto st = fit_normalization(X, NormMode::minmax);
  Eigen::MatrixXd Y = X;
  st.apply(Y);
  CHECK(Y(0, 0) == 0.0);
  CHECK(Y(2, 0) == 1.0);
  CHECK(std::isfinite(Y(1, 1)));
  CHECK(st.constant[1]);
  CHECK(st.invert(0, st.apply(0, 7.5)) == doctest::Approx(7.5));
  CHECK(st.apply(0, 20.0) == 2.0);  // no clipping outside the training range
  const auto z = fit_normalization(X, NormMode::standardize);
  Eigen::MatrixXd Z = X;
  z.apply(Z);
  CHECK(Z.col(2).mean() == doctest::Approx(0.0));
}

TEST_CASE("nearest fill") {
  const GridSpec g(1, 3, 0, 0, 1);
  const SpatialField f(g, {1.0, 0.0, 9.0}, {false, true, false});
  const NearestFiller nf(f);
  CHECK(nf.fill(f).values() == std::vector<double>{1.0, 1.0, 9.0});
  CHECK_FALSE(nf.fill(f).has_missing());
  const SpatialField whole(g, {4, 5, 6});
  CHECK(NearestFiller(whole).fill(whole) == whole);
  const SpatialField single(GridSpec(2, 2, 0, 0, 1), {0, 0, 3, 0}, {true, true, false, true});
  CHECK(NearestFiller(single).fill(single).values() == std::vector<double>{3, 3, 3, 3});
}

TEST_CASE("positional encoding") {
  const auto z = positional_encoding(0.0, 6);
  CHECK(z == std::vector<double>{0, 1, 0, 1, 0, 1});
  const auto p = positional_encoding(45.0, 2);
  CHECK(p[0] == doctest::Approx(0.8509035245341184));
  CHECK(p[1] == doctest::Approx(0.5253219888177297));
  CHECK(location_encoding(30.0, 250.0, 12).size() == 24);
  CHECK(location_encoding(30.0, -110.0, 4) == location_encoding(30.0, 250.0, 4));
  // distinct land coordinates give distinct encodings
  const Dataset ds = synth_generate(testutil::small_config());
  const auto& g = ds.grid();
  std::set<std::vector<double>> seen;
  for (int cell : ds.mask().land_locations()) {
    const auto [i, j] = g.cell_coords(cell);
    seen.insert(location_encoding(g.lat(i), g.lon(j), 12));
  }
  CHECK(seen.size() == ds.mask().land_locations().size());
}

TEST_CASE("lag features") {
  std::vector<double> c(40, 2.5), ramp(40);
  for (int t = 0; t < 40; ++t) ramp[t] = t;
  CHECK(lag_features(c, 30, kDefaultLags) == std::vector<double>(5, 2.5));
  CHECK(lag_features(ramp, 30, kDefaultLags) == std::vector<double>{28, 27, 26, 18, 6});
  CHECK(lag_features(ramp, 10, kDefaultLags).empty());
}

TEST_CASE("feature catalogs") {
  FeatureConfig fc;
  CHECK(feature_count(fc, 24, 4) == 65);
  FeatureConfig ind = fc;
  ind.paradigm = Paradigm::independent;
  ind.location = LocationMode::none;
  CHECK(feature_count(ind, 24, 4) == 41);
  ind.location = LocationMode::pe;
  CHECK_THROWS(ind.validate());

  const Dataset ds = synth_generate(testutil::small_config());
  const SplitView train(ds, Split::train);
  const FeaturePipeline pooled(fc, train);
  const auto steps = pooled.usable(train.steps());
  const FeatureMatrix m = pooled.assemble_pooled(ds, steps);
  CHECK(m.rows() == static_cast<int>(steps.size()) * ds.mask().n_locations());
  CHECK(m.X.cols() == feature_count(fc, 4, 2));

  FeatureConfig indc = fc;
  indc.paradigm = Paradigm::independent;
  indc.location = LocationMode::none;
  const FeaturePipeline independent(indc, train);
  CHECK(independent.catalog().indices_of("location").empty());
  const auto per = independent.assemble_independent(ds, steps);
  CHECK(static_cast<int>(per.size()) == ds.mask().n_locations());
  CHECK(per[0].rows() == static_cast<int>(steps.size()));

  FeatureConfig sp = fc;
  sp.paradigm = Paradigm::spatial;
  const FeaturePipeline spatial(sp, train);
  const FeatureStack st = spatial.assemble_stack(ds, steps.front());
  CHECK(st.channels == feature_count(fc, 4, 2));
  CHECK(st.n_lat == ds.grid().n_lat);
}

TEST_CASE("training-period statistics only") {
  const Dataset ds = synth_generate(testutil::small_config());
  const SplitView train(ds, Split::train);
  FeatureConfig fc;
  const FeaturePipeline p(fc, train);
  const auto steps = p.usable(train.steps());
  const FeatureMatrix m = p.assemble_pooled(ds, steps);
  CHECK(m.X.minCoeff() >= -1e-12);
  CHECK(m.X.maxCoeff() <= 1.0 + 1e-12);
  const auto round = FeaturePipeline::from_json(p.to_json());
  CHECK(round.assemble_pooled(ds, steps).X == m.X);
}

TEST_CASE("ensemble variants") {
  const Dataset ds = synth_generate(testutil::small_config());
  const SplitView train(ds, Split::train);
  FeatureConfig fc;
  fc.paradigm = Paradigm::independent;
  fc.location = LocationMode::none;
  fc.lags = fc.covariates = fc.sst = false;
  const int t = 30, loc = 3, cell = ds.mask().land_locations()[loc];
  std::vector<double> members;
  for (int k = 0; k < ds.n_members(); ++k) members.push_back(ds.ensemble(t).member(k).value(cell));

  fc.ensemble = EnsembleMode::mean;
  const FeaturePipeline mean_p(fc, train);
  std::vector<double> row(mean_p.catalog().size());
  mean_p.raw_row(ds, t, loc, row);
  CHECK(row[0] == doctest::Approx(baselines::predict_ensemble_mean(members)));

  fc.ensemble = EnsembleMode::sorted;
  const FeaturePipeline sorted_p(fc, train);
  row.assign(sorted_p.catalog().size(), 0.0);
  sorted_p.raw_row(ds, t, loc, row);
  std::vector<double> expect = members;
  std::sort(expect.begin(), expect.end());
  CHECK(row == expect);
}
