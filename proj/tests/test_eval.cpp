#include "helpers.hpp"
#include "ssf/eval.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace ssf;
using namespace ssf::eval;

TEST_CASE("aggregate") {
  const std::vector<double> v{1, 2, 3, 4, NAN};
  const Aggregates a = aggregate(v);
  CHECK(a.count == 4);
  CHECK(a.undefined == 1);
  CHECK(a.mean == 2.5);
  CHECK(a.median == 2.5);
  CHECK(a.se == doctest::Approx(std::sqrt(5.0 / 3.0) / 2.0));
  CHECK(a.p90 == doctest::Approx(3.7));
}

TEST_CASE("r2 and mse") {
  Eigen::MatrixXd y(4, 2), z(4, 2);
  y << 1, 5, 2, 5, 3, 5, 4, 5;
  z = y;
  const auto r = r2_detrended(y, z);
  CHECK(r[0] == 1.0);
  CHECK(std::isnan(r[1]));  // constant truth
  Eigen::MatrixXd m = y;
  m.col(0).setConstant(2.5);
  CHECK(r2_detrended(y, m)[0] == doctest::Approx(0.0));
  CHECK(mse_per_location(y, m)[0] == doctest::Approx(1.25));
  CHECK(mse_per_location(y, z)[1] == 0.0);
  CHECK(pinball_per_location(y, m, 0.5)[0] == doctest::Approx(0.5));
  Eigen::MatrixXd lab(2, 1), pred(2, 1);
  lab << 1, -1;
  pred << 1, 0;
  CHECK(accuracy_per_location(lab, pred)[0] == 0.5);
}

TEST_CASE("binomial tail") {
  CHECK(binomial_upper_tail(10, 0) == 1.0);
  CHECK(binomial_upper_tail(10, 10) == doctest::Approx(1.0 / 1024));
  CHECK(binomial_upper_tail(4, 2) == doctest::Approx(11.0 / 16));
  CHECK(binomial_upper_tail(5000, 2600) < 0.01);
  CHECK(bonferroni_threshold(10) == doctest::Approx(0.005));
}

TEST_CASE("sign test") {
  Eigen::MatrixXd a = Eigen::MatrixXd::Constant(30, 2, 1.0), b = a;
  b.col(0).setConstant(2.0);
  const SignTestResult r = sign_test(a, b);
  CHECK(r.wins[0] == 30);
  CHECK(r.n[0] == 30);
  CHECK(r.no_data[1]);
  CHECK(r.p[0] == doctest::Approx(std::pow(0.5, 30)));
  CHECK(r.reject);
  CHECK(r.to_json().find("\"reject\"") != std::string::npos);
}

TEST_CASE("heatmaps") {
  const GridSpec g(2, 3, 0, 0, 1);
  const LandMask mask(g, {true, false, true, true, true, false});
  const std::vector<double> v{1.5, NAN, -2, 4};
  const std::string csv = heatmap_csv(v, mask);
  CHECK(csv.find("NA") != std::string::npos);
  const auto back = read_heatmap_csv(csv, mask);
  CHECK(back[0] == 1.5);
  CHECK(std::isnan(back[1]));
  CHECK(back[3] == 4);
  const std::string pgm = heatmap_pgm(v, mask, -2, 4);
  CHECK(pgm.rfind("P5", 0) == 0);
  const unsigned char* px = reinterpret_cast<const unsigned char*>(pgm.data() + pgm.size() - 6);
  CHECK(px[1] == 0);    // sea
  CHECK(px[2] == 0);    // undefined land
  CHECK(px[3] == 1);    // lower bound
  CHECK(px[4] == 255);  // upper bound
}

TEST_CASE("variants") {
  for (Variant v : {Variant::full, Variant::mean, Variant::sorted, Variant::pe, Variant::latlon, Variant::none})
    CHECK(parse_variant(variant_name(v)) == v);
  ModelConfig rf = default_config(ModelFamily::rf);
  CHECK(apply_variant(rf, Variant::sorted).features.ensemble == EnsembleMode::sorted);
  CHECK(apply_variant(rf, Variant::latlon).features.location == LocationMode::latlon);
  CHECK_THROWS_AS(apply_variant(default_config(ModelFamily::hist), Variant::sorted), ConfigError);
}
