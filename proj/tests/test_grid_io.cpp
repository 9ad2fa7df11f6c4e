#include "helpers.hpp"
#include "ssf/dataio.hpp"
#include "ssf/grid.hpp"
#include "ssf/util.hpp"

#include <doctest.h>
#include <json.hpp>

#include <fstream>

using namespace ssf;

TEST_CASE("cell index is a row-major bijection") {
  const GridSpec g(2, 3, 0, 0, 1);
  CHECK(cell_index(g, 0, 0) == 0);
  CHECK(cell_index(g, 1, 2) == 5);
  CHECK_THROWS_AS(cell_index(g, 2, 0), std::out_of_range);
  for (int c = 0; c < g.size(); ++c) {
    const auto [i, j] = g.cell_coords(c);
    CHECK(g.cell_index(i, j) == c);
  }
}

TEST_CASE("land locations") {
  const GridSpec g(2, 2, 0, 0, 1);
  CHECK(land_locations(LandMask(g, {true, true, true, true})) == std::vector<int>{0, 1, 2, 3});
  CHECK(land_locations(LandMask(g, {true, false, false, true})) == std::vector<int>{0, 3});
  CHECK_THROWS(LandMask(g, {false, false, false, false}));
  const LandMask m(g, {false, true, true, false});
  CHECK(m.location_of(0) == -1);
  CHECK(m.location_of(2) == 1);
}

TEST_CASE("time index splits") {
  const TimeIndex a({1985, 1}, 432, 249, 312);
  CHECK(a.train_end() == 249);
  CHECK(a.val_end() - a.train_end() == 63);
  CHECK(a.size() - a.val_end() == 120);
  const TimeIndex b({2000, 11}, 3, 1, 2);
  CHECK(b.month_of(0) == 11);
  CHECK(b.month_of(2) == 1);
  CHECK(b.at(2).year == 2001);
  CHECK_THROWS(TimeIndex({1985, 1}, 3, 0, 2));
  CHECK_THROWS(TimeIndex({1985, 1}, 3, 2, 2));
  CHECK_THROWS(TimeIndex({1985, 1}, 3, 1, 4));
}

TEST_CASE("split views follow the boundaries") {
  SynthConfig c = testutil::small_config();
  c.months = 3;
  c.train_end = 1;
  c.val_end = 2;
  const Dataset ds = synth_generate(c);
  const auto v = split_dataset(ds);
  CHECK(v.train.size() == 1);
  CHECK(v.val.size() == 1);
  CHECK(v.test.size() == 1);
  CHECK(v.val.contains(1));
  CHECK(v.train.steps(24).empty());
}

TEST_CASE("spatial field missing flags") {
  const GridSpec g(1, 3, 0, 0, 1);
  const SpatialField f(g, {1.0, 2.0, 3.0}, {false, true, false});
  CHECK(f.is_missing(1));
  CHECK_FALSE(f.is_missing(0));
  CHECK(f.has_missing());
  CHECK_FALSE(SpatialField(g, {1, 2, 3}).has_missing());
}

TEST_CASE("dataset round trip") {
  testutil::TempDir dir("io");
  SynthConfig c = testutil::small_config();
  c.n_lat = 2;
  c.n_lon = 2;
  c.land_fraction = 0.75;
  c.months = 3;
  c.train_end = 1;
  c.val_end = 2;
  const Dataset ds = synth_generate(c);
  save_dataset(ds, dir.path());
  const Dataset back = load_dataset(dir.path());
  CHECK(back.mask() == ds.mask());
  CHECK(back.n_steps() == 3);
  CHECK(back.n_members() == ds.n_members());
  for (int t = 0; t < 3; ++t) {
    CHECK(back.target(t) == ds.target(t));
    for (int k = 0; k < ds.n_members(); ++k) CHECK(back.ensemble(t).member(k) == ds.ensemble(t).member(k));
    for (size_t p = 0; p < ds.covariates().size(); ++p)
      CHECK(back.covariates()[p].fields[t] == ds.covariates()[p].fields[t]);
  }
  REQUIRE(back.sst());
  CHECK(*back.sst() == *ds.sst());
  CHECK(back.generator_seed() == ds.generator_seed());
}

TEST_CASE("manifest problems are reported") {
  testutil::TempDir dir("io_bad");
  SynthConfig c = testutil::small_config();
  c.months = 4;
  c.train_end = 2;
  c.val_end = 3;
  save_dataset(synth_generate(c), dir.path());
  const auto mpath = dir / "manifest.json";
  const std::string original = read_text_file(mpath);

  SUBCASE("two targets") {
    auto m = nlohmann::json::parse(original);
    auto extra = m["variables"][0];
    extra["name"] = "second";
    m["variables"].push_back(extra);
    write_text_file(mpath, m.dump());
    CHECK_THROWS_AS(load_dataset(dir.path()), CatalogError);
  }
  SUBCASE("version") {
    auto m = nlohmann::json::parse(original);
    m["format_version"] = 99;
    write_text_file(mpath, m.dump());
    CHECK_THROWS_AS(load_dataset(dir.path()), FormatVersionError);
  }
  SUBCASE("truncated grid file") {
    const auto f = dir / "precip" / "1985-01.csv";
    const std::string text = read_text_file(f);
    write_text_file(f, text.substr(0, text.size() / 2));
    CHECK_THROWS_AS(load_dataset(dir.path()), TruncatedFileError);
  }
}

TEST_CASE("synthetic generator") {
  SUBCASE("deterministic") {
    const auto c = testutil::small_config(5);
    const Dataset a = synth_generate(c), b = synth_generate(c);
    for (int t = 0; t < a.n_steps(); t += 7) {
      CHECK(a.target(t) == b.target(t));
      CHECK(a.ensemble(t).member(2) == b.ensemble(t).member(2));
    }
  }
  SUBCASE("noiseless members equal the truth") {
    auto c = testutil::small_config();
    c.member_bias.assign(c.members, 0.0);
    c.noise_scale = 0.0;
    const Dataset ds = synth_generate(c);
    for (int t = 0; t < ds.n_steps(); t += 5)
      for (int k = 0; k < ds.n_members(); ++k)
        for (int cell : ds.mask().land_locations())
          CHECK(ds.ensemble(t).member(k).value(cell) == doctest::Approx(ds.target(t).value(cell)).epsilon(1e-12));
  }
  SUBCASE("symmetric biases cancel") {
    auto c = testutil::small_config();
    c.members = 2;
    c.member_bias = {1.5, -1.5};
    c.noise_scale = 0.0;
    const Dataset ds = synth_generate(c);
    for (int t = 0; t < ds.n_steps(); t += 5)
      for (int cell : ds.mask().land_locations()) {
        const double avg = 0.5 * (ds.ensemble(t).member(0).value(cell) + ds.ensemble(t).member(1).value(cell));
        CHECK(avg == doctest::Approx(ds.target(t).value(cell)).epsilon(1e-12));
      }
  }
  SUBCASE("drift shifts the test-period members") {
    auto c = testutil::small_config();
    const Dataset plain = synth_generate(c);
    c.drift = 2.0;
    const Dataset drifted = synth_generate(c);
    const int cell = plain.mask().land_locations().front();
    CHECK(drifted.ensemble(5).member(0).value(cell) == plain.ensemble(5).member(0).value(cell));
    const int t = c.val_end + 1;
    CHECK(drifted.ensemble(t).member(0).value(cell) - plain.ensemble(t).member(0).value(cell) ==
          doctest::Approx(2.0));
    CHECK(drifted.target(t) == plain.target(t));
  }
  SUBCASE("too short") {
    auto c = testutil::small_config();
    c.months = 2;
    c.train_end = 1;
    c.val_end = 2;
    CHECK_THROWS(synth_generate(c));
  }
}

TEST_CASE("utility helpers") {
  CHECK(percentile_r7({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 0.9) == doctest::Approx(9.1));
  CHECK(median({3, 1, 2}) == 2);
  CHECK(stdev(std::vector<double>{1, 3}) == doctest::Approx(std::sqrt(2.0)));
  CHECK(std::stod(format_double(0.1)) == 0.1);
  CHECK(derive_seed(1, 2) != derive_seed(1, 3));
  CHECK(fnv1a("a") != fnv1a("b"));
}
