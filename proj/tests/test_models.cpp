#include "helpers.hpp"
#include "ssf/eval.hpp"
#include "ssf/models.hpp"

#include <doctest.h>

using namespace ssf;

namespace {
ModelConfig quick(ModelFamily f, TaskSpec task = {}) {
  ModelConfig c = default_config(f, task);
  c.forest.n_trees = 8;
  c.convnet.base = 4;
  c.convnet.train.epochs = 2;
  c.convnet.quantile_epochs = 1;
  c.stacker.max_epochs = 20;
  c.seed = 5;
  return c;
}
}  // namespace

TEST_CASE("config validation") {
  CHECK_THROWS_AS(quick(ModelFamily::logistic, {TaskKind::regression}).validate(), ConfigError);
  CHECK_THROWS_AS(quick(ModelFamily::lr, {TaskKind::quantile}).validate(), ConfigError);
  ModelConfig bad = quick(ModelFamily::qrf, {TaskKind::quantile, 1.5});
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  ModelConfig c = quick(ModelFamily::rf);
  c.features.paradigm = Paradigm::spatial;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  for (ModelFamily f : {ModelFamily::hist, ModelFamily::ensmean, ModelFamily::lr, ModelFamily::rf,
                        ModelFamily::convnet, ModelFamily::stack})
    CHECK_NOTHROW(default_config(f).validate());
  const ModelConfig rt = ModelConfig::from_json(quick(ModelFamily::stack).to_json());
  CHECK(rt.to_json() == quick(ModelFamily::stack).to_json());
}

TEST_CASE("every family fits, predicts and round-trips") {
  const Dataset ds = synth_generate(testutil::small_config());
  const SplitView train(ds, Split::train), test(ds, Split::test);
  const auto steps = test.steps();
  const std::vector<std::pair<ModelFamily, TaskSpec>> cases = {
      {ModelFamily::hist, {}},
      {ModelFamily::ensmean, {}},
      {ModelFamily::lr, {}},
      {ModelFamily::rf, {}},
      {ModelFamily::convnet, {}},
      {ModelFamily::linqr, {TaskKind::quantile, 0.9}},
      {ModelFamily::qrf, {TaskKind::quantile, 0.9}},
      {ModelFamily::logistic, {TaskKind::tercile}},
      {ModelFamily::rf, {TaskKind::tercile}},
      {ModelFamily::stack, {}},
  };
  for (const auto& [f, task] : cases) {
    CAPTURE(family_name(f));
    CAPTURE(task_name(task.kind));
    auto m = make_model(quick(f, task));
    {
      instrument::ScopedStepProbe probe;
      m->fit(train);
      CHECK(probe.max_step() < train.end());
    }
    const Prediction p = m->predict(ds, steps);
    CHECK(p.values.rows() == static_cast<int>(steps.size()));
    CHECK(p.values.cols() == ds.mask().n_locations());
    CHECK(p.values.allFinite());
    if (task.kind == TaskKind::tercile) {
      CHECK(p.proba.rows() == p.values.size());
      CHECK((p.values.array().abs() <= 1.0).all());
    }
    testutil::TempDir dir("model");
    m->save(dir.path());
    const auto back = Model::load(dir.path());
    CHECK(back->predict(ds, steps).values == p.values);
  }
}

TEST_CASE("predict before fit and incompatible data") {
  const Dataset ds = synth_generate(testutil::small_config());
  auto m = make_model(quick(ModelFamily::lr));
  CHECK_THROWS(m->predict(ds, std::vector<int>{50}));
  m->fit(SplitView(ds, Split::train));
  auto cfg = testutil::small_config();
  cfg.covariates = 3;
  CHECK_NOTHROW(m->check_compatible(synth_generate(cfg)));  // members only
  cfg.members = 5;
  CHECK_THROWS(m->check_compatible(synth_generate(cfg)));
}

TEST_CASE("evaluation report") {
  const Dataset ds = synth_generate(testutil::small_config());
  auto m = make_model(quick(ModelFamily::lr));
  m->fit(SplitView(ds, Split::train));
  const eval::EvalReport r = eval::evaluate_model(*m, ds, Split::test);
  CHECK(r.metric("mse").per_location.size() == ds.mask().land_locations().size());
  CHECK(r.metric("mse").agg.mean >= 0.0);
  CHECK(r.to_json().find(eval::kStandardErrorCaveat) != std::string::npos);
  CHECK_THROWS(r.metric("nonsense"));
}
