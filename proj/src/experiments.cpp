#include "ssf/eval.hpp"
#include "ssf/util.hpp"

#include <json.hpp>

#include <cmath>
#include <limits>
#include <random>

namespace ssf::eval {

EvalReport evaluate_model(const Model& model, const Dataset& ds, Split split, const EvalOptions& opts) {
  model.check_compatible(ds);
  const ModelConfig& cfg = model.config();
  const SplitView view(ds, split);
  const std::vector<int> steps = view.steps(cfg.features.min_history);
  if (steps.empty()) throw std::invalid_argument(std::string("split ") + split_name(split) + " has no usable steps");
  const Prediction pred = model.predict(ds, steps);
  const std::vector<int> months = months_of(ds, steps);

  EvalReport r;
  r.model_id = opts.model_id.empty() ? family_name(cfg.family) : opts.model_id;
  r.family = family_name(cfg.family);
  r.task = task_name(cfg.task.kind);
  r.alpha = cfg.task.alpha;
  r.split = split_name(split);
  r.variant = opts.variant;
  r.catalog_hash = hex64(model.catalog_hash());
  r.seed = cfg.seed;
  const SplitView train(ds, Split::train);
  r.notes.push_back("model fitted on train steps [" + std::to_string(train.begin()) + ", " +
                    std::to_string(train.end()) + ")");
  r.notes.push_back(std::string("evaluated on ") + split_name(split) + " steps [" + std::to_string(steps.front()) +
                    ", " + std::to_string(steps.back() + 1) + ")");
  if (split != Split::train) r.notes.push_back(std::string("the ") + split_name(split) + " split was not used for fitting");

  auto add = [&](std::string name, std::vector<double> grid) {
    MetricGrid m{std::move(name), std::move(grid), {}};
    m.agg = aggregate(m.per_location);
    r.metrics.push_back(std::move(m));
  };
  switch (cfg.task.kind) {
    case TaskKind::regression: {
      const Eigen::MatrixXd y = ds.target_matrix(steps);
      const Climatology truth_clim = observed_climatology(ds);
      const Climatology pred_clim = detrending_climatology(model, ds);
      add("r2", r2_per_location(y, pred.values, truth_clim, pred_clim, months, opts.r2));
      add("mse", mse_per_location(y, pred.values));
      if (cfg.family == ModelFamily::ensmean) r.notes.push_back("predictions detrended with the model climatology");
      if (opts.r2 == R2Convention::literal) r.notes.push_back("r2 uses the prediction-mean denominator");
      break;
    }
    case TaskKind::quantile: {
      const Eigen::MatrixXd y = ds.target_matrix(steps);
      add("quantile_loss", pinball_per_location(y, pred.values, cfg.task.alpha));
      break;
    }
    case TaskKind::tercile: {
      const Eigen::MatrixXd labels = tercile_labels(ds, steps, tercile_reference(ds));
      add("accuracy", accuracy_per_location(labels, pred.values));
      break;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Ablation

namespace {
constexpr const char* kVariantNames[] = {"full", "mean", "sorted", "pe", "latlon", "none"};
}

const char* variant_name(Variant v) { return kVariantNames[static_cast<int>(v)]; }

Variant parse_variant(const std::string& s) {
  for (int i = 0; i < 6; ++i)
    if (s == kVariantNames[i]) return static_cast<Variant>(i);
  throw ConfigError("unknown ablation variant '" + s + "' (expected full, mean, sorted, pe, latlon or none)");
}

ModelConfig apply_variant(ModelConfig cfg, Variant v) {
  if (cfg.family == ModelFamily::hist || cfg.family == ModelFamily::ensmean || cfg.family == ModelFamily::stack)
    throw ConfigError(std::string("ablation needs a feature-based model, not ") + family_name(cfg.family));
  FeatureConfig& f = cfg.features;
  switch (v) {
    case Variant::full: f.ensemble = EnsembleMode::full; break;
    case Variant::mean: f.ensemble = EnsembleMode::mean; break;
    case Variant::sorted: f.ensemble = EnsembleMode::sorted; break;
    case Variant::pe: f.location = LocationMode::pe; break;
    case Variant::latlon: f.location = LocationMode::latlon; break;
    case Variant::none: f.location = LocationMode::none; break;
  }
  if ((v == Variant::full || v == Variant::mean || v == Variant::sorted) && !f.ensemble_members)
    throw ConfigError("ensemble variants need ensemble member features");
  cfg.validate();
  return cfg;
}

AblationResult ablation_run(Variant v, const ModelConfig& base, const Dataset& ds) {
  const ModelConfig cfg = apply_variant(base, v);
  auto model = make_model(cfg);
  model->fit(SplitView(ds, Split::train));
  EvalOptions o;
  o.variant = variant_name(v);
  return {v, FeaturePipeline::catalog_for(cfg.features, ds), evaluate_model(*model, ds, Split::val, o),
          evaluate_model(*model, ds, Split::test, o)};
}

// ---------------------------------------------------------------------------
// Bootstrap

BootstrapResult bootstrap_experiment(const std::vector<ModelConfig>& configs, const Dataset& ds, int n_boot,
                                     int sample_size, std::uint64_t seed) {
  if (configs.empty()) throw ConfigError("bootstrap needs at least one model");
  if (n_boot < 1 || sample_size < 1) throw ConfigError("bootstrap runs and sample size must be positive");
  for (const auto& c : configs)
    if (c.task.kind != TaskKind::regression) throw ConfigError("bootstrap compares regression models");
  const SplitView train(ds, Split::train);
  int min_history = 0;
  for (const auto& c : configs) min_history = std::max(min_history, c.features.min_history);
  const std::vector<int> pool = train.steps(min_history);
  if (pool.empty()) throw std::invalid_argument("train split has no usable steps");

  BootstrapResult res;
  for (const auto& c : configs) res.models.push_back(family_name(c.family));
  res.test_mse.assign(configs.size(), {});
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
  for (int run = 0; run < n_boot; ++run) {
    std::vector<int> sample(sample_size);
    for (int& s : sample) s = pool[pick(rng)];
    for (size_t m = 0; m < configs.size(); ++m) {
      ModelConfig c = configs[m];
      c.seed = derive_seed(seed, static_cast<std::uint64_t>(run) * 1000 + m);
      try {
        auto model = make_model(c);
        model->fit(train, sample);
        res.test_mse[m].push_back(evaluate_model(*model, ds, Split::test).metric("mse").agg.mean);
      } catch (const std::exception& e) {
        res.test_mse[m].push_back(std::numeric_limits<double>::quiet_NaN());
        res.failures.push_back("run " + std::to_string(run) + " model " + res.models[m] + ": " + e.what());
      }
    }
  }
  return res;
}

std::string BootstrapResult::to_json() const {
  nlohmann::json runs = nlohmann::json::object();
  for (size_t m = 0; m < models.size(); ++m) {
    nlohmann::json v = nlohmann::json::array();
    for (double x : test_mse[m]) v.push_back(std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x));
    runs[models[m]] = v;
  }
  return nlohmann::json{{"test_mse", runs}, {"failures", failures}}.dump(1);
}

// ---------------------------------------------------------------------------
// Grouped importance

std::vector<GroupReport> grouped_feature_importance(const ModelConfig& base, const Dataset& ds) {
  if (base.family == ModelFamily::hist || base.family == ModelFamily::ensmean || base.family == ModelFamily::stack)
    throw ConfigError("grouped importance needs a feature-based model");
  const char* names[] = {"ensemble", "+lags", "+covariates", "+sst"};
  std::vector<GroupReport> out;
  for (int g = 0; g < 4; ++g) {
    ModelConfig c = base;
    c.features.ensemble_members = true;
    c.features.lags = g >= 1;
    c.features.covariates = g >= 2;
    c.features.sst = g >= 3;
    c.validate();
    auto model = make_model(c);
    model->fit(SplitView(ds, Split::train));
    EvalOptions o;
    o.variant = names[g];
    out.push_back({names[g], FeaturePipeline::catalog_for(c.features, ds), evaluate_model(*model, ds, Split::val, o)});
  }
  return out;
}

}  // namespace ssf::eval
