#include "ssf/models.hpp"
#include "ssf/baselines.hpp"
#include "ssf/linear.hpp"
#include "ssf/util.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace ssf {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Names

namespace {

constexpr const char* kTaskNames[] = {"regression", "quantile", "tercile"};
constexpr const char* kFamilyNames[] = {"hist", "ensmean", "lr", "linqr", "logistic", "rf", "qrf", "convnet", "stack"};

}  // namespace

const char* task_name(TaskKind t) { return kTaskNames[static_cast<int>(t)]; }

TaskKind parse_task(const std::string& s) {
  for (int i = 0; i < 3; ++i)
    if (s == kTaskNames[i]) return static_cast<TaskKind>(i);
  throw ConfigError("unknown task '" + s + "' (expected regression, quantile or tercile)");
}

const char* family_name(ModelFamily f) { return kFamilyNames[static_cast<int>(f)]; }

ModelFamily parse_family(const std::string& s) {
  for (int i = 0; i < 9; ++i)
    if (s == kFamilyNames[i]) return static_cast<ModelFamily>(i);
  throw ConfigError("unknown model '" + s + "'");
}

// ---------------------------------------------------------------------------
// Config

namespace {

bool supports(ModelFamily f, TaskKind t) {
  switch (f) {
    case ModelFamily::hist:
    case ModelFamily::ensmean:
    case ModelFamily::convnet:
    case ModelFamily::stack: return true;
    case ModelFamily::lr: return t != TaskKind::quantile;
    case ModelFamily::linqr: return t == TaskKind::quantile;
    case ModelFamily::logistic: return t == TaskKind::tercile;
    case ModelFamily::rf: return t != TaskKind::quantile;
    case ModelFamily::qrf: return t == TaskKind::quantile;
  }
  return false;
}

bool uses_features(ModelFamily f) {
  return f != ModelFamily::hist && f != ModelFamily::ensmean && f != ModelFamily::stack;
}

json features_to_json(const FeatureConfig& f) {
  return {{"paradigm", paradigm_name(f.paradigm)},
          {"ensemble", ensemble_mode_name(f.ensemble)},
          {"location", location_mode_name(f.location)},
          {"ensemble_members", f.ensemble_members},
          {"lags", f.lags},
          {"covariates", f.covariates},
          {"sst", f.sst},
          {"lag_months", f.lag_months},
          {"pe_dim", f.pe_dim},
          {"sst_components", f.sst_components},
          {"min_history", f.min_history}};
}

FeatureConfig features_from_json(const json& j) {
  FeatureConfig f;
  f.paradigm = parse_paradigm(j.at("paradigm"));
  f.ensemble = parse_ensemble_mode(j.at("ensemble"));
  f.location = parse_location_mode(j.at("location"));
  f.ensemble_members = j.at("ensemble_members");
  f.lags = j.at("lags");
  f.covariates = j.at("covariates");
  f.sst = j.at("sst");
  f.lag_months = j.at("lag_months").get<std::vector<int>>();
  f.pe_dim = j.at("pe_dim");
  f.sst_components = j.at("sst_components");
  f.min_history = j.at("min_history");
  return f;
}

}  // namespace

void ModelConfig::validate() const {
  if (!supports(family, task.kind))
    throw ConfigError(std::string("model ") + family_name(family) + " does not support the " + task_name(task.kind) +
                      " task");
  if (task.kind == TaskKind::quantile && !(task.alpha > 0.0 && task.alpha < 1.0))
    throw ConfigError("quantile level must lie in (0, 1)");
  if (threads < 1) throw ConfigError("threads must be at least 1");
  if (uses_features(family)) {
    try {
      features.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (family == ModelFamily::convnet && features.paradigm != Paradigm::spatial)
      throw ConfigError("convnet requires the spatial paradigm");
    if (family != ModelFamily::convnet && features.paradigm == Paradigm::spatial)
      throw ConfigError(std::string(family_name(family)) + " cannot use the spatial paradigm");
    if (features.min_history < 0) throw ConfigError("min_history must be nonnegative");
    for (int lag : features.lag_months)
      if (features.lags && lag > features.min_history)
        throw ConfigError("lag " + std::to_string(lag) + " exceeds min_history");
  }
  if (family == ModelFamily::rf || family == ModelFamily::qrf) {
    if (forest.n_trees < 1) throw ConfigError("n_trees must be at least 1");
    if (forest.min_samples_split < 2) throw ConfigError("min_samples_split must be at least 2");
  }
  if (family == ModelFamily::convnet || family == ModelFamily::stack) {
    if (convnet.base < 1 || convnet.depth < 1 || convnet.depth > 4) throw ConfigError("invalid convnet size");
    if (convnet.train.epochs < 0 || convnet.train.batch < 1 || !(convnet.train.lr > 0))
      throw ConfigError("invalid convnet training options");
    if (convnet.grid_search && convnet.cv_folds < 2) throw ConfigError("cv_folds must be at least 2");
  }
  if (ridge < 0) throw ConfigError("ridge must be nonnegative");
  if (family == ModelFamily::stack) {
    if (stack_bases.size() < 2) throw ConfigError("stacking needs at least two base models");
    for (ModelFamily b : stack_bases) {
      if (b == ModelFamily::stack) throw ConfigError("stack bases cannot be stacks");
      if (!supports(b, task.kind))
        throw ConfigError(std::string("stack base ") + family_name(b) + " does not support the " +
                          task_name(task.kind) + " task");
    }
    if (stacker.hidden < 1) throw ConfigError("stacker hidden width must be positive");
  }
}

json ModelConfig::to_json() const {
  std::vector<std::string> bases;
  for (auto b : stack_bases) bases.push_back(family_name(b));
  return {{"model", family_name(family)},
          {"task", task_name(task.kind)},
          {"alpha", task.alpha},
          {"features", features_to_json(features)},
          {"forest",
           {{"n_trees", forest.n_trees},
            {"max_features", forest.max_features},
            {"min_samples_split", forest.min_samples_split},
            {"bootstrap", forest.bootstrap}}},
          {"ridge", ridge},
          {"convnet",
           {{"base", convnet.base},
            {"depth", convnet.depth},
            {"epochs", convnet.train.epochs},
            {"batch", convnet.train.batch},
            {"lr", convnet.train.lr},
            {"weight_decay", convnet.train.weight_decay},
            {"quantile_epochs", convnet.quantile_epochs},
            {"quantile_lr", convnet.quantile_lr},
            {"grid_search", convnet.grid_search},
            {"cv_folds", convnet.cv_folds}}},
          {"stack_bases", bases},
          {"stacker",
           {{"hidden", stacker.hidden},
            {"lr", stacker.lr},
            {"batch", stacker.batch},
            {"max_epochs", stacker.max_epochs},
            {"patience", stacker.patience},
            {"holdout", stacker.holdout}}},
          {"seed", seed},
          {"threads", threads}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.family = parse_family(j.at("model"));
  c.task.kind = parse_task(j.at("task"));
  c.task.alpha = j.at("alpha");
  c.features = features_from_json(j.at("features"));
  const auto& f = j.at("forest");
  c.forest.n_trees = f.at("n_trees");
  c.forest.max_features = f.at("max_features");
  c.forest.min_samples_split = f.at("min_samples_split");
  c.forest.bootstrap = f.at("bootstrap");
  c.ridge = j.at("ridge");
  const auto& n = j.at("convnet");
  c.convnet.base = n.at("base");
  c.convnet.depth = n.at("depth");
  c.convnet.train.epochs = n.at("epochs");
  c.convnet.train.batch = n.at("batch");
  c.convnet.train.lr = n.at("lr");
  c.convnet.train.weight_decay = n.at("weight_decay");
  c.convnet.quantile_epochs = n.at("quantile_epochs");
  c.convnet.quantile_lr = n.at("quantile_lr");
  c.convnet.grid_search = n.at("grid_search");
  c.convnet.cv_folds = n.at("cv_folds");
  c.stack_bases.clear();
  for (const auto& b : j.at("stack_bases")) c.stack_bases.push_back(parse_family(b));
  const auto& s = j.at("stacker");
  c.stacker.hidden = s.at("hidden");
  c.stacker.lr = s.at("lr");
  c.stacker.batch = s.at("batch");
  c.stacker.max_epochs = s.at("max_epochs");
  c.stacker.patience = s.at("patience");
  c.stacker.holdout = s.at("holdout");
  c.seed = j.at("seed");
  c.threads = j.at("threads");
  return c;
}

ModelConfig default_config(ModelFamily family, TaskSpec task) {
  ModelConfig c;
  c.family = family;
  c.task = task;
  FeatureConfig& f = c.features;
  switch (family) {
    case ModelFamily::lr:
    case ModelFamily::logistic:
      // per-location models on ensemble members only
      f.paradigm = Paradigm::independent;
      f.location = LocationMode::none;
      f.lags = f.covariates = f.sst = false;
      break;
    case ModelFamily::qrf:
      f.paradigm = Paradigm::independent;
      f.location = LocationMode::none;
      break;
    case ModelFamily::convnet: f.paradigm = Paradigm::spatial; break;
    default: break;
  }
  if (family == ModelFamily::stack) {
    switch (task.kind) {
      case TaskKind::regression:
        c.stack_bases = {ModelFamily::hist, ModelFamily::ensmean, ModelFamily::lr, ModelFamily::rf, ModelFamily::convnet};
        break;
      case TaskKind::quantile:
        c.stack_bases = {ModelFamily::ensmean, ModelFamily::linqr, ModelFamily::qrf, ModelFamily::convnet};
        break;
      case TaskKind::tercile:
        c.stack_bases = {ModelFamily::ensmean, ModelFamily::logistic, ModelFamily::rf, ModelFamily::convnet};
        break;
    }
  }
  c.stacker.alpha = task.alpha;
  return c;
}

// ---------------------------------------------------------------------------
// Shared helpers

TercileThresholds tercile_reference(const Dataset& ds) {
  const SplitView train(ds, Split::train);
  const std::vector<int> steps = train.steps(0);
  return tercile_thresholds(ds.target_matrix(steps), months_of(ds, steps));
}

Eigen::MatrixXd tercile_labels(const Dataset& ds, std::span<const int> steps, const TercileThresholds& th) {
  const std::vector<int> s(steps.begin(), steps.end());
  const Eigen::MatrixXd truth = ds.target_matrix(s);
  Eigen::MatrixXd out(truth.rows(), truth.cols());
  for (Eigen::Index i = 0; i < truth.rows(); ++i) {
    const int m = ds.time().month_of(s[i]);
    for (Eigen::Index l = 0; l < truth.cols(); ++l) out(i, l) = th.label(truth(i, l), m, static_cast<int>(l));
  }
  return out;
}

Climatology observed_climatology(const Dataset& ds) {
  const std::vector<int> steps = SplitView(ds, Split::train).steps(0);
  return monthly_climatology(ds.target_matrix(steps), months_of(ds, steps));
}

Climatology detrending_climatology(const Model& model, const Dataset& ds) {
  if (model.config().family != ModelFamily::ensmean) return observed_climatology(ds);
  const std::vector<int> steps = SplitView(ds, Split::train).steps(0);
  const Prediction p = model.predict(ds, steps);
  return model_climatology(p.values, months_of(ds, steps));
}

namespace {

json matrix_json(const Eigen::MatrixXd& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

Eigen::MatrixXd matrix_from(const json& j) {
  const auto d = j.at("data").get<std::vector<double>>();
  const Eigen::Index r = j.at("rows"), c = j.at("cols");
  if (static_cast<Eigen::Index>(d.size()) != r * c) throw std::runtime_error("matrix size mismatch in model file");
  return Eigen::Map<const Eigen::MatrixXd>(d.data(), r, c);
}

/// Truth values for the rows of a tabular feature matrix.
Eigen::VectorXd row_targets(const Dataset& ds, const FeatureMatrix& fm) {
  const auto& locs = ds.mask().land_locations();
  Eigen::VectorXd y(fm.rows());
  for (int r = 0; r < fm.rows(); ++r) y(r) = ds.target(fm.steps[r]).value(locs[fm.locations[r]]);
  return y;
}

std::vector<int> row_labels(const Dataset& ds, const FeatureMatrix& fm, const TercileThresholds& th) {
  const Eigen::VectorXd y = row_targets(ds, fm);
  std::vector<int> out(fm.rows());
  for (int r = 0; r < fm.rows(); ++r) out[r] = th.label(y(r), ds.time().month_of(fm.steps[r]), fm.locations[r]);
  return out;
}

/// Row index of each step within `steps`.
std::vector<int> step_rows(const Dataset& ds, const std::vector<int>& steps) {
  std::vector<int> idx(ds.n_steps(), -1);
  for (size_t i = 0; i < steps.size(); ++i) idx[steps[i]] = static_cast<int>(i);
  return idx;
}

int argmax_label(const Eigen::Ref<const Eigen::RowVectorXd>& p) {
  int best = 0;
  for (int k = 1; k < 3; ++k)
    if (p(k) > p(best)) best = k;
  return best - 1;
}

// ---------------------------------------------------------------------------
// Baseline families

class HistModel final : public Model {
 public:
  using Model::Model;

 protected:
  bool uses_history() const override { return false; }

  void fit_impl(const SplitView& train, const std::vector<int>& steps) override {
    const Dataset& ds = train.dataset();
    const Eigen::MatrixXd y = ds.target_matrix(steps);
    const auto months = months_of(ds, steps);
    clim_ = monthly_climatology(y, months).values();
    if (cfg_.task.kind == TaskKind::quantile) table_ = baselines::HistoricalQuantile(y, months, cfg_.task.alpha).table();
  }

  Eigen::MatrixXd predict_impl(const Dataset& ds, const std::vector<int>& steps, Eigen::MatrixXd*) const override {
    const Eigen::MatrixXd& table = cfg_.task.kind == TaskKind::quantile ? table_ : clim_;
    Eigen::MatrixXd out(steps.size(), table.cols());
    for (size_t i = 0; i < steps.size(); ++i) out.row(i) = table.row(ds.time().month_of(steps[i]) - 1);
    return out;
  }

  json save_impl(const fs::path&) const override { return {{"climatology", matrix_json(clim_)}, {"quantile", matrix_json(table_)}}; }
  void load_impl(const json& s, const fs::path&) override {
    clim_ = matrix_from(s.at("climatology"));
    table_ = matrix_from(s.at("quantile"));
  }

 private:
  Eigen::MatrixXd clim_, table_;
};

class EnsMeanModel final : public Model {
 public:
  using Model::Model;

 protected:
  bool uses_history() const override { return false; }
  void fit_impl(const SplitView&, const std::vector<int>&) override {}
  Eigen::MatrixXd predict_impl(const Dataset& ds, const std::vector<int>& steps, Eigen::MatrixXd*) const override {
    if (cfg_.task.kind == TaskKind::quantile) return baselines::ensemble_quantile_matrix(ds, steps, cfg_.task.alpha);
    return baselines::ensemble_mean_matrix(ds, steps);
  }
  json save_impl(const fs::path&) const override { return json::object(); }
  void load_impl(const json&, const fs::path&) override {}
};

// ---------------------------------------------------------------------------
// Tabular families

/// Handles the independent (one model per location) and conditional (one pooled model)
/// layouts; subclasses fit and apply a single model on one matrix.
template <class Fitted>
class TabularModel : public Model {
 public:
  using Model::Model;

 protected:
  virtual Fitted fit_one(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const std::vector<int>& labels,
                         std::uint64_t seed) const = 0;
  /// Values (n x 1) or probabilities (n x 3).
  virtual Eigen::MatrixXd apply_one(const Fitted& m, const Eigen::MatrixXd& X) const = 0;
  virtual Fitted fallback(const Eigen::VectorXd& y, const std::vector<int>& labels, int p) const = 0;

  bool independent() const { return cfg_.features.paradigm == Paradigm::independent; }

  void fit_impl(const SplitView& train, const std::vector<int>& steps) override {
    const Dataset& ds = train.dataset();
    pipeline_.emplace(cfg_.features, train, steps.back() + 1);
    const bool need_labels = cfg_.task.kind == TaskKind::tercile && classifies();
    std::optional<TercileThresholds> th;
    if (need_labels) th = tercile_reference(ds);
    models_.clear();
    errors_.clear();
    auto fit_matrix = [&](const FeatureMatrix& fm, std::uint64_t seed, int loc) {
      const Eigen::VectorXd y = row_targets(ds, fm);
      const std::vector<int> labels = need_labels ? row_labels(ds, fm, *th) : std::vector<int>{};
      try {
        models_.push_back(fit_one(fm.X, y, labels, seed));
      } catch (const std::exception& e) {
        if (loc < 0) throw;
        errors_.push_back({loc, e.what()});
        models_.push_back(fallback(y, labels, static_cast<int>(fm.X.cols())));
      }
    };
    if (independent()) {
      const auto fms = pipeline_->assemble_independent(ds, steps);
      for (size_t l = 0; l < fms.size(); ++l) fit_matrix(fms[l], derive_seed(cfg_.seed, l), static_cast<int>(l));
    } else {
      fit_matrix(pipeline_->assemble_pooled(ds, steps), cfg_.seed, -1);
    }
  }

  Eigen::MatrixXd predict_impl(const Dataset& ds, const std::vector<int>& steps, Eigen::MatrixXd* proba) const override {
    const int L = ds.mask().n_locations();
    const std::vector<int> rows_of = step_rows(ds, steps);
    Eigen::MatrixXd values(steps.size(), L);
    const bool probs = cfg_.task.kind == TaskKind::tercile && classifies();
    if (probs) proba->resize(static_cast<Eigen::Index>(steps.size()) * L, 3);
    auto scatter = [&](const FeatureMatrix& fm, const Eigen::MatrixXd& out) {
      for (int r = 0; r < fm.rows(); ++r) {
        const int i = rows_of[fm.steps[r]], l = fm.locations[r];
        if (probs) {
          proba->row(static_cast<Eigen::Index>(i) * L + l) = out.row(r);
          values(i, l) = argmax_label(out.row(r));
        } else {
          values(i, l) = out(r, 0);
        }
      }
    };
    if (independent()) {
      const auto fms = pipeline_->assemble_independent(ds, steps);
      if (fms.size() != models_.size()) throw std::runtime_error("location count differs from the fitted model");
      for (size_t l = 0; l < fms.size(); ++l) scatter(fms[l], apply_one(models_[l], fms[l].X));
    } else {
      const FeatureMatrix fm = pipeline_->assemble_pooled(ds, steps);
      scatter(fm, apply_one(models_.at(0), fm.X));
    }
    return values;
  }

  std::vector<Fitted> models_;
  std::vector<linear::LocationError> errors_;
};

json linear_json(const linear::LinearModel& m) {
  return {{"task", static_cast<int>(m.task)},
          {"alpha", m.alpha},
          {"weights", std::vector<double>(m.weights.data(), m.weights.data() + m.weights.size())},
          {"intercept", m.intercept},
          {"class_weights", matrix_json(m.class_weights)},
          {"class_intercepts", std::vector<double>(m.class_intercepts.data(), m.class_intercepts.data() + 3)}};
}

linear::LinearModel linear_from(const json& j) {
  linear::LinearModel m;
  m.task = static_cast<linear::LinearTask>(j.at("task").get<int>());
  m.alpha = j.at("alpha");
  const auto w = j.at("weights").get<std::vector<double>>();
  m.weights = Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
  m.intercept = j.at("intercept");
  m.class_weights = matrix_from(j.at("class_weights"));
  const auto ci = j.at("class_intercepts").get<std::vector<double>>();
  m.class_intercepts = Eigen::Vector3d(ci.at(0), ci.at(1), ci.at(2));
  return m;
}

class LinearFamilyModel final : public TabularModel<linear::LinearModel> {
 public:
  using TabularModel::TabularModel;

 protected:
  bool classifies() const override { return cfg_.family == ModelFamily::logistic; }

  linear::LinearModel fit_one(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const std::vector<int>& labels,
                              std::uint64_t) const override {
    switch (cfg_.family) {
      case ModelFamily::linqr: return linear::linear_qr_fit(X, y, cfg_.task.alpha);
      case ModelFamily::logistic: return linear::logistic_fit(X, labels);
      default: return linear::ols_fit(X, y, cfg_.ridge);
    }
  }

  Eigen::MatrixXd apply_one(const linear::LinearModel& m, const Eigen::MatrixXd& X) const override {
    if (m.task == linear::LinearTask::tercile) return linear::logistic_predict(m, X);
    return m.predict(X);
  }

  linear::LinearModel fallback(const Eigen::VectorXd& y, const std::vector<int>& labels, int p) const override {
    linear::LinearModel m;
    m.weights = Eigen::VectorXd::Zero(p);
    if (cfg_.family == ModelFamily::logistic) {
      m.task = linear::LinearTask::tercile;
      m.class_weights = Eigen::MatrixXd::Zero(3, p);
      Eigen::Vector3d count = Eigen::Vector3d::Constant(1.0);
      for (int l : labels) count(l + 1) += 1.0;
      m.class_intercepts = (count / count.sum()).array().log();
    } else if (cfg_.family == ModelFamily::linqr) {
      m.task = linear::LinearTask::quantile;
      m.alpha = cfg_.task.alpha;
      m.intercept = percentile_r7(std::vector<double>(y.data(), y.data() + y.size()), cfg_.task.alpha);
    } else {
      m.intercept = y.mean();
    }
    return m;
  }

  json save_impl(const fs::path&) const override {
    json models = json::array(), errors = json::array();
    for (const auto& m : models_) models.push_back(linear_json(m));
    for (const auto& e : errors_) errors.push_back({{"location", e.location}, {"message", e.message}});
    return {{"models", models}, {"location_errors", errors}};
  }

  void load_impl(const json& s, const fs::path&) override {
    models_.clear();
    for (const auto& m : s.at("models")) models_.push_back(linear_from(m));
  }
};

class ForestFamilyModel final : public TabularModel<forest::Forest> {
 public:
  using TabularModel::TabularModel;

 protected:
  bool classifies() const override { return cfg_.family == ModelFamily::rf; }

  forest::ForestParams params(std::uint64_t seed) const {
    forest::ForestParams p = cfg_.forest;
    p.seed = seed;
    p.threads = cfg_.threads;
    p.store_samples = cfg_.family == ModelFamily::qrf;
    return p;
  }

  forest::Forest fit_one(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const std::vector<int>& labels,
                         std::uint64_t seed) const override {
    if (cfg_.task.kind == TaskKind::tercile) {
      Eigen::VectorXd lab(labels.size());
      for (size_t i = 0; i < labels.size(); ++i) lab(i) = labels[i];
      return forest::rf_fit(X, lab, params(seed), forest::ForestTask::classification);
    }
    return forest::rf_fit(X, y, params(seed), forest::ForestTask::regression);
  }

  Eigen::MatrixXd apply_one(const forest::Forest& f, const Eigen::MatrixXd& X) const override {
    if (cfg_.family == ModelFamily::qrf) return forest::qrf_predict(f, X, cfg_.task.alpha);
    if (f.task == forest::ForestTask::classification) return f.predict_proba(X);
    return f.predict(X);
  }

  forest::Forest fallback(const Eigen::VectorXd&, const std::vector<int>&, int) const override {
    throw std::runtime_error("forest fit failed");
  }

  json save_impl(const fs::path& dir) const override {
    for (size_t i = 0; i < models_.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "forest_%04zu.bin", i);
      models_[i].save(dir / name);
    }
    return {{"forests", models_.size()}};
  }

  void load_impl(const json& s, const fs::path& dir) override {
    models_.clear();
    const size_t n = s.at("forests");
    for (size_t i = 0; i < n; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "forest_%04zu.bin", i);
      models_.push_back(forest::Forest::load(dir / name));
    }
  }
};

// ---------------------------------------------------------------------------
// Spatial family

class ConvNetFamilyModel final : public Model {
 public:
  using Model::Model;

 protected:
  convnet::SpatialData spatial_data(const Dataset& ds, const std::vector<int>& steps) const {
    convnet::SpatialData d;
    const LandMask& mask = ds.mask();
    const int cells = mask.grid().size();
    d.mask.assign(cells, 0);
    for (int c : mask.land_locations()) d.mask[c] = 1;
    for (int t : steps) {
      d.inputs.push_back(pipeline_->assemble_stack(ds, t));
      std::vector<double> y(cells, 0.0);
      const SpatialField& truth = ds.target(t);
      for (int c : mask.land_locations()) y[c] = model_.scaling.apply(truth.value(c));
      d.targets.push_back(std::move(y));
    }
    return d;
  }

  void fit_impl(const SplitView& train, const std::vector<int>& steps) override {
    const Dataset& ds = train.dataset();
    pipeline_.emplace(cfg_.features, train, steps.back() + 1);
    std::vector<double> truth;
    for (int t : steps)
      for (int c : ds.mask().land_locations()) truth.push_back(ds.target(t).value(c));
    const NormMode mode = ds.target_kind() == TargetKind::precipitation ? NormMode::minmax : NormMode::standardize;
    model_.scaling = convnet::fit_target_scaling(truth, mode);
    const convnet::SpatialData data = spatial_data(ds, steps);

    const convnet::UNetConfig ucfg{pipeline_->catalog().size(), cfg_.convnet.base, cfg_.convnet.depth,
                                   mode == NormMode::minmax ? convnet::OutputActivation::sigmoid
                                                            : convnet::OutputActivation::identity};
    convnet::TrainOptions opts = cfg_.convnet.train;
    if (cfg_.convnet.grid_search) {
      std::vector<convnet::TrainOptions> grid;
      for (double lr : {opts.lr / 2, opts.lr})
        for (int batch : {std::max(1, opts.batch / 2), opts.batch})
          for (int epochs : {std::max(1, opts.epochs / 2), opts.epochs})
            for (double wd : {0.0, 1e-4}) grid.push_back({epochs, batch, lr, wd, 0, cfg_.threads});
      opts = convnet::cv_grid_search(ucfg, data, grid, cfg_.convnet.cv_folds, derive_seed(cfg_.seed, 3)).best;
    }
    opts.seed = derive_seed(cfg_.seed, 2);
    opts.threads = cfg_.threads;
    model_.net = convnet::UNet(ucfg, derive_seed(cfg_.seed, 1));
    log_ = convnet::train_regression(model_.net, data, nullptr, opts);
    if (cfg_.task.kind == TaskKind::quantile) {
      opts.epochs = cfg_.convnet.quantile_epochs;
      opts.lr = cfg_.convnet.quantile_lr;
      opts.seed = derive_seed(cfg_.seed, 4);
      const convnet::TrainLog q = convnet::train_quantile(model_.net, cfg_.task.alpha, data, nullptr, opts);
      for (auto r : q.epochs) {
        r.epoch += static_cast<int>(log_.epochs.size());
        log_.epochs.push_back(r);
      }
    }
  }

  Eigen::MatrixXd predict_impl(const Dataset& ds, const std::vector<int>& steps, Eigen::MatrixXd*) const override {
    const auto& locs = ds.mask().land_locations();
    Eigen::MatrixXd out(steps.size(), locs.size());
    for (size_t i = 0; i < steps.size(); ++i) {
      const std::vector<double> v = convnet::predict_normalized(model_.net, pipeline_->assemble_stack(ds, steps[i]));
      for (size_t l = 0; l < locs.size(); ++l) out(i, l) = model_.scaling.invert(v[locs[l]]);
    }
    return out;
  }

  json save_impl(const fs::path& dir) const override {
    convnet::save_checkpoint(dir / "unet.json", model_);
    write_text_file(dir / "training_curve.csv", log_.to_csv());
    return {{"checkpoint", "unet.json"}};
  }

  void load_impl(const json&, const fs::path& dir) override { model_ = convnet::load_checkpoint(dir / "unet.json"); }

 private:
  convnet::ConvNetModel model_;
  convnet::TrainLog log_;
};

// ---------------------------------------------------------------------------
// Stacking

/// Step-major flattening of a steps x L block into one column.
Eigen::VectorXd flatten_steps(const Eigen::MatrixXd& m) {
  Eigen::VectorXd v(m.size());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index l = 0; l < m.cols(); ++l) v(i * m.cols() + l) = m(i, l);
  return v;
}

class StackModel final : public Model {
 public:
  using Model::Model;

  std::uint64_t catalog_hash() const override {
    std::string all;
    for (const auto& b : bases_) all += hex64(b->catalog_hash());
    return fnv1a(all);
  }

 protected:
  bool classifies() const override { return true; }

  stack::StackTask stack_task() const {
    switch (cfg_.task.kind) {
      case TaskKind::regression: return stack::StackTask::regression;
      case TaskKind::quantile: return stack::StackTask::quantile;
      default: return stack::StackTask::tercile;
    }
  }

  ModelConfig base_config(size_t i) const {
    ModelConfig c = default_config(cfg_.stack_bases[i], cfg_.task);
    c.forest = cfg_.forest;
    c.convnet = cfg_.convnet;
    c.ridge = cfg_.ridge;
    c.threads = cfg_.threads;
    c.seed = derive_seed(cfg_.seed, 100 + i);
    return c;
  }

  Eigen::MatrixXd base_block(const Model& m, const Dataset& ds, std::span<const int> steps) const {
    const Prediction p = m.predict(ds, steps);
    if (cfg_.task.kind == TaskKind::tercile) return p.proba;
    return flatten_steps(p.values);
  }

  void fit_impl(const SplitView& train, const std::vector<int>& steps) override {
    const Dataset& ds = train.dataset();
    std::vector<std::shared_ptr<Model>> latest(cfg_.stack_bases.size());
    std::vector<stack::BaseSpec> specs;
    for (size_t i = 0; i < cfg_.stack_bases.size(); ++i) {
      const ModelConfig c = base_config(i);
      specs.push_back({family_name(c.family), [this, c, i, &train, &ds, &latest](std::span<const int> s) {
                         std::shared_ptr<Model> m = make_model(c);
                         m->fit(train, s);
                         latest[i] = m;
                         return stack::BasePredictor([this, m, &ds](std::span<const int> q) { return base_block(*m, ds, q); });
                       }});
    }
    std::optional<TercileThresholds> th;
    if (cfg_.task.kind == TaskKind::tercile) th = tercile_reference(ds);
    auto truth = [&](std::span<const int> s) -> Eigen::VectorXd {
      if (th) return flatten_steps(tercile_labels(ds, s, *th));
      return flatten_steps(ds.target_matrix(std::vector<int>(s.begin(), s.end())));
    };
    stack::StackerOptions so = cfg_.stacker;
    so.alpha = cfg_.task.alpha;
    so.seed = derive_seed(cfg_.seed, 7);
    const stack::StackedModel sm = stack::stack_train(specs, steps, truth, stack_task(), so);
    stacker_ = sm.stacker;
    bases_.clear();
    for (auto& m : latest) bases_.push_back(std::move(m));
  }

  Eigen::MatrixXd predict_impl(const Dataset& ds, const std::vector<int>& steps, Eigen::MatrixXd* proba) const override {
    std::vector<Eigen::MatrixXd> blocks;
    Eigen::Index cols = 0;
    for (const auto& b : bases_) {
      blocks.push_back(base_block(*b, ds, steps));
      cols += blocks.back().cols();
    }
    Eigen::MatrixXd P(blocks.at(0).rows(), cols);
    Eigen::Index c = 0;
    for (const auto& blk : blocks) {
      P.middleCols(c, blk.cols()) = blk;
      c += blk.cols();
    }
    const int L = ds.mask().n_locations();
    Eigen::MatrixXd values(steps.size(), L);
    if (cfg_.task.kind == TaskKind::tercile) {
      *proba = stacker_.predict_proba(P);
      for (Eigen::Index r = 0; r < proba->rows(); ++r) values(r / L, r % L) = argmax_label(proba->row(r));
    } else {
      const Eigen::VectorXd v = stacker_.predict(P);
      for (Eigen::Index r = 0; r < v.size(); ++r) values(r / L, r % L) = v(r);
    }
    return values;
  }

  json save_impl(const fs::path& dir) const override {
    json names = json::array();
    for (size_t i = 0; i < bases_.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "base_%02zu", i);
      bases_[i]->save(dir / name);
      names.push_back(name);
    }
    stacker_.save(dir / "stacker.json");
    return {{"bases", names}};
  }

  void load_impl(const json& s, const fs::path& dir) override {
    bases_.clear();
    for (const auto& n : s.at("bases")) bases_.push_back(Model::load(dir / n.get<std::string>()));
    stacker_ = stack::Stacker::load(dir / "stacker.json");
  }

 public:
  std::vector<const Model*> components() const override {
    std::vector<const Model*> out;
    for (const auto& b : bases_) out.push_back(b.get());
    return out;
  }

 private:
  std::vector<std::shared_ptr<Model>> bases_;
  stack::Stacker stacker_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Model

void Model::fit(const SplitView& train, std::span<const int> steps) {
  cfg_.validate();
  if (train.which() != Split::train) throw std::invalid_argument("models are fitted on the train split only");
  const int min_history = uses_history() ? cfg_.features.min_history : 0;
  std::vector<int> use;
  if (steps.empty()) {
    use = train.steps(min_history);
  } else {
    for (int t : steps) {
      if (!train.contains(t)) throw std::invalid_argument("step " + std::to_string(t) + " is outside the train split");
      if (t >= min_history) use.push_back(t);
    }
    std::sort(use.begin(), use.end());
  }
  if (use.empty()) throw std::invalid_argument("no training step has " + std::to_string(min_history) + " months of history");
  fit_impl(train, use);
  fitted_ = true;
}

Prediction Model::predict(const Dataset& ds, std::span<const int> steps) const {
  if (!fitted_) throw std::logic_error("model used before fitting");
  Prediction p;
  p.steps.assign(steps.begin(), steps.end());
  for (int t : p.steps) {
    if (t < 0 || t >= ds.n_steps()) throw std::out_of_range("step " + std::to_string(t) + " outside the dataset");
    if (uses_history() && t < cfg_.features.min_history)
      throw std::invalid_argument("step " + std::to_string(t) + " lacks the history the features need");
  }
  if (p.steps.empty()) throw std::invalid_argument("no steps to predict");
  p.values = predict_impl(ds, p.steps, &p.proba);
  if (cfg_.task.kind == TaskKind::tercile && !classifies()) {
    // regression output turned into a class by the training terciles
    const TercileThresholds th = tercile_reference(ds);
    const Eigen::Index L = p.values.cols();
    p.proba = Eigen::MatrixXd::Zero(p.values.rows() * L, 3);
    for (Eigen::Index i = 0; i < p.values.rows(); ++i) {
      const int m = ds.time().month_of(p.steps[i]);
      for (Eigen::Index l = 0; l < L; ++l) {
        const int lab = th.label(p.values(i, l), m, static_cast<int>(l));
        p.values(i, l) = lab;
        p.proba(i * L + l, lab + 1) = 1.0;
      }
    }
  }
  return p;
}

std::uint64_t Model::catalog_hash() const { return pipeline_ ? pipeline_->catalog().hash() : 0; }

void Model::check_compatible(const Dataset& ds) const {
  if (cfg_.family == ModelFamily::stack) {
    for (const Model* b : components()) b->check_compatible(ds);
    return;
  }
  if (!pipeline_) return;
  const std::uint64_t have = FeaturePipeline::catalog_for(pipeline_->config(), ds).hash();
  if (have != catalog_hash())
    throw CatalogError("feature catalog mismatch: model expects " + hex64(catalog_hash()) + ", dataset yields " + hex64(have));
}

void Model::save(const fs::path& dir) const {
  if (!fitted_) throw std::logic_error("cannot save an unfitted model");
  fs::create_directories(dir);
  json doc = {{"format_version", 1}, {"config", cfg_.to_json()}, {"catalog_hash", hex64(catalog_hash())}};
  if (pipeline_) {
    doc["pipeline"] = json::parse(pipeline_->to_json());
    doc["catalog"] = json::parse(pipeline_->catalog().to_json());
  }
  doc["state"] = save_impl(dir);
  write_text_file(dir / "model.json", doc.dump(1));
}

std::unique_ptr<Model> Model::load(const fs::path& dir) {
  const json doc = json::parse(read_text_file(dir / "model.json"));
  if (doc.value("format_version", 0) != 1) throw FormatVersionError("unsupported model format in " + dir.string());
  auto m = make_model(ModelConfig::from_json(doc.at("config")));
  if (doc.contains("pipeline")) m->pipeline_ = FeaturePipeline::from_json(doc["pipeline"].dump());
  m->load_impl(doc.at("state"), dir);
  m->fitted_ = true;
  if (hex64(m->catalog_hash()) != doc.at("catalog_hash").get<std::string>())
    throw CatalogError("stored catalog hash does not match the restored pipeline in " + dir.string());
  return m;
}

std::unique_ptr<Model> make_model(const ModelConfig& cfg) {
  cfg.validate();
  switch (cfg.family) {
    case ModelFamily::hist: return std::make_unique<HistModel>(cfg);
    case ModelFamily::ensmean: return std::make_unique<EnsMeanModel>(cfg);
    case ModelFamily::lr:
    case ModelFamily::linqr:
    case ModelFamily::logistic: return std::make_unique<LinearFamilyModel>(cfg);
    case ModelFamily::rf:
    case ModelFamily::qrf: return std::make_unique<ForestFamilyModel>(cfg);
    case ModelFamily::convnet: return std::make_unique<ConvNetFamilyModel>(cfg);
    case ModelFamily::stack: return std::make_unique<StackModel>(cfg);
  }
  throw ConfigError("unknown model family");
}

}  // namespace ssf
