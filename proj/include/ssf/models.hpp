#pragma once

#include "ssf/convnet.hpp"
#include "ssf/dataio.hpp"
#include "ssf/forest.hpp"
#include "ssf/preprocess.hpp"
#include "ssf/stack.hpp"

#include <json.hpp>

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssf {

/// Rejected configuration (CLI exit code 2).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

enum class TaskKind { regression, quantile, tercile };
enum class ModelFamily { hist, ensmean, lr, linqr, logistic, rf, qrf, convnet, stack };

const char* task_name(TaskKind t);
TaskKind parse_task(const std::string& s);
const char* family_name(ModelFamily f);
ModelFamily parse_family(const std::string& s);

struct TaskSpec {
  TaskKind kind = TaskKind::regression;
  double alpha = 0.9;  // quantile task only
};

struct ConvNetParams {
  int base = 16;
  int depth = 2;
  convnet::TrainOptions train{40, 8, 2e-3, 0.0, 0, 1};
  int quantile_epochs = 20;
  double quantile_lr = 2e-4;
  bool grid_search = false;
  int cv_folds = 10;
};

struct ModelConfig {
  ModelFamily family = ModelFamily::rf;
  TaskSpec task;
  FeatureConfig features;
  forest::ForestParams forest;
  double ridge = 0.0;
  ConvNetParams convnet;
  std::vector<ModelFamily> stack_bases;
  stack::StackerOptions stacker;
  std::uint64_t seed = 0;
  int threads = 1;

  /// Throws ConfigError for unsupported family/task/paradigm combinations.
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Family defaults: feature layout per paradigm, stack base list per task.
ModelConfig default_config(ModelFamily family, TaskSpec task = {});

/// Predictions for a list of steps over land locations.
struct Prediction {
  std::vector<int> steps;
  /// steps x L: values (regression, quantile) or predicted labels (tercile).
  Eigen::MatrixXd values;
  /// Tercile only: (steps*L) x 3 probabilities, step-major, columns -1, 0, +1.
  Eigen::MatrixXd proba;
};

/// Tercile thresholds from every training step's truth.
TercileThresholds tercile_reference(const Dataset& ds);
/// Observed labels (steps x L).
Eigen::MatrixXd tercile_labels(const Dataset& ds, std::span<const int> steps, const TercileThresholds& th);

class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {}
  virtual ~Model() = default;

  const ModelConfig& config() const { return cfg_; }
  bool fitted() const { return fitted_; }

  /// Fits on the given training steps; empty means every usable training step.
  void fit(const SplitView& train, std::span<const int> steps = {});
  Prediction predict(const Dataset& ds, std::span<const int> steps) const;

  /// Catalog hash of the features consumed (0 for feature-free families).
  virtual std::uint64_t catalog_hash() const;
  /// Throws when the dataset would yield a different feature catalog.
  void check_compatible(const Dataset& ds) const;
  /// Fitted sub-models (the retrained bases of a stack); empty otherwise.
  virtual std::vector<const Model*> components() const { return {}; }

  void save(const std::filesystem::path& dir) const;
  static std::unique_ptr<Model> load(const std::filesystem::path& dir);

 protected:
  virtual void fit_impl(const SplitView& train, const std::vector<int>& steps) = 0;
  /// steps x L values, or labels with `proba` filled for tercile classifiers.
  virtual Eigen::MatrixXd predict_impl(const Dataset& ds, const std::vector<int>& steps,
                                       Eigen::MatrixXd* proba) const = 0;
  virtual nlohmann::json save_impl(const std::filesystem::path& dir) const = 0;
  virtual void load_impl(const nlohmann::json& state, const std::filesystem::path& dir) = 0;
  /// Whether predict_impl yields class labels directly for the tercile task.
  virtual bool classifies() const { return false; }
  virtual bool uses_history() const { return true; }

  ModelConfig cfg_;
  std::optional<FeaturePipeline> pipeline_;
  bool fitted_ = false;
};

std::unique_ptr<Model> make_model(const ModelConfig& cfg);

/// Climatology used to detrend a model's predictions: model climatology of its
/// training-period predictions for the ensemble average, observed climatology otherwise.
Climatology detrending_climatology(const Model& model, const Dataset& ds);
Climatology observed_climatology(const Dataset& ds);

}  // namespace ssf
