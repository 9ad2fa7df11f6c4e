#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace ssf::stack {

enum class StackTask { regression, quantile, tercile };

struct StackerOptions {
  int hidden = 100;
  double lr = 3e-3;
  int batch = 128;
  int max_epochs = 1000;
  int patience = 50;
  /// Trailing fraction of rows held out for early stopping (rows are in time order).
  double holdout = 0.2;
  double alpha = 0.5;
  std::uint64_t seed = 0;
};

/// One hidden sigmoid layer. Inputs and (for regression/quantile) targets are min-max
/// scaled with the ranges seen during fitting.
struct Stacker {
  StackTask task = StackTask::regression;
  double alpha = 0.5;
  Eigen::VectorXd in_min, in_max;
  double y_min = 0.0, y_max = 1.0;
  Eigen::MatrixXd W1;  // H x p
  Eigen::VectorXd b1;
  Eigen::MatrixXd W2;  // outputs x H
  Eigen::VectorXd b2;

  int n_inputs() const { return static_cast<int>(W1.cols()); }
  Eigen::MatrixXd scale_inputs(const Eigen::MatrixXd& P) const;
  /// Regression or quantile output in target units.
  Eigen::VectorXd predict(const Eigen::MatrixXd& P) const;
  /// Tercile probabilities, columns -1, 0, +1.
  Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& P) const;

  std::vector<double> flat_params() const;
  void set_flat_params(const std::vector<double>& p);

  void save(const std::filesystem::path& path) const;
  static Stacker load(const std::filesystem::path& path);
};

/// Mean loss on scaled inputs Pn and targets (scaled values, or labels -1/0/+1 stored as
/// doubles for the tercile task), plus the flat parameter gradient when requested.
double stacker_loss(const Stacker& s, const Eigen::MatrixXd& Pn, const Eigen::VectorXd& target,
                    std::vector<double>* grad);

/// y holds targets (regression, quantile) or labels -1/0/+1 (tercile).
Stacker stacker_fit(const Eigen::MatrixXd& P, const Eigen::VectorXd& y, StackTask task,
                    const StackerOptions& opts = {});

/// Fitted base model: maps steps to a prediction block with one row per sample
/// (step-major) and one column (regression, quantile) or three (tercile probabilities).
using BasePredictor = std::function<Eigen::MatrixXd(std::span<const int> steps)>;
/// Trains a base on the given steps.
using BaseTrainer = std::function<BasePredictor(std::span<const int> train_steps)>;

struct BaseSpec {
  std::string id;
  BaseTrainer train;
};

struct StackedModel {
  std::vector<std::string> base_ids;
  std::vector<BasePredictor> bases;  // retrained on the full training steps
  Stacker stacker;
  Eigen::MatrixXd base_matrix(std::span<const int> steps) const;
  Eigen::VectorXd predict(std::span<const int> steps) const;
  Eigen::MatrixXd predict_proba(std::span<const int> steps) const;
};

/// truth(steps) returns targets or labels aligned with base prediction rows.
/// Bases are fit on the first chronological half, the stacker on their predictions for
/// the second half, then bases are refit on every training step.
StackedModel stack_train(const std::vector<BaseSpec>& bases, std::span<const int> train_steps,
                         const std::function<Eigen::VectorXd(std::span<const int>)>& truth, StackTask task,
                         const StackerOptions& opts = {});

}  // namespace ssf::stack
