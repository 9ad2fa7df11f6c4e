#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssf::linear {

enum class LinearTask { regression, quantile, tercile };

/// Linear predictor. Regression and quantile models use `weights` (p x 1) and
/// `intercept`; tercile models use `class_weights` (3 x p) and `class_intercepts`.
struct LinearModel {
  LinearTask task = LinearTask::regression;
  double alpha = 0.5;  // quantile level when task == quantile
  Eigen::VectorXd weights;
  double intercept = 0.0;
  Eigen::MatrixXd class_weights;
  Eigen::Vector3d class_intercepts = Eigen::Vector3d::Zero();
  std::uint64_t catalog_hash = 0;

  int n_features() const {
    return static_cast<int>(task == LinearTask::tercile ? class_weights.cols() : weights.size());
  }
  double predict(const Eigen::Ref<const Eigen::RowVectorXd>& x) const;
  Eigen::VectorXd predict(const Eigen::MatrixXd& X) const;
  /// Class probabilities (rows x 3, columns ordered -1, 0, +1).
  Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& X) const;
};

/// Minimizes sum (y - X theta - theta0)^2 + lambda |theta|^2 (intercept unpenalized).
/// Cholesky on the normal equations; rank-deficient systems fall back to the SVD
/// minimum-norm solution.
LinearModel ols_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double lambda = 0.0);

/// rho_alpha(z) = alpha z for z >= 0, (alpha - 1) z otherwise.
double pinball_loss(double z, double alpha);
double mean_pinball_loss(const Eigen::VectorXd& residual, double alpha);

struct QuantileFitOptions {
  int max_epochs = 5000;
  int patience = 50;
  double tolerance = 1e-8;
  /// Initial step as a fraction of the target's mean absolute deviation.
  double step = 0.05;
};

/// Linear quantile regression by full-batch averaged subgradient descent, warm
/// started from least squares with the intercept moved to the residual alpha-quantile.
LinearModel linear_qr_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double alpha,
                          const QuantileFitOptions& opts = {});

struct LogisticFitOptions {
  double l2 = 1e-4;
  int max_iterations = 5000;
  double step = 0.5;
  double gradient_tolerance = 1e-9;
};

/// Multinomial softmax regression over labels in {-1, 0, 1}; all three must occur.
LinearModel logistic_fit(const Eigen::MatrixXd& X, const std::vector<int>& labels,
                         const LogisticFitOptions& opts = {});
Eigen::MatrixXd logistic_predict(const LinearModel& model, const Eigen::MatrixXd& X);

struct LocationError {
  int location;
  std::string message;
};

/// Independent fits per location; a failure at one location is recorded, not thrown.
struct PerLocationFit {
  std::vector<std::optional<LinearModel>> models;
  std::vector<LocationError> errors;
};

PerLocationFit per_location_fit(const std::vector<Eigen::MatrixXd>& X, const std::vector<Eigen::VectorXd>& y,
                                LinearTask task, double alpha = 0.5, double lambda = 0.0);

}  // namespace ssf::linear
