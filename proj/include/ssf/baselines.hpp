#pragma once

#include "ssf/preprocess.hpp"

#include <Eigen/Dense>

#include <span>
#include <string>
#include <vector>

namespace ssf::baselines {

/// s_{m(t),l}.
double predict_historical(const Climatology& clim, int month, int loc);
/// Arithmetic mean over members.
double predict_ensemble_mean(std::span<const double> members);
/// R-7 percentile of the members.
double predict_ensemble_quantile(std::span<const double> members, double alpha);
/// R-7 percentile of the reference values for one (month, location).
double predict_historical_quantile(std::span<const double> reference, double alpha);

/// Ensemble-mean predictions (steps x L) over land.
Eigen::MatrixXd ensemble_mean_matrix(const Dataset& ds, std::span<const int> steps);
/// Ensemble alpha-percentile predictions (steps x L) over land.
Eigen::MatrixXd ensemble_quantile_matrix(const Dataset& ds, std::span<const int> steps, double alpha);
/// Climatology predictions (steps x L).
Eigen::MatrixXd historical_matrix(const Dataset& ds, const Climatology& clim, std::span<const int> steps);

/// Per (month, location) alpha-percentile of a reference target series.
class HistoricalQuantile {
 public:
  HistoricalQuantile(const Eigen::MatrixXd& reference, std::span<const int> months, double alpha);
  double at(int month, int loc) const { return table_(month - 1, loc); }
  Eigen::MatrixXd predict(std::span<const int> months) const;
  const Eigen::MatrixXd& table() const { return table_; }

 private:
  Eigen::MatrixXd table_;  // 12 x L
};

struct DebiasResult {
  Eigen::MatrixXd predictions;
  std::vector<int> untouched_months;  // months absent from the test period
};

/// Oracle diagnostic: removes the per (month, location) mean error measured against
/// the very truth being evaluated. Not a deployable method.
DebiasResult oracle_debias(const Eigen::MatrixXd& predictions, const Eigen::MatrixXd& truth,
                           std::span<const int> months);

}  // namespace ssf::baselines
