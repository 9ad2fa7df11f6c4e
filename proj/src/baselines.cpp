#include "ssf/baselines.hpp"
#include "ssf/util.hpp"

#include <array>
#include <iostream>
#include <numeric>
#include <stdexcept>

namespace ssf::baselines {

double predict_historical(const Climatology& clim, int month, int loc) { return clim.at(month, loc); }

double predict_ensemble_mean(std::span<const double> members) {
  if (members.empty()) throw std::invalid_argument("ensemble mean of zero members");
  return std::accumulate(members.begin(), members.end(), 0.0) / static_cast<double>(members.size());
}

double predict_ensemble_quantile(std::span<const double> members, double alpha) {
  return percentile_r7({members.begin(), members.end()}, alpha);
}

double predict_historical_quantile(std::span<const double> reference, double alpha) {
  return percentile_r7({reference.begin(), reference.end()}, alpha);
}

namespace {

template <class F>
Eigen::MatrixXd per_member_reduce(const Dataset& ds, std::span<const int> steps, F&& reduce) {
  const auto& locs = ds.mask().land_locations();
  Eigen::MatrixXd out(steps.size(), locs.size());
  std::vector<double> m(ds.n_members());
  for (size_t i = 0; i < steps.size(); ++i) {
    const auto& ens = ds.ensemble(steps[i]);
    for (size_t l = 0; l < locs.size(); ++l) {
      for (int k = 0; k < ens.size(); ++k) m[k] = ens.member(k).value(locs[l]);
      out(i, l) = reduce(m);
    }
  }
  return out;
}

}  // namespace

Eigen::MatrixXd ensemble_mean_matrix(const Dataset& ds, std::span<const int> steps) {
  return per_member_reduce(ds, steps, [](const std::vector<double>& m) { return predict_ensemble_mean(m); });
}

Eigen::MatrixXd ensemble_quantile_matrix(const Dataset& ds, std::span<const int> steps, double alpha) {
  return per_member_reduce(ds, steps,
                           [alpha](const std::vector<double>& m) { return predict_ensemble_quantile(m, alpha); });
}

Eigen::MatrixXd historical_matrix(const Dataset& ds, const Climatology& clim, std::span<const int> steps) {
  Eigen::MatrixXd out(steps.size(), clim.n_locations());
  for (size_t i = 0; i < steps.size(); ++i) out.row(i) = clim.values().row(ds.time().month_of(steps[i]) - 1);
  return out;
}

HistoricalQuantile::HistoricalQuantile(const Eigen::MatrixXd& reference, std::span<const int> months,
                                       double alpha)
    : table_(12, reference.cols()) {
  if (static_cast<Eigen::Index>(months.size()) != reference.rows())
    throw std::invalid_argument("month list length does not match reference rows");
  for (int m = 1; m <= 12; ++m) {
    for (Eigen::Index l = 0; l < reference.cols(); ++l) {
      std::vector<double> v;
      for (Eigen::Index r = 0; r < reference.rows(); ++r)
        if (months[r] == m) v.push_back(reference(r, l));
      if (v.empty()) throw std::invalid_argument("historical quantile: no reference values for month " +
                                                 std::to_string(m));
      table_(m - 1, l) = percentile_r7(std::move(v), alpha);
    }
  }
}

Eigen::MatrixXd HistoricalQuantile::predict(std::span<const int> months) const {
  Eigen::MatrixXd out(months.size(), table_.cols());
  for (size_t i = 0; i < months.size(); ++i) out.row(i) = table_.row(months[i] - 1);
  return out;
}

DebiasResult oracle_debias(const Eigen::MatrixXd& predictions, const Eigen::MatrixXd& truth,
                           std::span<const int> months) {
  if (predictions.rows() != truth.rows() || predictions.cols() != truth.cols())
    throw std::invalid_argument("oracle_debias: prediction and truth shapes differ");
  if (static_cast<Eigen::Index>(months.size()) != predictions.rows())
    throw std::invalid_argument("oracle_debias: month list length mismatch");
  Eigen::MatrixXd bias = Eigen::MatrixXd::Zero(12, predictions.cols());
  std::array<int, 12> count{};
  for (Eigen::Index r = 0; r < predictions.rows(); ++r) {
    bias.row(months[r] - 1) += predictions.row(r) - truth.row(r);
    ++count[months[r] - 1];
  }
  DebiasResult res;
  for (int m = 0; m < 12; ++m) {
    if (count[m])
      bias.row(m) /= count[m];
    else
      res.untouched_months.push_back(m + 1);
  }
  res.predictions = predictions;
  for (Eigen::Index r = 0; r < predictions.rows(); ++r) res.predictions.row(r) -= bias.row(months[r] - 1);
  return res;
}

}  // namespace ssf::baselines
