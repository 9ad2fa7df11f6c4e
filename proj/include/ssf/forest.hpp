#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace ssf::forest {

enum class ForestTask { regression, classification };

struct ForestParams {
  int n_trees = 100;
  /// <= 0 selects the task default: all features for regression, floor(sqrt(p)) for classification.
  int max_features = 0;
  int min_samples_split = 2;
  bool bootstrap = true;
  std::uint64_t seed = 0;
  int threads = 1;
  /// Keep the training rows of every leaf (needed for quantile prediction).
  bool store_samples = false;
};

/// Flat node arrays. feature < 0 marks a leaf; leaves reference a slice of leaf_rows.
struct Tree {
  std::vector<int> feature;
  std::vector<double> threshold;
  std::vector<int> left;
  std::vector<int> right;
  std::vector<double> value;           // regression mean at leaves
  std::vector<std::array<float, 3>> class_freq;  // classification leaf frequencies
  std::vector<int> leaf_begin;
  std::vector<int> leaf_count;
  std::vector<int> leaf_rows;          // training row ids grouped by leaf (with bootstrap multiplicity)

  int n_nodes() const { return static_cast<int>(feature.size()); }
  bool is_leaf(int node) const { return feature[node] < 0; }
  /// Leaf reached by x.
  int route(std::span<const double> x) const;
};

inline constexpr int kClasses = 3;

/// Random forest of CART trees. Classification labels are -1, 0, +1.
class Forest {
 public:
  ForestTask task = ForestTask::regression;
  ForestParams params;
  int n_features = 0;
  std::vector<Tree> trees;
  /// Training targets (regression) or labels; kept for quantile prediction.
  std::vector<double> targets;

  double predict(std::span<const double> x) const;
  Eigen::VectorXd predict(const Eigen::MatrixXd& X) const;
  /// Mean of per-tree leaf class frequencies, columns ordered -1, 0, +1.
  std::array<double, kClasses> predict_proba(std::span<const double> x) const;
  Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& X) const;
  /// argmax of predict_proba, ties to the smaller class.
  int predict_label(std::span<const double> x) const;

  /// Per-training-row weights for a query: (1/n_trees) sum_trees [i in leaf(x)] / |leaf(x)|.
  std::vector<double> qrf_weights(std::span<const double> x) const;

  void save(const std::filesystem::path& path) const;
  static Forest load(const std::filesystem::path& path);

 /// Throws when x does not have n_features values.
  void check_width(std::span<const double> x) const;
};

Forest rf_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const ForestParams& params, ForestTask task);

/// Weighted alpha-quantile: smallest y (sorted ascending) whose cumulative weight reaches alpha.
double weighted_quantile(std::span<const double> y, std::span<const double> w, double alpha);

/// Quantile regression forest prediction. The forest must have been fitted with store_samples.
double qrf_predict(const Forest& forest, std::span<const double> x, double alpha);
Eigen::VectorXd qrf_predict(const Forest& forest, const Eigen::MatrixXd& X, double alpha);

/// Out-of-bag mean squared error (rows never in-bag for a tree are predicted by that tree only).
double oob_mse(const Forest& forest, const Eigen::MatrixXd& X, const Eigen::VectorXd& y);

struct PerLocationForests {
  std::vector<Forest> forests;
  std::vector<std::pair<int, std::string>> errors;
};

/// Independent QRFs per location; location l uses seed derive(params.seed, l).
PerLocationForests per_location_qrf_fit(const std::vector<Eigen::MatrixXd>& X,
                                        const std::vector<Eigen::VectorXd>& y, ForestParams params);

}  // namespace ssf::forest
