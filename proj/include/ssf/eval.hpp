#pragma once

#include "ssf/models.hpp"
#include "ssf/preprocess.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace ssf::eval {

/// Summary over locations; undefined (NaN) entries are skipped and counted.
struct Aggregates {
  double mean = 0.0;
  double median = 0.0;
  double se = 0.0;  // stdev over locations / sqrt(count)
  double p90 = 0.0;
  int count = 0;
  int undefined = 0;
};

Aggregates aggregate(std::span<const double> per_location);

enum class R2Convention {
  truth_mean,  // denominator centred on the mean detrended truth
  literal,     // centred on the mean detrended prediction
};

/// y and yhat are steps x L; truth is detrended with truth_clim, predictions with pred_clim.
/// Locations with a zero denominator are NaN.
std::vector<double> r2_per_location(const Eigen::MatrixXd& y, const Eigen::MatrixXd& yhat, const Climatology& truth_clim,
                                    const Climatology& pred_clim, std::span<const int> months,
                                    R2Convention conv = R2Convention::truth_mean);
/// R2 on already detrended series.
std::vector<double> r2_detrended(const Eigen::MatrixXd& y_det, const Eigen::MatrixXd& yhat_det,
                                 R2Convention conv = R2Convention::truth_mean);
std::vector<double> mse_per_location(const Eigen::MatrixXd& y, const Eigen::MatrixXd& yhat);
std::vector<double> pinball_per_location(const Eigen::MatrixXd& y, const Eigen::MatrixXd& z, double alpha);
std::vector<double> accuracy_per_location(const Eigen::MatrixXd& labels, const Eigen::MatrixXd& predicted);

struct MetricGrid {
  std::string name;
  std::vector<double> per_location;
  Aggregates agg;
};

struct EvalReport {
  std::string model_id;
  std::string family;
  std::string task;
  double alpha = 0.0;
  std::string split;
  std::string variant;
  std::string catalog_hash;
  std::uint64_t seed = 0;
  std::vector<std::string> notes;
  std::vector<MetricGrid> metrics;

  const MetricGrid& metric(const std::string& name) const;
  std::string to_json() const;
};

/// Caveat attached to every report that quotes a standard error.
extern const char* const kStandardErrorCaveat;

struct EvalOptions {
  R2Convention r2 = R2Convention::truth_mean;
  std::string model_id;
  std::string variant;
};

/// Metric suite for the model's task on one split.
EvalReport evaluate_model(const Model& model, const Dataset& ds, Split split, const EvalOptions& opts = {});

/// Aggregates restricted to a set of land-location indices.
std::vector<std::pair<std::string, Aggregates>> region_metrics(const EvalReport& report, std::span<const int> locations);

// ---------------------------------------------------------------------------
// Sign test

struct SignTestResult {
  std::vector<int> wins;  // A strictly better than B
  std::vector<int> n;     // non-tied comparisons
  std::vector<double> p;
  std::vector<bool> no_data;
  double threshold = 0.0;
  double min_p = 1.0;
  bool reject = false;
  std::string to_json() const;
};

/// P(Bin(n, 1/2) >= w), summed exactly in log space.
double binomial_upper_tail(int n, int w);
double bonferroni_threshold(int n_locations, double level = 0.05);
/// abs_a and abs_b are steps x L absolute errors.
SignTestResult sign_test(const Eigen::MatrixXd& abs_a, const Eigen::MatrixXd& abs_b, double level = 0.05);

// ---------------------------------------------------------------------------
// Heatmaps

/// n_lat x n_lon comma-separated grid, row 0 first; sea and undefined cells are NA.
std::string heatmap_csv(std::span<const double> per_location, const LandMask& mask);
std::vector<double> read_heatmap_csv(const std::string& text, const LandMask& mask);
/// Binary PGM: sea 0; land values mapped linearly from [lo, hi] onto 1..255 (clamped),
/// undefined land cells 0.
std::string heatmap_pgm(std::span<const double> per_location, const LandMask& mask, double lo, double hi);
void export_heatmap(std::span<const double> per_location, const LandMask& mask, const std::filesystem::path& csv_path,
                    bool with_pgm = true);

// ---------------------------------------------------------------------------
// Experiments

enum class Variant { full, mean, sorted, pe, latlon, none };
const char* variant_name(Variant v);
Variant parse_variant(const std::string& s);
/// Feature config with the variant's swap applied; ConfigError when the paradigm forbids it.
ModelConfig apply_variant(ModelConfig cfg, Variant v);

struct AblationResult {
  Variant variant;
  FeatureCatalog catalog;
  EvalReport validation;
  EvalReport test;
};

AblationResult ablation_run(Variant v, const ModelConfig& base, const Dataset& ds);

struct BootstrapResult {
  std::vector<std::string> models;
  std::vector<std::vector<double>> test_mse;  // per model, per run; NaN for failed runs
  std::vector<std::string> failures;
  std::string to_json() const;
};

BootstrapResult bootstrap_experiment(const std::vector<ModelConfig>& configs, const Dataset& ds, int n_boot,
                                     int sample_size, std::uint64_t seed);

struct GroupReport {
  std::string group;
  FeatureCatalog catalog;
  EvalReport validation;
};

/// Cumulative groups: ensemble; + lags; + covariates; + SST.
std::vector<GroupReport> grouped_feature_importance(const ModelConfig& base, const Dataset& ds);

}  // namespace ssf::eval
