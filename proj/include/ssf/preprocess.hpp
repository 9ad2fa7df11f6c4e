#pragma once

#include "ssf/dataio.hpp"
#include "ssf/grid.hpp"

#include <Eigen/Dense>

#include <array>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ssf {

// ---------------------------------------------------------------------------
// Climatology and detrending

enum class ClimatologySource { observed, model };

/// Per (calendar month, location) mean. Row m-1 holds month m.
class Climatology {
 public:
  Climatology(Eigen::MatrixXd values, ClimatologySource source);
  double at(int month, int loc) const { return values_(month - 1, loc); }
  const Eigen::MatrixXd& values() const { return values_; }
  ClimatologySource source() const { return source_; }
  int n_locations() const { return static_cast<int>(values_.cols()); }

 private:
  Eigen::MatrixXd values_;  // 12 x L
  ClimatologySource source_;
};

/// Mean over all rows of each calendar month. series is steps x L, months[i] in 1..12.
/// Throws listing any month with no samples.
Climatology monthly_climatology(const Eigen::MatrixXd& series, std::span<const int> months,
                                ClimatologySource source = ClimatologySource::observed);
/// Climatology of a model's training-period predictions.
Climatology model_climatology(const Eigen::MatrixXd& predictions, std::span<const int> months);

Eigen::MatrixXd detrend(const Eigen::MatrixXd& values, const Climatology& clim, std::span<const int> months);
Eigen::MatrixXd add_climatology(const Eigen::MatrixXd& anomalies, const Climatology& clim,
                                std::span<const int> months);

/// Calendar months of the given steps.
std::vector<int> months_of(const Dataset& ds, std::span<const int> steps);

// ---------------------------------------------------------------------------
// Terciles

class TercileThresholds {
 public:
  TercileThresholds(Eigen::MatrixXd q33, Eigen::MatrixXd q66);
  double q33(int month, int loc) const { return q33_(month - 1, loc); }
  double q66(int month, int loc) const { return q66_(month - 1, loc); }
  /// -1 below q33, +1 above q66, 0 otherwise (both bounds belong to class 0).
  int label(double value, int month, int loc) const;

 private:
  Eigen::MatrixXd q33_, q66_;  // 12 x L
};

/// R-7 33rd/66th percentiles per (month, location); needs >= 3 samples per month.
TercileThresholds tercile_thresholds(const Eigen::MatrixXd& series, std::span<const int> months);
int tercile_label(double value, double q33, double q66);

// ---------------------------------------------------------------------------
// PCA

struct PcaModel {
  Eigen::RowVectorXd mean;        // per column
  Eigen::MatrixXd components;     // n_components x n_points, orthonormal rows
  Eigen::VectorXd singular_values;
  int n_components() const { return static_cast<int>(components.rows()); }
  /// Fraction of total variance captured by each component.
  Eigen::VectorXd explained_variance_ratio;
};

/// Top-n right singular vectors of the column-centred matrix (rows = months).
PcaModel pca_fit(const Eigen::MatrixXd& data, int n_components);
Eigen::VectorXd pca_transform(const PcaModel& model, const Eigen::RowVectorXd& row);
Eigen::MatrixXd pca_transform(const PcaModel& model, const Eigen::MatrixXd& rows);
Eigen::MatrixXd pca_reconstruct(const PcaModel& model, const Eigen::MatrixXd& scores);

// ---------------------------------------------------------------------------
// Normalization

enum class NormMode { minmax, standardize };

struct NormalizationState {
  std::vector<NormMode> mode;
  std::vector<double> a;  // min or mean
  std::vector<double> b;  // max or std
  std::vector<bool> constant;

  int size() const { return static_cast<int>(mode.size()); }
  bool fitted() const { return !mode.empty(); }
  double apply(int j, double v) const;
  double invert(int j, double v) const;
  /// Transforms columns in place; never clips.
  void apply(Eigen::MatrixXd& X) const;
};

/// Fit on training rows only.
NormalizationState fit_normalization(const Eigen::MatrixXd& X, const std::vector<NormMode>& modes);
NormalizationState fit_normalization(const Eigen::MatrixXd& X, NormMode mode);

// ---------------------------------------------------------------------------
// Missing-value fill

/// Maps every missing cell to its nearest valid cell (Euclidean in cell coordinates,
/// ties to the smaller flat id). Built once per missing pattern.
class NearestFiller {
 public:
  explicit NearestFiller(const SpatialField& pattern);
  SpatialField fill(const SpatialField& field) const;
  int source_of(int cell) const { return source_[cell]; }
  bool matches(const SpatialField& field) const;

 private:
  GridSpec grid_;
  std::vector<bool> missing_;
  std::vector<int> source_;
};

SpatialField nearest_fill(const SpatialField& field, const LandMask& mask);

// ---------------------------------------------------------------------------
// Positional encoding and lags

/// pe[2i] = sin(coord / 10000^(2i/d)), pe[2i+1] = cos(coord / 10000^(2i/d)).
std::vector<double> positional_encoding(double coord, int d);
/// pe(lon) followed by pe(lat), 2d values; lon wrapped into [0, 360).
std::vector<double> location_encoding(double lat, double lon, int d);

inline const std::vector<int> kDefaultLags = {2, 3, 4, 12, 24};

/// history(t - lag) for each lag, or empty when the history is too short.
std::vector<double> lag_features(std::span<const double> history, int t, std::span<const int> lags);

// ---------------------------------------------------------------------------
// Feature assembly

enum class Paradigm { independent, conditional, spatial };
enum class EnsembleMode { full, mean, sorted };
enum class LocationMode { pe, latlon, none };

const char* paradigm_name(Paradigm p);
Paradigm parse_paradigm(const std::string& s);
const char* ensemble_mode_name(EnsembleMode m);
EnsembleMode parse_ensemble_mode(const std::string& s);
const char* location_mode_name(LocationMode m);
LocationMode parse_location_mode(const std::string& s);

/// Months between a covariate or SST observation and the target month.
inline constexpr int kAvailabilityLag = 2;

struct FeatureConfig {
  Paradigm paradigm = Paradigm::conditional;
  EnsembleMode ensemble = EnsembleMode::full;
  LocationMode location = LocationMode::pe;
  bool ensemble_members = true;
  bool lags = true;
  bool covariates = true;
  bool sst = true;
  std::vector<int> lag_months = kDefaultLags;
  int pe_dim = 12;
  int sst_components = 8;
  /// Samples need this many months of history; fixed so catalogs can be compared.
  int min_history = 24;

  /// Throws std::invalid_argument for combinations that make no sense.
  void validate() const;
};

struct FeatureColumn {
  std::string name;
  std::string source;  // ensemble | lag | covariate | sst | location
  int index = 0;
};

struct FeatureCatalog {
  std::vector<FeatureColumn> columns;
  int size() const { return static_cast<int>(columns.size()); }
  std::vector<std::string> names() const;
  std::uint64_t hash() const;
  /// Column indices with the given source.
  std::vector<int> indices_of(const std::string& source) const;
  std::string to_json() const;
};

/// Tabular samples: one row per (step, location) pair.
struct FeatureMatrix {
  Eigen::MatrixXd X;
  std::vector<int> steps;      // per row
  std::vector<int> locations;  // per row, index into land_locations()
  std::shared_ptr<const FeatureCatalog> catalog;
  int rows() const { return static_cast<int>(X.rows()); }
};

/// Channels x n_lat x n_lon, row-major within a channel.
struct FeatureStack {
  int channels = 0;
  int n_lat = 0;
  int n_lon = 0;
  std::vector<double> values;
  double at(int c, int i, int j) const { return values[(static_cast<size_t>(c) * n_lat + i) * n_lon + j]; }
};

/// Preprocessing fitted on the training split: SST PCA, per-feature min-max scaling,
/// nearest-neighbour fill patterns. Assembles the three paradigms' feature layouts.
class FeaturePipeline {
 public:
  FeaturePipeline() = default;
  /// fit_end > 0 restricts fitting to training steps before it.
  FeaturePipeline(FeatureConfig cfg, const SplitView& train, int fit_end = 0);

  /// Catalog the config yields on a dataset, without fitting anything.
  static FeatureCatalog catalog_for(const FeatureConfig& cfg, const Dataset& ds);

  bool fitted() const { return fitted_; }
  const FeatureConfig& config() const { return cfg_; }
  const FeatureCatalog& catalog() const { return *catalog_; }
  std::shared_ptr<const FeatureCatalog> catalog_ptr() const { return catalog_; }
  const NormalizationState& normalization() const { return norm_; }
  const std::optional<PcaModel>& pca() const { return pca_; }

  /// Steps of a view usable as samples (enough history).
  std::vector<int> usable(std::span<const int> steps) const;

  /// Raw (unnormalized) feature vector for one (step, land location).
  void raw_row(const Dataset& ds, int t, int loc, std::span<double> out) const;

  /// One matrix per land location (spatial independence).
  std::vector<FeatureMatrix> assemble_independent(const Dataset& ds, std::span<const int> steps) const;
  /// One pooled matrix, rows ordered step-major then location (conditional independence).
  FeatureMatrix assemble_pooled(const Dataset& ds, std::span<const int> steps) const;
  /// Per-step channel stack over the whole grid (spatial dependence).
  FeatureStack assemble_stack(const Dataset& ds, int t) const;

  /// Serialize / restore fitted state (catalog, normalization, PCA).
  std::string to_json() const;
  static FeaturePipeline from_json(const std::string& text);

 private:
  void build_catalog(const Dataset& ds);
  void fill_row(const Dataset& ds, int t, int cell, const std::vector<double>& sst_scores,
                std::span<double> out) const;
  std::vector<double> sst_scores(const Dataset& ds, int t) const;
  void require_fitted() const;

  FeatureConfig cfg_;
  bool fitted_ = false;
  std::shared_ptr<const FeatureCatalog> catalog_;
  NormalizationState norm_;
  std::optional<PcaModel> pca_;
  int n_members_ = 0;
  int n_covariates_ = 0;
};

/// Number of columns the catalog would hold for K members and P covariates.
int feature_count(const FeatureConfig& cfg, int n_members, int n_covariates);

}  // namespace ssf
