#pragma once

#include "ssf/grid.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssf {

inline constexpr int kFormatVersion = 1;

struct DataIoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatVersionError : DataIoError {
  using DataIoError::DataIoError;
};
struct TruncatedFileError : DataIoError {
  using DataIoError::DataIoError;
};
struct CatalogError : DataIoError {
  using DataIoError::DataIoError;
};

/// Dataset directory layout:
///   manifest.json           format version, grid, time range, splits, variable catalog
///   land_mask.csv           1/0 per cell
///   <variable>/<YYYY-MM>.csv  one grid per month, row-major, NA marks missing cells
///   sst/<YYYY-MM>.csv       one line of ocean-point values per month
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

enum class Split { train, val, test };
const char* split_name(Split s);
Split parse_split(const std::string& name);

/// Contiguous chronological slice of a dataset.
class SplitView {
 public:
  SplitView(const Dataset& ds, Split which);

  const Dataset& dataset() const { return *ds_; }
  Split which() const { return which_; }
  int begin() const { return begin_; }
  int end() const { return end_; }
  int size() const { return end_ - begin_; }
  bool contains(int t) const { return t >= begin_ && t < end_; }
  /// Steps in this view with at least `min_history` months before them.
  std::vector<int> steps(int min_history = 0) const;

 private:
  const Dataset* ds_;
  Split which_;
  int begin_;
  int end_;
};

struct SplitViews {
  SplitView train;
  SplitView val;
  SplitView test;
};

SplitViews split_dataset(const Dataset& ds);

struct SynthConfig {
  int n_lat = 16;
  int n_lon = 32;
  double lat_origin = 25.0;
  double lon_origin = 235.0;
  double step = 1.0;
  double land_fraction = 0.6;
  int months = 240;
  int train_end = 168;
  int val_end = 204;
  YearMonth start{1985, 1};
  int members = 10;
  /// Per-member bias amplitude (target units). Empty selects a spread in [-1, 1.5].
  std::vector<double> member_bias;
  /// Base member noise scale; member k noise std is noise_scale * member_noise[k].
  double noise_scale = 1.0;
  /// Per-member noise multipliers. Empty selects 0.15 + 0.2 k.
  std::vector<double> member_noise;
  double seasonal_amplitude = 3.0;
  double anomaly_scale = 1.0;
  double trend_per_year = 0.02;
  double correlation_length = 2.0;
  double drift = 0.0;
  int covariates = 4;
  int sst_points = 120;
  int lead_days = 14;
  TargetKind target_kind = TargetKind::precipitation;
  unsigned long long seed = 7;

  /// Largest lag the generator itself uses (covariate availability).
  int max_lag() const { return 2; }
};

/// Deterministic synthetic dataset with a seasonal truth, persistent anomalies,
/// lagged covariates and SST series, and per-member biased noisy forecasts.
Dataset synth_generate(const SynthConfig& cfg);

/// Member bias and noise actually used for cfg (defaults resolved).
std::vector<double> resolved_member_bias(const SynthConfig& cfg);
std::vector<double> resolved_member_noise(const SynthConfig& cfg);

}  // namespace ssf
