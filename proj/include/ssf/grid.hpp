#pragma once

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace ssf {

/// Rectangular lat-lon grid. Cells are addressed row-major: lat outer, lon inner.
struct GridSpec {
  int n_lat = 1;
  int n_lon = 1;
  double lat_origin = 0.0;
  double lon_origin = 0.0;
  double step = 1.0;

  GridSpec() = default;
  GridSpec(int n_lat, int n_lon, double lat_origin, double lon_origin, double step);

  int size() const { return n_lat * n_lon; }
  int cell_index(int lat_idx, int lon_idx) const;
  std::pair<int, int> cell_coords(int cell) const;
  double lat(int lat_idx) const { return lat_origin + lat_idx * step; }
  double lon(int lon_idx) const { return lon_origin + lon_idx * step; }

  bool operator==(const GridSpec&) const = default;
};

/// Which cells are land. Land cells are the valid forecast locations.
class LandMask {
 public:
  LandMask(GridSpec grid, std::vector<bool> is_land);

  const GridSpec& grid() const { return grid_; }
  bool is_land(int cell) const { return land_[cell]; }
  /// Flat ids of land cells in row-major order; length L.
  const std::vector<int>& land_locations() const { return locations_; }
  int n_locations() const { return static_cast<int>(locations_.size()); }
  /// Position of a cell in land_locations(), or -1 for sea.
  int location_of(int cell) const { return location_of_[cell]; }

  bool operator==(const LandMask& o) const { return grid_ == o.grid_ && land_ == o.land_; }

 private:
  GridSpec grid_;
  std::vector<bool> land_;
  std::vector<int> locations_;
  std::vector<int> location_of_;
};

struct YearMonth {
  int year = 1985;
  int month = 1;  // 1..12
  bool operator==(const YearMonth&) const = default;
};

/// Consecutive monthly time axis with chronological split boundaries.
class TimeIndex {
 public:
  TimeIndex(YearMonth start, int length, int train_end, int val_end);

  int size() const { return static_cast<int>(entries_.size()); }
  const YearMonth& at(int t) const { return entries_.at(t); }
  /// Calendar month (1..12) of step t.
  int month_of(int t) const { return entries_.at(t).month; }
  int train_end() const { return train_end_; }
  int val_end() const { return val_end_; }
  YearMonth start() const { return entries_.front(); }

 private:
  std::vector<YearMonth> entries_;
  int train_end_;
  int val_end_;
};

/// A real value per grid cell with an explicit missing flag.
class SpatialField {
 public:
  SpatialField() = default;
  /// All cells present.
  SpatialField(GridSpec grid, std::vector<double> values);
  SpatialField(GridSpec grid, std::vector<double> values, std::vector<bool> missing);

  const GridSpec& grid() const { return grid_; }
  double value(int cell) const { return values_[cell]; }
  bool is_missing(int cell) const { return !missing_.empty() && missing_[cell]; }
  bool has_missing() const;
  const std::vector<double>& values() const { return values_; }
  const std::vector<bool>& missing_flags() const { return missing_; }

  bool operator==(const SpatialField& o) const;

 private:
  GridSpec grid_;
  std::vector<double> values_;
  std::vector<bool> missing_;  // empty means nothing missing
};

/// K member forecasts in initialization order. The order is never permuted.
class EnsembleField {
 public:
  explicit EnsembleField(std::vector<SpatialField> members);

  int size() const { return static_cast<int>(members_.size()); }
  const SpatialField& member(int k) const { return members_.at(k); }
  const std::vector<SpatialField>& members() const { return members_; }

 private:
  std::vector<SpatialField> members_;
};

enum class TargetKind { precipitation, temperature };

struct Covariate {
  std::string name;
  std::string units;
  std::vector<SpatialField> fields;  // one per time step
};

struct DatasetParts {
  GridSpec grid;
  std::vector<bool> land;
  YearMonth start;
  int train_end = 0;
  int val_end = 0;
  int lead_days = 14;
  std::string target_name = "precip";
  std::string target_units = "mm";
  TargetKind target_kind = TargetKind::precipitation;
  std::vector<SpatialField> target;
  std::vector<EnsembleField> ensemble;
  std::vector<Covariate> covariates;
  std::optional<Eigen::MatrixXd> sst;  // months x ocean points
  std::optional<unsigned long long> generator_seed;
};

/// Time-indexed target, ensemble and covariate fields over one grid.
class Dataset {
 public:
  explicit Dataset(DatasetParts parts);

  const GridSpec& grid() const { return mask_.grid(); }
  const LandMask& mask() const { return mask_; }
  const TimeIndex& time() const { return time_; }
  int n_steps() const { return time_.size(); }
  int n_members() const { return ensemble_.front().size(); }
  int lead_days() const { return lead_days_; }
  const std::string& target_name() const { return target_name_; }
  const std::string& target_units() const { return target_units_; }
  TargetKind target_kind() const { return target_kind_; }
  const SpatialField& target(int t) const;
  const EnsembleField& ensemble(int t) const;
  const std::vector<Covariate>& covariates() const { return covariates_; }
  const std::optional<Eigen::MatrixXd>& sst() const { return sst_; }
  const std::optional<unsigned long long>& generator_seed() const { return seed_; }

  /// Target at every land location for the given steps (steps x L).
  Eigen::MatrixXd target_matrix(const std::vector<int>& steps) const;

 private:
  LandMask mask_;
  TimeIndex time_;
  int lead_days_;
  std::string target_name_;
  std::string target_units_;
  TargetKind target_kind_;
  std::vector<SpatialField> target_;
  std::vector<EnsembleField> ensemble_;
  std::vector<Covariate> covariates_;
  std::optional<Eigen::MatrixXd> sst_;
  std::optional<unsigned long long> seed_;
};

namespace instrument {

/// Records the largest time step whose target or ensemble was read on this thread
/// while in scope. Used to check that training code never touches held-out steps.
class ScopedStepProbe {
 public:
  ScopedStepProbe();
  ~ScopedStepProbe();
  ScopedStepProbe(const ScopedStepProbe&) = delete;
  ScopedStepProbe& operator=(const ScopedStepProbe&) = delete;
  int max_step() const { return max_step_; }
  long reads() const { return reads_; }

 private:
  friend void note_step(int t);
  ScopedStepProbe* prev_;
  int max_step_ = -1;
  long reads_ = 0;
};

void note_step(int t);

}  // namespace instrument

/// Flat location id of cell (lat_idx, lon_idx).
int cell_index(const GridSpec& grid, int lat_idx, int lon_idx);
const std::vector<int>& land_locations(const LandMask& mask);

}  // namespace ssf
