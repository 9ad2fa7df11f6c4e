#include "ssf/preprocess.hpp"
#include "ssf/util.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace ssf {

namespace {

const char* kMonthNames[12] = {"Jan", "Feb", "Mar", "Apr", "May", "Jun",
                               "Jul", "Aug", "Sep", "Oct", "Nov", "Dec"};

void check_months(std::span<const int> months, Eigen::Index rows) {
  if (static_cast<Eigen::Index>(months.size()) != rows)
    throw std::invalid_argument("month list length does not match series rows");
  for (int m : months)
    if (m < 1 || m > 12) throw std::invalid_argument("calendar month outside 1..12");
}

}  // namespace

Climatology::Climatology(Eigen::MatrixXd values, ClimatologySource source)
    : values_(std::move(values)), source_(source) {
  if (values_.rows() != 12) throw std::invalid_argument("climatology needs 12 monthly rows");
}

Climatology monthly_climatology(const Eigen::MatrixXd& series, std::span<const int> months,
                                ClimatologySource source) {
  check_months(months, series.rows());
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(12, series.cols());
  std::array<int, 12> count{};
  for (Eigen::Index r = 0; r < series.rows(); ++r) {
    sum.row(months[r] - 1) += series.row(r);
    ++count[months[r] - 1];
  }
  std::string absent;
  for (int m = 0; m < 12; ++m) {
    if (count[m] == 0) {
      absent += absent.empty() ? "" : ", ";
      absent += kMonthNames[m];
    } else {
      sum.row(m) /= count[m];
    }
  }
  if (!absent.empty()) throw std::invalid_argument("no reference samples for month(s): " + absent);
  return Climatology(std::move(sum), source);
}

Climatology model_climatology(const Eigen::MatrixXd& predictions, std::span<const int> months) {
  return monthly_climatology(predictions, months, ClimatologySource::model);
}

Eigen::MatrixXd detrend(const Eigen::MatrixXd& values, const Climatology& clim, std::span<const int> months) {
  check_months(months, values.rows());
  if (values.cols() != clim.n_locations()) throw std::invalid_argument("climatology location count mismatch");
  Eigen::MatrixXd out = values;
  for (Eigen::Index r = 0; r < values.rows(); ++r) out.row(r) -= clim.values().row(months[r] - 1);
  return out;
}

Eigen::MatrixXd add_climatology(const Eigen::MatrixXd& anomalies, const Climatology& clim,
                                std::span<const int> months) {
  check_months(months, anomalies.rows());
  Eigen::MatrixXd out = anomalies;
  for (Eigen::Index r = 0; r < anomalies.rows(); ++r) out.row(r) += clim.values().row(months[r] - 1);
  return out;
}

std::vector<int> months_of(const Dataset& ds, std::span<const int> steps) {
  std::vector<int> out;
  out.reserve(steps.size());
  for (int t : steps) out.push_back(ds.time().month_of(t));
  return out;
}

TercileThresholds::TercileThresholds(Eigen::MatrixXd q33, Eigen::MatrixXd q66)
    : q33_(std::move(q33)), q66_(std::move(q66)) {
  if ((q33_.array() > q66_.array()).any()) throw std::invalid_argument("q33 above q66");
}

int tercile_label(double value, double q33, double q66) {
  if (value < q33) return -1;
  if (value > q66) return 1;
  return 0;
}

int TercileThresholds::label(double value, int month, int loc) const {
  return tercile_label(value, q33(month, loc), q66(month, loc));
}

TercileThresholds tercile_thresholds(const Eigen::MatrixXd& series, std::span<const int> months) {
  check_months(months, series.rows());
  const auto L = series.cols();
  Eigen::MatrixXd q33(12, L), q66(12, L);
  for (int m = 1; m <= 12; ++m) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index r = 0; r < series.rows(); ++r)
      if (months[r] == m) rows.push_back(r);
    if (rows.size() < 3)
      throw std::invalid_argument(std::string("tercile thresholds need >= 3 samples, month ") + kMonthNames[m - 1] +
                                  " has " + std::to_string(rows.size()));
    std::vector<double> v(rows.size());
    for (Eigen::Index l = 0; l < L; ++l) {
      for (size_t i = 0; i < rows.size(); ++i) v[i] = series(rows[i], l);
      std::sort(v.begin(), v.end());
      q33(m - 1, l) = percentile_r7_sorted(v, 0.33);
      q66(m - 1, l) = percentile_r7_sorted(v, 0.66);
    }
  }
  return TercileThresholds(std::move(q33), std::move(q66));
}

// ---------------------------------------------------------------------------

double NormalizationState::apply(int j, double v) const {
  if (constant[j]) return 0.0;
  return mode[j] == NormMode::minmax ? (v - a[j]) / (b[j] - a[j]) : (v - a[j]) / b[j];
}

double NormalizationState::invert(int j, double v) const {
  if (constant[j]) return a[j];
  return mode[j] == NormMode::minmax ? a[j] + v * (b[j] - a[j]) : a[j] + v * b[j];
}

void NormalizationState::apply(Eigen::MatrixXd& X) const {
  if (X.cols() != size()) throw std::invalid_argument("normalization width mismatch");
  for (Eigen::Index j = 0; j < X.cols(); ++j)
    for (Eigen::Index r = 0; r < X.rows(); ++r) X(r, j) = apply(static_cast<int>(j), X(r, j));
}

NormalizationState fit_normalization(const Eigen::MatrixXd& X, const std::vector<NormMode>& modes) {
  if (static_cast<Eigen::Index>(modes.size()) != X.cols())
    throw std::invalid_argument("one normalization mode per column required");
  if (X.rows() == 0) throw std::invalid_argument("cannot fit normalization on zero rows");
  NormalizationState s;
  s.mode = modes;
  s.a.resize(modes.size());
  s.b.resize(modes.size());
  s.constant.resize(modes.size());
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    const auto col = X.col(j);
    if (modes[j] == NormMode::minmax) {
      s.a[j] = col.minCoeff();
      s.b[j] = col.maxCoeff();
      s.constant[j] = !(s.b[j] > s.a[j]);
    } else {
      const double m = col.mean();
      const double var = X.rows() > 1 ? (col.array() - m).square().sum() / (X.rows() - 1) : 0.0;
      s.a[j] = m;
      s.b[j] = std::sqrt(var);
      s.constant[j] = !(s.b[j] > 0.0);
    }
  }
  return s;
}

NormalizationState fit_normalization(const Eigen::MatrixXd& X, NormMode mode) {
  return fit_normalization(X, std::vector<NormMode>(X.cols(), mode));
}

// ---------------------------------------------------------------------------

NearestFiller::NearestFiller(const SpatialField& pattern) : grid_(pattern.grid()) {
  const int N = grid_.size();
  missing_.resize(N);
  source_.resize(N);
  std::vector<int> valid;
  for (int c = 0; c < N; ++c) {
    missing_[c] = pattern.is_missing(c);
    if (!missing_[c]) valid.push_back(c);
  }
  if (valid.empty()) throw std::invalid_argument("cannot fill a field with no valid cells");
  for (int c = 0; c < N; ++c) {
    if (!missing_[c]) {
      source_[c] = c;
      continue;
    }
    const auto [ci, cj] = grid_.cell_coords(c);
    int best = -1;
    long best_d = std::numeric_limits<long>::max();
    for (int v : valid) {  // ascending ids, so strict < keeps the smaller id on ties
      const auto [vi, vj] = grid_.cell_coords(v);
      const long d = static_cast<long>(vi - ci) * (vi - ci) + static_cast<long>(vj - cj) * (vj - cj);
      if (d < best_d) {
        best_d = d;
        best = v;
      }
    }
    source_[c] = best;
  }
}

bool NearestFiller::matches(const SpatialField& field) const {
  if (!(field.grid() == grid_)) return false;
  for (int c = 0; c < grid_.size(); ++c)
    if (field.is_missing(c) != missing_[c]) return false;
  return true;
}

SpatialField NearestFiller::fill(const SpatialField& field) const {
  if (!matches(field)) return NearestFiller(field).fill(field);
  std::vector<double> v(grid_.size());
  for (int c = 0; c < grid_.size(); ++c) v[c] = field.value(source_[c]);
  return SpatialField(grid_, std::move(v));
}

SpatialField nearest_fill(const SpatialField& field, const LandMask& mask) {
  if (!(field.grid() == mask.grid())) throw std::invalid_argument("field and mask grids differ");
  if (!field.has_missing()) return field;
  return NearestFiller(field).fill(field);
}

// ---------------------------------------------------------------------------

std::vector<double> positional_encoding(double coord, int d) {
  if (d < 2 || d % 2 != 0) throw std::invalid_argument("positional encoding dimension must be even and >= 2");
  std::vector<double> pe(d);
  for (int i = 0; i < d / 2; ++i) {
    const double freq = std::pow(10000.0, 2.0 * i / d);
    pe[2 * i] = std::sin(coord / freq);
    pe[2 * i + 1] = std::cos(coord / freq);
  }
  return pe;
}

std::vector<double> location_encoding(double lat, double lon, int d) {
  double wrapped = std::fmod(lon, 360.0);
  if (wrapped < 0) wrapped += 360.0;
  auto out = positional_encoding(wrapped, d);
  const auto lat_pe = positional_encoding(lat, d);
  out.insert(out.end(), lat_pe.begin(), lat_pe.end());
  return out;
}

std::vector<double> lag_features(std::span<const double> history, int t, std::span<const int> lags) {
  std::vector<double> out;
  if (t < 0 || t >= static_cast<int>(history.size())) return out;
  for (int lag : lags)
    if (t - lag < 0) return {};
  out.reserve(lags.size());
  for (int lag : lags) out.push_back(history[t - lag]);
  return out;
}

}  // namespace ssf
