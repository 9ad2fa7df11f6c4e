#include "ssf/grid.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace ssf {

GridSpec::GridSpec(int n_lat_, int n_lon_, double lat_origin_, double lon_origin_, double step_)
    : n_lat(n_lat_), n_lon(n_lon_), lat_origin(lat_origin_), lon_origin(lon_origin_), step(step_) {
  if (n_lat < 1 || n_lon < 1) throw std::invalid_argument("grid needs at least one cell per axis");
  if (!(step > 0.0)) throw std::invalid_argument("grid step must be positive");
}

int GridSpec::cell_index(int lat_idx, int lon_idx) const {
  if (lat_idx < 0 || lat_idx >= n_lat)
    throw std::out_of_range("lat index " + std::to_string(lat_idx) + " outside [0, " +
                            std::to_string(n_lat) + ")");
  if (lon_idx < 0 || lon_idx >= n_lon)
    throw std::out_of_range("lon index " + std::to_string(lon_idx) + " outside [0, " +
                            std::to_string(n_lon) + ")");
  return lat_idx * n_lon + lon_idx;
}

std::pair<int, int> GridSpec::cell_coords(int cell) const {
  if (cell < 0 || cell >= size()) throw std::out_of_range("cell id " + std::to_string(cell));
  return {cell / n_lon, cell % n_lon};
}

int cell_index(const GridSpec& grid, int lat_idx, int lon_idx) {
  return grid.cell_index(lat_idx, lon_idx);
}

LandMask::LandMask(GridSpec grid, std::vector<bool> is_land)
    : grid_(grid), land_(std::move(is_land)), location_of_(grid.size(), -1) {
  if (static_cast<int>(land_.size()) != grid_.size())
    throw std::invalid_argument("land mask size does not match grid");
  for (int c = 0; c < grid_.size(); ++c) {
    if (land_[c]) {
      location_of_[c] = static_cast<int>(locations_.size());
      locations_.push_back(c);
    }
  }
  if (locations_.empty()) throw std::invalid_argument("land mask has no land cells");
}

const std::vector<int>& land_locations(const LandMask& mask) { return mask.land_locations(); }

TimeIndex::TimeIndex(YearMonth start, int length, int train_end, int val_end)
    : train_end_(train_end), val_end_(val_end) {
  if (start.month < 1 || start.month > 12) throw std::invalid_argument("start month outside 1..12");
  if (length < 1) throw std::invalid_argument("time index must be nonempty");
  if (!(0 < train_end && train_end < val_end && val_end <= length))
    throw std::invalid_argument("split boundaries must satisfy 0 < train_end < val_end <= length (got " +
                                std::to_string(train_end) + ", " + std::to_string(val_end) + ", " +
                                std::to_string(length) + ")");
  entries_.reserve(length);
  YearMonth ym = start;
  for (int t = 0; t < length; ++t) {
    entries_.push_back(ym);
    if (++ym.month > 12) {
      ym.month = 1;
      ++ym.year;
    }
  }
}

SpatialField::SpatialField(GridSpec grid, std::vector<double> values)
    : grid_(grid), values_(std::move(values)) {
  if (static_cast<int>(values_.size()) != grid_.size())
    throw std::invalid_argument("field size does not match grid");
  for (double v : values_)
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite value in non-missing cell");
}

SpatialField::SpatialField(GridSpec grid, std::vector<double> values, std::vector<bool> missing)
    : grid_(grid), values_(std::move(values)), missing_(std::move(missing)) {
  if (static_cast<int>(values_.size()) != grid_.size() ||
      static_cast<int>(missing_.size()) != grid_.size())
    throw std::invalid_argument("field size does not match grid");
  bool any = false;
  for (int c = 0; c < grid_.size(); ++c) {
    if (missing_[c]) {
      any = true;
      values_[c] = 0.0;
    } else if (!std::isfinite(values_[c])) {
      throw std::invalid_argument("non-finite value in non-missing cell " + std::to_string(c));
    }
  }
  if (!any) missing_.clear();
}

bool SpatialField::has_missing() const { return !missing_.empty(); }

bool SpatialField::operator==(const SpatialField& o) const {
  return grid_ == o.grid_ && values_ == o.values_ && missing_ == o.missing_;
}

EnsembleField::EnsembleField(std::vector<SpatialField> members) : members_(std::move(members)) {
  if (members_.empty()) throw std::invalid_argument("ensemble needs at least one member");
  for (const auto& m : members_)
    if (!(m.grid() == members_.front().grid()))
      throw std::invalid_argument("ensemble members must share one grid");
}

Dataset::Dataset(DatasetParts p)
    : mask_(p.grid, std::move(p.land)),
      time_(p.start, static_cast<int>(p.target.size()), p.train_end, p.val_end),
      lead_days_(p.lead_days),
      target_name_(std::move(p.target_name)),
      target_units_(std::move(p.target_units)),
      target_kind_(p.target_kind),
      target_(std::move(p.target)),
      ensemble_(std::move(p.ensemble)),
      covariates_(std::move(p.covariates)),
      sst_(std::move(p.sst)),
      seed_(p.generator_seed) {
  const int T = time_.size();
  if (static_cast<int>(ensemble_.size()) != T)
    throw std::invalid_argument("ensemble has " + std::to_string(ensemble_.size()) +
                                " steps, expected " + std::to_string(T));
  const int K = ensemble_.front().size();
  for (int t = 0; t < T; ++t) {
    if (!(target_[t].grid() == grid())) throw std::invalid_argument("target grid mismatch");
    if (ensemble_[t].size() != K) throw std::invalid_argument("ensemble size varies over time");
    if (!(ensemble_[t].member(0).grid() == grid())) throw std::invalid_argument("ensemble grid mismatch");
    for (int cell : mask_.land_locations())
      if (target_[t].is_missing(cell))
        throw std::invalid_argument("target missing on land cell " + std::to_string(cell) + " at step " +
                                    std::to_string(t));
  }
  for (const auto& cov : covariates_) {
    if (static_cast<int>(cov.fields.size()) != T)
      throw std::invalid_argument("covariate '" + cov.name + "' has wrong number of steps");
  }
  if (sst_ && sst_->rows() != T) throw std::invalid_argument("sst matrix must have one row per step");
}

namespace instrument {

namespace {
thread_local ScopedStepProbe* active_probe = nullptr;
}

ScopedStepProbe::ScopedStepProbe() : prev_(active_probe) { active_probe = this; }
ScopedStepProbe::~ScopedStepProbe() { active_probe = prev_; }

void note_step(int t) {
  for (auto* p = active_probe; p; p = p->prev_) {
    p->max_step_ = std::max(p->max_step_, t);
    ++p->reads_;
  }
}

}  // namespace instrument

const SpatialField& Dataset::target(int t) const {
  instrument::note_step(t);
  return target_.at(t);
}

const EnsembleField& Dataset::ensemble(int t) const {
  instrument::note_step(t);
  return ensemble_.at(t);
}

Eigen::MatrixXd Dataset::target_matrix(const std::vector<int>& steps) const {
  const auto& locs = mask_.land_locations();
  Eigen::MatrixXd out(steps.size(), locs.size());
  for (size_t i = 0; i < steps.size(); ++i) {
    const auto& f = target(steps[i]);
    for (size_t l = 0; l < locs.size(); ++l) out(i, l) = f.value(locs[l]);
  }
  return out;
}

}  // namespace ssf
