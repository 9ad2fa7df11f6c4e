#include "ssf/preprocess.hpp"
#include "ssf/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <mutex>
#include <stdexcept>

namespace ssf {

using nlohmann::json;

const char* paradigm_name(Paradigm p) {
  switch (p) {
    case Paradigm::independent: return "independent";
    case Paradigm::conditional: return "conditional";
    case Paradigm::spatial: return "spatial";
  }
  return "?";
}

Paradigm parse_paradigm(const std::string& s) {
  if (s == "independent") return Paradigm::independent;
  if (s == "conditional") return Paradigm::conditional;
  if (s == "spatial") return Paradigm::spatial;
  throw std::invalid_argument("unknown paradigm '" + s + "'");
}

const char* ensemble_mode_name(EnsembleMode m) {
  switch (m) {
    case EnsembleMode::full: return "full";
    case EnsembleMode::mean: return "mean";
    case EnsembleMode::sorted: return "sorted";
  }
  return "?";
}

EnsembleMode parse_ensemble_mode(const std::string& s) {
  if (s == "full") return EnsembleMode::full;
  if (s == "mean") return EnsembleMode::mean;
  if (s == "sorted") return EnsembleMode::sorted;
  throw std::invalid_argument("unknown ensemble mode '" + s + "'");
}

const char* location_mode_name(LocationMode m) {
  switch (m) {
    case LocationMode::pe: return "pe";
    case LocationMode::latlon: return "latlon";
    case LocationMode::none: return "none";
  }
  return "?";
}

LocationMode parse_location_mode(const std::string& s) {
  if (s == "pe") return LocationMode::pe;
  if (s == "latlon") return LocationMode::latlon;
  if (s == "none") return LocationMode::none;
  throw std::invalid_argument("unknown location mode '" + s + "'");
}

void FeatureConfig::validate() const {
  if (paradigm == Paradigm::independent && location != LocationMode::none)
    throw std::invalid_argument(std::string("location features (") + location_mode_name(location) +
                                ") are constant per location and not allowed with the independent paradigm");
  if (location == LocationMode::pe && (pe_dim < 2 || pe_dim % 2 != 0))
    throw std::invalid_argument("positional encoding dimension must be even and >= 2");
  if (sst && sst_components < 1) throw std::invalid_argument("sst_components must be >= 1");
  for (int lag : lag_months)
    if (lag < 1 || lag > min_history)
      throw std::invalid_argument("lag " + std::to_string(lag) + " outside [1, min_history]");
  if (min_history < kAvailabilityLag) throw std::invalid_argument("min_history below availability lag");
}

int feature_count(const FeatureConfig& cfg, int n_members, int n_covariates) {
  int n = 0;
  if (cfg.ensemble_members) n += cfg.ensemble == EnsembleMode::mean ? 1 : n_members;
  if (cfg.lags) n += static_cast<int>(cfg.lag_months.size());
  if (cfg.covariates) n += n_covariates;
  if (cfg.sst) n += cfg.sst_components;
  if (cfg.location == LocationMode::pe) n += 2 * cfg.pe_dim;
  if (cfg.location == LocationMode::latlon) n += 2;
  return n;
}

std::vector<std::string> FeatureCatalog::names() const {
  std::vector<std::string> out;
  for (const auto& c : columns) out.push_back(c.name);
  return out;
}

std::uint64_t FeatureCatalog::hash() const {
  std::uint64_t h = fnv1a("catalog");
  for (const auto& c : columns) {
    h = fnv1a(c.name, h);
    h = fnv1a("|", h);
    h = fnv1a(c.source, h);
    h = fnv1a(";", h);
  }
  return h;
}

std::vector<int> FeatureCatalog::indices_of(const std::string& source) const {
  std::vector<int> out;
  for (const auto& c : columns)
    if (c.source == source) out.push_back(c.index);
  return out;
}

std::string FeatureCatalog::to_json() const {
  json cols = json::array();
  for (const auto& c : columns) cols.push_back({{"name", c.name}, {"source", c.source}, {"column", c.index}});
  return json{{"hash", hex64(hash())}, {"columns", cols}}.dump(2);
}

// ---------------------------------------------------------------------------

namespace {

std::string numbered(const char* prefix, int k) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%s%02d", prefix, k);
  return buf;
}

// Nearest-fill sources per missing pattern; patterns repeat (sea cells), so cache them.
class FillerCache {
 public:
  const NearestFiller& get(const SpatialField& f) {
    std::lock_guard lock(mu_);
    for (const auto& p : fillers_)
      if (p->matches(f)) return *p;
    fillers_.push_back(std::make_unique<NearestFiller>(f));
    return *fillers_.back();
  }

 private:
  std::mutex mu_;
  std::vector<std::unique_ptr<NearestFiller>> fillers_;
};

FillerCache& filler_cache() {
  static FillerCache cache;
  return cache;
}

double filled_value(const SpatialField& f, int cell) {
  if (!f.is_missing(cell)) return f.value(cell);
  return f.value(filler_cache().get(f).source_of(cell));
}

}  // namespace

FeaturePipeline::FeaturePipeline(FeatureConfig cfg, const SplitView& train, int fit_end) : cfg_(std::move(cfg)) {
  cfg_.validate();
  if (train.which() != Split::train) throw std::invalid_argument("feature pipeline must be fitted on the train split");
  const Dataset& ds = train.dataset();
  const int end = fit_end > 0 ? std::min(fit_end, train.end()) : train.end();
  n_members_ = ds.n_members();
  n_covariates_ = cfg_.covariates ? static_cast<int>(ds.covariates().size()) : 0;
  if (cfg_.sst) {
    if (!ds.sst()) throw std::invalid_argument("SST features requested but the dataset has no SST series");
    pca_ = pca_fit(ds.sst()->topRows(end), cfg_.sst_components);
  }
  build_catalog(ds);

  std::vector<int> steps;
  for (int t : usable(train.steps()))
    if (t < end) steps.push_back(t);
  if (steps.empty())
    throw std::invalid_argument("train split has no step with " + std::to_string(cfg_.min_history) +
                                " months of history");
  // normalization needs the catalog, so mark fitted before assembling raw rows
  fitted_ = true;
  const auto& locs = ds.mask().land_locations();
  Eigen::MatrixXd raw(steps.size() * locs.size(), catalog_->size());
  std::vector<double> row(catalog_->size());
  Eigen::Index r = 0;
  for (int t : steps) {
    const auto scores = sst_scores(ds, t);
    for (int cell : locs) {
      fill_row(ds, t, cell, scores, row);
      for (int j = 0; j < catalog_->size(); ++j) raw(r, j) = row[j];
      ++r;
    }
  }
  norm_ = fit_normalization(raw, NormMode::minmax);
}

void FeaturePipeline::build_catalog(const Dataset& ds) {
  auto cat = std::make_shared<FeatureCatalog>();
  auto add = [&](std::string name, std::string source) {
    cat->columns.push_back({std::move(name), std::move(source), cat->size()});
  };
  if (cfg_.ensemble_members) {
    switch (cfg_.ensemble) {
      case EnsembleMode::full:
        for (int k = 0; k < n_members_; ++k) add(numbered("member_", k + 1), "ensemble");
        break;
      case EnsembleMode::mean: add("ensemble_mean", "ensemble"); break;
      case EnsembleMode::sorted:
        for (int k = 0; k < n_members_; ++k) add(numbered("member_rank_", k + 1), "ensemble");
        break;
    }
  }
  if (cfg_.lags)
    for (int lag : cfg_.lag_months) add(ds.target_name() + "_lag" + std::to_string(lag), "lag");
  if (cfg_.covariates)
    for (const auto& c : ds.covariates()) add(c.name + "_lag" + std::to_string(kAvailabilityLag), "covariate");
  if (cfg_.sst)
    for (int k = 0; k < cfg_.sst_components; ++k) add(numbered("sst_pc", k + 1), "sst");
  if (cfg_.location == LocationMode::pe) {
    for (int i = 0; i < cfg_.pe_dim; ++i) add(numbered("pe_lon_", i), "location");
    for (int i = 0; i < cfg_.pe_dim; ++i) add(numbered("pe_lat_", i), "location");
  } else if (cfg_.location == LocationMode::latlon) {
    add("lon", "location");
    add("lat", "location");
  }
  catalog_ = std::move(cat);
}

FeatureCatalog FeaturePipeline::catalog_for(const FeatureConfig& cfg, const Dataset& ds) {
  FeaturePipeline p;
  p.cfg_ = cfg;
  p.cfg_.validate();
  p.n_members_ = ds.n_members();
  p.n_covariates_ = cfg.covariates ? static_cast<int>(ds.covariates().size()) : 0;
  p.build_catalog(ds);
  return *p.catalog_;
}

void FeaturePipeline::require_fitted() const {
  if (!fitted_) throw std::logic_error("feature pipeline used before fitting its normalization");
}

std::vector<int> FeaturePipeline::usable(std::span<const int> steps) const {
  std::vector<int> out;
  for (int t : steps)
    if (t >= cfg_.min_history) out.push_back(t);
  return out;
}

std::vector<double> FeaturePipeline::sst_scores(const Dataset& ds, int t) const {
  if (!cfg_.sst) return {};
  const Eigen::VectorXd s = pca_transform(*pca_, Eigen::RowVectorXd(ds.sst()->row(t - kAvailabilityLag)));
  return {s.data(), s.data() + s.size()};
}

void FeaturePipeline::fill_row(const Dataset& ds, int t, int cell, const std::vector<double>& scores,
                               std::span<double> out) const {
  size_t j = 0;
  if (cfg_.ensemble_members) {
    const auto& ens = ds.ensemble(t);
    const int K = ens.size();
    if (K != n_members_) throw std::invalid_argument("ensemble size differs from the fitted catalog");
    switch (cfg_.ensemble) {
      case EnsembleMode::full:
        for (int k = 0; k < K; ++k) out[j++] = filled_value(ens.member(k), cell);
        break;
      case EnsembleMode::mean: {
        double s = 0.0;
        for (int k = 0; k < K; ++k) s += filled_value(ens.member(k), cell);
        out[j++] = s / K;
        break;
      }
      case EnsembleMode::sorted: {
        const size_t first = j;
        for (int k = 0; k < K; ++k) out[j++] = filled_value(ens.member(k), cell);
        std::sort(out.begin() + first, out.begin() + j);
        break;
      }
    }
  }
  if (cfg_.lags)
    for (int lag : cfg_.lag_months) out[j++] = filled_value(ds.target(t - lag), cell);
  if (cfg_.covariates)
    for (const auto& c : ds.covariates()) out[j++] = filled_value(c.fields.at(t - kAvailabilityLag), cell);
  for (double s : scores) out[j++] = s;
  if (cfg_.location != LocationMode::none) {
    const auto [i, jj] = ds.grid().cell_coords(cell);
    const double lat = ds.grid().lat(i), lon = ds.grid().lon(jj);
    if (cfg_.location == LocationMode::pe) {
      for (double v : location_encoding(lat, lon, cfg_.pe_dim)) out[j++] = v;
    } else {
      out[j++] = lon;
      out[j++] = lat;
    }
  }
  if (j != out.size()) throw std::logic_error("feature row width mismatch");
}

void FeaturePipeline::raw_row(const Dataset& ds, int t, int loc, std::span<double> out) const {
  require_fitted();
  if (t < cfg_.min_history) throw std::invalid_argument("step " + std::to_string(t) + " lacks feature history");
  fill_row(ds, t, ds.mask().land_locations().at(loc), sst_scores(ds, t), out);
}

FeatureMatrix FeaturePipeline::assemble_pooled(const Dataset& ds, std::span<const int> steps) const {
  require_fitted();
  const auto use = usable(steps);
  const auto& locs = ds.mask().land_locations();
  FeatureMatrix fm;
  fm.catalog = catalog_;
  fm.X.resize(use.size() * locs.size(), catalog_->size());
  std::vector<double> row(catalog_->size());
  Eigen::Index r = 0;
  for (int t : use) {
    const auto scores = sst_scores(ds, t);
    for (size_t l = 0; l < locs.size(); ++l) {
      fill_row(ds, t, locs[l], scores, row);
      for (int j = 0; j < catalog_->size(); ++j) fm.X(r, j) = norm_.apply(j, row[j]);
      fm.steps.push_back(t);
      fm.locations.push_back(static_cast<int>(l));
      ++r;
    }
  }
  return fm;
}

std::vector<FeatureMatrix> FeaturePipeline::assemble_independent(const Dataset& ds,
                                                                 std::span<const int> steps) const {
  if (cfg_.location != LocationMode::none)
    throw std::invalid_argument("independent paradigm takes no location features");
  const FeatureMatrix pooled = assemble_pooled(ds, steps);
  const int L = ds.mask().n_locations();
  const Eigen::Index n_steps = L ? pooled.X.rows() / L : 0;
  std::vector<FeatureMatrix> out(L);
  for (int l = 0; l < L; ++l) {
    auto& fm = out[l];
    fm.catalog = catalog_;
    fm.X.resize(n_steps, catalog_->size());
    for (Eigen::Index i = 0; i < n_steps; ++i) {
      fm.X.row(i) = pooled.X.row(i * L + l);
      fm.steps.push_back(pooled.steps[i * L + l]);
      fm.locations.push_back(l);
    }
  }
  return out;
}

FeatureStack FeaturePipeline::assemble_stack(const Dataset& ds, int t) const {
  require_fitted();
  if (t < cfg_.min_history) throw std::invalid_argument("step " + std::to_string(t) + " lacks feature history");
  const auto& g = ds.grid();
  FeatureStack st;
  st.channels = catalog_->size();
  st.n_lat = g.n_lat;
  st.n_lon = g.n_lon;
  st.values.resize(static_cast<size_t>(st.channels) * g.size());
  const auto scores = sst_scores(ds, t);
  std::vector<double> row(st.channels);
  for (int cell = 0; cell < g.size(); ++cell) {
    fill_row(ds, t, cell, scores, row);
    for (int c = 0; c < st.channels; ++c) st.values[static_cast<size_t>(c) * g.size() + cell] = norm_.apply(c, row[c]);
  }
  return st;
}

// ---------------------------------------------------------------------------

std::string FeaturePipeline::to_json() const {
  require_fitted();
  json cols = json::array();
  for (const auto& c : catalog_->columns) cols.push_back({{"name", c.name}, {"source", c.source}});
  json norm = json::array();
  for (int j = 0; j < norm_.size(); ++j)
    norm.push_back({{"mode", norm_.mode[j] == NormMode::minmax ? "minmax" : "standardize"},
                    {"a", norm_.a[j]},
                    {"b", norm_.b[j]},
                    {"constant", static_cast<bool>(norm_.constant[j])}});
  json j = {{"paradigm", paradigm_name(cfg_.paradigm)},
            {"ensemble", ensemble_mode_name(cfg_.ensemble)},
            {"location", location_mode_name(cfg_.location)},
            {"ensemble_members", cfg_.ensemble_members},
            {"lags", cfg_.lags},
            {"covariates", cfg_.covariates},
            {"sst", cfg_.sst},
            {"lag_months", cfg_.lag_months},
            {"pe_dim", cfg_.pe_dim},
            {"sst_components", cfg_.sst_components},
            {"min_history", cfg_.min_history},
            {"n_members", n_members_},
            {"n_covariates", n_covariates_},
            {"catalog", cols},
            {"catalog_hash", hex64(catalog_->hash())},
            {"normalization", norm}};
  if (pca_) {
    const auto& p = *pca_;
    j["pca"] = {{"mean", std::vector<double>(p.mean.data(), p.mean.data() + p.mean.size())},
                {"rows", p.components.rows()},
                {"cols", p.components.cols()},
                {"components", [&] {
                   std::vector<double> v;
                   for (Eigen::Index r = 0; r < p.components.rows(); ++r)
                     for (Eigen::Index c = 0; c < p.components.cols(); ++c) v.push_back(p.components(r, c));
                   return v;
                 }()}};
  }
  return j.dump();
}

FeaturePipeline FeaturePipeline::from_json(const std::string& text) {
  const json j = json::parse(text);
  FeaturePipeline p;
  p.cfg_.paradigm = parse_paradigm(j.at("paradigm"));
  p.cfg_.ensemble = parse_ensemble_mode(j.at("ensemble"));
  p.cfg_.location = parse_location_mode(j.at("location"));
  p.cfg_.ensemble_members = j.at("ensemble_members");
  p.cfg_.lags = j.at("lags");
  p.cfg_.covariates = j.at("covariates");
  p.cfg_.sst = j.at("sst");
  p.cfg_.lag_months = j.at("lag_months").get<std::vector<int>>();
  p.cfg_.pe_dim = j.at("pe_dim");
  p.cfg_.sst_components = j.at("sst_components");
  p.cfg_.min_history = j.at("min_history");
  p.n_members_ = j.at("n_members");
  p.n_covariates_ = j.at("n_covariates");
  auto cat = std::make_shared<FeatureCatalog>();
  for (const auto& c : j.at("catalog")) cat->columns.push_back({c.at("name"), c.at("source"), cat->size()});
  p.catalog_ = cat;
  for (const auto& n : j.at("normalization")) {
    p.norm_.mode.push_back(n.at("mode") == "minmax" ? NormMode::minmax : NormMode::standardize);
    p.norm_.a.push_back(n.at("a"));
    p.norm_.b.push_back(n.at("b"));
    p.norm_.constant.push_back(n.at("constant").get<bool>());
  }
  if (j.contains("pca")) {
    const auto& jp = j["pca"];
    PcaModel m;
    const auto mean = jp.at("mean").get<std::vector<double>>();
    m.mean = Eigen::Map<const Eigen::RowVectorXd>(mean.data(), mean.size());
    const int rows = jp.at("rows"), cols = jp.at("cols");
    const auto comp = jp.at("components").get<std::vector<double>>();
    m.components.resize(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) m.components(r, c) = comp[static_cast<size_t>(r) * cols + c];
    p.pca_ = std::move(m);
  }
  p.fitted_ = true;
  return p;
}

}  // namespace ssf
