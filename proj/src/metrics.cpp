#include "ssf/eval.hpp"
#include "ssf/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace ssf::eval {

using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_aligned(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("metric inputs differ in shape: " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
  if (a.rows() == 0) throw std::invalid_argument("metric over zero steps");
}

}  // namespace

const char* const kStandardErrorCaveat =
    "Standard errors treat locations as independent samples. Nearby cells are correlated, so the "
    "reported SE understates the real uncertainty.";

Aggregates aggregate(std::span<const double> v) {
  Aggregates a;
  std::vector<double> ok;
  for (double x : v) {
    if (std::isnan(x))
      ++a.undefined;
    else
      ok.push_back(x);
  }
  a.count = static_cast<int>(ok.size());
  if (ok.empty()) {
    a.mean = a.median = a.se = a.p90 = kNaN;
    return a;
  }
  a.mean = mean(ok);
  a.median = median(ok);
  a.se = ok.size() > 1 ? stdev(ok) / std::sqrt(static_cast<double>(ok.size())) : 0.0;
  a.p90 = percentile_r7(ok, 0.9);
  return a;
}

std::vector<double> r2_detrended(const Eigen::MatrixXd& y, const Eigen::MatrixXd& yhat, R2Convention conv) {
  check_aligned(y, yhat);
  std::vector<double> out(y.cols());
  for (Eigen::Index l = 0; l < y.cols(); ++l) {
    const double centre = conv == R2Convention::truth_mean ? y.col(l).mean() : yhat.col(l).mean();
    const double den = (y.col(l).array() - centre).square().sum();
    const double num = (y.col(l) - yhat.col(l)).squaredNorm();
    out[l] = den > 0.0 ? 1.0 - num / den : kNaN;
  }
  return out;
}

std::vector<double> r2_per_location(const Eigen::MatrixXd& y, const Eigen::MatrixXd& yhat, const Climatology& truth_clim,
                                    const Climatology& pred_clim, std::span<const int> months, R2Convention conv) {
  check_aligned(y, yhat);
  return r2_detrended(detrend(y, truth_clim, months), detrend(yhat, pred_clim, months), conv);
}

std::vector<double> mse_per_location(const Eigen::MatrixXd& y, const Eigen::MatrixXd& yhat) {
  check_aligned(y, yhat);
  std::vector<double> out(y.cols());
  for (Eigen::Index l = 0; l < y.cols(); ++l) out[l] = (y.col(l) - yhat.col(l)).squaredNorm() / y.rows();
  return out;
}

std::vector<double> pinball_per_location(const Eigen::MatrixXd& y, const Eigen::MatrixXd& z, double alpha) {
  check_aligned(y, z);
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("quantile level must lie in (0, 1)");
  std::vector<double> out(y.cols());
  for (Eigen::Index l = 0; l < y.cols(); ++l) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const double r = y(i, l) - z(i, l);
      s += r >= 0 ? alpha * r : (alpha - 1.0) * r;
    }
    out[l] = s / y.rows();
  }
  return out;
}

std::vector<double> accuracy_per_location(const Eigen::MatrixXd& labels, const Eigen::MatrixXd& predicted) {
  check_aligned(labels, predicted);
  std::vector<double> out(labels.cols());
  for (Eigen::Index l = 0; l < labels.cols(); ++l) {
    int hit = 0;
    for (Eigen::Index i = 0; i < labels.rows(); ++i) hit += labels(i, l) == predicted(i, l);
    out[l] = static_cast<double>(hit) / labels.rows();
  }
  return out;
}

namespace {

json aggregates_json(const Aggregates& a) {
  auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  return {{"mean", num(a.mean)}, {"median", num(a.median)}, {"se", num(a.se)},
          {"p90", num(a.p90)},   {"count", a.count},        {"undefined", a.undefined}};
}

}  // namespace

const MetricGrid& EvalReport::metric(const std::string& name) const {
  for (const auto& m : metrics)
    if (m.name == name) return m;
  throw std::out_of_range("report has no metric " + name);
}

std::string EvalReport::to_json() const {
  json ms = json::object();
  for (const auto& m : metrics) {
    json grid = json::array();
    for (double v : m.per_location) grid.push_back(std::isnan(v) ? json(nullptr) : json(v));
    ms[m.name] = {{"aggregates", aggregates_json(m.agg)}, {"per_location", grid}};
  }
  json doc = {{"model_id", model_id},     {"family", family}, {"task", task},
              {"split", split},           {"variant", variant}, {"catalog_hash", catalog_hash},
              {"seed", seed},             {"notes", notes},   {"metrics", ms},
              {"footer", kStandardErrorCaveat}};
  if (task == "quantile") doc["alpha"] = alpha;
  return doc.dump(1);
}

std::vector<std::pair<std::string, Aggregates>> region_metrics(const EvalReport& report, std::span<const int> locations) {
  if (locations.empty()) throw std::invalid_argument("empty region");
  std::vector<std::pair<std::string, Aggregates>> out;
  for (const auto& m : report.metrics) {
    std::vector<double> sub;
    for (int l : locations) {
      if (l < 0 || l >= static_cast<int>(m.per_location.size()))
        throw std::out_of_range("region location " + std::to_string(l) + " is not a land location");
      sub.push_back(m.per_location[l]);
    }
    out.emplace_back(m.name, aggregate(sub));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Heatmaps

std::string heatmap_csv(std::span<const double> per_location, const LandMask& mask) {
  if (static_cast<int>(per_location.size()) != mask.n_locations())
    throw std::invalid_argument("heatmap needs one value per land location");
  const GridSpec& g = mask.grid();
  std::ostringstream os;
  for (int i = 0; i < g.n_lat; ++i) {
    for (int j = 0; j < g.n_lon; ++j) {
      if (j) os << ',';
      const int loc = mask.location_of(g.cell_index(i, j));
      if (loc < 0 || std::isnan(per_location[loc]))
        os << "NA";
      else
        os << format_double(per_location[loc]);
    }
    os << '\n';
  }
  return os.str();
}

std::vector<double> read_heatmap_csv(const std::string& text, const LandMask& mask) {
  const GridSpec& g = mask.grid();
  std::vector<double> out(mask.n_locations(), kNaN);
  std::istringstream in(text);
  std::string line;
  int i = 0;
  for (; std::getline(in, line); ++i) {
    if (i >= g.n_lat) throw std::runtime_error("heatmap has more rows than the grid");
    std::istringstream ls(line);
    std::string cell;
    int j = 0;
    for (; std::getline(ls, cell, ','); ++j) {
      if (j >= g.n_lon) throw std::runtime_error("heatmap row " + std::to_string(i) + " is too long");
      const int loc = mask.location_of(g.cell_index(i, j));
      if (cell == "NA") continue;
      if (loc < 0) throw std::runtime_error("heatmap has a value at a sea cell");
      out[loc] = std::stod(cell);
    }
    if (j != g.n_lon) throw std::runtime_error("heatmap row " + std::to_string(i) + " is too short");
  }
  if (i != g.n_lat) throw std::runtime_error("heatmap has too few rows");
  return out;
}

std::string heatmap_pgm(std::span<const double> per_location, const LandMask& mask, double lo, double hi) {
  const GridSpec& g = mask.grid();
  std::string out = "P5\n" + std::to_string(g.n_lon) + " " + std::to_string(g.n_lat) + "\n255\n";
  for (int i = 0; i < g.n_lat; ++i)
    for (int j = 0; j < g.n_lon; ++j) {
      const int loc = mask.location_of(g.cell_index(i, j));
      unsigned char px = 0;
      if (loc >= 0 && !std::isnan(per_location[loc])) {
        const double f = hi > lo ? std::clamp((per_location[loc] - lo) / (hi - lo), 0.0, 1.0) : 0.5;
        px = static_cast<unsigned char>(1 + std::lround(f * 254.0));
      }
      out.push_back(static_cast<char>(px));
    }
  return out;
}

void export_heatmap(std::span<const double> per_location, const LandMask& mask, const std::filesystem::path& csv_path,
                    bool with_pgm) {
  write_text_file(csv_path, heatmap_csv(per_location, mask));
  if (!with_pgm) return;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double v : per_location)
    if (!std::isnan(v)) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (!std::isfinite(lo)) lo = hi = 0.0;
  auto pgm = csv_path;
  pgm.replace_extension(".pgm");
  write_text_file(pgm, heatmap_pgm(per_location, mask, lo, hi));
}

}  // namespace ssf::eval
