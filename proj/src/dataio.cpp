#include "ssf/dataio.hpp"

#include "ssf/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <set>
#include <sstream>

namespace ssf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string month_file(const YearMonth& ym) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02d.csv", ym.year, ym.month);
  return buf;
}

std::string grid_to_text(const SpatialField& f) {
  const auto& g = f.grid();
  std::string out;
  out.reserve(static_cast<size_t>(g.size()) * 24);
  for (int i = 0; i < g.n_lat; ++i) {
    for (int j = 0; j < g.n_lon; ++j) {
      const int c = i * g.n_lon + j;
      if (j) out += ',';
      out += f.is_missing(c) ? std::string("NA") : format_double(f.value(c));
    }
    out += '\n';
  }
  return out;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_number(const std::string& tok, const fs::path& path) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size())
    throw DataIoError("bad numeric token '" + tok + "' in " + path.string());
  return v;
}

/// Reads rows x cols of values with NA tokens.
void read_table(const fs::path& path, int rows, int cols, std::vector<double>& values,
                std::vector<bool>& missing) {
  if (!fs::exists(path)) throw DataIoError("missing data file " + path.string());
  std::istringstream in(read_text_file(path));
  values.assign(static_cast<size_t>(rows) * cols, 0.0);
  missing.assign(static_cast<size_t>(rows) * cols, false);
  std::string line;
  int r = 0;
  while (r < rows && std::getline(in, line)) {
    auto toks = split_line(line);
    if (static_cast<int>(toks.size()) != cols)
      throw TruncatedFileError(path.string() + ": row " + std::to_string(r) + " has " +
                               std::to_string(toks.size()) + " values, expected " + std::to_string(cols));
    for (int c = 0; c < cols; ++c) {
      const size_t k = static_cast<size_t>(r) * cols + c;
      if (toks[c] == "NA")
        missing[k] = true;
      else
        values[k] = parse_number(toks[c], path);
    }
    ++r;
  }
  if (r < rows)
    throw TruncatedFileError(path.string() + ": " + std::to_string(r) + " rows, expected " +
                             std::to_string(rows));
}

SpatialField read_grid(const fs::path& path, const GridSpec& g) {
  std::vector<double> v;
  std::vector<bool> m;
  read_table(path, g.n_lat, g.n_lon, v, m);
  return SpatialField(g, std::move(v), std::move(m));
}

const char* kind_name(TargetKind k) { return k == TargetKind::precipitation ? "precipitation" : "temperature"; }

}  // namespace

void save_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  const auto& g = ds.grid();
  const auto& time = ds.time();
  json vars = json::array();
  vars.push_back({{"name", ds.target_name()},
                  {"units", ds.target_units()},
                  {"role", "target"},
                  {"kind", kind_name(ds.target_kind())}});
  for (int k = 0; k < ds.n_members(); ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "member_%02d", k + 1);
    vars.push_back({{"name", name}, {"units", ds.target_units()}, {"role", "ensemble-member"}, {"member", k}});
  }
  for (const auto& cov : ds.covariates())
    vars.push_back({{"name", cov.name}, {"units", cov.units}, {"role", "covariate"}});
  if (ds.sst()) vars.push_back({{"name", "sst"}, {"units", "degC"}, {"role", "sst"}, {"points", ds.sst()->cols()}});

  json manifest = {
      {"format_version", kFormatVersion},
      {"grid",
       {{"n_lat", g.n_lat}, {"n_lon", g.n_lon}, {"lat_origin", g.lat_origin}, {"lon_origin", g.lon_origin},
        {"step", g.step}}},
      {"time", {{"start_year", time.start().year}, {"start_month", time.start().month}, {"length", time.size()}}},
      {"splits", {{"train_end", time.train_end()}, {"val_end", time.val_end()}}},
      {"lead_days", ds.lead_days()},
      {"variables", vars},
  };
  if (ds.generator_seed()) manifest["generator"] = {{"seed", *ds.generator_seed()}};
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");

  std::string mask;
  for (int i = 0; i < g.n_lat; ++i) {
    for (int j = 0; j < g.n_lon; ++j) {
      if (j) mask += ',';
      mask += ds.mask().is_land(i * g.n_lon + j) ? '1' : '0';
    }
    mask += '\n';
  }
  write_text_file(dir / "land_mask.csv", mask);

  for (int t = 0; t < ds.n_steps(); ++t) {
    const auto file = month_file(time.at(t));
    write_text_file(dir / ds.target_name() / file, grid_to_text(ds.target(t)));
    for (int k = 0; k < ds.n_members(); ++k)
      write_text_file(dir / vars[1 + k]["name"].get<std::string>() / file, grid_to_text(ds.ensemble(t).member(k)));
    for (const auto& cov : ds.covariates()) write_text_file(dir / cov.name / file, grid_to_text(cov.fields[t]));
    if (ds.sst()) {
      std::string row;
      for (int j = 0; j < ds.sst()->cols(); ++j) {
        if (j) row += ',';
        row += format_double((*ds.sst())(t, j));
      }
      write_text_file(dir / "sst" / file, row + "\n");
    }
  }
}

Dataset load_dataset(const fs::path& dir) {
  const auto mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw DataIoError("no manifest.json in " + dir.string());
  json m;
  try {
    m = json::parse(read_text_file(mpath));
  } catch (const json::parse_error& e) {
    throw TruncatedFileError("manifest unreadable: " + std::string(e.what()));
  }
  if (!m.contains("format_version") || m["format_version"].get<int>() != kFormatVersion)
    throw FormatVersionError("dataset format version " +
                             (m.contains("format_version") ? m["format_version"].dump() : std::string("<none>")) +
                             ", expected " + std::to_string(kFormatVersion));

  DatasetParts p;
  try {
    const auto& jg = m.at("grid");
    p.grid = GridSpec(jg.at("n_lat"), jg.at("n_lon"), jg.at("lat_origin"), jg.at("lon_origin"), jg.at("step"));
    p.start = {m.at("time").at("start_year"), m.at("time").at("start_month")};
    p.train_end = m.at("splits").at("train_end");
    p.val_end = m.at("splits").at("val_end");
    p.lead_days = m.value("lead_days", 14);
    if (m.contains("generator")) p.generator_seed = m["generator"].at("seed").get<unsigned long long>();
  } catch (const json::exception& e) {
    throw TruncatedFileError("manifest missing fields: " + std::string(e.what()));
  }
  const int length = m.at("time").at("length");

  std::set<std::string> names;
  int n_targets = 0;
  std::string target_name;
  std::vector<std::pair<int, std::string>> members;
  std::vector<json> covs;
  int sst_points = -1;
  for (const auto& v : m.at("variables")) {
    const std::string name = v.at("name");
    if (!names.insert(name).second) throw CatalogError("duplicate variable name '" + name + "'");
    const std::string role = v.at("role");
    if (role == "target") {
      ++n_targets;
      target_name = name;
      p.target_name = name;
      p.target_units = v.value("units", "");
      p.target_kind = v.value("kind", "precipitation") == "temperature" ? TargetKind::temperature
                                                                          : TargetKind::precipitation;
    } else if (role == "ensemble-member") {
      members.emplace_back(v.at("member").get<int>(), name);
    } else if (role == "covariate") {
      covs.push_back(v);
    } else if (role == "sst") {
      sst_points = v.at("points");
    } else {
      throw CatalogError("unknown variable role '" + role + "'");
    }
  }
  if (n_targets != 1) throw CatalogError("catalog must contain exactly one target, found " + std::to_string(n_targets));
  if (members.empty()) throw CatalogError("catalog has no ensemble members");
  std::sort(members.begin(), members.end());
  for (size_t k = 0; k < members.size(); ++k)
    if (members[k].first != static_cast<int>(k)) throw CatalogError("ensemble member indices not contiguous");

  {
    std::vector<double> v;
    std::vector<bool> miss;
    read_table(dir / "land_mask.csv", p.grid.n_lat, p.grid.n_lon, v, miss);
    p.land.resize(v.size());
    for (size_t i = 0; i < v.size(); ++i) p.land[i] = !miss[i] && v[i] != 0.0;
  }

  TimeIndex time(p.start, length, p.train_end, p.val_end);
  p.covariates.reserve(covs.size());
  for (const auto& c : covs) p.covariates.push_back({c.at("name"), c.value("units", ""), {}});
  if (sst_points > 0) p.sst = Eigen::MatrixXd(length, sst_points);

  for (int t = 0; t < length; ++t) {
    const auto file = month_file(time.at(t));
    p.target.push_back(read_grid(dir / target_name / file, p.grid));
    std::vector<SpatialField> ms;
    ms.reserve(members.size());
    for (const auto& [k, name] : members) ms.push_back(read_grid(dir / name / file, p.grid));
    p.ensemble.emplace_back(std::move(ms));
    for (auto& cov : p.covariates) cov.fields.push_back(read_grid(dir / cov.name / file, p.grid));
    if (p.sst) {
      std::vector<double> v;
      std::vector<bool> miss;
      read_table(dir / "sst" / file, 1, sst_points, v, miss);
      for (int j = 0; j < sst_points; ++j) (*p.sst)(t, j) = v[j];
    }
  }
  return Dataset(std::move(p));
}

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + name + "'");
}

SplitView::SplitView(const Dataset& ds, Split which) : ds_(&ds), which_(which) {
  const auto& time = ds.time();
  switch (which) {
    case Split::train: begin_ = 0, end_ = time.train_end(); break;
    case Split::val: begin_ = time.train_end(), end_ = time.val_end(); break;
    case Split::test: begin_ = time.val_end(), end_ = time.size(); break;
  }
  if (end_ <= begin_) throw std::invalid_argument(std::string("empty ") + split_name(which) + " partition");
}

std::vector<int> SplitView::steps(int min_history) const {
  std::vector<int> out;
  for (int t = std::max(begin_, min_history); t < end_; ++t) out.push_back(t);
  return out;
}

SplitViews split_dataset(const Dataset& ds) {
  return {SplitView(ds, Split::train), SplitView(ds, Split::val), SplitView(ds, Split::test)};
}

}  // namespace ssf
