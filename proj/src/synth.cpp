#include "ssf/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace ssf {

namespace {

/// White noise smoothed by a truncated Gaussian kernel, rescaled to unit variance per cell.
class SmoothNoise {
 public:
  SmoothNoise(const GridSpec& g, double corr_len) : g_(g) {
    radius_ = std::max(1, static_cast<int>(std::ceil(2.0 * corr_len)));
    const double s = std::max(corr_len, 1e-6);
    for (int di = -radius_; di <= radius_; ++di)
      for (int dj = -radius_; dj <= radius_; ++dj)
        kernel_.push_back(std::exp(-0.5 * (di * di + dj * dj) / (s * s)));
    norm_.resize(g.size());
    for (int i = 0; i < g.n_lat; ++i)
      for (int j = 0; j < g.n_lon; ++j) {
        double ss = 0.0;
        visit(i, j, [&](int, double w) { ss += w * w; });
        norm_[i * g.n_lon + j] = 1.0 / std::sqrt(ss);
      }
  }

  std::vector<double> draw(std::mt19937_64& rng) const {
    std::normal_distribution<double> normal;
    std::vector<double> white(g_.size());
    for (auto& w : white) w = normal(rng);
    std::vector<double> out(g_.size(), 0.0);
    for (int i = 0; i < g_.n_lat; ++i)
      for (int j = 0; j < g_.n_lon; ++j) {
        double acc = 0.0;
        visit(i, j, [&](int c, double w) { acc += w * white[c]; });
        out[i * g_.n_lon + j] = acc * norm_[i * g_.n_lon + j];
      }
    return out;
  }

 private:
  template <class F>
  void visit(int i, int j, F&& f) const {
    int k = 0;
    for (int di = -radius_; di <= radius_; ++di)
      for (int dj = -radius_; dj <= radius_; ++dj, ++k) {
        const int a = i + di, b = j + dj;
        if (a < 0 || a >= g_.n_lat || b < 0 || b >= g_.n_lon) continue;
        f(a * g_.n_lon + b, kernel_[k]);
      }
  }

  GridSpec g_;
  int radius_;
  std::vector<double> kernel_;
  std::vector<double> norm_;
};

std::vector<std::string> covariate_names(TargetKind kind, int n) {
  std::vector<std::string> base = {"rhum", "pres", "hgt",
                                   kind == TargetKind::precipitation ? "tmp2m" : "precip"};
  std::vector<std::string> out;
  for (int p = 0; p < n; ++p) out.push_back(p < 4 ? base[p] : "cov_" + std::to_string(p + 1));
  return out;
}

}  // namespace

std::vector<double> resolved_member_bias(const SynthConfig& cfg) {
  if (!cfg.member_bias.empty()) {
    if (static_cast<int>(cfg.member_bias.size()) != cfg.members)
      throw std::invalid_argument("member_bias length must equal members");
    return cfg.member_bias;
  }
  std::vector<double> b(cfg.members);
  for (int k = 0; k < cfg.members; ++k)
    b[k] = cfg.members == 1 ? 0.25 : -1.0 + 2.5 * k / (cfg.members - 1);
  return b;
}

std::vector<double> resolved_member_noise(const SynthConfig& cfg) {
  if (!cfg.member_noise.empty()) {
    if (static_cast<int>(cfg.member_noise.size()) != cfg.members)
      throw std::invalid_argument("member_noise length must equal members");
    return cfg.member_noise;
  }
  std::vector<double> s(cfg.members);
  for (int k = 0; k < cfg.members; ++k) s[k] = 0.15 + 0.2 * k;
  return s;
}

Dataset synth_generate(const SynthConfig& cfg) {
  if (cfg.months < cfg.max_lag() + 1)
    throw std::invalid_argument("synthetic dataset needs at least " + std::to_string(cfg.max_lag() + 1) +
                                " months, got " + std::to_string(cfg.months));
  if (cfg.members < 1) throw std::invalid_argument("need at least one ensemble member");
  const GridSpec grid(cfg.n_lat, cfg.n_lon, cfg.lat_origin, cfg.lon_origin, cfg.step);
  const int N = grid.size();
  const int T = cfg.months;
  const int K = cfg.members;
  const auto bias = resolved_member_bias(cfg);
  const auto noise = resolved_member_noise(cfg);
  constexpr double two_pi = 2.0 * std::numbers::pi;

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal;
  const SmoothNoise broad(grid, 3.0);
  const SmoothNoise local(grid, cfg.correlation_length);

  // land: threshold a broad random field plus a west-east gradient
  std::vector<double> landscape = broad.draw(rng);
  for (int c = 0; c < N; ++c) landscape[c] += 0.8 * (static_cast<double>(c % grid.n_lon) / grid.n_lon - 0.5);
  std::vector<double> sorted = landscape;
  std::sort(sorted.begin(), sorted.end());
  const int n_land = std::clamp(static_cast<int>(std::lround(cfg.land_fraction * N)), 1, N);
  const double cut = sorted[N - n_land];
  std::vector<bool> land(N);
  for (int c = 0; c < N; ++c) land[c] = landscape[c] >= cut;

  const auto base_f = broad.draw(rng);
  const auto amp_f = broad.draw(rng);
  const auto phase_f = broad.draw(rng);
  const auto mode1 = broad.draw(rng);
  const auto mode2 = broad.draw(rng);
  const auto bias_pattern = broad.draw(rng);

  std::vector<double> base(N), amp(N), phase(N), bias_shape(N);
  for (int c = 0; c < N; ++c) {
    const double lat_frac = static_cast<double>(c / grid.n_lon) / std::max(1, grid.n_lat - 1);
    base[c] = cfg.target_kind == TargetKind::precipitation ? 5.0 + 1.5 * base_f[c]
                                                           : 20.0 - 10.0 * lat_frac + 2.0 * base_f[c];
    amp[c] = 1.0 + 0.3 * amp_f[c];
    phase[c] = 1.5 * phase_f[c];
    bias_shape[c] = 1.0 + 0.5 * bias_pattern[c];
  }

  // two persistent climate modes and a persistent local anomaly
  std::vector<double> e1(T), e2(T);
  {
    const double p1 = 0.85, p2 = 0.6;
    double a = normal(rng), b = normal(rng);
    for (int t = 0; t < T; ++t) {
      a = p1 * a + std::sqrt(1 - p1 * p1) * normal(rng);
      b = p2 * b + std::sqrt(1 - p2 * p2) * normal(rng);
      e1[t] = a;
      e2[t] = b;
    }
  }
  std::vector<std::vector<double>> truth(T, std::vector<double>(N));
  std::vector<std::vector<double>> local_anom(T, std::vector<double>(N));
  {
    std::vector<double> r = local.draw(rng);
    for (int t = 0; t < T; ++t) {
      const auto fresh = local.draw(rng);
      for (int c = 0; c < N; ++c) {
        r[c] = 0.5 * r[c] + std::sqrt(0.75) * fresh[c];
        local_anom[t][c] = r[c];
      }
    }
  }
  YearMonth ym = cfg.start;
  std::vector<int> month(T);
  for (int t = 0; t < T; ++t) {
    month[t] = ym.month;
    if (++ym.month > 12) ym.month = 1;
  }
  for (int t = 0; t < T; ++t) {
    for (int c = 0; c < N; ++c) {
      const double seasonal =
          cfg.seasonal_amplitude * amp[c] * std::cos(two_pi * (month[t] - 1 - phase[c]) / 12.0);
      const double anomaly =
          cfg.anomaly_scale * (0.6 * mode1[c] * e1[t] + 0.4 * mode2[c] * e2[t] + 0.5 * local_anom[t][c]);
      truth[t][c] = base[c] + seasonal + cfg.trend_per_year * (t / 12.0) + anomaly;
    }
  }

  DatasetParts p;
  p.grid = grid;
  p.land = land;
  p.start = cfg.start;
  p.train_end = cfg.train_end;
  p.val_end = cfg.val_end;
  p.lead_days = cfg.lead_days;
  p.target_kind = cfg.target_kind;
  p.target_name = cfg.target_kind == TargetKind::precipitation ? "precip" : "tmp2m";
  p.target_units = cfg.target_kind == TargetKind::precipitation ? "mm" : "degC";
  p.generator_seed = cfg.seed;

  std::vector<bool> sea(N);
  for (int c = 0; c < N; ++c) sea[c] = !land[c];
  for (int t = 0; t < T; ++t) p.target.emplace_back(grid, truth[t], sea);

  for (int t = 0; t < T; ++t) {
    std::vector<SpatialField> members;
    members.reserve(K);
    const double shift = t >= cfg.val_end ? cfg.drift : 0.0;
    for (int k = 0; k < K; ++k) {
      const auto n = local.draw(rng);
      std::vector<double> v(N);
      for (int c = 0; c < N; ++c)
        v[c] = truth[t][c] + bias[k] * bias_shape[c] + cfg.noise_scale * noise[k] * n[c] + shift;
      members.emplace_back(grid, std::move(v));
    }
    p.ensemble.emplace_back(std::move(members));
  }

  const auto names = covariate_names(cfg.target_kind, cfg.covariates);
  const double offsets[4] = {60.0, 1000.0, 5500.0, 15.0};
  const double scales[4] = {8.0, 6.0, 40.0, 2.0};
  for (int q = 0; q < cfg.covariates; ++q) {
    Covariate cov{names[q], q == 0 ? "%" : q == 1 ? "hPa" : q == 2 ? "m" : "", {}};
    const double w1 = std::cos(0.7 * (q + 1)), w2 = std::sin(0.7 * (q + 1));
    const auto loading = broad.draw(rng);
    for (int t = 0; t < T; ++t) {
      const auto n = local.draw(rng);
      std::vector<double> v(N);
      for (int c = 0; c < N; ++c) {
        const double signal = (1.0 + 0.3 * loading[c]) * (w1 * e1[t] + w2 * e2[t]) +
                              (q % 2 == 0 ? 0.5 * local_anom[t][c] : 0.0);
        v[c] = offsets[q % 4] + scales[q % 4] * (signal + 0.5 * n[c]);
      }
      cov.fields.emplace_back(grid, std::move(v), sea);
    }
    p.covariates.push_back(std::move(cov));
  }

  if (cfg.sst_points > 0) {
    const int S = cfg.sst_points;
    std::vector<double> q1(S), q2(S), ph(S);
    for (int j = 0; j < S; ++j) {
      q1[j] = normal(rng);
      q2[j] = normal(rng);
      ph[j] = two_pi * static_cast<double>(j) / S;
    }
    Eigen::MatrixXd sst(T, S);
    for (int t = 0; t < T; ++t)
      for (int j = 0; j < S; ++j)
        sst(t, j) = 20.0 + 2.0 * std::sin(two_pi * (month[t] - 1) / 12.0 + ph[j]) + q1[j] * e1[t] +
                    0.7 * q2[j] * e2[t] + 0.3 * normal(rng);
    p.sst = std::move(sst);
  }
  return Dataset(std::move(p));
}

}  // namespace ssf
