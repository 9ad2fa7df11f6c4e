// Acceptance suite: one PASS/FAIL line per criterion.
// Usage: ssf_acceptance [criterion numbers...]   (no arguments runs all ten)

#include "ssf/baselines.hpp"
#include "ssf/convnet.hpp"
#include "ssf/dataio.hpp"
#include "ssf/eval.hpp"
#include "ssf/forest.hpp"
#include "ssf/models.hpp"
#include "ssf/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

namespace fs = std::filesystem;
using namespace ssf;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

double mean_metric(const eval::EvalReport& r, const std::string& name) { return r.metric(name).agg.mean; }

// ---------------------------------------------------------------------------
// 1. QRF against a brute-force oracle in exact integer arithmetic

int oracle_route(const forest::Tree& t, const std::vector<double>& x) {
  int node = 0;
  while (t.feature[node] >= 0) node = x[t.feature[node]] <= t.threshold[node] ? t.left[node] : t.right[node];
  return node;
}

/// Smallest y whose cumulative co-residence weight reaches alpha = a10 / 10.
/// Weight of row i is sum_t c_it / |leaf_t|; scaled by the product of leaf sizes it is an integer.
double oracle_quantile(const forest::Forest& f, const std::vector<double>& x, int a10) {
  const int n = static_cast<int>(f.targets.size());
  std::vector<int> leaves;
  long long prod = 1;
  for (const auto& t : f.trees) {
    leaves.push_back(oracle_route(t, x));
    prod *= t.leaf_count[leaves.back()];
  }
  std::vector<long long> w(n, 0);
  for (size_t k = 0; k < f.trees.size(); ++k) {
    const auto& t = f.trees[k];
    const int leaf = leaves[k];
    const long long share = prod / t.leaf_count[leaf];
    for (int j = 0; j < t.leaf_count[leaf]; ++j) w[t.leaf_rows[t.leaf_begin[leaf] + j]] += share;
  }
  std::vector<int> idx;
  for (int i = 0; i < n; ++i)
    if (w[i] > 0) idx.push_back(i);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) { return f.targets[a] < f.targets[b]; });
  const long long total = static_cast<long long>(f.trees.size()) * prod;
  long long cum = 0;
  for (int i : idx) {
    cum += w[i];
    if (10 * cum >= a10 * total) return f.targets[i];
  }
  return f.targets[idx.back()];
}

Outcome criterion1() {
  std::mt19937_64 rng(101);
  long checked = 0, mismatched = 0;
  for (int d = 0; d < 50; ++d) {
    const int n = std::uniform_int_distribution<int>(2, 200)(rng);
    const int p = std::uniform_int_distribution<int>(1, 5)(rng);
    const int trees = std::uniform_int_distribution<int>(1, 3)(rng);
    const bool coarse = d % 3 == 0;  // coarse grids give tied features and targets
    std::normal_distribution<double> nd;
    Eigen::MatrixXd X(n, p);
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < p; ++j) X(i, j) = coarse ? std::round(3 * nd(rng)) : nd(rng);
      y(i) = X(i, 0) + 0.5 * nd(rng);
      if (coarse) y(i) = std::round(y(i));
    }
    forest::ForestParams fp;
    fp.n_trees = trees;
    fp.seed = 1000 + d;
    fp.store_samples = true;
    fp.max_features = d % 2 ? 0 : std::max(1, p / 2);
    fp.min_samples_split = 2 + d % 4;
    const auto f = forest::rf_fit(X, y, fp, forest::ForestTask::regression);
    std::vector<std::vector<double>> queries;
    for (int i = 0; i < n; ++i) queries.emplace_back(X.row(i).data(), X.row(i).data() + p);
    for (int q = 0; q < 20; ++q) {
      std::vector<double> x(p);
      for (double& v : x) v = coarse ? std::round(3 * nd(rng)) : 1.5 * nd(rng);
      queries.push_back(x);
    }
    for (const auto& x : queries)
      for (int a10 : {1, 5, 9}) {
        const double got = forest::qrf_predict(f, x, a10 / 10.0);
        ++checked;
        if (got != oracle_quantile(f, x, a10)) ++mismatched;
      }
  }
  return {mismatched == 0, std::to_string(checked) + " predictions, " + std::to_string(mismatched) + " mismatches"};
}

// ---------------------------------------------------------------------------
// 2. U-Net gradients against central differences

Outcome criterion2() {
  convnet::UNetConfig cfg;
  cfg.in_channels = 3;
  cfg.base = 4;
  cfg.depth = 2;
  cfg.activation = convnet::OutputActivation::sigmoid;
  convnet::UNet net(cfg, 5);

  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud(0.05, 0.95);
  convnet::SpatialData data;
  FeatureStack input{3, 8, 8, std::vector<double>(3 * 64)};
  for (double& v : input.values) v = nd(rng);
  data.inputs.push_back(input);
  std::vector<double> t(64);
  for (double& v : t) v = ud(rng);
  data.targets.push_back(t);
  data.mask.assign(64, 1);
  for (int c = 0; c < 64; c += 5) data.mask[c] = 0;
  const std::vector<int> items = {0};

  std::vector<double> grad;
  convnet::loss_and_grad(net, data, items, convnet::LossKind::squared, 0.5, &grad);
  const std::vector<double> p0 = net.flat_params();
  const double eps = 1e-4;
  double worst = 0.0;
  int bad = 0;
  for (size_t i = 0; i < p0.size(); ++i) {
    std::vector<double> p = p0;
    p[i] = p0[i] + eps;
    net.set_flat_params(p);
    const double up = convnet::loss_and_grad(net, data, items, convnet::LossKind::squared, 0.5, nullptr);
    p[i] = p0[i] - eps;
    net.set_flat_params(p);
    const double down = convnet::loss_and_grad(net, data, items, convnet::LossKind::squared, 0.5, nullptr);
    const double numeric = (up - down) / (2 * eps);
    const double rel = std::abs(numeric - grad[i]) / std::max({std::abs(numeric), std::abs(grad[i]), 1e-8});
    worst = std::max(worst, rel);
    bad += rel >= 1e-4;
  }
  net.set_flat_params(p0);
  return {bad == 0, std::to_string(p0.size()) + " parameters, max relative error " + fmt(worst, 3) + ", " +
                        std::to_string(bad) + " over 1e-4"};
}

// ---------------------------------------------------------------------------
// 3. Sign test

Outcome criterion3() {
  double worst = 0.0;
  for (int n = 0; n <= 30; ++n) {
    std::vector<unsigned long long> c(n + 1, 1);
    for (int k = 1; k <= n; ++k) c[k] = c[k - 1] * (n - k + 1) / k;
    for (int w = 0; w <= n; ++w) {
      unsigned long long tail = 0;
      for (int k = w; k <= n; ++k) tail += c[k];
      const double exact = std::ldexp(static_cast<double>(tail), -n);
      const double got = eval::binomial_upper_tail(n, w);
      worst = std::max(worst, std::abs(got - exact) / exact);
    }
  }
  const std::string th = fmt(eval::bonferroni_threshold(3274), 3);
  const bool ok = worst < 1e-12 && th == "1.53e-05";
  return {ok, "max relative deviation " + fmt(worst, 3) + ", Bonferroni(3274) = " + th};
}

// ---------------------------------------------------------------------------
// 4. Metric identities

Outcome criterion4() {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  const int T = 36, L = 5;
  std::vector<int> months(T);
  for (int t = 0; t < T; ++t) months[t] = t % 12 + 1;
  Eigen::MatrixXd clim_v(12, L), y(T, L);
  for (int m = 0; m < 12; ++m)
    for (int l = 0; l < L; ++l) clim_v(m, l) = 4 + nd(rng);
  for (int t = 0; t < T; ++t)
    for (int l = 0; l < L; ++l) y(t, l) = clim_v(months[t] - 1, l) + nd(rng);
  const Climatology clim(clim_v, ClimatologySource::observed);

  bool ok = true;
  std::string why;
  auto expect = [&](bool c, const std::string& what) {
    if (!c && ok) why = what;
    ok = ok && c;
  };
  for (double v : eval::r2_per_location(y, y, clim, clim, months)) expect(v == 1.0, "R2 of perfect prediction");
  for (double v : eval::mse_per_location(y, y)) expect(v == 0.0, "MSE of perfect prediction");
  for (double a : {0.1, 0.5, 0.9})
    for (double v : eval::pinball_per_location(y, y, a)) expect(v == 0.0, "pinball of perfect prediction");
  Eigen::MatrixXd labels(T, L);
  for (int t = 0; t < T; ++t)
    for (int l = 0; l < L; ++l) labels(t, l) = (t + l) % 3 - 1;
  for (double v : eval::accuracy_per_location(labels, labels)) expect(v == 1.0, "accuracy of perfect prediction");

  const Eigen::MatrixXd y_det = detrend(y, clim, months);
  Eigen::MatrixXd const_pred(T, L);
  for (int l = 0; l < L; ++l) const_pred.col(l).setConstant(y_det.col(l).mean());
  for (double v : eval::r2_detrended(y_det, const_pred)) expect(std::abs(v) < 1e-12, "R2 of constant mean predictor");
  const Eigen::MatrixXd back = add_climatology(y_det, clim, months);
  expect((back - y).cwiseAbs().maxCoeff() < 1e-12, "detrend round trip");
  return {ok, ok ? "all identities hold" : "failed: " + why};
}

// ---------------------------------------------------------------------------
// 5. Feature count

Outcome criterion5() {
  SynthConfig sc;
  sc.n_lat = 4;
  sc.n_lon = 8;
  sc.months = 48;
  sc.train_end = 30;
  sc.val_end = 40;
  sc.members = 24;
  sc.covariates = 4;
  const Dataset ds = synth_generate(sc);
  FeatureConfig fc;
  const int from_catalog = FeaturePipeline::catalog_for(fc, ds).size();
  const int counted = feature_count(fc, 24, 4);
  return {from_catalog == 65 && counted == 65,
          "catalog " + std::to_string(from_catalog) + ", formula " + std::to_string(counted)};
}

// ---------------------------------------------------------------------------
// 6. Stacking against its own bases

Outcome criterion6() {
  const Dataset ds = synth_generate(SynthConfig{});
  ModelConfig cfg = default_config(ModelFamily::stack);
  auto stack = make_model(cfg);
  stack->fit(SplitView(ds, Split::train));
  const double stacked = mean_metric(eval::evaluate_model(*stack, ds, Split::test), "mse");
  double best = std::numeric_limits<double>::infinity();
  std::string best_id, all;
  for (const Model* b : stack->components()) {
    const double m = mean_metric(eval::evaluate_model(*b, ds, Split::test), "mse");
    all += std::string(" ") + family_name(b->config().family) + "=" + fmt(m, 4);
    if (m < best) {
      best = m;
      best_id = family_name(b->config().family);
    }
  }
  return {stacked <= 1.02 * best,
          "stack " + fmt(stacked, 4) + " vs 1.02 x " + best_id + " " + fmt(1.02 * best, 4) + " (bases:" + all + ")"};
}

// ---------------------------------------------------------------------------
// 7. Full ensemble against mean-only and sorted

Outcome criterion7() {
  const Dataset ds = synth_generate(SynthConfig{});
  const ModelConfig base = default_config(ModelFamily::rf);
  double mse[3];
  const eval::Variant vs[3] = {eval::Variant::full, eval::Variant::mean, eval::Variant::sorted};
  for (int i = 0; i < 3; ++i) mse[i] = mean_metric(eval::ablation_run(vs[i], base, ds).test, "mse");
  return {mse[0] < mse[2] && mse[0] < mse[1],
          "RF test MSE full " + fmt(mse[0], 4) + ", mean " + fmt(mse[1], 4) + ", sorted " + fmt(mse[2], 4)};
}

// ---------------------------------------------------------------------------
// 8. Drift

Outcome criterion8() {
  SynthConfig sc;
  sc.drift = 1.0;
  const Dataset ds = synth_generate(sc);
  auto r2 = [&](const Model& m, Split s) { return mean_metric(eval::evaluate_model(m, ds, s), "r2"); };
  auto ens = make_model(default_config(ModelFamily::ensmean));
  ens->fit(SplitView(ds, Split::train));
  auto rf = make_model(default_config(ModelFamily::rf));
  rf->fit(SplitView(ds, Split::train));
  const double ens_val = r2(*ens, Split::val), ens_test = r2(*ens, Split::test);
  const double rf_val = r2(*rf, Split::val), rf_test = r2(*rf, Split::test);

  const std::vector<int> steps = SplitView(ds, Split::test).steps(ens->config().features.min_history);
  const Eigen::MatrixXd raw = ens->predict(ds, steps).values;
  const Eigen::MatrixXd truth = ds.target_matrix(steps);
  const auto months = months_of(ds, steps);
  const Eigen::MatrixXd fixed = baselines::oracle_debias(raw, truth, months).predictions;
  const double mse_raw = eval::aggregate(eval::mse_per_location(truth, raw)).mean;
  const double mse_fixed = eval::aggregate(eval::mse_per_location(truth, fixed)).mean;

  const double ens_drop = ens_val - ens_test, rf_drop = rf_val - rf_test;
  const bool ok = ens_test < ens_val && rf_drop < ens_drop && mse_fixed < mse_raw;
  return {ok, "ensmean R2 val " + fmt(ens_val, 4) + " -> test " + fmt(ens_test, 4) + "; rf " + fmt(rf_val, 4) +
                  " -> " + fmt(rf_test, 4) + "; debias MSE " + fmt(mse_raw, 4) + " -> " + fmt(mse_fixed, 4)};
}

// ---------------------------------------------------------------------------
// 9. Quantile monotonicity

Outcome criterion9() {
  SynthConfig sc;
  sc.n_lat = 8;
  sc.n_lon = 16;
  sc.months = 120;
  sc.train_end = 84;
  sc.val_end = 102;
  const Dataset ds = synth_generate(sc);
  const std::vector<int> steps = SplitView(ds, Split::test).steps(24);
  bool ok = true;
  std::string detail;
  for (ModelFamily f : {ModelFamily::hist, ModelFamily::ensmean, ModelFamily::linqr, ModelFamily::qrf,
                        ModelFamily::convnet, ModelFamily::stack}) {
    Eigen::MatrixXd pred[2];
    const double alphas[2] = {0.5, 0.9};
    for (int a = 0; a < 2; ++a) {
      ModelConfig c = default_config(f, TaskSpec{TaskKind::quantile, alphas[a]});
      auto m = make_model(c);
      m->fit(SplitView(ds, Split::train));
      pred[a] = m->predict(ds, steps).values;
    }
    const double frac = (pred[1].array() >= pred[0].array()).cast<double>().mean();
    const bool pass = f == ModelFamily::qrf ? frac == 1.0 : frac >= 0.95;
    ok = ok && pass;
    detail += std::string(detail.empty() ? "" : ", ") + family_name(f) + " " + fmt(100 * frac, 4) + "%";
  }
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 10. CLI reruns

#ifndef SSF_CLI_PATH
#define SSF_CLI_PATH "ssf"
#endif

int sh(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && '" SSF_CLI_PATH "' " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

Outcome criterion10() {
  const fs::path dir = fs::temp_directory_path() / ("ssf_accept_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::vector<std::pair<std::string, std::string>> runs = {
      {"data", "gen-data --n-lat 8 --n-lon 16 --months 96 --train-end 60 --val-end 78 --seed 3 --output-dir data"},
      {"rf", "train --data data --model rf --n-trees 20 --output-dir rf"},
      {"lr", "train --data data --model lr --output-dir lr"},
      {"qrf", "train --data data --model qrf --task quantile --alpha 0.9 --n-trees 10 --output-dir qrf"},
      {"stack", "stack --data data --stack-bases ensmean,lr,rf,convnet --n-trees 10 --epochs 3 --output-dir stack"},
      {"ablate", "ablate --data data --model rf --n-trees 10 --variants full,sorted --output-dir ablate"},
      {"eval", "evaluate --data data --model-dir rf/model --model-dir lr/model --output-dir eval"},
      {"sign", "signtest --data data --model-a rf/model --model-b lr/model --output-dir sign"},
      {"boot", "bootstrap --data data --models lr,ensmean --runs 2 --sample-size 30 --output-dir boot"},
  };
  int identical = 0;
  std::string failed;
  for (const auto& [name, args] : runs) {
    if (sh(dir, args) != 0) {
      failed += " " + name + "(run)";
      continue;
    }
    if (sh(dir, "rerun --manifest " + name + "/run_manifest.json --output-dir " + name + "_again") != 0) {
      failed += " " + name;
      continue;
    }
    ++identical;
  }
  fs::remove_all(dir);
  return {failed.empty(), std::to_string(identical) + "/" + std::to_string(runs.size()) + " commands bit-identical" +
                              (failed.empty() ? "" : "; differing:" + failed)};
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "QRF oracle equivalence", 30, criterion1},
      {2, "convnet gradient check", 60, criterion2},
      {3, "sign-test exactness", 5, criterion3},
      {4, "metric identities", 5, criterion4},
      {5, "feature count", 1, criterion5},
      {6, "stacking dominance", 300, criterion6},
      {7, "full vs mean vs sorted", 300, criterion7},
      {8, "drift robustness", 300, criterion8},
      {9, "quantile monotonicity", 120, criterion9},
      {10, "CLI reproducibility", 600, criterion10},
  };
  std::vector<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.push_back(std::atoi(argv[i]));
  int failures = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), c.id) == wanted.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.budget_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::printf("criterion %2d %s  %s: %s [%.1f s, limit %.0f s%s]\n", c.id, pass ? "PASS" : "FAIL", c.name,
                o.detail.c_str(), secs, c.budget_s, in_time ? "" : ", over time");
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
