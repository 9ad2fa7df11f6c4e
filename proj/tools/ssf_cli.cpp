// ssf: command-line driver for data generation, training, evaluation and experiments.

#include "ssf/baselines.hpp"
#include "ssf/dataio.hpp"
#include "ssf/eval.hpp"
#include "ssf/models.hpp"
#include "ssf/util.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "1.0.0";

struct Common {
  std::optional<std::string> output_dir;
  std::optional<int> threads;
};

struct ModelFlags {
  std::string data;
  std::string model = "rf";
  std::string task = "regression";
  double alpha = 0.9;
  std::optional<std::string> paradigm, ensemble, location;
  std::optional<bool> lags, covariates, sst;
  std::optional<int> pe_dim, sst_components;
  std::optional<int> n_trees, max_features, min_samples_split;
  std::optional<double> ridge;
  std::optional<int> base, depth, epochs, batch, quantile_epochs, cv_folds;
  std::optional<double> lr, weight_decay, quantile_lr;
  bool grid_search = false;
  std::vector<std::string> stack_bases;
  std::optional<int> hidden;
  std::uint64_t seed = 0;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--output-dir", c.output_dir, "output directory (env SSF_OUTPUT_DIR)")
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app->add_option("--threads", c.threads, "worker threads; 1 is the reproducible mode (env SSF_THREADS)")
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
}

void add_model_flags(CLI::App* app, ModelFlags& f, bool with_model = true) {
  app->add_option("--data", f.data, "dataset directory")->required();
  if (with_model) app->add_option("--model", f.model, "hist|ensmean|lr|linqr|logistic|rf|qrf|convnet|stack");
  app->add_option("--task", f.task, "regression|quantile|tercile");
  app->add_option("--alpha", f.alpha, "quantile level");
  app->add_option("--paradigm", f.paradigm, "independent|conditional|spatial");
  app->add_option("--ensemble", f.ensemble, "full|mean|sorted");
  app->add_option("--location", f.location, "pe|latlon|none");
  app->add_option("--lags", f.lags, "lagged target features (true/false)");
  app->add_option("--covariates", f.covariates, "covariate features (true/false)");
  app->add_option("--sst", f.sst, "SST principal components (true/false)");
  app->add_option("--pe-dim", f.pe_dim);
  app->add_option("--sst-components", f.sst_components);
  app->add_option("--n-trees", f.n_trees);
  app->add_option("--max-features", f.max_features);
  app->add_option("--min-samples-split", f.min_samples_split);
  app->add_option("--ridge", f.ridge);
  app->add_option("--base", f.base, "convnet base channels");
  app->add_option("--depth", f.depth, "convnet depth");
  app->add_option("--epochs", f.epochs);
  app->add_option("--batch", f.batch);
  app->add_option("--lr", f.lr);
  app->add_option("--weight-decay", f.weight_decay);
  app->add_option("--quantile-epochs", f.quantile_epochs);
  app->add_option("--quantile-lr", f.quantile_lr);
  app->add_flag("--grid-search", f.grid_search, "convnet cross-validated grid search");
  app->add_option("--cv-folds", f.cv_folds);
  app->add_option("--stack-bases", f.stack_bases, "base models for stacking")->delimiter(',');
  app->add_option("--hidden", f.hidden, "stacker hidden width");
  app->add_option("--seed", f.seed);
}

int resolved_threads(const Common& c) {
  if (c.threads) return *c.threads;
  if (const char* e = std::getenv("SSF_THREADS")) return std::stoi(e);
  return 1;
}

fs::path resolved_output(const Common& c, const std::string& fallback) {
  if (c.output_dir) return *c.output_dir;
  if (const char* e = std::getenv("SSF_OUTPUT_DIR")) return fs::path(e) / fallback;
  return fs::path("runs") / fallback;
}

ssf::ModelConfig build_config(const ModelFlags& f, int threads) {
  ssf::TaskSpec task{ssf::parse_task(f.task), f.alpha};
  ssf::ModelConfig c = ssf::default_config(ssf::parse_family(f.model), task);
  try {
    if (f.paradigm) c.features.paradigm = ssf::parse_paradigm(*f.paradigm);
    if (f.ensemble) c.features.ensemble = ssf::parse_ensemble_mode(*f.ensemble);
    if (f.location) c.features.location = ssf::parse_location_mode(*f.location);
  } catch (const std::invalid_argument& e) {
    throw ssf::ConfigError(e.what());
  }
  if (f.lags) c.features.lags = *f.lags;
  if (f.covariates) c.features.covariates = *f.covariates;
  if (f.sst) c.features.sst = *f.sst;
  if (f.pe_dim) c.features.pe_dim = *f.pe_dim;
  if (f.sst_components) c.features.sst_components = *f.sst_components;
  if (f.n_trees) c.forest.n_trees = *f.n_trees;
  if (f.max_features) c.forest.max_features = *f.max_features;
  if (f.min_samples_split) c.forest.min_samples_split = *f.min_samples_split;
  if (f.ridge) c.ridge = *f.ridge;
  if (f.base) c.convnet.base = *f.base;
  if (f.depth) c.convnet.depth = *f.depth;
  if (f.epochs) c.convnet.train.epochs = *f.epochs;
  if (f.batch) c.convnet.train.batch = *f.batch;
  if (f.lr) c.convnet.train.lr = *f.lr;
  if (f.weight_decay) c.convnet.train.weight_decay = *f.weight_decay;
  if (f.quantile_epochs) c.convnet.quantile_epochs = *f.quantile_epochs;
  if (f.quantile_lr) c.convnet.quantile_lr = *f.quantile_lr;
  if (f.cv_folds) c.convnet.cv_folds = *f.cv_folds;
  c.convnet.grid_search = f.grid_search;
  if (!f.stack_bases.empty()) {
    c.stack_bases.clear();
    for (const auto& b : f.stack_bases) c.stack_bases.push_back(ssf::parse_family(b));
  }
  if (f.hidden) c.stacker.hidden = *f.hidden;
  c.seed = f.seed;
  c.threads = threads;
  c.validate();
  return c;
}

/// Records how to reproduce an output directory, with hashes of inputs and outputs.
void write_manifest(const fs::path& out, const std::string& command, const std::vector<std::string>& argv, int threads,
                    const std::vector<fs::path>& inputs) {
  json in = json::object();
  for (const auto& p : inputs) in[p.string()] = ssf::hex64(fs::is_directory(p) ? ssf::hash_directory(p) : ssf::hash_file(p));
  json outputs = json::object();
  for (const auto& e : fs::recursive_directory_iterator(out)) {
    if (!e.is_regular_file() || e.path().filename() == "run_manifest.json") continue;
    outputs[fs::relative(e.path(), out).generic_string()] = ssf::hex64(ssf::hash_file(e.path()));
  }
  const json doc = {{"tool", "ssf"},          {"version", kVersion}, {"command", command},
                    {"argv", argv},           {"threads", threads},  {"deterministic", threads == 1},
                    {"inputs", in},           {"outputs", outputs}};
  ssf::write_text_file(out / "run_manifest.json", doc.dump(1));
}

void prepare_output(const fs::path& out) {
  if (fs::exists(out) && !fs::is_directory(out)) throw std::runtime_error("output path is not a directory: " + out.string());
  fs::create_directories(out);
}

json aggregates_json(const ssf::eval::Aggregates& a) {
  return {{"mean", a.mean}, {"median", a.median}, {"se", a.se}, {"p90", a.p90}, {"count", a.count}};
}

void write_report(const fs::path& dir, const std::string& stem, const ssf::eval::EvalReport& r, const ssf::Dataset& ds,
                  bool heatmaps) {
  ssf::write_text_file(dir / (stem + ".json"), r.to_json());
  if (!heatmaps) return;
  for (const auto& m : r.metrics)
    ssf::eval::export_heatmap(m.per_location, ds.mask(), dir / "heatmaps" / (stem + "_" + m.name + ".csv"));
}

/// Per-sample error magnitude for the sign test.
Eigen::MatrixXd sample_errors(const ssf::Model& m, const ssf::Dataset& ds, const std::vector<int>& steps) {
  const ssf::Prediction p = m.predict(ds, steps);
  const auto& cfg = m.config();
  switch (cfg.task.kind) {
    case ssf::TaskKind::regression: return (ds.target_matrix(steps) - p.values).cwiseAbs();
    case ssf::TaskKind::quantile: {
      const Eigen::MatrixXd r = ds.target_matrix(steps) - p.values;
      const double a = cfg.task.alpha;
      return r.unaryExpr([a](double z) { return z >= 0 ? a * z : (a - 1.0) * z; });
    }
    case ssf::TaskKind::tercile: {
      const Eigen::MatrixXd labels = ssf::tercile_labels(ds, steps, ssf::tercile_reference(ds));
      return (labels.array() != p.values.array()).cast<double>().matrix();
    }
  }
  return {};
}

int run(std::vector<std::string> args);

}  // namespace

namespace {

int run(std::vector<std::string> args) {
  CLI::App app{"Subseasonal forecasting experiments on gridded data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  const std::vector<std::string> recorded(args.begin() + 1, args.end());

  // gen-data
  Common gen_common;
  ssf::SynthConfig sc;
  std::string target = "precip";
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen, gen_common);
  gen->add_option("--n-lat", sc.n_lat);
  gen->add_option("--n-lon", sc.n_lon);
  gen->add_option("--land-fraction", sc.land_fraction);
  gen->add_option("--months", sc.months);
  gen->add_option("--train-end", sc.train_end);
  gen->add_option("--val-end", sc.val_end);
  gen->add_option("--members", sc.members);
  gen->add_option("--member-bias", sc.member_bias)->delimiter(',');
  gen->add_option("--member-noise", sc.member_noise)->delimiter(',');
  gen->add_option("--noise-scale", sc.noise_scale);
  gen->add_option("--anomaly-scale", sc.anomaly_scale);
  gen->add_option("--drift", sc.drift);
  gen->add_option("--covariates", sc.covariates);
  gen->add_option("--sst-points", sc.sst_points);
  gen->add_option("--target", target, "precip|tmp2m");
  gen->add_option("--seed", sc.seed);

  // train / stack
  Common train_common, stack_common;
  ModelFlags train_flags, stack_flags;
  auto* train = app.add_subcommand("train", "fit a model on the train split");
  add_common(train, train_common);
  add_model_flags(train, train_flags);
  auto* stk = app.add_subcommand("stack", "half-split stacking of base models, then evaluation");
  add_common(stk, stack_common);
  add_model_flags(stk, stack_flags, false);

  // evaluate
  Common eval_common;
  std::vector<std::string> eval_models;
  std::string eval_data, eval_split = "test";
  bool r2_literal = false, no_heatmaps = false;
  auto* ev = app.add_subcommand("evaluate", "metric reports for fitted models");
  add_common(ev, eval_common);
  ev->add_option("--model-dir", eval_models, "model directory (repeatable)")->required();
  ev->add_option("--data", eval_data)->required();
  ev->add_option("--split", eval_split, "train|val|test");
  ev->add_flag("--r2-literal", r2_literal, "centre the R2 denominator on the mean prediction");
  ev->add_flag("--no-heatmaps", no_heatmaps);

  // ablate
  Common abl_common;
  ModelFlags abl_flags;
  std::vector<std::string> variants = {"full", "mean", "sorted"};
  auto* abl = app.add_subcommand("ablate", "retrain under feature variants");
  add_common(abl, abl_common);
  add_model_flags(abl, abl_flags);
  abl->add_option("--variants", variants, "full,mean,sorted,pe,latlon,none")->delimiter(',');

  // signtest
  Common sign_common;
  std::string model_a, model_b, sign_data, sign_split = "test";
  auto* sgn = app.add_subcommand("signtest", "per-location sign test of model A against model B");
  add_common(sgn, sign_common);
  sgn->add_option("--model-a", model_a)->required();
  sgn->add_option("--model-b", model_b)->required();
  sgn->add_option("--data", sign_data)->required();
  sgn->add_option("--split", sign_split);

  // bootstrap
  Common boot_common;
  ModelFlags boot_flags;
  std::vector<std::string> boot_models = {"lr", "rf"};
  int runs = 50, sample_size = 200;
  auto* boot = app.add_subcommand("bootstrap", "retrain on bootstrap resamples of training steps");
  add_common(boot, boot_common);
  add_model_flags(boot, boot_flags, false);
  boot->add_option("--models", boot_models)->delimiter(',');
  boot->add_option("--runs", runs);
  boot->add_option("--sample-size", sample_size);

  // rerun
  std::string manifest_path;
  std::optional<std::string> rerun_out;
  auto* rerun = app.add_subcommand("rerun", "repeat a recorded command and compare output hashes");
  rerun->add_option("--manifest", manifest_path)->required();
  rerun->add_option("--output-dir", rerun_out)->required();

  std::vector<const char*> cargs;
  for (const auto& a : args) cargs.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    throw ssf::ConfigError(e.what());
  }

  if (*gen) {
    if (target == "precip")
      sc.target_kind = ssf::TargetKind::precipitation;
    else if (target == "tmp2m")
      sc.target_kind = ssf::TargetKind::temperature;
    else
      throw ssf::ConfigError("unknown target '" + target + "'");
    if (sc.months < sc.max_lag() + 1 || sc.train_end <= 0 || sc.val_end <= sc.train_end || sc.val_end > sc.months)
      throw ssf::ConfigError("need 0 < train_end < val_end <= months and months >= " +
                             std::to_string(sc.max_lag() + 1));
    const fs::path out = resolved_output(gen_common, "data");
    const ssf::Dataset ds = ssf::synth_generate(sc);
    prepare_output(out);
    ssf::save_dataset(ds, out);
    write_manifest(out, "gen-data", recorded, 1, {});
    return 0;
  }

  if (*train || *stk) {
    const bool is_stack = static_cast<bool>(*stk);
    ModelFlags& f = is_stack ? stack_flags : train_flags;
    const Common& c = is_stack ? stack_common : train_common;
    if (is_stack) f.model = "stack";
    const int threads = resolved_threads(c);
    const ssf::ModelConfig cfg = build_config(f, threads);
    const fs::path out = resolved_output(c, is_stack ? "stack" : "train");
    const ssf::Dataset ds = ssf::load_dataset(f.data);
    auto model = ssf::make_model(cfg);
    model->fit(ssf::SplitView(ds, ssf::Split::train));
    prepare_output(out);
    model->save(out / "model");
    ssf::write_text_file(out / "config.json", cfg.to_json().dump(1));
    if (is_stack) {
      for (auto split : {ssf::Split::val, ssf::Split::test}) {
        const auto r = ssf::eval::evaluate_model(*model, ds, split);
        write_report(out, std::string("report_") + ssf::split_name(split), r, ds, true);
      }
    }
    write_manifest(out, is_stack ? "stack" : "train", recorded, threads, {f.data});
    return 0;
  }

  if (*ev) {
    const ssf::Split split = ssf::parse_split(eval_split);
    const fs::path out = resolved_output(eval_common, "evaluate");
    const ssf::Dataset ds = ssf::load_dataset(eval_data);
    std::vector<std::unique_ptr<ssf::Model>> models;
    for (const auto& m : eval_models) {
      models.push_back(ssf::Model::load(m));
      models.back()->check_compatible(ds);
    }
    prepare_output(out);
    ssf::eval::EvalOptions o;
    o.r2 = r2_literal ? ssf::eval::R2Convention::literal : ssf::eval::R2Convention::truth_mean;
    json summary = json::object();
    for (size_t i = 0; i < models.size(); ++i) {
      o.model_id = std::to_string(i) + "_" + ssf::family_name(models[i]->config().family);
      const auto r = ssf::eval::evaluate_model(*models[i], ds, split, o);
      write_report(out, "report_" + o.model_id, r, ds, !no_heatmaps);
      for (const auto& m : r.metrics) summary[o.model_id][m.name] = aggregates_json(m.agg);
    }
    ssf::write_text_file(out / "summary.json", summary.dump(1));
    std::vector<fs::path> inputs = {eval_data};
    for (const auto& m : eval_models) inputs.emplace_back(m);
    write_manifest(out, "evaluate", recorded, 1, inputs);
    std::cout << summary.dump(1) << "\n";
    return 0;
  }

  if (*abl) {
    const int threads = resolved_threads(abl_common);
    const ssf::ModelConfig base = build_config(abl_flags, threads);
    std::vector<ssf::eval::Variant> vs;
    for (const auto& v : variants) vs.push_back(ssf::eval::parse_variant(v));
    for (auto v : vs) ssf::eval::apply_variant(base, v);
    const fs::path out = resolved_output(abl_common, "ablate");
    const ssf::Dataset ds = ssf::load_dataset(abl_flags.data);
    std::vector<ssf::eval::AblationResult> results;
    for (auto v : vs) results.push_back(ssf::eval::ablation_run(v, base, ds));
    prepare_output(out);
    json summary = json::object();
    for (const auto& r : results) {
      const fs::path d = out / ssf::eval::variant_name(r.variant);
      ssf::write_text_file(d / "catalog.json", r.catalog.to_json());
      write_report(d, "val", r.validation, ds, false);
      write_report(d, "test", r.test, ds, true);
      for (const auto& m : r.test.metrics) summary[ssf::eval::variant_name(r.variant)][m.name] = aggregates_json(m.agg);
    }
    ssf::write_text_file(out / "summary.json", summary.dump(1));
    write_manifest(out, "ablate", recorded, threads, {abl_flags.data});
    std::cout << summary.dump(1) << "\n";
    return 0;
  }

  if (*sgn) {
    const ssf::Split split = ssf::parse_split(sign_split);
    const fs::path out = resolved_output(sign_common, "signtest");
    const ssf::Dataset ds = ssf::load_dataset(sign_data);
    auto a = ssf::Model::load(model_a);
    auto b = ssf::Model::load(model_b);
    a->check_compatible(ds);
    b->check_compatible(ds);
    if (a->config().task.kind != b->config().task.kind) throw ssf::ConfigError("sign test needs models of the same task");
    const int h = std::max(a->config().features.min_history, b->config().features.min_history);
    const std::vector<int> steps = ssf::SplitView(ds, split).steps(h);
    const auto res = ssf::eval::sign_test(sample_errors(*a, ds, steps), sample_errors(*b, ds, steps));
    prepare_output(out);
    ssf::write_text_file(out / "signtest.json", res.to_json());
    write_manifest(out, "signtest", recorded, 1, {sign_data, model_a, model_b});
    std::cout << "min p " << ssf::format_double(res.min_p) << ", threshold " << ssf::format_double(res.threshold)
              << (res.reject ? ", A better than B at some location\n" : ", no location significant\n");
    return 0;
  }

  if (*boot) {
    const int threads = resolved_threads(boot_common);
    std::vector<ssf::ModelConfig> cfgs;
    for (const auto& m : boot_models) {
      ModelFlags f = boot_flags;
      f.model = m;
      cfgs.push_back(build_config(f, threads));
    }
    if (runs < 1 || sample_size < 1) throw ssf::ConfigError("runs and sample size must be positive");
    const fs::path out = resolved_output(boot_common, "bootstrap");
    const ssf::Dataset ds = ssf::load_dataset(boot_flags.data);
    const auto res = ssf::eval::bootstrap_experiment(cfgs, ds, runs, sample_size, boot_flags.seed);
    prepare_output(out);
    ssf::write_text_file(out / "bootstrap.json", res.to_json());
    write_manifest(out, "bootstrap", recorded, threads, {boot_flags.data});
    return 0;
  }

  if (*rerun) {
    const json m = json::parse(ssf::read_text_file(manifest_path));
    std::vector<std::string> again = {"ssf"};
    for (const auto& a : m.at("argv")) again.push_back(a);
    again.push_back("--output-dir");
    again.push_back(*rerun_out);
    const std::string command = m.at("command");
    if (command != "evaluate" && command != "signtest" && command != "gen-data") {
      again.push_back("--threads");
      again.push_back(std::to_string(m.at("threads").get<int>()));
    }
    const int code = run(again);
    if (code != 0) return code;
    const json fresh = json::parse(ssf::read_text_file(fs::path(*rerun_out) / "run_manifest.json"));
    const bool same = fresh.at("outputs") == m.at("outputs");
    json verdict = {{"identical", same}, {"files", m.at("outputs").size()}};
    if (!same) {
      json diff = json::array();
      for (const auto& [k, v] : m.at("outputs").items())
        if (!fresh["outputs"].contains(k) || fresh["outputs"][k] != v) diff.push_back(k);
      verdict["differing"] = diff;
    }
    std::cout << verdict.dump() << "\n";
    return same ? 0 : 1;
  }
  return 0;
}

void print_error(int code, const std::string& kind, const std::string& message) {
  std::cerr << "ssf: " << message << "\n";
  std::cerr << json{{"error", {{"code", code}, {"kind", kind}, {"message", message}}}}.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(std::vector<std::string>(argv, argv + argc));
  } catch (const ssf::ConfigError& e) {
    print_error(2, "config", e.what());
    return 2;
  } catch (const std::exception& e) {
    print_error(1, "runtime", e.what());
    return 1;
  }
}
