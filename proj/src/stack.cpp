#include "ssf/stack.hpp"
#include "ssf/convnet.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

namespace ssf::stack {

namespace {

int n_outputs(StackTask t) { return t == StackTask::tercile ? 3 : 1; }

Eigen::MatrixXd sigmoid(const Eigen::MatrixXd& z) {
  return z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

/// Row-wise softmax of an n x 3 score matrix.
Eigen::MatrixXd softmax_rows(Eigen::MatrixXd z) {
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    z.row(i) = (z.row(i).array() - m).exp();
    z.row(i) /= z.row(i).sum();
  }
  return z;
}

double scale01(double v, double lo, double hi) { return hi > lo ? (v - lo) / (hi - lo) : 0.0; }

}  // namespace

Eigen::MatrixXd Stacker::scale_inputs(const Eigen::MatrixXd& P) const {
  if (P.cols() != in_min.size())
    throw std::invalid_argument("stacker expects " + std::to_string(in_min.size()) + " inputs, got " +
                                std::to_string(P.cols()));
  Eigen::MatrixXd out(P.rows(), P.cols());
  for (Eigen::Index j = 0; j < P.cols(); ++j)
    for (Eigen::Index i = 0; i < P.rows(); ++i) out(i, j) = scale01(P(i, j), in_min(j), in_max(j));
  return out;
}

Eigen::VectorXd Stacker::predict(const Eigen::MatrixXd& P) const {
  if (task == StackTask::tercile) throw std::logic_error("tercile stacker predicts probabilities");
  const Eigen::MatrixXd H = sigmoid((scale_inputs(P) * W1.transpose()).rowwise() + b1.transpose());
  Eigen::VectorXd z = (H * W2.transpose()).col(0).array() + b2(0);
  return z.array() * (y_max - y_min) + y_min;
}

Eigen::MatrixXd Stacker::predict_proba(const Eigen::MatrixXd& P) const {
  if (task != StackTask::tercile) throw std::logic_error("predict_proba needs a tercile stacker");
  const Eigen::MatrixXd H = sigmoid((scale_inputs(P) * W1.transpose()).rowwise() + b1.transpose());
  return softmax_rows((H * W2.transpose()).rowwise() + b2.transpose());
}

std::vector<double> Stacker::flat_params() const {
  std::vector<double> p;
  for (const auto* m : {&W1, &W2}) p.insert(p.end(), m->data(), m->data() + m->size());
  for (const auto* v : {&b1, &b2}) p.insert(p.end(), v->data(), v->data() + v->size());
  return p;
}

void Stacker::set_flat_params(const std::vector<double>& p) {
  const size_t need = W1.size() + W2.size() + b1.size() + b2.size();
  if (p.size() != need) throw std::invalid_argument("stacker parameter vector size mismatch");
  size_t k = 0;
  for (auto* m : {&W1, &W2}) {
    std::copy(p.begin() + k, p.begin() + k + m->size(), m->data());
    k += m->size();
  }
  for (auto* v : {&b1, &b2}) {
    std::copy(p.begin() + k, p.begin() + k + v->size(), v->data());
    k += v->size();
  }
}

double stacker_loss(const Stacker& s, const Eigen::MatrixXd& Pn, const Eigen::VectorXd& target,
                    std::vector<double>* grad) {
  const double n = static_cast<double>(Pn.rows());
  const Eigen::MatrixXd H = sigmoid((Pn * s.W1.transpose()).rowwise() + s.b1.transpose());
  const Eigen::MatrixXd Z = (H * s.W2.transpose()).rowwise() + s.b2.transpose();
  Eigen::MatrixXd dZ(Z.rows(), Z.cols());
  double loss = 0.0;
  if (s.task == StackTask::tercile) {
    const Eigen::MatrixXd prob = softmax_rows(Z);
    dZ = prob;
    for (Eigen::Index i = 0; i < Z.rows(); ++i) {
      const int c = static_cast<int>(std::lround(target(i))) + 1;
      loss -= std::log(std::max(prob(i, c), 1e-300));
      dZ(i, c) -= 1.0;
    }
  } else if (s.task == StackTask::regression) {
    const Eigen::VectorXd d = Z.col(0) - target;
    loss = d.squaredNorm();
    dZ.col(0) = 2.0 * d;
  } else {
    for (Eigen::Index i = 0; i < Z.rows(); ++i) {
      const double z = target(i) - Z(i, 0);
      loss += z >= 0 ? s.alpha * z : (s.alpha - 1.0) * z;
      dZ(i, 0) = z > 0 ? -s.alpha : (z < 0 ? 1.0 - s.alpha : 0.0);
    }
  }
  loss /= n;
  if (!grad) return loss;
  dZ /= n;
  const Eigen::MatrixXd gW2 = dZ.transpose() * H;
  const Eigen::VectorXd gb2 = dZ.colwise().sum().transpose();
  const Eigen::MatrixXd dA = (dZ * s.W2).cwiseProduct(H.cwiseProduct((1.0 - H.array()).matrix()));
  const Eigen::MatrixXd gW1 = dA.transpose() * Pn;
  const Eigen::VectorXd gb1 = dA.colwise().sum().transpose();
  grad->clear();
  for (const auto* m : {&gW1, &gW2}) grad->insert(grad->end(), m->data(), m->data() + m->size());
  grad->insert(grad->end(), gb1.data(), gb1.data() + gb1.size());
  grad->insert(grad->end(), gb2.data(), gb2.data() + gb2.size());
  return loss;
}

Stacker stacker_fit(const Eigen::MatrixXd& P, const Eigen::VectorXd& y, StackTask task, const StackerOptions& opts) {
  if (P.cols() < 1) throw std::invalid_argument("stacker needs at least one input column");
  if (P.rows() != y.size()) throw std::invalid_argument("stacker inputs and targets differ in length");
  if (P.rows() < 4) throw std::invalid_argument("stacker needs at least four rows");
  if (!P.allFinite() || !y.allFinite()) throw std::invalid_argument("non-finite stacker input");
  if (opts.hidden < 1) throw std::invalid_argument("hidden width must be positive");

  Stacker s;
  s.task = task;
  s.alpha = opts.alpha;
  s.in_min = P.colwise().minCoeff().transpose();
  s.in_max = P.colwise().maxCoeff().transpose();
  Eigen::VectorXd target = y;
  if (task != StackTask::tercile) {
    s.y_min = y.minCoeff();
    s.y_max = y.maxCoeff();
    for (Eigen::Index i = 0; i < y.size(); ++i) target(i) = scale01(y(i), s.y_min, s.y_max);
  }
  const Eigen::MatrixXd Pn = s.scale_inputs(P);

  std::mt19937_64 rng(opts.seed);
  const int p = static_cast<int>(P.cols()), H = opts.hidden, O = n_outputs(task);
  std::normal_distribution<double> n1(0.0, std::sqrt(1.0 / p)), n2(0.0, std::sqrt(1.0 / H));
  s.W1.resize(H, p);
  for (Eigen::Index i = 0; i < s.W1.size(); ++i) s.W1.data()[i] = n1(rng);
  s.b1 = Eigen::VectorXd::Zero(H);
  s.W2.resize(O, H);
  for (Eigen::Index i = 0; i < s.W2.size(); ++i) s.W2.data()[i] = n2(rng);
  s.b2 = Eigen::VectorXd::Zero(O);

  const int n = static_cast<int>(P.rows());
  int n_hold = static_cast<int>(std::floor(n * opts.holdout));
  if (n - n_hold < 2) n_hold = 0;
  const int n_fit = n - n_hold;
  const Eigen::MatrixXd Pf = Pn.topRows(n_fit), Ph = Pn.bottomRows(n_hold);
  const Eigen::VectorXd yf = target.head(n_fit), yh = target.tail(n_hold);

  convnet::AdamState state;
  const convnet::AdamConfig ac{opts.lr, 0.9, 0.999, 1e-8, 0.0};
  std::vector<int> order(n_fit);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> params = s.flat_params(), grad, best = params;
  double best_loss = std::numeric_limits<double>::infinity();
  int since = 0;
  const int batch = std::max(1, std::min(opts.batch, n_fit));
  for (int epoch = 0; epoch < opts.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int start = 0; start < n_fit; start += batch) {
      const int m = std::min(batch, n_fit - start);
      Eigen::MatrixXd Pb(m, p);
      Eigen::VectorXd yb(m);
      for (int i = 0; i < m; ++i) {
        Pb.row(i) = Pf.row(order[start + i]);
        yb(i) = yf(order[start + i]);
      }
      const double l = stacker_loss(s, Pb, yb, &grad);
      if (!std::isfinite(l)) throw std::runtime_error("non-finite stacker loss at epoch " + std::to_string(epoch));
      convnet::adam_step(params, grad, state, ac);
      s.set_flat_params(params);
    }
    const double monitor = n_hold ? stacker_loss(s, Ph, yh, nullptr) : stacker_loss(s, Pf, yf, nullptr);
    if (monitor < best_loss - 1e-12) {
      best_loss = monitor;
      best = params;
      since = 0;
    } else if (++since >= opts.patience) {
      break;
    }
  }
  s.set_flat_params(best);
  return s;
}

void Stacker::save(const std::filesystem::path& path) const {
  auto mat = [](const Eigen::MatrixXd& m) { return std::vector<double>(m.data(), m.data() + m.size()); };
  std::vector<convnet::NamedTensor> ts = {
      {"in_min", {static_cast<int>(in_min.size())}, mat(in_min)},
      {"in_max", {static_cast<int>(in_max.size())}, mat(in_max)},
      {"W1", {static_cast<int>(W1.rows()), static_cast<int>(W1.cols())}, mat(W1)},
      {"b1", {static_cast<int>(b1.size())}, mat(b1)},
      {"W2", {static_cast<int>(W2.rows()), static_cast<int>(W2.cols())}, mat(W2)},
      {"b2", {static_cast<int>(b2.size())}, mat(b2)},
  };
  const char* t = task == StackTask::regression ? "regression" : task == StackTask::quantile ? "quantile" : "tercile";
  const nlohmann::json meta = {{"kind", "stacker"}, {"task", t}, {"alpha", alpha}, {"y_min", y_min}, {"y_max", y_max}};
  convnet::save_tensors(path, ts, meta.dump());
}

Stacker Stacker::load(const std::filesystem::path& path) {
  std::string meta_text;
  const auto ts = convnet::load_tensors(path, &meta_text);
  const auto meta = nlohmann::json::parse(meta_text);
  if (meta.value("kind", "") != "stacker") throw std::runtime_error("checkpoint is not a stacker: " + path.string());
  if (ts.size() != 6) throw std::runtime_error("stacker checkpoint has wrong tensor count");
  auto to_mat = [](const convnet::NamedTensor& t) {
    const int r = t.dims[0], c = t.dims.size() > 1 ? t.dims[1] : 1;
    return Eigen::MatrixXd(Eigen::Map<const Eigen::MatrixXd>(t.values.data(), r, c));
  };
  Stacker s;
  const std::string task = meta["task"];
  s.task = task == "regression" ? StackTask::regression : task == "quantile" ? StackTask::quantile : StackTask::tercile;
  s.alpha = meta["alpha"];
  s.y_min = meta["y_min"];
  s.y_max = meta["y_max"];
  s.in_min = to_mat(ts[0]).col(0);
  s.in_max = to_mat(ts[1]).col(0);
  s.W1 = to_mat(ts[2]);
  s.b1 = to_mat(ts[3]).col(0);
  s.W2 = to_mat(ts[4]);
  s.b2 = to_mat(ts[5]).col(0);
  return s;
}

Eigen::MatrixXd StackedModel::base_matrix(std::span<const int> steps) const {
  std::vector<Eigen::MatrixXd> blocks;
  Eigen::Index cols = 0;
  for (size_t b = 0; b < bases.size(); ++b) {
    blocks.push_back(bases[b](steps));
    if (b && blocks[b].rows() != blocks[0].rows())
      throw std::runtime_error("base " + base_ids[b] + " returned a different number of rows");
    cols += blocks[b].cols();
  }
  Eigen::MatrixXd P(blocks.at(0).rows(), cols);
  Eigen::Index c = 0;
  for (const auto& blk : blocks) {
    P.middleCols(c, blk.cols()) = blk;
    c += blk.cols();
  }
  return P;
}

Eigen::VectorXd StackedModel::predict(std::span<const int> steps) const { return stacker.predict(base_matrix(steps)); }

Eigen::MatrixXd StackedModel::predict_proba(std::span<const int> steps) const {
  return stacker.predict_proba(base_matrix(steps));
}

StackedModel stack_train(const std::vector<BaseSpec>& bases, std::span<const int> train_steps,
                         const std::function<Eigen::VectorXd(std::span<const int>)>& truth, StackTask task,
                         const StackerOptions& opts) {
  if (bases.size() < 2) throw std::invalid_argument("stacking needs at least two base models");
  if (train_steps.size() < 4) throw std::invalid_argument("stacking needs at least four training steps");
  std::vector<int> steps(train_steps.begin(), train_steps.end());
  std::sort(steps.begin(), steps.end());
  const size_t half = steps.size() / 2;
  const std::vector<int> first(steps.begin(), steps.begin() + half), second(steps.begin() + half, steps.end());

  StackedModel half_model;
  for (const auto& b : bases) {
    try {
      half_model.base_ids.push_back(b.id);
      half_model.bases.push_back(b.train(first));
    } catch (const std::exception& e) {
      throw std::runtime_error("base " + b.id + " failed on the first half: " + e.what());
    }
  }
  Eigen::MatrixXd P;
  try {
    P = half_model.base_matrix(second);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("base prediction on the second half failed: ") + e.what());
  }
  const Eigen::VectorXd y = truth(second);

  StackedModel out;
  out.stacker = stacker_fit(P, y, task, opts);
  for (const auto& b : bases) {
    try {
      out.base_ids.push_back(b.id);
      out.bases.push_back(b.train(steps));
    } catch (const std::exception& e) {
      throw std::runtime_error("base " + b.id + " failed on the full training split: " + e.what());
    }
  }
  return out;
}

}  // namespace ssf::stack
