#include "ssf/linear.hpp"
#include "ssf/util.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>

namespace ssf::linear {

namespace {

void require_finite(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  if (!X.allFinite()) throw std::invalid_argument("non-finite value in feature matrix");
  if (!y.allFinite()) throw std::invalid_argument("non-finite value in targets");
  if (X.rows() != y.size()) throw std::invalid_argument("feature rows and target length differ");
  if (X.rows() < 1) throw std::invalid_argument("fit needs at least one row");
}

/// Column centring and scaling; constant columns get scale 1 (and centre to zero).
struct Standardizer {
  Eigen::RowVectorXd mu;
  Eigen::RowVectorXd sd;

  explicit Standardizer(const Eigen::MatrixXd& X) : mu(X.colwise().mean()), sd(X.cols()) {
    for (Eigen::Index j = 0; j < X.cols(); ++j) {
      const double v = (X.col(j).array() - mu(j)).square().mean();
      sd(j) = v > 0 ? std::sqrt(v) : 1.0;
    }
  }
  Eigen::MatrixXd apply(const Eigen::MatrixXd& X) const {
    return (X.rowwise() - mu).array().rowwise() / sd.array();
  }
};

}  // namespace

double LinearModel::predict(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
  if (task == LinearTask::tercile) throw std::logic_error("use predict_proba for tercile models");
  if (x.size() != weights.size()) throw std::invalid_argument("feature count mismatch");
  return x.dot(weights) + intercept;
}

Eigen::VectorXd LinearModel::predict(const Eigen::MatrixXd& X) const {
  if (task == LinearTask::tercile) throw std::logic_error("use predict_proba for tercile models");
  if (X.cols() != weights.size()) throw std::invalid_argument("feature count mismatch");
  return (X * weights).array() + intercept;
}

Eigen::MatrixXd LinearModel::predict_proba(const Eigen::MatrixXd& X) const {
  if (task != LinearTask::tercile) throw std::logic_error("predict_proba needs a tercile model");
  if (X.cols() != class_weights.cols()) throw std::invalid_argument("feature count mismatch");
  Eigen::MatrixXd scores = X * class_weights.transpose();
  scores.rowwise() += class_intercepts.transpose();
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    const double mx = scores.row(r).maxCoeff();
    scores.row(r) = (scores.row(r).array() - mx).exp();
    scores.row(r) /= scores.row(r).sum();
  }
  return scores;
}

LinearModel ols_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double lambda) {
  require_finite(X, y);
  if (lambda < 0 || !std::isfinite(lambda)) throw std::invalid_argument("ridge penalty must be finite and >= 0");
  LinearModel m;
  const Eigen::RowVectorXd xm = X.colwise().mean();
  const double ym = y.mean();
  if (X.cols() == 0) {
    m.weights.resize(0);
    m.intercept = ym;
    return m;
  }
  const Eigen::MatrixXd Xc = X.rowwise() - xm;
  const Eigen::VectorXd yc = y.array() - ym;
  Eigen::MatrixXd A = Xc.transpose() * Xc;
  A.diagonal().array() += lambda;
  const Eigen::VectorXd b = Xc.transpose() * yc;

  bool solved = false;
  Eigen::LLT<Eigen::MatrixXd> llt(A);
  if (llt.info() == Eigen::Success) {
    const Eigen::VectorXd d = llt.matrixL().toDenseMatrix().diagonal().array().square();
    if (d.minCoeff() > 1e-11 * d.maxCoeff()) {
      m.weights = llt.solve(b);
      solved = m.weights.allFinite();
    }
  }
  if (!solved) {
    // minimum-norm least squares on the (ridge-augmented) centred system
    Eigen::MatrixXd Xa = Xc;
    Eigen::VectorXd ya = yc;
    if (lambda > 0) {
      Xa.resize(Xc.rows() + Xc.cols(), Xc.cols());
      Xa << Xc, std::sqrt(lambda) * Eigen::MatrixXd::Identity(Xc.cols(), Xc.cols());
      ya.resize(yc.size() + Xc.cols());
      ya << yc, Eigen::VectorXd::Zero(Xc.cols());
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(Xa, Eigen::ComputeThinU | Eigen::ComputeThinV);
    m.weights = svd.solve(ya);
  }
  m.intercept = ym - xm.dot(m.weights);
  return m;
}

double pinball_loss(double z, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("quantile level must lie in (0, 1)");
  return z >= 0 ? alpha * z : (alpha - 1.0) * z;
}

double mean_pinball_loss(const Eigen::VectorXd& residual, double alpha) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < residual.size(); ++i) s += pinball_loss(residual(i), alpha);
  return residual.size() ? s / residual.size() : 0.0;
}

LinearModel linear_qr_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double alpha,
                          const QuantileFitOptions& opts) {
  require_finite(X, y);
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("quantile level must lie in (0, 1)");
  const Standardizer stdz(X);
  const Eigen::MatrixXd Z = stdz.apply(X);
  const Eigen::Index n = Z.rows();

  LinearModel init = ols_fit(Z, y, 0.0);
  {
    const Eigen::VectorXd r = y - init.predict(Z);
    init.intercept += percentile_r7({r.data(), r.data() + r.size()}, alpha);
  }
  double scale = 0.0;
  {
    const double med = median({y.data(), y.data() + y.size()});
    scale = (y.array() - med).abs().mean();
    if (!(scale > 0)) scale = 1.0;
  }

  auto loss_of = [&](const Eigen::VectorXd& w, double b) {
    return mean_pinball_loss(y - ((Z * w).array() + b).matrix(), alpha);
  };

  Eigen::VectorXd w = init.weights, w_avg = w;
  double b = init.intercept, b_avg = b;
  double best = loss_of(w, b);
  Eigen::VectorXd best_w = w;
  double best_b = b;
  int since_improvement = 0;
  Eigen::VectorXd psi(n);
  for (int epoch = 0; epoch < opts.max_epochs; ++epoch) {
    const Eigen::VectorXd r = y - ((Z * w).array() + b).matrix();
    for (Eigen::Index i = 0; i < n; ++i) psi(i) = r(i) < 0 ? alpha - 1.0 : alpha;
    const double eta = opts.step * scale / std::sqrt(epoch + 1.0);
    w += eta * (Z.transpose() * psi) / static_cast<double>(n);
    b += eta * psi.mean();
    const double k = epoch + 2.0;
    w_avg += (w - w_avg) / k;
    b_avg += (b - b_avg) / k;
    const double cur = loss_of(w_avg, b_avg);
    if (!std::isfinite(cur))
      throw std::runtime_error("linear quantile fit diverged (loss NaN) with step size " + format_double(eta));
    if (cur < best - opts.tolerance) {
      best = cur;
      best_w = w_avg;
      best_b = b_avg;
      since_improvement = 0;
    } else {
      if (cur < best) {
        best = cur;
        best_w = w_avg;
        best_b = b_avg;
      }
      if (++since_improvement >= opts.patience) break;
    }
  }

  LinearModel m;
  m.task = LinearTask::quantile;
  m.alpha = alpha;
  m.weights = best_w.array() / stdz.sd.transpose().array();
  m.intercept = best_b - stdz.mu.dot(m.weights);
  return m;
}

LinearModel logistic_fit(const Eigen::MatrixXd& X, const std::vector<int>& labels, const LogisticFitOptions& opts) {
  if (static_cast<Eigen::Index>(labels.size()) != X.rows())
    throw std::invalid_argument("label count differs from feature rows");
  if (!X.allFinite()) throw std::invalid_argument("non-finite value in feature matrix");
  const Eigen::Index n = X.rows(), p = X.cols();
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(n, 3);
  std::array<int, 3> count{};
  for (Eigen::Index i = 0; i < n; ++i) {
    const int c = labels[i] + 1;
    if (c < 0 || c > 2) throw std::invalid_argument("tercile labels must be -1, 0 or 1");
    Y(i, c) = 1.0;
    ++count[c];
  }
  for (int c = 0; c < 3; ++c)
    if (count[c] == 0)
      throw std::invalid_argument("class " + std::to_string(c - 1) + " absent from logistic training labels");

  const Standardizer stdz(X);
  const Eigen::MatrixXd Z = stdz.apply(X);
  // Lipschitz bound of the softmax cross-entropy gradient
  double lmax = 1.0;
  if (p > 0) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Z.transpose() * Z / static_cast<double>(n),
                                                      Eigen::EigenvaluesOnly);
    lmax = 1.0 + es.eigenvalues().maxCoeff();
  }
  const double step = std::min(opts.step * 4.0, 1.0 / (0.5 * lmax + opts.l2));

  Eigen::MatrixXd W = Eigen::MatrixXd::Zero(3, p), W_prev = W;
  Eigen::Vector3d b, b_prev;
  for (int c = 0; c < 3; ++c) b(c) = std::log(static_cast<double>(count[c]) / n);
  b.array() -= b.mean();
  b_prev = b;

  auto gradient = [&](const Eigen::MatrixXd& Wc, const Eigen::Vector3d& bc, Eigen::MatrixXd& gW, Eigen::Vector3d& gb) {
    Eigen::MatrixXd S = Z * Wc.transpose();
    S.rowwise() += bc.transpose();
    for (Eigen::Index r = 0; r < n; ++r) {
      const double mx = S.row(r).maxCoeff();
      S.row(r) = (S.row(r).array() - mx).exp();
      S.row(r) /= S.row(r).sum();
    }
    const Eigen::MatrixXd D = (S - Y) / static_cast<double>(n);
    gW = D.transpose() * Z + opts.l2 * Wc;
    gb = D.colwise().sum().transpose();
  };

  Eigen::MatrixXd gW;
  Eigen::Vector3d gb;
  for (int it = 1; it <= opts.max_iterations; ++it) {
    // Nesterov momentum
    const double mom = (it - 1.0) / (it + 2.0);
    const Eigen::MatrixXd Wl = W + mom * (W - W_prev);
    const Eigen::Vector3d bl = b + mom * (b - b_prev);
    gradient(Wl, bl, gW, gb);
    W_prev = W;
    b_prev = b;
    W = Wl - step * gW;
    b = bl - step * gb;
    if (std::sqrt(gW.squaredNorm() + gb.squaredNorm()) < opts.gradient_tolerance) break;
  }

  LinearModel m;
  m.task = LinearTask::tercile;
  m.class_weights = W.array().rowwise() / stdz.sd.array();
  m.class_intercepts = b - m.class_weights * stdz.mu.transpose();
  return m;
}

Eigen::MatrixXd logistic_predict(const LinearModel& model, const Eigen::MatrixXd& X) {
  return model.predict_proba(X);
}

PerLocationFit per_location_fit(const std::vector<Eigen::MatrixXd>& X, const std::vector<Eigen::VectorXd>& y,
                                LinearTask task, double alpha, double lambda) {
  if (X.size() != y.size()) throw std::invalid_argument("one target vector per location required");
  PerLocationFit out;
  out.models.resize(X.size());
  for (size_t l = 0; l < X.size(); ++l) {
    try {
      switch (task) {
        case LinearTask::regression: out.models[l] = ols_fit(X[l], y[l], lambda); break;
        case LinearTask::quantile: out.models[l] = linear_qr_fit(X[l], y[l], alpha); break;
        case LinearTask::tercile: {
          std::vector<int> labels(y[l].size());
          for (Eigen::Index i = 0; i < y[l].size(); ++i) labels[i] = static_cast<int>(std::lround(y[l](i)));
          out.models[l] = logistic_fit(X[l], labels);
          break;
        }
      }
    } catch (const std::exception& e) {
      out.errors.push_back({static_cast<int>(l), e.what()});
    }
  }
  return out;
}

}  // namespace ssf::linear
