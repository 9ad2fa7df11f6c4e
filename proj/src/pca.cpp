#include "ssf/preprocess.hpp"

#include <Eigen/SVD>

#include <stdexcept>

namespace ssf {

PcaModel pca_fit(const Eigen::MatrixXd& data, int n_components) {
  if (n_components < 1) throw std::invalid_argument("pca needs at least one component");
  if (data.rows() < n_components)
    throw std::invalid_argument("pca needs at least as many rows as components");
  PcaModel m;
  m.mean = data.colwise().mean();
  const Eigen::MatrixXd centred = data.rowwise() - m.mean;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(centred, Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  const auto max_rank = std::min(data.rows(), data.cols());
  if (n_components > max_rank)
    throw std::invalid_argument("requested " + std::to_string(n_components) + " components but the matrix rank is at most " +
                                std::to_string(max_rank));
  m.components = svd.matrixV().leftCols(n_components).transpose();
  // sign convention: largest-magnitude loading of each component is positive
  for (int k = 0; k < n_components; ++k) {
    Eigen::Index idx;
    m.components.row(k).cwiseAbs().maxCoeff(&idx);
    if (m.components(k, idx) < 0) m.components.row(k) *= -1.0;
  }
  m.singular_values = s.head(n_components);
  const double total = s.squaredNorm();
  m.explained_variance_ratio = s.head(n_components).array().square() / (total > 0 ? total : 1.0);
  return m;
}

Eigen::VectorXd pca_transform(const PcaModel& model, const Eigen::RowVectorXd& row) {
  if (row.size() != model.mean.size()) throw std::invalid_argument("pca input width mismatch");
  return model.components * (row - model.mean).transpose();
}

Eigen::MatrixXd pca_transform(const PcaModel& model, const Eigen::MatrixXd& rows) {
  if (rows.cols() != model.mean.size()) throw std::invalid_argument("pca input width mismatch");
  return (rows.rowwise() - model.mean) * model.components.transpose();
}

Eigen::MatrixXd pca_reconstruct(const PcaModel& model, const Eigen::MatrixXd& scores) {
  return (scores * model.components).rowwise() + model.mean;
}

}  // namespace ssf
