#include "ssf/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ssf::eval {

double binomial_upper_tail(int n, int w) {
  if (n < 0) throw std::invalid_argument("negative trial count");
  if (w <= 0) return 1.0;
  if (w > n) return 0.0;
  const double log_half_n = -n * std::log(2.0);
  const double lg_n1 = std::lgamma(n + 1.0);
  double p = 0.0;
  for (int k = w; k <= n; ++k) p += std::exp(lg_n1 - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) + log_half_n);
  return std::min(1.0, p);
}

double bonferroni_threshold(int n_locations, double level) {
  if (n_locations < 1) throw std::invalid_argument("Bonferroni correction needs at least one location");
  return level / n_locations;
}

SignTestResult sign_test(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double level) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("sign test inputs differ in shape");
  const Eigen::Index L = a.cols();
  SignTestResult r;
  r.wins.assign(L, 0);
  r.n.assign(L, 0);
  r.p.assign(L, 1.0);
  r.no_data.assign(L, false);
  for (Eigen::Index l = 0; l < L; ++l) {
    for (Eigen::Index t = 0; t < a.rows(); ++t) {
      const double ea = std::abs(a(t, l)), eb = std::abs(b(t, l));
      if (ea == eb) continue;
      ++r.n[l];
      r.wins[l] += ea < eb;
    }
    if (r.n[l] == 0)
      r.no_data[l] = true;
    else
      r.p[l] = binomial_upper_tail(r.n[l], r.wins[l]);
  }
  r.threshold = bonferroni_threshold(static_cast<int>(L), level);
  r.min_p = L ? *std::min_element(r.p.begin(), r.p.end()) : 1.0;
  r.reject = r.min_p < r.threshold;
  return r;
}

std::string SignTestResult::to_json() const {
  nlohmann::json doc = {{"threshold", threshold}, {"min_p", min_p},     {"reject", reject},
                        {"wins", wins},           {"n", n},             {"p", p},
                        {"no_data", no_data}};
  return doc.dump(1);
}

}  // namespace ssf::eval
