#include "ssf/forest.hpp"
#include "ssf/util.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <thread>

namespace ssf::forest {

int Tree::route(std::span<const double> x) const {
  int node = 0;
  while (feature[node] >= 0) node = x[feature[node]] <= threshold[node] ? left[node] : right[node];
  return node;
}

namespace {

/// Grows one CART tree on the rows listed in `sample` (bootstrap draws, repeats allowed).
/// Every feature keeps its positions presorted; splitting stable-partitions each order,
/// so a node costs O(node size x features) with no re-sorting.
class TreeBuilder {
 public:
  TreeBuilder(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, ForestTask task, int mtry, int min_split,
              std::vector<int> sample, std::mt19937_64& rng)
      : task_(task), mtry_(mtry), min_split_(std::max(2, min_split)), sample_(std::move(sample)), rng_(rng) {
    // repeated bootstrap draws collapse into one weighted row; equal rows never split apart
    std::sort(sample_.begin(), sample_.end());
    std::vector<int> weight;
    for (size_t i = 0; i < sample_.size(); ++i) {
      if (i > 0 && sample_[i] == sample_[i - 1]) {
        ++weight.back();
        continue;
      }
      rows_.push_back(sample_[i]);
      weight.push_back(1);
    }
    n_ = static_cast<int>(rows_.size());
    p_ = static_cast<int>(X.cols());
    yv_.resize(n_);
    cls_.resize(n_);
    for (int i = 0; i < n_; ++i) {
      yv_[i] = y(rows_[i]);
      cls_[i] = task == ForestTask::classification ? static_cast<int>(std::lround(y(rows_[i]))) + 1 : 0;
      if (cls_[i] < 0 || cls_[i] >= kClasses) throw std::invalid_argument("classification labels must be -1, 0, 1");
    }
    entries_.resize(static_cast<size_t>(p_) * n_);
    std::vector<int> idx(n_);
    std::vector<double> v(n_);
    for (int f = 0; f < p_; ++f) {
      for (int i = 0; i < n_; ++i) v[i] = X(rows_[i], f);
      std::iota(idx.begin(), idx.end(), 0);
      std::stable_sort(idx.begin(), idx.end(), [&v](int a, int b) { return v[a] < v[b]; });
      Entry* en = &entries_[static_cast<size_t>(f) * n_];
      for (int i = 0; i < n_; ++i) en[i] = {v[idx[i]], weight[idx[i]] * yv_[idx[i]], idx[i], weight[idx[i]]};
    }
    goes_left_.resize(n_);
    buffer_.resize(n_);
    features_.resize(p_);
    std::iota(features_.begin(), features_.end(), 0);
  }

  Tree build() {
    struct Work {
      int begin, end, node;
    };
    std::vector<Work> stack;
    stack.push_back({0, n_, new_node()});
    while (!stack.empty()) {
      const Work w = stack.back();
      stack.pop_back();
      int feature = -1;
      double threshold = 0.0;
      if (count(w.begin, w.end) >= min_split_ && !pure(w.begin, w.end)) find_split(w.begin, w.end, feature, threshold);
      if (feature < 0) {
        make_leaf(w.node, w.begin, w.end);
        continue;
      }
      const int mid = partition(w.begin, w.end, feature, threshold);
      const int l = new_node(), r = new_node();
      tree_.feature[w.node] = feature;
      tree_.threshold[w.node] = threshold;
      tree_.left[w.node] = l;
      tree_.right[w.node] = r;
      stack.push_back({mid, w.end, r});
      stack.push_back({w.begin, mid, l});
    }
    return std::move(tree_);
  }

 private:
  int new_node() {
    tree_.feature.push_back(-1);
    tree_.threshold.push_back(0.0);
    tree_.left.push_back(-1);
    tree_.right.push_back(-1);
    tree_.value.push_back(0.0);
    if (task_ == ForestTask::classification) tree_.class_freq.push_back({0.f, 0.f, 0.f});
    tree_.leaf_begin.push_back(-1);
    tree_.leaf_count.push_back(0);
    return tree_.n_nodes() - 1;
  }

  /// Rows of the current node sorted by feature f, with value and target inline.
  struct Entry {
    double v;
    double wy;  // weight * target
    int pos;
    int w;
  };

  const Entry* entries(int f) const { return &entries_[static_cast<size_t>(f) * n_]; }

  int count(int b, int e) const {
    const Entry* o = entries(0);
    int c = 0;
    for (int i = b; i < e; ++i) c += o[i].w;
    return c;
  }

  bool pure(int b, int e) const {
    const Entry* o = entries(0);
    if (task_ == ForestTask::classification) {
      for (int i = b + 1; i < e; ++i)
        if (cls_[o[i].pos] != cls_[o[b].pos]) return false;
    } else {
      for (int i = b + 1; i < e; ++i)
        if (yv_[o[i].pos] != yv_[o[b].pos]) return false;
    }
    return true;
  }

  void make_leaf(int node, int b, int e) {
    const Entry* o = entries(0);
    tree_.leaf_begin[node] = static_cast<int>(tree_.leaf_rows.size());
    double s = 0.0;
    int m = 0;
    std::array<int, kClasses> c{};
    for (int i = b; i < e; ++i) {
      tree_.leaf_rows.insert(tree_.leaf_rows.end(), o[i].w, rows_[o[i].pos]);
      s += o[i].wy;
      m += o[i].w;
      c[cls_[o[i].pos]] += o[i].w;
    }
    tree_.leaf_count[node] = m;
    tree_.value[node] = s / m;
    if (task_ == ForestTask::classification)
      for (int k = 0; k < kClasses; ++k) tree_.class_freq[node][k] = static_cast<float>(c[k]) / m;
  }

  /// Scans candidate features in ascending index order; strict improvement keeps the
  /// lowest feature index and then the lowest threshold among equal gains.
  void find_split(int b, int e, int& best_f, double& best_t) {
    // random candidate subset via partial Fisher-Yates
    for (int i = 0; i < mtry_; ++i) {
      std::uniform_int_distribution<int> pick(i, p_ - 1);
      std::swap(features_[i], features_[pick(rng_)]);
    }
    std::vector<int> cand(features_.begin(), features_.begin() + mtry_);
    std::sort(cand.begin(), cand.end());
    double best_gain = -std::numeric_limits<double>::infinity();
    scan(b, e, cand, best_f, best_t, best_gain);
    if (best_f < 0 && mtry_ < p_) {
      // no valid partition among the candidates: keep looking through the rest
      std::vector<int> rest(features_.begin() + mtry_, features_.end());
      std::sort(rest.begin(), rest.end());
      scan(b, e, rest, best_f, best_t, best_gain);
    }
  }

  void scan(int b, int e, const std::vector<int>& feats, int& best_f, double& best_t, double& best_gain) const {
    const int m = count(b, e);
    if (task_ == ForestTask::regression) {
      double total = 0.0;
      const Entry* o0 = entries(0);
      for (int i = b; i < e; ++i) total += o0[i].wy;
      for (int f : feats) {
        const Entry* o = entries(f);
        double sl = 0.0;
        int nl = 0;
        for (int i = b; i < e - 1; ++i) {
          sl += o[i].wy;
          nl += o[i].w;
          const double a = o[i].v, c = o[i + 1].v;
          if (!(a < c)) continue;
          const double sr = total - sl;
          const double gain = sl * sl / nl + sr * sr / (m - nl);
          if (gain > best_gain) {
            best_gain = gain;
            best_f = f;
            best_t = midpoint(a, c);
          }
        }
      }
    } else {
      std::array<double, kClasses> total{};
      const Entry* o0 = entries(0);
      for (int i = b; i < e; ++i) total[cls_[o0[i].pos]] += o0[i].w;
      for (int f : feats) {
        const Entry* o = entries(f);
        std::array<double, kClasses> cl{};
        int nl = 0;
        for (int i = b; i < e - 1; ++i) {
          cl[cls_[o[i].pos]] += o[i].w;
          nl += o[i].w;
          const double a = o[i].v, c = o[i + 1].v;
          if (!(a < c)) continue;
          const int nr = m - nl;
          double gl = 0.0, gr = 0.0;
          for (int k = 0; k < kClasses; ++k) {
            gl += cl[k] * cl[k];
            gr += (total[k] - cl[k]) * (total[k] - cl[k]);
          }
          // maximizing this is minimizing the weighted Gini impurity of the children
          const double gain = gl / nl + gr / nr;
          if (gain > best_gain) {
            best_gain = gain;
            best_f = f;
            best_t = midpoint(a, c);
          }
        }
      }
    }
  }

  static double midpoint(double a, double c) {
    const double t = a + (c - a) / 2.0;
    return t < c ? t : a;
  }

  int partition(int b, int e, int f, double t) {
    const Entry* of = entries(f);
    int n_left = 0;
    for (int i = b; i < e; ++i) {
      const bool left = of[i].v <= t;
      goes_left_[of[i].pos] = left;
      n_left += left;
    }
    for (int g = 0; g < p_; ++g) {
      Entry* o = &entries_[static_cast<size_t>(g) * n_];
      int li = b, ri = 0;
      for (int i = b; i < e; ++i) {
        if (goes_left_[o[i].pos])
          o[li++] = o[i];
        else
          buffer_[ri++] = o[i];
      }
      std::copy(buffer_.begin(), buffer_.begin() + ri, o + li);
    }
    return b + n_left;
  }

  ForestTask task_;
  int mtry_;
  int min_split_;
  std::vector<int> sample_;
  std::vector<int> rows_;  // distinct sampled rows
  std::mt19937_64& rng_;
  int n_ = 0, p_ = 0;
  std::vector<double> yv_;
  std::vector<int> cls_;
  std::vector<Entry> entries_;
  std::vector<char> goes_left_;
  std::vector<Entry> buffer_;
  std::vector<int> features_;
  Tree tree_;
};

}  // namespace

Forest rf_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const ForestParams& params, ForestTask task) {
  if (X.rows() < 2) throw std::invalid_argument("forest needs at least two rows");
  if (X.rows() != y.size()) throw std::invalid_argument("feature rows and target length differ");
  if (params.n_trees < 1) throw std::invalid_argument("forest needs at least one tree");
  if (X.cols() < 1) throw std::invalid_argument("forest needs at least one feature");
  if (!X.allFinite() || !y.allFinite()) throw std::invalid_argument("non-finite forest input");
  const int p = static_cast<int>(X.cols());
  int mtry = params.max_features;
  if (mtry <= 0)
    mtry = task == ForestTask::regression ? p : std::max(1, static_cast<int>(std::floor(std::sqrt(p))));
  mtry = std::min(mtry, p);

  Forest forest;
  forest.task = task;
  forest.params = params;
  forest.params.max_features = mtry;
  forest.n_features = p;
  forest.targets.assign(y.data(), y.data() + y.size());
  forest.trees.resize(params.n_trees);

  const int n = static_cast<int>(X.rows());
  auto grow = [&](int k) {
    std::mt19937_64 rng(derive_seed(params.seed, static_cast<std::uint64_t>(k)));
    std::vector<int> sample(n);
    if (params.bootstrap) {
      std::uniform_int_distribution<int> draw(0, n - 1);
      for (auto& s : sample) s = draw(rng);
    } else {
      std::iota(sample.begin(), sample.end(), 0);
    }
    TreeBuilder builder(X, y, task, mtry, params.min_samples_split, std::move(sample), rng);
    forest.trees[k] = builder.build();
    if (!params.store_samples && task == ForestTask::classification) {
      // class frequencies suffice; leaf rows are kept for out-of-bag bookkeeping only
    }
  };

  const int threads = std::max(1, std::min(params.threads, params.n_trees));
  if (threads == 1) {
    for (int k = 0; k < params.n_trees; ++k) grow(k);
  } else {
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w)
      pool.emplace_back([&, w] {
        try {
          for (int k = next++; k < params.n_trees; k = next++) grow(k);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return forest;
}

void Forest::check_width(std::span<const double> x) const {
  if (static_cast<int>(x.size()) != n_features)
    throw std::invalid_argument("forest expects " + std::to_string(n_features) + " features, got " +
                                std::to_string(x.size()));
}

double Forest::predict(std::span<const double> x) const {
  check_width(x);
  if (task == ForestTask::classification) return predict_label(x);
  double s = 0.0;
  for (const auto& t : trees) s += t.value[t.route(x)];
  return s / static_cast<double>(trees.size());
}

Eigen::VectorXd Forest::predict(const Eigen::MatrixXd& X) const {
  Eigen::VectorXd out(X.rows());
  std::vector<double> row(X.cols());
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    for (Eigen::Index j = 0; j < X.cols(); ++j) row[j] = X(r, j);
    out(r) = predict(row);
  }
  return out;
}

std::array<double, kClasses> Forest::predict_proba(std::span<const double> x) const {
  check_width(x);
  if (task != ForestTask::classification) throw std::logic_error("predict_proba needs a classification forest");
  std::array<double, kClasses> p{};
  for (const auto& t : trees) {
    const int leaf = t.route(x);
    for (int k = 0; k < kClasses; ++k) p[k] += t.class_freq[leaf][k];
  }
  double s = 0.0;
  for (double v : p) s += v;
  for (double& v : p) v /= s;
  return p;
}

Eigen::MatrixXd Forest::predict_proba(const Eigen::MatrixXd& X) const {
  Eigen::MatrixXd out(X.rows(), kClasses);
  std::vector<double> row(X.cols());
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    for (Eigen::Index j = 0; j < X.cols(); ++j) row[j] = X(r, j);
    const auto p = predict_proba(row);
    for (int k = 0; k < kClasses; ++k) out(r, k) = p[k];
  }
  return out;
}

int Forest::predict_label(std::span<const double> x) const {
  const auto p = predict_proba(x);
  int best = 0;
  for (int k = 1; k < kClasses; ++k)
    if (p[k] > p[best]) best = k;
  return best - 1;
}

std::vector<double> Forest::qrf_weights(std::span<const double> x) const {
  check_width(x);
  if (!params.store_samples) throw std::logic_error("forest was not fitted with stored leaf samples");
  std::vector<double> w(targets.size(), 0.0);
  const double inv_trees = 1.0 / static_cast<double>(trees.size());
  for (const auto& t : trees) {
    const int leaf = t.route(x);
    const double share = inv_trees / t.leaf_count[leaf];
    for (int i = 0; i < t.leaf_count[leaf]; ++i) w[t.leaf_rows[t.leaf_begin[leaf] + i]] += share;
  }
  return w;
}

double weighted_quantile(std::span<const double> y, std::span<const double> w, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("quantile level must lie in (0, 1)");
  if (y.size() != w.size() || y.empty()) throw std::invalid_argument("weighted quantile needs matching nonempty inputs");
  std::vector<int> idx(y.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return y[a] < y[b]; });
  double cum = 0.0;
  int last = -1;
  for (int i : idx) {
    if (w[i] <= 0.0) continue;
    cum += w[i];
    last = i;
    if (cum >= alpha - 1e-12) return y[i];
  }
  if (last < 0) throw std::invalid_argument("weighted quantile with all-zero weights");
  return y[last];
}

double qrf_predict(const Forest& forest, std::span<const double> x, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("quantile level must lie in (0, 1)");
  forest.check_width(x);
  if (!forest.params.store_samples) throw std::logic_error("forest was not fitted with stored leaf samples");
  // Same accumulation as qrf_weights, visiting only rows that share a leaf with x.
  thread_local std::vector<double> w;
  thread_local std::vector<int> touched;
  w.assign(forest.targets.size(), 0.0);
  touched.clear();
  const double inv_trees = 1.0 / static_cast<double>(forest.trees.size());
  for (const auto& t : forest.trees) {
    const int leaf = t.route(x);
    const double share = inv_trees / t.leaf_count[leaf];
    for (int i = 0; i < t.leaf_count[leaf]; ++i) {
      const int r = t.leaf_rows[t.leaf_begin[leaf] + i];
      if (w[r] == 0.0) touched.push_back(r);
      w[r] += share;
    }
  }
  const auto& y = forest.targets;
  std::sort(touched.begin(), touched.end(), [&](int a, int b) { return y[a] < y[b] || (y[a] == y[b] && a < b); });
  double cum = 0.0;
  for (int r : touched) {
    cum += w[r];
    if (cum >= alpha - 1e-12) return y[r];
  }
  return y[touched.back()];
}

Eigen::VectorXd qrf_predict(const Forest& forest, const Eigen::MatrixXd& X, double alpha) {
  Eigen::VectorXd out(X.rows());
  std::vector<double> row(X.cols());
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    for (Eigen::Index j = 0; j < X.cols(); ++j) row[j] = X(r, j);
    out(r) = qrf_predict(forest, row, alpha);
  }
  return out;
}

double oob_mse(const Forest& forest, const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  const Eigen::Index n = X.rows();
  std::vector<double> sum(n, 0.0);
  std::vector<int> count(n, 0);
  std::vector<char> inbag(n);
  std::vector<double> row(X.cols());
  for (const auto& t : forest.trees) {
    std::fill(inbag.begin(), inbag.end(), 0);
    for (int r : t.leaf_rows) inbag[r] = 1;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (inbag[i]) continue;
      for (Eigen::Index j = 0; j < X.cols(); ++j) row[j] = X(i, j);
      sum[i] += t.value[t.route(row)];
      ++count[i];
    }
  }
  double se = 0.0;
  int m = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!count[i]) continue;
    const double d = sum[i] / count[i] - y(i);
    se += d * d;
    ++m;
  }
  if (!m) throw std::runtime_error("no out-of-bag rows");
  return se / m;
}

PerLocationForests per_location_qrf_fit(const std::vector<Eigen::MatrixXd>& X, const std::vector<Eigen::VectorXd>& y,
                                        ForestParams params) {
  if (X.size() != y.size()) throw std::invalid_argument("one target vector per location required");
  PerLocationForests out;
  out.forests.resize(X.size());
  params.store_samples = true;
  const std::uint64_t base = params.seed;
  for (size_t l = 0; l < X.size(); ++l) {
    try {
      params.seed = derive_seed(base, l);
      out.forests[l] = rf_fit(X[l], y[l], params, ForestTask::regression);
    } catch (const std::exception& e) {
      out.errors.emplace_back(static_cast<int>(l), e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary serialization

namespace {

constexpr char kMagic[8] = {'S', 'S', 'F', 'F', 'O', 'R', '0', '1'};

template <class T>
void put(std::ostream& o, const T& v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
void put_vec(std::ostream& o, const std::vector<T>& v) {
  put<std::uint64_t>(o, v.size());
  if (!v.empty()) o.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
}
template <class T>
T get(std::istream& in) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("truncated forest file");
  return v;
}
template <class T>
std::vector<T> get_vec(std::istream& in) {
  const auto n = get<std::uint64_t>(in);
  if (n > (1ULL << 34)) throw std::runtime_error("corrupt forest file");
  std::vector<T> v(n);
  if (n) in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
  if (!in) throw std::runtime_error("truncated forest file");
  return v;
}

}  // namespace

void Forest::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream o(path, std::ios::binary);
  if (!o) throw std::runtime_error("cannot write " + path.string());
  o.write(kMagic, sizeof kMagic);
  put<std::int32_t>(o, task == ForestTask::regression ? 0 : 1);
  put<std::int32_t>(o, params.n_trees);
  put<std::int32_t>(o, params.max_features);
  put<std::int32_t>(o, params.min_samples_split);
  put<std::int32_t>(o, params.bootstrap);
  put<std::uint64_t>(o, params.seed);
  put<std::int32_t>(o, params.store_samples);
  put<std::int32_t>(o, n_features);
  put_vec(o, targets);
  put<std::uint64_t>(o, trees.size());
  for (const auto& t : trees) {
    put_vec(o, t.feature);
    put_vec(o, t.threshold);
    put_vec(o, t.left);
    put_vec(o, t.right);
    put_vec(o, t.value);
    put_vec(o, t.class_freq);
    put_vec(o, t.leaf_begin);
    put_vec(o, t.leaf_count);
    put_vec(o, t.leaf_rows);
  }
  if (!o) throw std::runtime_error("write failed for " + path.string());
}

Forest Forest::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw std::runtime_error("not a forest file: " + path.string());
  Forest f;
  f.task = get<std::int32_t>(in) == 0 ? ForestTask::regression : ForestTask::classification;
  f.params.n_trees = get<std::int32_t>(in);
  f.params.max_features = get<std::int32_t>(in);
  f.params.min_samples_split = get<std::int32_t>(in);
  f.params.bootstrap = get<std::int32_t>(in) != 0;
  f.params.seed = get<std::uint64_t>(in);
  f.params.store_samples = get<std::int32_t>(in) != 0;
  f.n_features = get<std::int32_t>(in);
  f.targets = get_vec<double>(in);
  f.trees.resize(get<std::uint64_t>(in));
  for (auto& t : f.trees) {
    t.feature = get_vec<int>(in);
    t.threshold = get_vec<double>(in);
    t.left = get_vec<int>(in);
    t.right = get_vec<int>(in);
    t.value = get_vec<double>(in);
    t.class_freq = get_vec<std::array<float, 3>>(in);
    t.leaf_begin = get_vec<int>(in);
    t.leaf_count = get_vec<int>(in);
    t.leaf_rows = get_vec<int>(in);
  }
  return f;
}

}  // namespace ssf::forest
