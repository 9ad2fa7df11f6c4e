#include "ssf/convnet.hpp"
#include "ssf/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace ssf::convnet {

using nlohmann::json;

Tensor4::Tensor4(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_) {
  if (n <= 0 || c <= 0 || h <= 0 || w <= 0) throw std::invalid_argument("tensor dims must be positive");
  data.assign(static_cast<size_t>(n) * c * h * w, 0.0);
}

// ---------------------------------------------------------------------------
// Primitives

namespace {

RowMat im2col3(const Activation& x) {
  const int H = x.h, W = x.w, C = x.channels();
  RowMat col = RowMat::Zero(static_cast<Eigen::Index>(C) * 9, static_cast<Eigen::Index>(H) * W);
  for (int c = 0; c < C; ++c) {
    const double* src = x.m.row(c).data();
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        double* dst = col.row(c * 9 + ky * 3 + kx).data();
        for (int y = 0; y < H; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= H) continue;
          for (int xx = 0; xx < W; ++xx) {
            const int sx = xx + kx - 1;
            if (sx >= 0 && sx < W) dst[y * W + xx] = src[sy * W + sx];
          }
        }
      }
  }
  return col;
}

Activation col2im3(const RowMat& col, int C, int H, int W) {
  Activation dx{H, W, RowMat::Zero(C, static_cast<Eigen::Index>(H) * W)};
  for (int c = 0; c < C; ++c) {
    double* dst = dx.m.row(c).data();
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const double* src = col.row(c * 9 + ky * 3 + kx).data();
        for (int y = 0; y < H; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= H) continue;
          for (int xx = 0; xx < W; ++xx) {
            const int sx = xx + kx - 1;
            if (sx >= 0 && sx < W) dst[sy * W + sx] += src[y * W + xx];
          }
        }
      }
  }
  return dx;
}

void check_layer_input(const ConvLayer& layer, const Activation& x) {
  if (x.channels() != layer.cin || x.m.cols() != static_cast<Eigen::Index>(x.h) * x.w)
    throw std::invalid_argument("layer " + layer.name + ": expected " + std::to_string(layer.cin) +
                                " input channels, got " + std::to_string(x.channels()));
}

}  // namespace

Activation conv2d_forward(const ConvLayer& layer, const Activation& x) {
  check_layer_input(layer, x);
  Activation y{x.h, x.w, RowMat()};
  if (layer.k == 1)
    y.m.noalias() = layer.W * x.m;
  else
    y.m.noalias() = layer.W * im2col3(x);
  y.m.colwise() += layer.b;
  return y;
}

Activation conv2d_backward(const ConvLayer& layer, const Activation& x, const Activation& dy, ConvGrad& g) {
  check_layer_input(layer, x);
  if (dy.channels() != layer.cout || dy.h != x.h || dy.w != x.w)
    throw std::invalid_argument("layer " + layer.name + ": output gradient shape mismatch");
  g.b += dy.m.rowwise().sum();
  if (layer.k == 1) {
    g.W.noalias() += dy.m * x.m.transpose();
    Activation dx{x.h, x.w, RowMat()};
    dx.m.noalias() = layer.W.transpose() * dy.m;
    return dx;
  }
  const RowMat col = im2col3(x);
  g.W.noalias() += dy.m * col.transpose();
  RowMat dcol = layer.W.transpose() * dy.m;
  return col2im3(dcol, x.channels(), x.h, x.w);
}

void relu_inplace(Activation& x) { x.m = x.m.cwiseMax(0.0); }

void relu_backward_inplace(Activation& dy, const Activation& out) {
  dy.m = (out.m.array() > 0.0).select(dy.m, 0.0);
}

Activation maxpool2(const Activation& x, std::vector<int>& argmax) {
  if (x.h % 2 || x.w % 2) throw std::invalid_argument("maxpool2: odd spatial size");
  const int H = x.h / 2, W = x.w / 2, C = x.channels();
  Activation y{H, W, RowMat(C, static_cast<Eigen::Index>(H) * W)};
  argmax.assign(static_cast<size_t>(C) * H * W, 0);
  for (int c = 0; c < C; ++c) {
    const double* src = x.m.row(c).data();
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        int best = (2 * i) * x.w + 2 * j;
        for (int di = 0; di < 2; ++di)
          for (int dj = 0; dj < 2; ++dj) {
            const int p = (2 * i + di) * x.w + 2 * j + dj;
            if (src[p] > src[best]) best = p;
          }
        y.m(c, i * W + j) = src[best];
        argmax[(static_cast<size_t>(c) * H + i) * W + j] = best;
      }
  }
  return y;
}

Activation maxpool2_backward(const Activation& dy, const std::vector<int>& argmax, int h, int w) {
  const int C = dy.channels();
  Activation dx{h, w, RowMat::Zero(C, static_cast<Eigen::Index>(h) * w)};
  const Eigen::Index P = static_cast<Eigen::Index>(dy.h) * dy.w;
  for (int c = 0; c < C; ++c)
    for (Eigen::Index p = 0; p < P; ++p) dx.m(c, argmax[c * P + p]) += dy.m(c, p);
  return dx;
}

Activation upsample_nearest(const Activation& x) {
  const int H = x.h * 2, W = x.w * 2, C = x.channels();
  Activation y{H, W, RowMat(C, static_cast<Eigen::Index>(H) * W)};
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) y.m(c, i * W + j) = x.m(c, (i / 2) * x.w + j / 2);
  return y;
}

Activation upsample_nearest_backward(const Activation& dy) {
  const int H = dy.h / 2, W = dy.w / 2, C = dy.channels();
  Activation dx{H, W, RowMat::Zero(C, static_cast<Eigen::Index>(H) * W)};
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < dy.h; ++i)
      for (int j = 0; j < dy.w; ++j) dx.m(c, (i / 2) * W + j / 2) += dy.m(c, i * dy.w + j);
  return dx;
}

Activation concat_channels(const Activation& a, const Activation& b) {
  if (a.h != b.h || a.w != b.w) throw std::invalid_argument("concat: spatial size mismatch");
  Activation y{a.h, a.w, RowMat(a.channels() + b.channels(), a.m.cols())};
  y.m.topRows(a.channels()) = a.m;
  y.m.bottomRows(b.channels()) = b.m;
  return y;
}

// ---------------------------------------------------------------------------
// U-Net

namespace {

ConvLayer make_layer(std::string name, int cin, int cout, int k, std::mt19937_64& rng) {
  ConvLayer l{std::move(name), cin, cout, k, Eigen::MatrixXd(cout, cin * k * k), Eigen::VectorXd::Zero(cout)};
  std::normal_distribution<double> nd(0.0, std::sqrt((k == 1 ? 1.0 : 2.0) / (cin * k * k)));
  for (Eigen::Index j = 0; j < l.W.cols(); ++j)
    for (Eigen::Index i = 0; i < l.W.rows(); ++i) l.W(i, j) = nd(rng);
  return l;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

UNet::UNet(const UNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.in_channels < 1 || cfg.base < 1 || cfg.depth < 1) throw std::invalid_argument("invalid U-Net config");
  std::mt19937_64 rng(seed);
  const int D = cfg.depth;
  auto ch = [&](int i) { return cfg.base << i; };
  layers_.push_back(make_layer("stem", cfg.in_channels, ch(0), 3, rng));
  layers_.push_back(make_layer("enc0", ch(0), ch(0), 3, rng));
  for (int i = 1; i <= D; ++i) layers_.push_back(make_layer("enc" + std::to_string(i), ch(i - 1), ch(i), 3, rng));
  for (int i = D - 1; i >= 0; --i) {
    layers_.push_back(make_layer("up" + std::to_string(i), ch(i + 1), ch(i), 3, rng));
    layers_.push_back(make_layer("dec" + std::to_string(i), 2 * ch(i), ch(i), 3, rng));
  }
  layers_.push_back(make_layer("head", ch(0), 1, 1, rng));
}

void UNet::check_input(const Activation& x) const {
  const int m = 1 << cfg_.depth;
  if (x.h % m || x.w % m)
    throw std::invalid_argument("U-Net input " + std::to_string(x.h) + "x" + std::to_string(x.w) +
                                " not divisible by " + std::to_string(m));
  if (x.channels() != cfg_.in_channels)
    throw std::invalid_argument("U-Net expects " + std::to_string(cfg_.in_channels) + " channels, got " +
                                std::to_string(x.channels()));
}

Activation UNet::forward(const Activation& x, Workspace* ws) const {
  check_input(x);
  const int D = cfg_.depth;
  const int n_layers = static_cast<int>(layers_.size());
  Workspace local;
  Workspace& w = ws ? *ws : local;
  w.in.assign(n_layers, {});
  w.out.assign(n_layers, {});
  w.argmax.assign(D, {});
  w.pooled_from.assign(D, {});

  auto conv_relu = [&](int idx, const Activation& in) -> const Activation& {
    w.in[idx] = in;
    w.out[idx] = conv2d_forward(layers_[idx], in);
    relu_inplace(w.out[idx]);
    return w.out[idx];
  };

  conv_relu(0, x);
  conv_relu(1, w.out[0]);
  std::vector<int> skip(D + 1);
  skip[0] = 1;
  for (int i = 1; i <= D; ++i) {
    const Activation& prev = w.out[skip[i - 1]];
    w.pooled_from[i - 1] = {prev.h, prev.w};
    Activation p = maxpool2(prev, w.argmax[i - 1]);
    conv_relu(1 + i, p);
    skip[i] = 1 + i;
  }
  int cur = skip[D];
  for (int i = D - 1; i >= 0; --i) {
    const Activation& u = conv_relu(up_index(i), upsample_nearest(w.out[cur]));
    conv_relu(merge_index(i), concat_channels(u, w.out[skip[i]]));
    cur = merge_index(i);
  }
  const int h = n_layers - 1;
  w.in[h] = w.out[cur];
  w.out[h] = conv2d_forward(layers_[h], w.in[h]);
  Activation y = w.out[h];
  if (cfg_.activation == OutputActivation::sigmoid) y.m = y.m.unaryExpr([](double z) { return sigmoid(z); });
  w.output = y;
  return y;
}

void UNet::backward(const Activation& dy_in, Workspace& ws, std::vector<ConvGrad>& grads) const {
  const int D = cfg_.depth;
  const int h = static_cast<int>(layers_.size()) - 1;
  Activation dz = dy_in;
  if (cfg_.activation == OutputActivation::sigmoid)
    dz.m = dz.m.cwiseProduct(ws.output.m.unaryExpr([](double s) { return s * (1.0 - s); }));

  auto back = [&](int idx, Activation d, bool relu) {
    if (relu) relu_backward_inplace(d, ws.out[idx]);
    return conv2d_backward(layers_[idx], ws.in[idx], d, grads[idx]);
  };

  Activation dcur = back(h, dz, false);
  std::vector<Activation> dskip(D + 1);
  for (int i = 0; i < D; ++i) {
    Activation dcat = back(merge_index(i), dcur, true);
    const int cu = layers_[up_index(i)].cout;
    Activation du{dcat.h, dcat.w, dcat.m.topRows(cu)};
    dskip[i] = Activation{dcat.h, dcat.w, dcat.m.bottomRows(dcat.channels() - cu)};
    Activation dup = back(up_index(i), du, true);
    dcur = upsample_nearest_backward(dup);
  }
  dskip[D] = dcur;
  for (int i = D; i >= 1; --i) {
    Activation dp = back(1 + i, dskip[i], true);
    Activation dprev = maxpool2_backward(dp, ws.argmax[i - 1], ws.pooled_from[i - 1].first, ws.pooled_from[i - 1].second);
    dskip[i - 1].m += dprev.m;
  }
  Activation dstem = back(1, dskip[0], true);
  back(0, dstem, true);
}

Tensor4 UNet::forward(const Tensor4& x) const {
  Tensor4 y(x.n, 1, x.h, x.w);
  for (int b = 0; b < x.n; ++b) {
    Activation a{x.h, x.w, RowMat(x.c, static_cast<Eigen::Index>(x.h) * x.w)};
    for (int c = 0; c < x.c; ++c)
      for (int i = 0; i < x.h; ++i)
        for (int j = 0; j < x.w; ++j) a.m(c, i * x.w + j) = x.at(b, c, i, j);
    const Activation out = forward(a);
    for (int i = 0; i < x.h; ++i)
      for (int j = 0; j < x.w; ++j) y.at(b, 0, i, j) = out.m(0, i * x.w + j);
  }
  return y;
}

int UNet::n_params() const {
  int n = 0;
  for (const auto& l : layers_) n += static_cast<int>(l.W.size() + l.b.size());
  return n;
}

std::vector<double> UNet::flat_params() const {
  std::vector<double> p;
  p.reserve(n_params());
  for (const auto& l : layers_) {
    p.insert(p.end(), l.W.data(), l.W.data() + l.W.size());
    p.insert(p.end(), l.b.data(), l.b.data() + l.b.size());
  }
  return p;
}

void UNet::set_flat_params(const std::vector<double>& p) {
  if (static_cast<int>(p.size()) != n_params()) throw std::invalid_argument("parameter vector size mismatch");
  size_t k = 0;
  for (auto& l : layers_) {
    std::copy(p.begin() + k, p.begin() + k + l.W.size(), l.W.data());
    k += l.W.size();
    std::copy(p.begin() + k, p.begin() + k + l.b.size(), l.b.data());
    k += l.b.size();
  }
}

std::vector<ConvGrad> UNet::zero_grads() const {
  std::vector<ConvGrad> g;
  for (const auto& l : layers_) g.push_back({Eigen::MatrixXd::Zero(l.W.rows(), l.W.cols()), Eigen::VectorXd::Zero(l.b.size())});
  return g;
}

std::vector<double> UNet::flatten(const std::vector<ConvGrad>& g) {
  std::vector<double> p;
  for (const auto& l : g) {
    p.insert(p.end(), l.W.data(), l.W.data() + l.W.size());
    p.insert(p.end(), l.b.data(), l.b.data() + l.b.size());
  }
  return p;
}

// ---------------------------------------------------------------------------
// Optimizer

void adam_step(std::vector<double>& w, const std::vector<double>& g, AdamState& s, const AdamConfig& cfg) {
  if (w.size() != g.size()) throw std::invalid_argument("adam_step: weight and gradient sizes differ");
  if (s.m.empty()) {
    s.m.assign(w.size(), 0.0);
    s.v.assign(w.size(), 0.0);
  }
  ++s.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.t));
  for (size_t i = 0; i < w.size(); ++i) {
    s.m[i] = cfg.beta1 * s.m[i] + (1.0 - cfg.beta1) * g[i];
    s.v[i] = cfg.beta2 * s.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double mh = s.m[i] / c1, vh = s.v[i] / c2;
    w[i] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps) + cfg.lr * cfg.weight_decay * w[i];
  }
}

// ---------------------------------------------------------------------------
// Data helpers

Activation to_activation(const FeatureStack& s, int multiple) {
  const int H = (s.n_lat + multiple - 1) / multiple * multiple;
  const int W = (s.n_lon + multiple - 1) / multiple * multiple;
  Activation a{H, W, RowMat(s.channels, static_cast<Eigen::Index>(H) * W)};
  for (int c = 0; c < s.channels; ++c)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) a.m(c, i * W + j) = s.at(c, std::min(i, s.n_lat - 1), std::min(j, s.n_lon - 1));
  return a;
}

SpatialData SpatialData::subset(const std::vector<int>& idx) const {
  SpatialData out;
  out.mask = mask;
  for (int i : idx) {
    out.inputs.push_back(inputs.at(i));
    out.targets.push_back(targets.at(i));
  }
  return out;
}

namespace {

struct ItemResult {
  double loss = 0.0;
  long count = 0;
};

/// Loss sum and output gradient (unscaled) for one item.
ItemResult item_loss(const UNet& net, const FeatureStack& in, const std::vector<double>& target,
                     const std::vector<char>& mask, LossKind kind, double alpha, Workspace* ws, Activation* dy) {
  const int mult = 1 << net.config().depth;
  const Activation x = to_activation(in, mult);
  const Activation y = net.forward(x, ws);
  if (static_cast<int>(target.size()) != in.n_lat * in.n_lon || mask.size() != target.size())
    throw std::invalid_argument("target map size does not match the feature stack");
  ItemResult r;
  if (dy) *dy = Activation{y.h, y.w, RowMat::Zero(1, y.m.cols())};
  for (int i = 0; i < in.n_lat; ++i)
    for (int j = 0; j < in.n_lon; ++j) {
      const int cell = i * in.n_lon + j;
      if (!mask[cell]) continue;
      const int p = i * y.w + j;
      const double d = y.m(0, p) - target[cell];
      if (kind == LossKind::squared) {
        r.loss += d * d;
        if (dy) dy->m(0, p) = 2.0 * d;
      } else {
        const double z = -d;  // truth minus prediction
        r.loss += z >= 0 ? alpha * z : (alpha - 1.0) * z;
        if (dy) dy->m(0, p) = z > 0 ? -alpha : (z < 0 ? 1.0 - alpha : 0.0);
      }
      ++r.count;
    }
  return r;
}

}  // namespace

double loss_and_grad(const UNet& net, const SpatialData& data, const std::vector<int>& items, LossKind kind,
                     double alpha, std::vector<double>* grad, int threads) {
  if (items.empty()) throw std::invalid_argument("loss over an empty batch");
  threads = std::max(1, std::min<int>(threads, static_cast<int>(items.size())));
  std::vector<std::vector<ConvGrad>> grads(threads);
  std::vector<double> loss(threads, 0.0);
  std::vector<long> count(threads, 0);
  auto work = [&](int t) {
    if (grad) grads[t] = net.zero_grads();
    Workspace ws;
    Activation dy;
    const size_t lo = items.size() * t / threads, hi = items.size() * (t + 1) / threads;
    for (size_t k = lo; k < hi; ++k) {
      const int i = items[k];
      const ItemResult r = item_loss(net, data.inputs.at(i), data.targets.at(i), data.mask, kind, alpha,
                                     grad ? &ws : nullptr, grad ? &dy : nullptr);
      loss[t] += r.loss;
      count[t] += r.count;
      if (grad) net.backward(dy, ws, grads[t]);
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (auto& th : pool) th.join();
  }
  double total = 0.0;
  long n = 0;
  for (int t = 0; t < threads; ++t) {
    total += loss[t];
    n += count[t];
  }
  if (n == 0) throw std::invalid_argument("mask selects no cells");
  if (grad) {
    std::vector<double> g = UNet::flatten(grads[0]);
    for (int t = 1; t < threads; ++t) {
      const std::vector<double> gt = UNet::flatten(grads[t]);
      for (size_t k = 0; k < g.size(); ++k) g[k] += gt[k];
    }
    for (double& v : g) v /= static_cast<double>(n);
    *grad = std::move(g);
  }
  return total / static_cast<double>(n);
}

double evaluate_loss(const UNet& net, const SpatialData& data, LossKind kind, double alpha) {
  std::vector<int> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  return loss_and_grad(net, data, all, kind, alpha, nullptr);
}

// ---------------------------------------------------------------------------
// Training

namespace {

// keep_best: end on the parameters with the lowest full training loss, initialization included.
TrainLog train_loop(UNet& net, LossKind kind, double alpha, const SpatialData& train, const SpatialData* val,
                    const TrainOptions& opts, bool keep_best = false) {
  if (train.size() == 0) throw std::invalid_argument("no training maps");
  if (opts.batch < 1 || opts.epochs < 0) throw std::invalid_argument("invalid batch size or epoch count");
  std::mt19937_64 rng(opts.seed);
  AdamState state;
  const AdamConfig ac{opts.lr, 0.9, 0.999, 1e-8, opts.weight_decay};
  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  TrainLog log;
  std::vector<double> grad;
  double best_loss = keep_best ? evaluate_loss(net, train, kind, alpha) : 0.0;
  std::vector<double> best = keep_best ? net.flat_params() : std::vector<double>{};
  for (int e = 1; e <= opts.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    int seen = 0;
    for (int start = 0, b = 0; start < train.size(); start += opts.batch, ++b) {
      const std::vector<int> items(order.begin() + start, order.begin() + std::min(train.size(), start + opts.batch));
      const double l = loss_and_grad(net, train, items, kind, alpha, &grad, opts.threads);
      if (!std::isfinite(l))
        throw std::runtime_error("non-finite training loss at epoch " + std::to_string(e) + ", batch " +
                                 std::to_string(b));
      std::vector<double> p = net.flat_params();
      adam_step(p, grad, state, ac);
      net.set_flat_params(p);
      sum += l * static_cast<double>(items.size());
      seen += static_cast<int>(items.size());
    }
    const double vl = val && val->size() ? evaluate_loss(net, *val, kind, alpha) : std::numeric_limits<double>::quiet_NaN();
    log.epochs.push_back({e, sum / seen, vl});
    if (keep_best) {
      const double tl = evaluate_loss(net, train, kind, alpha);
      if (tl < best_loss) {
        best_loss = tl;
        best = net.flat_params();
      }
    }
  }
  if (keep_best) net.set_flat_params(best);
  return log;
}

/// Least-squares identity head on the penultimate features of the masked training cells.
void refit_identity_head(UNet& net, const SpatialData& train) {
  ConvLayer& head = net.head();
  const int p = head.cin;
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p + 1, p + 1);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(p + 1);
  const int mult = 1 << net.config().depth;
  Workspace ws;
  const int h = static_cast<int>(net.layers().size()) - 1;
  Eigen::VectorXd f(p + 1);
  for (int t = 0; t < train.size(); ++t) {
    const FeatureStack& in = train.inputs[t];
    net.forward(to_activation(in, mult), &ws);
    const Activation& feat = ws.in[h];
    for (int i = 0; i < in.n_lat; ++i)
      for (int j = 0; j < in.n_lon; ++j) {
        const int cell = i * in.n_lon + j;
        if (!train.mask[cell]) continue;
        f.head(p) = feat.m.col(i * feat.w + j);
        f(p) = 1.0;
        A.selfadjointView<Eigen::Lower>().rankUpdate(f);
        rhs += f * train.targets[t][cell];
      }
  }
  A = A.selfadjointView<Eigen::Lower>();
  A.diagonal().head(p).array() += 1e-8 * std::max(1.0, A.diagonal().maxCoeff());
  const Eigen::VectorXd sol = A.ldlt().solve(rhs);
  head.W.row(0) = sol.head(p).transpose();
  head.b(0) = sol(p);
  net.set_activation(OutputActivation::identity);
}

// Moves the head bias to the alpha-quantile of the masked training residuals.
void shift_head_to_quantile(UNet& net, const SpatialData& train, double alpha) {
  std::vector<double> residual;
  for (int t = 0; t < train.size(); ++t) {
    const std::vector<double> out = predict_normalized(net, train.inputs[t]);
    for (size_t c = 0; c < out.size(); ++c)
      if (train.mask[c]) residual.push_back(train.targets[t][c] - out[c]);
  }
  if (!residual.empty()) net.head().b(0) += percentile_r7(std::move(residual), alpha);
}

}  // namespace

TrainLog train_regression(UNet& net, const SpatialData& train, const SpatialData* val, const TrainOptions& opts) {
  return train_loop(net, LossKind::squared, 0.5, train, val, opts);
}

TrainLog train_quantile(UNet& net, double alpha, const SpatialData& train, const SpatialData* val,
                        const TrainOptions& opts) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("quantile level must lie in (0, 1)");
  if (net.config().activation == OutputActivation::sigmoid) refit_identity_head(net, train);
  shift_head_to_quantile(net, train, alpha);
  return train_loop(net, LossKind::pinball, alpha, train, val, opts, true);
}

std::string TrainLog::to_csv() const {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss\n";
  for (const auto& r : epochs)
    os << r.epoch << ',' << format_double(r.train_loss) << ',' << (std::isnan(r.val_loss) ? "NA" : format_double(r.val_loss))
       << '\n';
  return os.str();
}

std::vector<double> predict_normalized(const UNet& net, const FeatureStack& stack) {
  const Activation y = net.forward(to_activation(stack, 1 << net.config().depth));
  std::vector<double> out(static_cast<size_t>(stack.n_lat) * stack.n_lon);
  for (int i = 0; i < stack.n_lat; ++i)
    for (int j = 0; j < stack.n_lon; ++j) out[i * stack.n_lon + j] = y.m(0, i * y.w + j);
  return out;
}

double TargetScaling::apply(double v) const {
  const double span = b - a;
  if (mode == NormMode::minmax) return span > 0 ? (v - a) / span : 0.0;
  return b > 0 ? (v - a) / b : 0.0;
}

double TargetScaling::invert(double v) const {
  if (mode == NormMode::minmax) return a + v * (b - a);
  return a + v * b;
}

TargetScaling fit_target_scaling(const std::vector<double>& values, NormMode mode) {
  if (values.empty()) throw std::invalid_argument("target scaling needs values");
  TargetScaling s;
  s.mode = mode;
  if (mode == NormMode::minmax) {
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    s.a = *lo;
    s.b = *hi;
  } else {
    s.a = mean(values);
    s.b = values.size() > 1 ? stdev(values) : 0.0;
  }
  return s;
}

SpatialField predict_map(const ConvNetModel& model, const FeatureStack& stack, const LandMask& mask) {
  const GridSpec& g = mask.grid();
  if (stack.n_lat != g.n_lat || stack.n_lon != g.n_lon) throw std::invalid_argument("feature stack does not match grid");
  std::vector<double> v = predict_normalized(model.net, stack);
  std::vector<bool> missing(v.size());
  for (size_t c = 0; c < v.size(); ++c) {
    missing[c] = !mask.is_land(static_cast<int>(c));
    v[c] = missing[c] ? 0.0 : model.scaling.invert(v[c]);
  }
  return SpatialField(g, std::move(v), std::move(missing));
}

GridSearchResult cv_grid_search(const UNetConfig& cfg, const SpatialData& train,
                                const std::vector<TrainOptions>& candidates, int folds, std::uint64_t seed) {
  if (candidates.empty()) throw std::invalid_argument("empty hyperparameter grid");
  if (folds < 2 || folds > train.size()) throw std::invalid_argument("fold count must lie in [2, number of maps]");
  GridSearchResult res;
  double best = std::numeric_limits<double>::infinity();
  const int n = train.size();
  for (size_t c = 0; c < candidates.size(); ++c) {
    double total = 0.0;
    for (int f = 0; f < folds; ++f) {
      const int lo = n * f / folds, hi = n * (f + 1) / folds;
      std::vector<int> fit_idx, hold_idx;
      for (int i = 0; i < n; ++i) (i >= lo && i < hi ? hold_idx : fit_idx).push_back(i);
      UNet net(cfg, derive_seed(seed, c * 1000 + f));
      TrainOptions o = candidates[c];
      o.seed = derive_seed(seed, c * 1000 + f + 500);
      train_regression(net, train.subset(fit_idx), nullptr, o);
      total += evaluate_loss(net, train.subset(hold_idx), LossKind::squared);
    }
    const double score = total / folds;
    res.scores.emplace_back(candidates[c], score);
    if (score < best) {
      best = score;
      res.best = candidates[c];
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors,
                  const std::string& meta_json) {
  json doc;
  doc["format"] = "ssf-tensors";
  doc["version"] = 1;
  doc["meta"] = json::parse(meta_json);
  doc["tensors"] = json::array();
  for (const auto& t : tensors) doc["tensors"].push_back({{"name", t.name}, {"dims", t.dims}, {"values", t.values}});
  write_text_file(path, doc.dump());
}

std::vector<NamedTensor> load_tensors(const std::filesystem::path& path, std::string* meta_json) {
  const json doc = json::parse(read_text_file(path));
  if (doc.value("format", "") != "ssf-tensors") throw std::runtime_error("not a tensor checkpoint: " + path.string());
  if (doc.value("version", 0) != 1) throw std::runtime_error("unsupported tensor checkpoint version");
  if (meta_json) *meta_json = doc["meta"].dump();
  std::vector<NamedTensor> out;
  for (const auto& t : doc["tensors"]) {
    NamedTensor nt{t["name"].get<std::string>(), t["dims"].get<std::vector<int>>(), t["values"].get<std::vector<double>>()};
    size_t expect = 1;
    for (int d : nt.dims) expect *= static_cast<size_t>(d);
    if (expect != nt.values.size()) throw std::runtime_error("tensor " + nt.name + " has inconsistent dims");
    out.push_back(std::move(nt));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const ConvNetModel& model) {
  std::vector<NamedTensor> ts;
  for (const auto& l : model.net.layers()) {
    ts.push_back({l.name + ".W", {static_cast<int>(l.W.rows()), static_cast<int>(l.W.cols())},
                  std::vector<double>(l.W.data(), l.W.data() + l.W.size())});
    ts.push_back({l.name + ".b", {static_cast<int>(l.b.size())}, std::vector<double>(l.b.data(), l.b.data() + l.b.size())});
  }
  const auto& c = model.net.config();
  json meta = {{"kind", "unet"},
               {"in_channels", c.in_channels},
               {"base", c.base},
               {"depth", c.depth},
               {"activation", c.activation == OutputActivation::sigmoid ? "sigmoid" : "identity"},
               {"scaling", {{"mode", model.scaling.mode == NormMode::minmax ? "minmax" : "standardize"},
                            {"a", model.scaling.a},
                            {"b", model.scaling.b}}}};
  save_tensors(path, ts, meta.dump());
}

ConvNetModel load_checkpoint(const std::filesystem::path& path) {
  std::string meta_text;
  const auto ts = load_tensors(path, &meta_text);
  const json meta = json::parse(meta_text);
  if (meta.value("kind", "") != "unet") throw std::runtime_error("checkpoint is not a U-Net: " + path.string());
  UNetConfig cfg{meta["in_channels"], meta["base"], meta["depth"],
                 meta["activation"] == "sigmoid" ? OutputActivation::sigmoid : OutputActivation::identity};
  ConvNetModel m{UNet(cfg, 0), {}};
  auto& layers = m.net.layers();
  if (ts.size() != 2 * layers.size()) throw std::runtime_error("checkpoint layer count mismatch");
  for (size_t i = 0; i < layers.size(); ++i) {
    const auto& w = ts[2 * i];
    const auto& b = ts[2 * i + 1];
    if (w.name != layers[i].name + ".W" || w.values.size() != static_cast<size_t>(layers[i].W.size()) ||
        b.values.size() != static_cast<size_t>(layers[i].b.size()))
      throw std::runtime_error("checkpoint tensor mismatch at " + layers[i].name);
    std::copy(w.values.begin(), w.values.end(), layers[i].W.data());
    std::copy(b.values.begin(), b.values.end(), layers[i].b.data());
  }
  const auto& s = meta["scaling"];
  m.scaling.mode = s["mode"] == "minmax" ? NormMode::minmax : NormMode::standardize;
  m.scaling.a = s["a"];
  m.scaling.b = s["b"];
  return m;
}

}  // namespace ssf::convnet
