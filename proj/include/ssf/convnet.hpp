#pragma once

#include "ssf/grid.hpp"
#include "ssf/preprocess.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ssf::convnet {

/// Batch x channels x height x width, row-major.
struct Tensor4 {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> data;

  Tensor4() = default;
  Tensor4(int n, int c, int h, int w);
  double& at(int b, int ch, int y, int x) { return data[((static_cast<size_t>(b) * c + ch) * h + y) * w + x]; }
  double at(int b, int ch, int y, int x) const { return data[((static_cast<size_t>(b) * c + ch) * h + y) * w + x]; }
};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// One feature map: channels x (h*w).
struct Activation {
  int h = 0, w = 0;
  RowMat m;
  int channels() const { return static_cast<int>(m.rows()); }
};

struct ConvLayer {
  std::string name;
  int cin = 0, cout = 0, k = 3;
  Eigen::MatrixXd W;  // cout x (cin*k*k)
  Eigen::VectorXd b;
};

struct ConvGrad {
  Eigen::MatrixXd W;
  Eigen::VectorXd b;
};

// Layer primitives. 3x3 convs use zero padding 1; 1x1 convs none.
Activation conv2d_forward(const ConvLayer& layer, const Activation& x);
/// Accumulates parameter gradients into g and returns the input gradient.
Activation conv2d_backward(const ConvLayer& layer, const Activation& x, const Activation& dy, ConvGrad& g);
void relu_inplace(Activation& x);
/// Zeroes dy where the forward output was not positive.
void relu_backward_inplace(Activation& dy, const Activation& out);
Activation maxpool2(const Activation& x, std::vector<int>& argmax);
Activation maxpool2_backward(const Activation& dy, const std::vector<int>& argmax, int h, int w);
Activation upsample_nearest(const Activation& x);
Activation upsample_nearest_backward(const Activation& dy);
Activation concat_channels(const Activation& a, const Activation& b);

enum class OutputActivation { sigmoid, identity };

struct UNetConfig {
  int in_channels = 1;
  int base = 16;
  int depth = 2;
  OutputActivation activation = OutputActivation::sigmoid;
};

struct Workspace;

/// Encoder: stem conv, then one conv per level after each 2x2 pool; the deepest level is
/// the bottleneck. Decoder: nearest upsample + conv, concatenation with the encoder skip,
/// conv. All 3x3 convs are followed by ReLU; a 1x1 head maps to one channel.
class UNet {
 public:
  UNet() = default;
  UNet(const UNetConfig& cfg, std::uint64_t seed);

  const UNetConfig& config() const { return cfg_; }
  std::vector<ConvLayer>& layers() { return layers_; }
  const std::vector<ConvLayer>& layers() const { return layers_; }
  ConvLayer& head() { return layers_.back(); }
  void set_activation(OutputActivation a) { cfg_.activation = a; }

  /// Input h and w must be divisible by 2^depth.
  Activation forward(const Activation& x, Workspace* ws = nullptr) const;
  /// dy is the gradient w.r.t. the network output of the matching forward call.
  void backward(const Activation& dy, Workspace& ws, std::vector<ConvGrad>& grads) const;
  Tensor4 forward(const Tensor4& x) const;

  int n_params() const;
  std::vector<double> flat_params() const;
  void set_flat_params(const std::vector<double>& p);
  std::vector<ConvGrad> zero_grads() const;
  static std::vector<double> flatten(const std::vector<ConvGrad>& g);

 private:
  int up_index(int level) const { return 2 + cfg_.depth + 2 * (cfg_.depth - 1 - level); }
  int merge_index(int level) const { return up_index(level) + 1; }
  void check_input(const Activation& x) const;

  UNetConfig cfg_;
  std::vector<ConvLayer> layers_;
};

struct Workspace {
  std::vector<Activation> in;   // input of each conv layer
  std::vector<Activation> out;  // ReLU output of each 3x3 conv; head pre-activation
  std::vector<std::vector<int>> argmax;
  std::vector<std::pair<int, int>> pooled_from;  // h, w before each pool
  Activation output;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamState {
  std::vector<double> m, v;
  long t = 0;
};

/// Adam with bias correction; weight decay is decoupled (w -= lr * wd * w).
void adam_step(std::vector<double>& w, const std::vector<double>& g, AdamState& state, const AdamConfig& cfg);

enum class LossKind { squared, pinball };

/// Normalized maps of one split. inputs[i] and targets[i] describe the same step; targets
/// hold n_lat*n_lon values and mask marks cells that enter the loss.
struct SpatialData {
  std::vector<FeatureStack> inputs;
  std::vector<std::vector<double>> targets;
  std::vector<char> mask;
  int size() const { return static_cast<int>(inputs.size()); }
  SpatialData subset(const std::vector<int>& idx) const;
};

/// Mean loss over masked cells of all items, and its gradient w.r.t. every parameter.
double loss_and_grad(const UNet& net, const SpatialData& data, const std::vector<int>& items, LossKind kind,
                     double alpha, std::vector<double>* grad, int threads = 1);
double evaluate_loss(const UNet& net, const SpatialData& data, LossKind kind, double alpha = 0.5);

struct TrainOptions {
  int epochs = 60;
  int batch = 8;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  int threads = 1;
};

struct EpochRecord {
  int epoch;
  double train_loss;
  double val_loss;  // NaN without validation data
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::string to_csv() const;
};

TrainLog train_regression(UNet& net, const SpatialData& train, const SpatialData* val, const TrainOptions& opts);
/// Fine-tunes regression weights on the pinball loss. A sigmoid head is replaced by an
/// identity head refitted by least squares on the penultimate features.
TrainLog train_quantile(UNet& net, double alpha, const SpatialData& train, const SpatialData* val,
                        const TrainOptions& opts);

/// Per-cell network output for one stack, padded by edge replication when needed.
std::vector<double> predict_normalized(const UNet& net, const FeatureStack& stack);

struct TargetScaling {
  NormMode mode = NormMode::minmax;
  double a = 0.0, b = 1.0;
  double apply(double v) const;
  double invert(double v) const;
};

TargetScaling fit_target_scaling(const std::vector<double>& values, NormMode mode);

struct ConvNetModel {
  UNet net;
  TargetScaling scaling;
};

/// One forward pass, de-normalized; cells off the mask are flagged missing.
SpatialField predict_map(const ConvNetModel& model, const FeatureStack& stack, const LandMask& mask);

struct GridSearchResult {
  TrainOptions best;
  std::vector<std::pair<TrainOptions, double>> scores;  // mean validation MSE per candidate
};

/// k-fold cross-validation with contiguous time blocks.
GridSearchResult cv_grid_search(const UNetConfig& cfg, const SpatialData& train,
                                const std::vector<TrainOptions>& candidates, int folds, std::uint64_t seed);

/// Named tensors with dims, stored as JSON; shared by all network checkpoints.
struct NamedTensor {
  std::string name;
  std::vector<int> dims;
  std::vector<double> values;
};

void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors,
                  const std::string& meta_json = "{}");
std::vector<NamedTensor> load_tensors(const std::filesystem::path& path, std::string* meta_json = nullptr);

void save_checkpoint(const std::filesystem::path& path, const ConvNetModel& model);
ConvNetModel load_checkpoint(const std::filesystem::path& path);

/// Pads a map to the next multiple of `multiple` in both axes by edge replication.
Activation to_activation(const FeatureStack& stack, int multiple);

}  // namespace ssf::convnet
