#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "dpkfc/matrix.hpp"
#include "dpkfc/rng.hpp"

namespace dpkfc::nn {

/// Channel-major activation geometry. Flat vectors use height = width = 1.
struct Shape {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t size() const { return channels * height * width; }
  bool flat() const { return height == 1 && width == 1; }
  bool operator==(const Shape&) const = default;
};

struct Linear {
  std::size_t in = 0;
  std::size_t out = 0;
  bool bias = true;
};

struct Conv2d {
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  std::size_t k = 3;
  std::size_t stride = 1;
  std::size_t pad = 0;
  bool bias = true;
};

enum class ActivationKind { relu, tanh };

struct Activation {
  ActivationKind kind = ActivationKind::relu;
};

struct Flatten {};

using LayerSpec = std::variant<Linear, Conv2d, Activation, Flatten>;

std::string describe(const LayerSpec& spec);
/// Inverse of describe(); throws ContractError on malformed text.
LayerSpec parse_layer(const std::string& text);

/// Geometry of one trainable layer in Kronecker form: the weight matrix is
/// [fan_out x (fan_in + bias)], the bias living in the last column.
struct TrainableInfo {
  std::size_t layer_index = 0;
  bool conv = false;
  bool bias = true;
  std::size_t fan_in = 0;     // in, or c_in * k * k
  std::size_t fan_out = 0;    // out, or c_out
  std::size_t locations = 1;  // output spatial positions per sample (1 for Linear)

  std::size_t a_dim() const { return fan_in + (bias ? 1 : 0); }
  std::size_t param_count() const { return fan_out * a_dim(); }
};

class Model {
 public:
  Model() = default;
  /// Validates that layer shapes compose; parameters start at zero.
  Model(Shape input, std::vector<LayerSpec> layers);

  /// Gaussian init with variance 2/fan_in before relu, 1/fan_in otherwise; zero bias.
  void init(Rng& rng);

  const Shape& input_shape() const { return input_; }
  std::size_t input_dim() const { return input_.size(); }
  const Shape& output_shape() const { return shapes_.back(); }
  std::size_t num_classes() const { return shapes_.back().size(); }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  /// Input shape of layer i; shape(layers().size()) is the output shape.
  const Shape& shape(std::size_t i) const { return shapes_[i]; }

  std::size_t num_trainable() const { return trainable_.size(); }
  const TrainableInfo& trainable(std::size_t t) const { return trainable_[t]; }
  /// Augmented weights [fan_out x (fan_in + bias)] of trainable layer t.
  Matrix& weights(std::size_t t) { return params_[t]; }
  const Matrix& weights(std::size_t t) const { return params_[t]; }
  std::vector<Matrix>& params() { return params_; }
  const std::vector<Matrix>& params() const { return params_; }

  std::size_t num_params() const;
  std::vector<double> flat_params() const;
  void set_flat_params(std::span<const double> flat);

 private:
  Shape input_;
  std::vector<LayerSpec> layers_;
  std::vector<Shape> shapes_;
  std::vector<TrainableInfo> trainable_;
  std::vector<Matrix> params_;
};

/// Per trainable layer record of a forward (and later backward) pass.
struct LayerRecord {
  /// a_{l-1}: [batch*locations x a_dim], augmented with a trailing 1 column when
  /// the layer has a bias. Conv layers hold im2col patch rows, sample-major.
  Matrix activations;
  /// s_l: [batch*locations x fan_out].
  Matrix preacts;
  /// delta_l = dloss/ds_l, same layout as preacts. Filled by backward().
  Matrix deltas;
};

struct Tape {
  std::size_t batch = 0;
  std::vector<Matrix> values;  // values[i] = input to layer i, [batch x shape(i).size()]
  std::vector<LayerRecord> records;
  bool has_backward = false;
};

struct ForwardResult {
  Matrix logits;
  Tape tape;
};

ForwardResult forward(const Model& model, const Matrix& x);
/// Logits only; skips tape bookkeeping.
Matrix predict(const Model& model, const Matrix& x);

struct LossResult {
  double mean_loss = 0.0;
  /// Gradient of each sample's own (unaveraged) loss: softmax - onehot.
  Matrix dlogits;
};

LossResult loss_ce(const Matrix& logits, std::span<const std::int64_t> labels);

/// per_sample[t][i] is sample i's gradient for trainable layer t, shaped like
/// Model::weights(t).
struct PerSampleGrads {
  std::vector<std::vector<Matrix>> per_sample;

  std::size_t batch() const { return per_sample.empty() ? 0 : per_sample.front().size(); }
  std::vector<Matrix> mean() const;
};

/// Backpropagates dlogits, fills tape deltas and returns exact per-sample grads.
PerSampleGrads backward(const Model& model, Tape& tape, const Matrix& dlogits);

/// Propagates dlogits and fills deltas without materialising per-sample grads.
void backward_deltas(const Model& model, Tape& tape, const Matrix& dlogits);

/// Per-sample gradient for sample i of trainable layer t from a backward tape.
Matrix sample_grad(const Model& model, const Tape& tape, std::size_t t, std::size_t i);

/// Gradient of the mean loss, computed from batch-level products.
std::vector<Matrix> batch_gradient(const Model& model, const Tape& tape);

/// Convenience: mean loss and its gradient for (x, y).
struct LossAndGrad {
  double loss = 0.0;
  std::vector<Matrix> grad;
};
LossAndGrad loss_and_gradient(const Model& model, const Matrix& x, std::span<const std::int64_t> labels);

/// Unfolds [batch x C*H*W] into receptive-field rows [batch*Ho*Wo x C*k*k],
/// columns ordered (c, ky, kx), rows ordered (b, oy, ox); zero padding.
Matrix im2col(const Matrix& x, const Shape& in, std::size_t k, std::size_t stride, std::size_t pad);

/// Output spatial size for a convolution; throws when the kernel does not fit.
std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad);

/// Fraction of rows whose argmax equals the label (ties go to the lowest index).
double accuracy(const Matrix& logits, std::span<const std::int64_t> labels);

}  // namespace dpkfc::nn
