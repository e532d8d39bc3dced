#pragma once

// Minimal feed-forward network toolkit: layers with explicit backward passes,
// a sequential container that records activations, and Adam.
//
// Layers are stateless during evaluation (forward/backward are const and take
// the recorded activations), so a frozen network can be shared across threads.

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "clusterbreak/tensor.hpp"

namespace clusterbreak::nn {

using Rng = std::mt19937_64;

/// Architecture record for one layer; enough to rebuild it without weights.
struct LayerSpec {
  std::string kind;
  std::vector<double> args;

  bool operator==(const LayerSpec&) const = default;
};

class Layer {
 public:
  virtual ~Layer() = default;

  virtual Tensor forward(const Tensor& x) const = 0;

  /// Returns dL/dx. Parameter gradients are accumulated into `param_grads`
  /// (same order as parameters()) unless the span is empty.
  virtual Tensor backward(const Tensor& x, const Tensor& y, const Tensor& dy,
                          std::span<Tensor> param_grads) const = 0;

  virtual std::vector<Tensor*> parameters() { return {}; }
  virtual std::vector<const Tensor*> parameters() const { return {}; }

  virtual LayerSpec spec() const = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;
};

/// 2-D convolution over (batch, channel, height, width), square kernel.
class Conv2d final : public Layer {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, Rng& rng);
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding);

  Tensor forward(const Tensor& x) const override;
  Tensor backward(const Tensor& x, const Tensor& y, const Tensor& dy,
                  std::span<Tensor> param_grads) const override;
  std::vector<Tensor*> parameters() override { return {&weight_, &bias_}; }
  std::vector<const Tensor*> parameters() const override { return {&weight_, &bias_}; }
  LayerSpec spec() const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }

  int output_extent(int extent) const { return (extent + 2 * padding_ - kernel_) / stride_ + 1; }

 private:
  Matrix im2col(const Tensor& x, int n, int oh, int ow) const;
  void col2im(const Matrix& cols, Tensor& dx, int n, int oh, int ow) const;

  int in_, out_, kernel_, stride_, padding_;
  Tensor weight_;  // (out, in, k, k)
  Tensor bias_;    // (out)
};

/// Fully connected layer on (batch, features); higher-rank inputs are
/// treated as flattened per sample.
class Dense final : public Layer {
 public:
  Dense(int in_features, int out_features, Rng& rng);
  Dense(int in_features, int out_features);

  Tensor forward(const Tensor& x) const override;
  Tensor backward(const Tensor& x, const Tensor& y, const Tensor& dy,
                  std::span<Tensor> param_grads) const override;
  std::vector<Tensor*> parameters() override { return {&weight_, &bias_}; }
  std::vector<const Tensor*> parameters() const override { return {&weight_, &bias_}; }
  LayerSpec spec() const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dense>(*this); }

 private:
  int in_, out_;
  Tensor weight_;  // (out, in)
  Tensor bias_;    // (out)
};

class LeakyRelu final : public Layer {
 public:
  explicit LeakyRelu(double slope = 0.2) : slope_(slope) {}
  Tensor forward(const Tensor& x) const override;
  Tensor backward(const Tensor& x, const Tensor& y, const Tensor& dy,
                  std::span<Tensor> param_grads) const override;
  LayerSpec spec() const override { return {"leaky_relu", {slope_}}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<LeakyRelu>(*this); }

 private:
  double slope_;
};

/// y = scale * tanh(x); bounds every output element to [-scale, scale].
class ScaledTanh final : public Layer {
 public:
  explicit ScaledTanh(double scale = 1.0) : scale_(scale) {}
  Tensor forward(const Tensor& x) const override;
  Tensor backward(const Tensor& x, const Tensor& y, const Tensor& dy,
                  std::span<Tensor> param_grads) const override;
  LayerSpec spec() const override { return {"scaled_tanh", {scale_}}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ScaledTanh>(*this); }
  double scale() const { return scale_; }

 private:
  double scale_;
};

class Sigmoid final : public Layer {
 public:
  Tensor forward(const Tensor& x) const override;
  Tensor backward(const Tensor& x, const Tensor& y, const Tensor& dy,
                  std::span<Tensor> param_grads) const override;
  LayerSpec spec() const override { return {"sigmoid", {}}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Sigmoid>(*this); }
};

/// Reshapes each sample; the batch axis is preserved.
class Reshape final : public Layer {
 public:
  explicit Reshape(Shape sample_shape) : sample_shape_(std::move(sample_shape)) {}
  Tensor forward(const Tensor& x) const override;
  Tensor backward(const Tensor& x, const Tensor& y, const Tensor& dy,
                  std::span<Tensor> param_grads) const override;
  LayerSpec spec() const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Reshape>(*this); }

 private:
  Shape sample_shape_;
};

/// Nearest-neighbour 2x spatial upsampling.
class Upsample2 final : public Layer {
 public:
  Tensor forward(const Tensor& x) const override;
  Tensor backward(const Tensor& x, const Tensor& y, const Tensor& dy,
                  std::span<Tensor> param_grads) const override;
  LayerSpec spec() const override { return {"upsample2", {}}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Upsample2>(*this); }
};

std::unique_ptr<Layer> make_layer(const LayerSpec& spec);

using Gradients = std::vector<Tensor>;

/// Activations recorded by Sequential::forward; activations[0] is the input.
struct Trace {
  std::vector<Tensor> activations;
  const Tensor& output() const { return activations.back(); }
};

class Sequential {
 public:
  Sequential() = default;
  Sequential(const Sequential& other);
  Sequential& operator=(const Sequential& other);
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  template <class L, class... Args>
  L& emplace(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    add(std::move(layer));
    return ref;
  }
  void add(std::unique_ptr<Layer> layer);

  Tensor forward(const Tensor& x) const;
  Tensor forward(const Tensor& x, Trace& trace) const;

  /// Backpropagates `dy` through the recorded trace. When `grads` is non-null
  /// parameter gradients are accumulated into it.
  Tensor backward(const Trace& trace, const Tensor& dy, Gradients* grads) const;

  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  Gradients zero_gradients() const;
  std::size_t parameter_count() const;

  std::size_t layer_count() const { return layers_.size(); }
  const Layer& layer(std::size_t i) const { return *layers_.at(i); }

  std::vector<LayerSpec> specs() const;
  /// Rebuilds the architecture with zeroed parameters (weights are then
  /// loaded from a checkpoint).
  static Sequential from_specs(const std::vector<LayerSpec>& specs);

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

struct AdamSettings {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Tensor*> params, AdamSettings settings);

  void step(const Gradients& grads);
  std::int64_t steps() const { return t_; }

 private:
  std::vector<Tensor*> params_;
  AdamSettings settings_;
  std::vector<Tensor> m_, v_;
  std::int64_t t_ = 0;
};

/// Scales the gradient set so its global L2 norm does not exceed max_norm.
void clip_gradients(Gradients& grads, double max_norm);

}  // namespace clusterbreak::nn
