#include "clusterbreak/nn.hpp"

#include <cmath>

#include "clusterbreak/error.hpp"

namespace clusterbreak::nn {

namespace {

using ConstMap = Eigen::Map<const Matrix>;
using MutMap = Eigen::Map<Matrix>;

// PyTorch-style default: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
void uniform_init(Tensor& t, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.values()) v = dist(rng);
}

void check_rank4(const Tensor& x, int channels, const char* who) {
  require(x.rank() == 4, ErrorCode::shape_mismatch,
          std::string(who) + " expects (b, c, h, w), got " + shape_string(x.shape()));
  require(x.dim(1) == channels, ErrorCode::shape_mismatch,
          std::string(who) + " expects " + std::to_string(channels) + " channels, got " +
              shape_string(x.shape()));
}

}  // namespace

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), padding_(padding),
      weight_({out_channels, in_channels, kernel, kernel}), bias_({out_channels}) {
  require(in_ > 0 && out_ > 0 && kernel_ > 0 && stride_ > 0 && padding_ >= 0,
          ErrorCode::invalid_parameter, "invalid Conv2d geometry");
}

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, Rng& rng)
    : Conv2d(in_channels, out_channels, kernel, stride, padding) {
  const int fan_in = in_channels * kernel * kernel;
  uniform_init(weight_, fan_in, rng);
  uniform_init(bias_, fan_in, rng);
}

Matrix Conv2d::im2col(const Tensor& x, int n, int oh, int ow) const {
  const int h = x.dim(2), w = x.dim(3);
  Matrix cols = Matrix::Zero(in_ * kernel_ * kernel_, oh * ow);
  for (int c = 0; c < in_; ++c) {
    for (int ki = 0; ki < kernel_; ++ki) {
      for (int kj = 0; kj < kernel_; ++kj) {
        const int row = (c * kernel_ + ki) * kernel_ + kj;
        for (int y = 0; y < oh; ++y) {
          const int iy = y * stride_ - padding_ + ki;
          if (iy < 0 || iy >= h) continue;
          for (int xo = 0; xo < ow; ++xo) {
            const int ix = xo * stride_ - padding_ + kj;
            if (ix < 0 || ix >= w) continue;
            cols(row, y * ow + xo) = x.at(n, c, iy, ix);
          }
        }
      }
    }
  }
  return cols;
}

void Conv2d::col2im(const Matrix& cols, Tensor& dx, int n, int oh, int ow) const {
  const int h = dx.dim(2), w = dx.dim(3);
  for (int c = 0; c < in_; ++c) {
    for (int ki = 0; ki < kernel_; ++ki) {
      for (int kj = 0; kj < kernel_; ++kj) {
        const int row = (c * kernel_ + ki) * kernel_ + kj;
        for (int y = 0; y < oh; ++y) {
          const int iy = y * stride_ - padding_ + ki;
          if (iy < 0 || iy >= h) continue;
          for (int xo = 0; xo < ow; ++xo) {
            const int ix = xo * stride_ - padding_ + kj;
            if (ix < 0 || ix >= w) continue;
            dx.at(n, c, iy, ix) += cols(row, y * ow + xo);
          }
        }
      }
    }
  }
}

Tensor Conv2d::forward(const Tensor& x) const {
  check_rank4(x, in_, "Conv2d");
  const int b = x.dim(0), oh = output_extent(x.dim(2)), ow = output_extent(x.dim(3));
  require(oh > 0 && ow > 0, ErrorCode::shape_mismatch, "Conv2d input too small");
  Tensor y({b, out_, oh, ow});
  const ConstMap w(weight_.data(), out_, in_ * kernel_ * kernel_);
  const Eigen::Map<const Vector> bias(bias_.data(), out_);
  for (int n = 0; n < b; ++n) {
    MutMap yn(y.sample(n).data(), out_, oh * ow);
    yn.noalias() = w * im2col(x, n, oh, ow);
    yn.colwise() += bias;
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& y, const Tensor& dy,
                        std::span<Tensor> param_grads) const {
  const int b = x.dim(0), oh = y.dim(2), ow = y.dim(3);
  const ConstMap w(weight_.data(), out_, in_ * kernel_ * kernel_);
  Tensor dx(x.shape());
  const bool want_params = !param_grads.empty();
  for (int n = 0; n < b; ++n) {
    const ConstMap dyn(dy.sample(n).data(), out_, oh * ow);
    const Matrix cols = want_params ? im2col(x, n, oh, ow) : Matrix();
    if (want_params) {
      MutMap dw(param_grads[0].data(), out_, in_ * kernel_ * kernel_);
      dw.noalias() += dyn * cols.transpose();
      Eigen::Map<Vector> db(param_grads[1].data(), out_);
      db += dyn.rowwise().sum();
    }
    const Matrix dcols = w.transpose() * dyn;
    col2im(dcols, dx, n, oh, ow);
  }
  return dx;
}

LayerSpec Conv2d::spec() const {
  return {"conv2d", {double(in_), double(out_), double(kernel_), double(stride_), double(padding_)}};
}

// ---------------------------------------------------------------- Dense

Dense::Dense(int in_features, int out_features)
    : in_(in_features), out_(out_features), weight_({out_features, in_features}), bias_({out_features}) {
  require(in_ > 0 && out_ > 0, ErrorCode::invalid_parameter, "invalid Dense geometry");
}

Dense::Dense(int in_features, int out_features, Rng& rng) : Dense(in_features, out_features) {
  uniform_init(weight_, in_features, rng);
  uniform_init(bias_, in_features, rng);
}

Tensor Dense::forward(const Tensor& x) const {
  require(x.rank() >= 1 && x.sample_size() == static_cast<std::size_t>(in_), ErrorCode::shape_mismatch,
          "Dense expects " + std::to_string(in_) + " features per sample, got " + shape_string(x.shape()));
  const int b = x.dim(0);
  Tensor y({b, out_});
  const ConstMap xm(x.data(), b, in_);
  const ConstMap w(weight_.data(), out_, in_);
  MutMap ym(y.data(), b, out_);
  ym.noalias() = xm * w.transpose();
  ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias_.data(), out_);
  return y;
}

Tensor Dense::backward(const Tensor& x, const Tensor& /*y*/, const Tensor& dy,
                       std::span<Tensor> param_grads) const {
  const int b = x.dim(0);
  const ConstMap xm(x.data(), b, in_);
  const ConstMap dym(dy.data(), b, out_);
  const ConstMap w(weight_.data(), out_, in_);
  if (!param_grads.empty()) {
    MutMap(param_grads[0].data(), out_, in_).noalias() += dym.transpose() * xm;
    Eigen::Map<Eigen::RowVectorXd>(param_grads[1].data(), out_) += dym.colwise().sum();
  }
  Tensor dx(x.shape());
  MutMap(dx.data(), b, in_).noalias() = dym * w;
  return dx;
}

LayerSpec Dense::spec() const { return {"dense", {double(in_), double(out_)}}; }

// ---------------------------------------------------------------- activations

Tensor LeakyRelu::forward(const Tensor& x) const {
  Tensor y = x;
  for (double& v : y.values())
    if (v < 0.0) v *= slope_;
  return y;
}

Tensor LeakyRelu::backward(const Tensor& x, const Tensor&, const Tensor& dy, std::span<Tensor>) const {
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (x[i] < 0.0) dx[i] *= slope_;
  return dx;
}

Tensor ScaledTanh::forward(const Tensor& x) const {
  Tensor y = x;
  for (double& v : y.values()) v = scale_ * std::tanh(v);
  return y;
}

Tensor ScaledTanh::backward(const Tensor&, const Tensor& y, const Tensor& dy, std::span<Tensor>) const {
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i) {
    const double t = y[i] / scale_;
    dx[i] *= scale_ * (1.0 - t * t);
  }
  return dx;
}

Tensor Sigmoid::forward(const Tensor& x) const {
  Tensor y = x;
  for (double& v : y.values()) v = 1.0 / (1.0 + std::exp(-v));
  return y;
}

Tensor Sigmoid::backward(const Tensor&, const Tensor& y, const Tensor& dy, std::span<Tensor>) const {
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= y[i] * (1.0 - y[i]);
  return dx;
}

Tensor Reshape::forward(const Tensor& x) const {
  Shape shape{x.dim(0)};
  shape.insert(shape.end(), sample_shape_.begin(), sample_shape_.end());
  return x.reshaped(std::move(shape));
}

Tensor Reshape::backward(const Tensor& x, const Tensor&, const Tensor& dy, std::span<Tensor>) const {
  return dy.reshaped(x.shape());
}

LayerSpec Reshape::spec() const {
  LayerSpec s{"reshape", {}};
  for (int d : sample_shape_) s.args.push_back(d);
  return s;
}

Tensor Upsample2::forward(const Tensor& x) const {
  require(x.rank() == 4, ErrorCode::shape_mismatch, "Upsample2 expects rank-4 input");
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor y({b, c, 2 * h, 2 * w});
  for (int n = 0; n < b; ++n)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < 2 * h; ++i)
        for (int j = 0; j < 2 * w; ++j) y.at(n, ch, i, j) = x.at(n, ch, i / 2, j / 2);
  return y;
}

Tensor Upsample2::backward(const Tensor& x, const Tensor&, const Tensor& dy, std::span<Tensor>) const {
  Tensor dx(x.shape());
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  for (int n = 0; n < b; ++n)
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < 2 * h; ++i)
        for (int j = 0; j < 2 * w; ++j) dx.at(n, ch, i / 2, j / 2) += dy.at(n, ch, i, j);
  return dx;
}

std::unique_ptr<Layer> make_layer(const LayerSpec& spec) {
  const auto& a = spec.args;
  auto arg = [&](std::size_t i) {
    require(i < a.size(), ErrorCode::schema_mismatch, "layer '" + spec.kind + "' is missing arguments");
    return static_cast<int>(a[i]);
  };
  if (spec.kind == "conv2d") return std::make_unique<Conv2d>(arg(0), arg(1), arg(2), arg(3), arg(4));
  if (spec.kind == "dense") return std::make_unique<Dense>(arg(0), arg(1));
  if (spec.kind == "leaky_relu") return std::make_unique<LeakyRelu>(a.at(0));
  if (spec.kind == "scaled_tanh") return std::make_unique<ScaledTanh>(a.at(0));
  if (spec.kind == "sigmoid") return std::make_unique<Sigmoid>();
  if (spec.kind == "upsample2") return std::make_unique<Upsample2>();
  if (spec.kind == "reshape") {
    Shape s;
    for (double d : a) s.push_back(static_cast<int>(d));
    return std::make_unique<Reshape>(std::move(s));
  }
  fail(ErrorCode::schema_mismatch, "unknown layer kind '" + spec.kind + "'");
}

// ---------------------------------------------------------------- Sequential

Sequential::Sequential(const Sequential& other) {
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Sequential& Sequential::operator=(const Sequential& other) {
  if (this != &other) {
    layers_.clear();
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
  }
  return *this;
}

void Sequential::add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }

Tensor Sequential::forward(const Tensor& x) const {
  Tensor h = x;
  for (const auto& l : layers_) h = l->forward(h);
  return h;
}

Tensor Sequential::forward(const Tensor& x, Trace& trace) const {
  trace.activations.clear();
  trace.activations.reserve(layers_.size() + 1);
  trace.activations.push_back(x);
  for (const auto& l : layers_) trace.activations.push_back(l->forward(trace.activations.back()));
  return trace.activations.back();
}

Tensor Sequential::backward(const Trace& trace, const Tensor& dy, Gradients* grads) const {
  require(trace.activations.size() == layers_.size() + 1, ErrorCode::invalid_parameter,
          "trace does not belong to this network");
  std::vector<std::size_t> offsets(layers_.size() + 1, 0);
  for (std::size_t i = 0; i < layers_.size(); ++i)
    offsets[i + 1] = offsets[i] + layers_[i]->parameters().size();

  Tensor g = dy;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    std::span<Tensor> pg;
    if (grads != nullptr && offsets[i + 1] > offsets[i])
      pg = std::span<Tensor>(grads->data() + offsets[i], offsets[i + 1] - offsets[i]);
    g = layers_[i]->backward(trace.activations[i], trace.activations[i + 1], g, pg);
  }
  return g;
}

std::vector<Tensor*> Sequential::parameters() {
  std::vector<Tensor*> out;
  for (auto& l : layers_)
    for (Tensor* p : l->parameters()) out.push_back(p);
  return out;
}

std::vector<const Tensor*> Sequential::parameters() const {
  std::vector<const Tensor*> out;
  for (const auto& l : layers_)
    for (const Tensor* p : std::as_const(*l).parameters()) out.push_back(p);
  return out;
}

Gradients Sequential::zero_gradients() const {
  Gradients g;
  for (const Tensor* p : parameters()) g.emplace_back(p->shape());
  return g;
}

std::size_t Sequential::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* p : parameters()) n += p->size();
  return n;
}

std::vector<LayerSpec> Sequential::specs() const {
  std::vector<LayerSpec> out;
  for (const auto& l : layers_) out.push_back(l->spec());
  return out;
}

Sequential Sequential::from_specs(const std::vector<LayerSpec>& specs) {
  Sequential net;
  for (const auto& s : specs) net.add(make_layer(s));
  return net;
}

// ---------------------------------------------------------------- Adam

Adam::Adam(std::vector<Tensor*> params, AdamSettings settings)
    : params_(std::move(params)), settings_(settings) {
  for (const Tensor* p : params_) {
    m_.emplace_back(p->shape());
    v_.emplace_back(p->shape());
  }
}

void Adam::step(const Gradients& grads) {
  require(grads.size() == params_.size(), ErrorCode::invalid_parameter, "gradient count mismatch");
  ++t_;
  const double b1 = settings_.beta1, b2 = settings_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = *params_[i];
    const Tensor& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m_[i][j] = b1 * m_[i][j] + (1.0 - b1) * g[j];
      v_[i][j] = b2 * v_[i][j] + (1.0 - b2) * g[j] * g[j];
      p[j] -= settings_.learning_rate * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + settings_.epsilon);
    }
  }
}

void clip_gradients(Gradients& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (double v : g.values()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0)
    for (Tensor& g : grads) g *= max_norm / norm;
}

}  // namespace clusterbreak::nn
