#include "clusterbreak/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

#include "clusterbreak/error.hpp"

namespace clusterbreak {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_parameter: return "invalid-parameter";
    case ErrorCode::invalid_shape: return "invalid-shape";
    case ErrorCode::shape_mismatch: return "shape-mismatch";
    case ErrorCode::length_mismatch: return "length-mismatch";
    case ErrorCode::io_error: return "io-error";
    case ErrorCode::empty_class: return "empty-class";
    case ErrorCode::degenerate_clustering: return "degenerate-clustering";
    case ErrorCode::invalid_target: return "invalid-target";
    case ErrorCode::singular_covariance: return "singular-covariance";
    case ErrorCode::insufficient_data: return "insufficient-data";
    case ErrorCode::degenerate_variance: return "degenerate-variance";
    case ErrorCode::unknown_token: return "unknown-token";
    case ErrorCode::payload_too_large: return "payload-too-large";
    case ErrorCode::empty_album: return "empty-album";
    case ErrorCode::not_grouped: return "not-grouped-yet";
    case ErrorCode::rate_limited: return "rate-limited";
    case ErrorCode::service_error: return "service-error";
    case ErrorCode::config_validation: return "config-validation";
    case ErrorCode::missing_field: return "missing-field";
    case ErrorCode::schema_mismatch: return "schema-mismatch";
  }
  return "unknown";
}

std::optional<ErrorCode> error_code_from_string(std::string_view name) {
  for (int i = 0; i <= static_cast<int>(ErrorCode::schema_mismatch); ++i) {
    const auto code = static_cast<ErrorCode>(i);
    if (to_string(code) == name) return code;
  }
  return std::nullopt;
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t acc, int d) { return acc * static_cast<std::size_t>(d); });
}

std::string shape_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
  for (int d : shape_) require(d >= 0, ErrorCode::invalid_shape, "negative tensor extent");
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
  require(data_.size() == shape_size(shape_), ErrorCode::invalid_shape,
          "value count does not match shape " + shape_string(shape_));
}

std::size_t Tensor::sample_size() const {
  if (shape_.empty() || shape_[0] == 0) return 0;
  return data_.size() / static_cast<std::size_t>(shape_[0]);
}

std::span<double> Tensor::sample(std::size_t i) {
  const std::size_t s = sample_size();
  return std::span<double>(data_).subspan(i * s, s);
}

std::span<const double> Tensor::sample(std::size_t i) const {
  const std::size_t s = sample_size();
  return std::span<const double>(data_).subspan(i * s, s);
}

double& Tensor::at(int n, int c, int h, int w) {
  return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

double Tensor::at(int n, int c, int h, int w) const {
  return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

Tensor Tensor::reshaped(Shape shape) const {
  require(shape_size(shape) == data_.size(), ErrorCode::invalid_shape,
          "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Matrix Tensor::as_matrix() const {
  const auto rows = shape_.empty() ? 0 : static_cast<Eigen::Index>(shape_[0]);
  const auto cols = static_cast<Eigen::Index>(sample_size());
  return Eigen::Map<const Matrix>(data_.data(), rows, cols);
}

Tensor Tensor::from_matrix(const Matrix& m) {
  Tensor t({static_cast<int>(m.rows()), static_cast<int>(m.cols())});
  Eigen::Map<Matrix>(t.data(), m.rows(), m.cols()) = m;
  return t;
}

Tensor& Tensor::operator+=(const Tensor& other) {
  require(shape_ == other.shape_, ErrorCode::shape_mismatch,
          "tensor add " + shape_string(shape_) + " vs " + shape_string(other.shape_));
  std::transform(data_.begin(), data_.end(), other.data_.begin(), data_.begin(), std::plus<>());
  return *this;
}

Tensor& Tensor::operator*=(double scale) {
  for (double& v : data_) v *= scale;
  return *this;
}

Tensor gather_samples(const Tensor& source, std::span<const int> indices) {
  Shape shape = source.shape();
  shape[0] = static_cast<int>(indices.size());
  Tensor out(shape);
  const std::size_t s = source.sample_size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] >= 0 && indices[i] < source.dim(0), ErrorCode::invalid_parameter,
            "sample index out of range");
    auto src = source.sample(static_cast<std::size_t>(indices[i]));
    std::copy(src.begin(), src.end(), out.data() + i * s);
  }
  return out;
}

}  // namespace clusterbreak
