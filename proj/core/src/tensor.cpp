#include "trida/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "trida/errors.hpp"

namespace trida {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ValidationError("negative dimension in shape " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return shape.empty() ? 0 : n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
  if (values_.size() != shape_size(shape_)) {
    throw ValidationError("tensor of shape " + shape_string(shape_) + " given " + std::to_string(values_.size()) +
                          " values");
  }
}

int Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw ValidationError("axis out of range for shape " + shape_string(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

int Tensor::cols() const {
  if (shape_.empty() || shape_[0] == 0) return 0;
  return static_cast<int>(values_.size() / static_cast<std::size_t>(shape_[0]));
}

MatrixMap Tensor::matrix() { return MatrixMap(values_.data(), rows(), cols()); }

ConstMatrixMap Tensor::matrix() const { return ConstMatrixMap(values_.data(), rows(), cols()); }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != values_.size()) {
    throw ValidationError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), values_);
}

void Tensor::fill(double value) { std::fill(values_.begin(), values_.end(), value); }

double Tensor::item() const {
  if (values_.size() != 1) throw ValidationError("item() on tensor of shape " + shape_string(shape_));
  return values_[0];
}

Tensor gather_rows(const Tensor& source, std::span<const int> indices) {
  Shape shape = source.shape();
  const std::size_t stride = static_cast<std::size_t>(source.cols());
  shape[0] = static_cast<int>(indices.size());
  Tensor out(shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int r = indices[i];
    if (r < 0 || r >= source.rows()) throw ValidationError("row index " + std::to_string(r) + " out of range");
    std::copy_n(source.data() + static_cast<std::size_t>(r) * stride, stride, out.data() + i * stride);
  }
  return out;
}

Tensor slice_rows(const Tensor& source, int begin, int end) {
  std::vector<int> idx(static_cast<std::size_t>(std::max(0, end - begin)));
  std::iota(idx.begin(), idx.end(), begin);
  return gather_rows(source, idx);
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw ValidationError("stack of zero tensors");
  Shape shape = items.front().shape();
  const std::size_t each = items.front().size();
  shape.insert(shape.begin(), static_cast<int>(items.size()));
  Tensor out(shape);
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != items.front().shape()) {
      throw ValidationError("stack: shape " + shape_string(items[i].shape()) + " differs from " +
                            shape_string(items.front().shape()));
    }
    std::copy_n(items[i].data(), each, out.data() + i * each);
  }
  return out;
}

Tensor row(const Tensor& batch, int i) {
  Shape shape(batch.shape().begin() + 1, batch.shape().end());
  if (shape.empty()) shape = {1};
  const std::size_t stride = static_cast<std::size_t>(batch.cols());
  std::vector<double> values(batch.data() + static_cast<std::size_t>(i) * stride,
                             batch.data() + static_cast<std::size_t>(i + 1) * stride);
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace trida
