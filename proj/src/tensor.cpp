// SPDX-License-Identifier: Apache-2.0
#include "instatune/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace instatune {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
  for (auto e : shape_)
    if (e == 0) throw StructuralError("tensor extents must be positive");
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto e : shape_)
    if (e == 0) throw StructuralError("tensor extents must be positive");
  if (shape_size(shape_) != data_.size())
    throw StructuralError("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_string(shape_));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

Tensor Tensor::scalar(double value) { return Tensor({1, 1}, {value}); }

std::size_t Tensor::rows() const {
  if (rank() > 2) throw StructuralError("rows() on rank > 2 tensor");
  return rank() == 2 ? shape_[0] : 1;
}

std::size_t Tensor::cols() const {
  if (rank() > 2) throw StructuralError("cols() on rank > 2 tensor");
  return rank() == 0 ? 1 : shape_.back();
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

Tensor softmax(const Tensor& logits, std::size_t axis) {
  if (axis >= logits.rank())
    throw StructuralError("softmax axis " + std::to_string(axis) +
                          " out of range for shape " +
                          shape_string(logits.shape()));
  const auto& shape = logits.shape();
  std::size_t extent = shape[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  std::size_t outer = logits.size() / (extent * inner);

  Tensor out = logits;
  auto x = logits.data();
  auto y = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      std::size_t base = o * extent * inner + in;
      double mx = x[base];
      for (std::size_t k = 1; k < extent; ++k)
        mx = std::max(mx, x[base + k * inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < extent; ++k) {
        double e = std::exp(x[base + k * inner] - mx);
        y[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < extent; ++k) y[base + k * inner] /= total;
    }
  }
  return out;
}

}  // namespace instatune
