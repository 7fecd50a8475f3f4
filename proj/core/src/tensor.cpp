#include "tes/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace tes {

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  if (std::find(shape_.begin(), shape_.end(), 0u) != shape_.end())
    throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape_));
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (std::find(shape_.begin(), shape_.end(), 0u) != shape_.end())
    throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape_));
  if (shape_size(shape_) != data_.size())
    throw ShapeError("shape " + shape_string(shape_) + " does not hold " +
                     std::to_string(data_.size()) + " values");
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

double Tensor::item() const {
  if (data_.size() != 1)
    throw ShapeError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace tes

namespace tes {

void project_linf_ball(std::span<double> adv, std::span<const double> x, double eps) {
  if (adv.size() != x.size()) throw ShapeError("project_linf_ball: size mismatch");
  for (std::size_t i = 0; i < adv.size(); ++i) {
    double& a = adv[i];
    if (a - x[i] > eps) a = x[i] + eps;
    if (x[i] - a > eps) a = x[i] - eps;
    while (a - x[i] > eps) a = std::nextafter(a, x[i]);
    while (x[i] - a > eps) a = std::nextafter(a, x[i]);
  }
}

}  // namespace tes
