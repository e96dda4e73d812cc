#include "caselab/tensor.hpp"

#include <cmath>
#include <cstdio>

#include "caselab/errors.hpp"

namespace caselab {

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  s += "]";
  return s;
}

Tensor Tensor::zeros(std::vector<int> shape) {
  Tensor t;
  int64_t n = shape_numel(shape);
  t.shape = std::move(shape);
  t.data.assign(static_cast<size_t>(n), 0.f);
  return t;
}

Tensor Tensor::full(std::vector<int> shape, float value) {
  Tensor t = zeros(std::move(shape));
  for (auto& x : t.data) x = value;
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<float> values) {
  int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(values.size())) {
    throw ShapeError("Tensor::from: " + std::to_string(values.size()) +
                     " values for shape " + shape_str(shape));
  }
  Tensor t;
  t.shape = std::move(shape);
  t.data = std::move(values);
  return t;
}

void Tensor::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.f);
}

void Tensor::zero_grad() {
  grad.assign(data.size(), 0.f);
}

void Tensor::accumulate_grad(const std::vector<float>& g) {
  if (g.size() != data.size()) {
    throw ShapeError("accumulate_grad: gradient size mismatch");
  }
  ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

void check_finite(const std::vector<float>& v, const std::string& what) {
  for (size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericError(what + ": non-finite value at index " + std::to_string(i));
    }
  }
}

void check_finite(const Tensor& t, const std::string& what) {
  check_finite(t.data, what);
}

Tensor stack(const std::vector<Tensor>& items) {
  if (items.empty()) throw ShapeError("stack: empty list");
  const std::vector<int>& base = items[0].shape;
  std::vector<int> out_shape;
  out_shape.push_back(static_cast<int>(items.size()));
  out_shape.insert(out_shape.end(), base.begin(), base.end());
  Tensor out = Tensor::zeros(out_shape);
  size_t stride = items[0].data.size();
  for (size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape != base) {
      throw ShapeError("stack: item " + std::to_string(i) + " has shape " +
                       shape_str(items[i].shape) + ", expected " + shape_str(base));
    }
    std::copy(items[i].data.begin(), items[i].data.end(),
              out.data.begin() + static_cast<int64_t>(i * stride));
  }
  return out;
}

}  // namespace caselab
