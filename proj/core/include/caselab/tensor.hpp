#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace caselab {

int64_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Dense row-major f32 tensor. `grad`, when allocated, has the same length
// as `data`; an empty `grad` means "no gradient accumulated yet".
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, float value);
  static Tensor from(std::vector<int> shape, std::vector<float> values);

  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return shape_numel(shape); }
  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  void ensure_grad();
  void zero_grad();
  void clear_grad() { grad.clear(); }
  void accumulate_grad(const std::vector<float>& g);

  float& at(int64_t i) { return data[static_cast<size_t>(i)]; }
  float at(int64_t i) const { return data[static_cast<size_t>(i)]; }
};

using NamedTensors = std::vector<std::pair<std::string, Tensor*>>;

// Throws NumericError naming `what` if any element is NaN or Inf.
void check_finite(const std::vector<float>& v, const std::string& what);
void check_finite(const Tensor& t, const std::string& what);

// Stacks n tensors of identical shape [d...] into one [n, d...] tensor.
Tensor stack(const std::vector<Tensor>& items);

}  // namespace caselab
