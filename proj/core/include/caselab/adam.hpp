#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "caselab/tensor.hpp"

namespace caselab {

struct AdamConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// Adam with bias correction over a fixed set of named parameters. step()
// consumes each parameter's accumulated gradient and clears it; a parameter
// whose gradient was never populated since the last step is an error.
class AdamState {
 public:
  explicit AdamState(NamedTensors params, AdamConfig cfg = {});

  void step(float lr);
  int64_t step_count() const { return t_; }
  size_t num_params() const { return slots_.size(); }

 private:
  struct Slot {
    std::string name;
    Tensor* param;
    std::vector<float> m;
    std::vector<float> v;
  };
  std::vector<Slot> slots_;
  AdamConfig cfg_;
  int64_t t_ = 0;
};

// Linear interpolation from lr_start (step 0) to lr_end (step total-1).
float linear_lr(float lr_start, float lr_end, int step, int total_steps);

// In-place multiply of every accumulated gradient, e.g. to turn a sum over
// tasks into an average before an optimizer step.
void scale_grads(const NamedTensors& params, float factor);

void zero_grads(const NamedTensors& params);

}  // namespace caselab
