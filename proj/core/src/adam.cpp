#include "caselab/adam.hpp"

#include <cmath>

#include "caselab/errors.hpp"

namespace caselab {

AdamState::AdamState(NamedTensors params, AdamConfig cfg) : cfg_(cfg) {
  slots_.reserve(params.size());
  for (auto& [name, p] : params) {
    if (!p) throw StateError("AdamState: null parameter '" + name + "'");
    Slot s;
    s.name = name;
    s.param = p;
    s.m.assign(p->data.size(), 0.f);
    s.v.assign(p->data.size(), 0.f);
    slots_.push_back(std::move(s));
  }
}

void AdamState::step(float lr) {
  ++t_;
  float bc1 = 1.f - std::pow(cfg_.beta1, static_cast<float>(t_));
  float bc2 = 1.f - std::pow(cfg_.beta2, static_cast<float>(t_));
  for (auto& s : slots_) {
    if (s.param->grad.empty())
      throw StateError("adam step: missing gradient for parameter '" + s.name + "'");
    check_finite(s.param->grad, "adam step: gradient of '" + s.name + "'");
    for (size_t i = 0; i < s.param->data.size(); ++i) {
      float g = s.param->grad[i];
      s.m[i] = cfg_.beta1 * s.m[i] + (1.f - cfg_.beta1) * g;
      s.v[i] = cfg_.beta2 * s.v[i] + (1.f - cfg_.beta2) * g * g;
      float mhat = s.m[i] / bc1;
      float vhat = s.v[i] / bc2;
      s.param->data[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
    s.param->clear_grad();
  }
}

float linear_lr(float lr_start, float lr_end, int step, int total_steps) {
  if (total_steps <= 1) return lr_start;
  float frac = static_cast<float>(step) / static_cast<float>(total_steps - 1);
  if (frac < 0.f) frac = 0.f;
  if (frac > 1.f) frac = 1.f;
  return lr_start + (lr_end - lr_start) * frac;
}

void scale_grads(const NamedTensors& params, float factor) {
  for (auto& [name, p] : params) {
    (void)name;
    for (auto& g : p->grad) g *= factor;
  }
}

void zero_grads(const NamedTensors& params) {
  for (auto& [name, p] : params) {
    (void)name;
    p->zero_grad();
  }
}

}  // namespace caselab
