#pragma once

#include <cstdint>
#include <string>

#include "protosteer/tensor.hpp"

namespace ps::optim {

// Bias-corrected Adam. Moments are stored at tensor precision; the per-element
// update is computed in double so the bias-correction ratios stay exact for
// small step counts.
struct AdamState {
  AdamState() = default;
  AdamState(std::vector<int64_t> shape, std::string param_name);

  numkit::Tensor m;
  numkit::Tensor v;
  int64_t t = 0;
  std::string name;  // reported when a non-finite gradient is rejected
  double beta1 = 0.90;
  double beta2 = 0.99;
  double eps = 1e-8;
};

void adam_step(AdamState& state, numkit::Tensor& param, const numkit::Tensor& grad, double lr);

// Linear ramp 0 -> base over the first warmup_fraction of total_steps, then
// cosine decay base -> 0 over the remainder. Continuous at the boundary.
struct LrSchedule {
  double base = 3e-5;
  double warmup_fraction = 0.1;
  int64_t total_steps = 0;

  int64_t warmup_steps() const;
};

double lr_at(const LrSchedule& s, int64_t step);

}  // namespace ps::optim
