#include "protosteer/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace ps::optim {

AdamState::AdamState(std::vector<int64_t> shape, std::string param_name)
    : m(shape), v(std::move(shape)), name(std::move(param_name)) {}

void adam_step(AdamState& state, numkit::Tensor& param, const numkit::Tensor& grad, double lr) {
  if (!param.same_shape(grad)) {
    throw std::invalid_argument("adam_step(" + state.name + "): param " + param.shape_str() +
                                " vs grad " + grad.shape_str());
  }
  if (!state.m.same_shape(param)) {
    throw std::invalid_argument("adam_step(" + state.name + "): state shape " + state.m.shape_str() +
                                " vs param " + param.shape_str());
  }
  if (!grad.all_finite()) {
    throw std::runtime_error("adam_step: non-finite gradient for parameter '" + state.name + "'");
  }
  state.t += 1;
  const double b1 = state.beta1, b2 = state.beta2;
  const double corr1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double corr2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  float* pm = state.m.data();
  float* pv = state.v.data();
  float* pp = param.data();
  const float* pg = grad.data();
  for (int64_t i = 0; i < param.numel(); ++i) {
    const double g = pg[i];
    const double m = b1 * pm[i] + (1.0 - b1) * g;
    const double v = b2 * pv[i] + (1.0 - b2) * g * g;
    pm[i] = static_cast<float>(m);
    pv[i] = static_cast<float>(v);
    const double mhat = m / corr1;
    const double vhat = v / corr2;
    pp[i] = static_cast<float>(pp[i] - lr * mhat / (std::sqrt(vhat) + state.eps));
  }
}

int64_t LrSchedule::warmup_steps() const {
  return static_cast<int64_t>(std::llround(warmup_fraction * static_cast<double>(total_steps)));
}

double lr_at(const LrSchedule& s, int64_t step) {
  if (step < 0 || step > s.total_steps) {
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(s.total_steps) + "]");
  }
  const int64_t w = s.warmup_steps();
  if (step < w) {
    return s.base * static_cast<double>(step) / static_cast<double>(w);
  }
  if (step >= s.total_steps) {
    return s.total_steps == w ? s.base : 0.0;
  }
  const double span = static_cast<double>(s.total_steps - w);
  const double tpos = static_cast<double>(step - w) / span;
  const double pi = 3.14159265358979323846;
  return s.base * 0.5 * (1.0 + std::cos(pi * tpos));
}

}  // namespace ps::optim
