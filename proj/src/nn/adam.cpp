#include "cdm/nn/adam.hpp"

#include <cmath>

namespace cdm::nn {

Adam::Adam(ParamList params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  first_moment_.reserve(params_.size());
  second_moment_.reserve(params_.size());
  for (const Param* p : params_) {
    first_moment_.push_back(Tensor::zeros_like(p->value));
    second_moment_.push_back(Tensor::zeros_like(p->value));
  }
}

void Adam::step() {
  ++step_;
  const double lr = options_.learning_rate;
  if (lr == 0.0) return;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Param& p = *params_[i];
    Tensor& m = first_moment_[i];
    Tensor& v = second_moment_[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k] + options_.weight_decay * p.value[k];
      m[k] = b1 * m[k] + (1.0 - b1) * g;
      v[k] = b2 * v[k] + (1.0 - b2) * g * g;
      p.value[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + options_.epsilon);
    }
  }
}

}  // namespace cdm::nn
