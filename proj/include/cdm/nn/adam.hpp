#pragma once

#include <vector>

#include "cdm/nn/layers.hpp"

namespace cdm::nn {

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // L2 penalty folded into the gradient.
  double weight_decay = 1e-5;
};

/// Adam with coupled L2 weight decay.
class Adam {
 public:
  Adam(ParamList params, AdamOptions options);

  void zero_grad() { zero_grads(params_); }
  void step();

  const AdamOptions& options() const noexcept { return options_; }
  long steps_taken() const noexcept { return step_; }

 private:
  ParamList params_;
  AdamOptions options_;
  std::vector<Tensor> first_moment_;
  std::vector<Tensor> second_moment_;
  long step_ = 0;
};

}  // namespace cdm::nn
