#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>

#include "cdm/nn/layers.hpp"
#include "cdm/rng.hpp"
#include "cdm/tensor.hpp"

namespace cdm::testing {

struct GradCheck {
  double max_rel_error = 0.0;
  int checked = 0;
  std::string worst;  // parameter and index of the largest error
};

/// Relative disagreement of two derivative estimates. Magnitudes below 1e-8
/// are compared against that floor so vanishing gradients do not divide by 0.
inline double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / scale;
}

inline std::string fmt_sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6e", v);
  return buf;
}

/// Fourth-order central difference of `loss` in the variable `x`, restored afterwards.
inline double five_point(double& x, double h, const std::function<double()>& loss) {
  const double saved = x;
  auto at = [&](double offset) {
    x = saved + offset;
    return loss();
  };
  const double d = (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12 * h);
  x = saved;
  return d;
}

/// Compares the gradients already accumulated in `params` with central
/// differences of `loss`. Checks up to `per_param` entries of each tensor,
/// spread evenly.
inline GradCheck check_param_gradients(const nn::ParamList& params,
                                       const std::function<double()>& loss, int per_param = 24,
                                       double h = 1e-4) {
  GradCheck out;
  for (nn::Param* p : params) {
    const std::size_t n = p->value.size();
    const std::size_t step = std::max<std::size_t>(1, n / per_param);
    for (std::size_t i = 0; i < n; i += step) {
      const double numeric = five_point(p->value[i], h, loss);
      const double err = relative_error(p->grad[i], numeric);
      ++out.checked;
      if (err > out.max_rel_error) {
        out.max_rel_error = err;
        out.worst = p->name + "[" + std::to_string(i) + "] analytic " + std::to_string(p->grad[i]) +
                    " numeric " + fmt_sci(numeric);
      }
    }
  }
  return out;
}

/// Same comparison for the gradient with respect to an input tensor.
inline GradCheck check_input_gradient(Tensor& input, const Tensor& analytic,
                                      const std::function<double()>& loss, double h = 1e-4) {
  GradCheck out;
  for (std::size_t i = 0; i < input.size(); ++i) {
    const double err = relative_error(analytic[i], five_point(input[i], h, loss));
    ++out.checked;
    if (err > out.max_rel_error) {
      out.max_rel_error = err;
      out.worst = "input[" + std::to_string(i) + "]";
    }
  }
  return out;
}

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

inline Tensor uniform_tensor(std::vector<int> shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace cdm::testing
