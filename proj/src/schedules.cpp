#include "cdm/schedules.hpp"

#include <cmath>
#include <string>

#include "cdm/error.hpp"

namespace cdm {

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t >= steps) {
    throw InvalidArgument("timestep " + std::to_string(t) + " outside [0, " +
                          std::to_string(steps) + ")");
  }
  return alpha_bars[t];
}

NoiseSchedule make_schedule_from_betas(std::vector<double> betas) {
  if (betas.empty()) throw InvalidArgument("noise schedule needs at least one step");
  NoiseSchedule s;
  s.steps = static_cast<int>(betas.size());
  s.alphas.resize(betas.size());
  s.alpha_bars.resize(betas.size());
  double running = 1.0;
  for (std::size_t t = 0; t < betas.size(); ++t) {
    if (!(betas[t] > 0.0 && betas[t] < 1.0)) {
      throw InvalidArgument("beta[" + std::to_string(t) + "] = " + std::to_string(betas[t]) +
                            " outside (0, 1)");
    }
    s.alphas[t] = 1.0 - betas[t];
    running *= s.alphas[t];
    s.alpha_bars[t] = running;
  }
  s.betas = std::move(betas);
  return s;
}

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw InvalidArgument("schedule length must be positive");
  if (!(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0)) {
    throw InvalidArgument("beta range must lie in (0, 1)");
  }
  if (beta_start > beta_end) throw InvalidArgument("beta_start must not exceed beta_end");
  std::vector<double> betas(steps);
  for (int t = 0; t < steps; ++t) {
    betas[t] = steps == 1 ? beta_start
                          : beta_start + (beta_end - beta_start) * t / static_cast<double>(steps - 1);
  }
  return make_schedule_from_betas(std::move(betas));
}

Tensor forward_diffuse(const Tensor& y0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
  require_same_shape(y0, eps, "forward_diffuse");
  const double ab = schedule.alpha_bar(t);
  const double signal = std::sqrt(ab), noise = std::sqrt(1.0 - ab);
  Tensor y = y0;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = signal * y0[i] + noise * eps[i];
  return y;
}

Tensor forward_diffuse(const Tensor& y0, std::span<const int> timesteps, const Tensor& eps,
                       const NoiseSchedule& schedule) {
  require_same_shape(y0, eps, "forward_diffuse");
  if (y0.rank() == 0 || static_cast<int>(timesteps.size()) != y0.dim(0)) {
    throw InvalidArgument("forward_diffuse: one timestep per row required");
  }
  const std::size_t row = y0.size() / timesteps.size();
  Tensor y = y0;
  for (std::size_t r = 0; r < timesteps.size(); ++r) {
    const double ab = schedule.alpha_bar(timesteps[r]);
    const double signal = std::sqrt(ab), noise = std::sqrt(1.0 - ab);
    for (std::size_t k = r * row; k < (r + 1) * row; ++k) y[k] = signal * y0[k] + noise * eps[k];
  }
  return y;
}

TimestepSubsequence make_ddim_timesteps(int steps, int n_sampling) {
  if (steps < 1) throw InvalidArgument("schedule length must be positive");
  if (n_sampling < 1 || n_sampling > steps) {
    throw InvalidArgument("n_sampling must lie in [1, " + std::to_string(steps) + "], got " +
                          std::to_string(n_sampling));
  }
  const int stride = steps / n_sampling;
  TimestepSubsequence seq;
  seq.steps.reserve(n_sampling);
  seq.steps.push_back(steps - 1);
  for (int i = 1; i < n_sampling; ++i) seq.steps.push_back((n_sampling - 1 - i) * stride);
  return seq;
}

Tensor ddim_step(const Tensor& y_t, const Tensor& y0_hat, int t, int t_prev,
                 const NoiseSchedule& schedule) {
  require_same_shape(y_t, y0_hat, "ddim_step");
  if (t_prev == kTerminalStep) return y0_hat;
  if (t_prev >= t) throw InvalidArgument("ddim_step requires t_prev < t");
  const double ab_t = schedule.alpha_bar(t);
  const double ab_prev = schedule.alpha_bar(t_prev);
  const double noise_t = std::sqrt(1.0 - ab_t);
  if (!(noise_t > 0.0)) {
    throw InvalidArgument("ddim_step: alpha_bar at t = " + std::to_string(t) +
                          " is 1, noise estimate undefined");
  }
  const double signal_t = std::sqrt(ab_t);
  const double signal_prev = std::sqrt(ab_prev), noise_prev = std::sqrt(1.0 - ab_prev);
  Tensor out = y_t;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double eps_hat = (y_t[i] - signal_t * y0_hat[i]) / noise_t;
    out[i] = signal_prev * y0_hat[i] + noise_prev * eps_hat;
  }
  return out;
}

}  // namespace cdm
