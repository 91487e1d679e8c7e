#pragma once

#include <span>
#include <vector>

#include "cdm/tensor.hpp"

namespace cdm {

/// Discrete diffusion schedule over steps t = 0..T-1.
struct NoiseSchedule {
  int steps = 0;                   // T
  std::vector<double> betas;       // beta_t in (0, 1)
  std::vector<double> alphas;      // 1 - beta_t
  std::vector<double> alpha_bars;  // running product of alphas up to and including t

  double alpha_bar(int t) const;
};

/// Decreasing timestep subsequence visited by the DDIM sampler.
struct TimestepSubsequence {
  std::vector<int> steps;
};

/// Marks the step after the last subsequence entry; ddim_step returns y0_hat.
inline constexpr int kTerminalStep = -1;

/// Betas linearly spaced from beta_start to beta_end inclusive.
NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end);

/// Builds a schedule from explicit betas (each in (0, 1)).
NoiseSchedule make_schedule_from_betas(std::vector<double> betas);

/// y_t = sqrt(abar_t) y0 + sqrt(1 - abar_t) eps, one timestep for every row.
Tensor forward_diffuse(const Tensor& y0, int t, const Tensor& eps, const NoiseSchedule& schedule);
/// Row-wise variant: row i of y0 is diffused to timesteps[i].
Tensor forward_diffuse(const Tensor& y0, std::span<const int> timesteps, const Tensor& eps,
                       const NoiseSchedule& schedule);

/// First entry is T-1; the rest step down by floor(T/n) and end at 0.
/// With n = 1 the single entry is T-1 and the sampler finishes from there.
TimestepSubsequence make_ddim_timesteps(int steps, int n_sampling);

/// Deterministic (eta = 0) DDIM update from t to t_prev given the network's
/// clean-signal prediction. t_prev == kTerminalStep returns y0_hat.
Tensor ddim_step(const Tensor& y_t, const Tensor& y0_hat, int t, int t_prev,
                 const NoiseSchedule& schedule);

}  // namespace cdm
