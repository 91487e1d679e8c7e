#pragma once

#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "cdm/nn/adam.hpp"
#include "cdm/nn/layers.hpp"
#include "cdm/rng.hpp"
#include "cdm/schedules.hpp"
#include "cdm/tensor.hpp"

// Modality-decoupled diffusion network: a vector denoiser over latents that
// predicts the clean latent y0 from y_t.

namespace cdm {

/// Interleaved sinusoidal features: [sin(t w_0), cos(t w_0), sin(t w_1), ...]
/// with w_i = 10000^(-i / (dim / 2)). Returns [dim].
Tensor timestep_embed(int t, int dim);
/// Batched form, [N, dim].
Tensor timestep_embed(std::span<const int> timesteps, int dim);

struct MdnConfig {
  int latent_dim = 256;
  int hidden = 0;  // 0 selects 4 * latent_dim
  int blocks = 3;
  int time_dim = 128;

  int hidden_width() const { return hidden > 0 ? hidden : 4 * latent_dim; }
};

class Mdn {
 public:
  struct BlockCache {
    Tensor input;
    nn::NormActLinear::Cache in;
    nn::NormActLinear::Cache time;
    nn::NormActLinear::Cache out;
  };
  struct Cache {
    Tensor first_half;
    Tensor second_half;
    Tensor embedding;
    std::vector<BlockCache> blocks;
    Tensor trunk;
  };

  explicit Mdn(const MdnConfig& config);

  void init(Rng& rng);

  /// y_t is [N, D]; one timestep per row.
  Tensor forward(const Tensor& y_t, std::span<const int> timesteps, Cache* cache = nullptr) const;
  Tensor forward(const Tensor& y_t, int t) const;
  void backward(const Cache& cache, const Tensor& grad_out);

  /// Outputs of the two decoupling maps on the two halves of y_t.
  std::pair<Tensor, Tensor> decouple(const Tensor& y_t) const;

  nn::ParamList params();
  /// Parameters of the residual trunk only.
  nn::ParamList block_params();
  const MdnConfig& config() const noexcept { return config_; }

 private:
  struct Block {
    nn::NormActLinear in;
    nn::NormActLinear time;
    nn::NormActLinear out;
  };

  void split(const Tensor& y_t, Tensor& first, Tensor& second) const;

  MdnConfig config_;
  nn::Linear decouple_a_;
  nn::Linear decouple_b_;
  std::vector<Block> blocks_;
  nn::Linear head_;
};

/// Any x0-predicting denoiser: (y_t, timesteps) -> y0_hat.
using Denoiser = std::function<Tensor(const Tensor& y_t, std::span<const int> timesteps)>;

/// Timesteps and noise drawn for one training batch.
struct NoiseDraw {
  std::vector<int> timesteps;
  Tensor eps;
  Tensor y_t;
};

NoiseDraw draw_training_noise(const Tensor& y0, const NoiseSchedule& schedule, Rng& rng);

/// Mean squared error between the prediction and y0, with its gradient.
struct RegressionLoss {
  double value = 0.0;
  Tensor grad;
};
RegressionLoss x0_regression_loss(const Tensor& pred, const Tensor& y0);

/// Training loss of an arbitrary denoiser on one noise draw.
double denoising_loss(const Denoiser& denoiser, const Tensor& y0, const NoiseDraw& draw);

/// Loss on a fixed draw; accumulates parameter gradients into `model`.
double mdn_loss_and_grad(Mdn& model, const Tensor& y0, const NoiseDraw& draw);

/// One optimizer step on a fresh noise draw. Returns the loss before the step.
double mdn_train_step(Mdn& model, nn::Adam& optimizer, const Tensor& y0_batch,
                      const NoiseSchedule& schedule, Rng& rng);

struct MdnTrainOptions {
  int epochs = 200;
  int batch_size = 12;
  nn::AdamOptions adam;
  std::function<void(int epoch, double loss)> on_epoch;
};

std::vector<double> train_mdn(Mdn& model, const Tensor& latents, const NoiseSchedule& schedule,
                              const MdnTrainOptions& options, Rng& rng);

/// Deterministic DDIM sampling of `count` latents starting from N(0, I).
Tensor ddim_sample(const Denoiser& denoiser, const NoiseSchedule& schedule, int n_sampling,
                   int count, int dim, Rng& rng);
Tensor mdn_sample(const Mdn& model, const NoiseSchedule& schedule, int n_sampling, int count,
                  Rng& rng);

}  // namespace cdm
