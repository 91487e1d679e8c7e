#pragma once

#include <functional>
#include <vector>

#include "cdm/nn/adam.hpp"
#include "cdm/nn/layers.hpp"
#include "cdm/rng.hpp"
#include "cdm/tensor.hpp"

// Cross-conditioned UNet: translates source modalities to target modalities,
// fusing a latent condition into every encoder scale.

namespace cdm {

struct CunetConfig {
  int in_channels = 2;
  int out_channels = 2;
  int image_size = 64;
  int base_width = 32;
  int scales = 4;
  int latent_dim = 256;
  int cond_hidden = 0;          // 0 selects latent_dim
  int max_width_multiplier = 4; // channel widths double per scale up to this cap

  int width(int scale) const;
  int cond_hidden_width() const { return cond_hidden > 0 ? cond_hidden : latent_dim; }
};

/// Condition-embedding block of one encoder scale.
///
///   feature_repr = Conv1x1(SiLU(LayerNorm(feature)))
///   cond_repr    = Linear(SiLU(Linear(condition)))   broadcast over H, W
///   fused        = feature_repr + cond_repr
///   down         = Conv3x3/stride 2(fused)
class CondEmbed {
 public:
  struct Cache {
    Tensor feature;
    Tensor normed;
    Tensor activated;
    Tensor condition;
    Tensor cond_pre;
    Tensor cond_act;
    Tensor fused;
  };
  struct Output {
    Tensor fused;  // pre-downsample, also the skip feature for the decoder
    Tensor down;
  };

  CondEmbed() = default;
  CondEmbed(const std::string& name, int channels, int out_channels, int latent_dim, int hidden);

  void init(Rng& rng);
  Output forward(const Tensor& feature, const Tensor& condition, Cache* cache = nullptr) const;
  /// Returns the gradient with respect to `feature`.
  Tensor backward(const Cache& cache, const Tensor& grad_fused, const Tensor& grad_down);
  void collect(nn::ParamList& out);
  nn::ParamList condition_params();

  nn::FeatureNorm norm;
  nn::Conv2d proj;
  nn::Linear mlp_in;
  nn::Linear mlp_out;
  nn::Conv2d down;
};

class Cunet {
 public:
  struct DecoderCache {
    Tensor input;
    Tensor up_pre;
    Tensor concat;
    Tensor merge_pre;
  };
  struct Cache {
    Tensor input;
    std::vector<CondEmbed::Cache> encoder;
    Tensor bottleneck_in;
    Tensor bottleneck_mid_pre;
    Tensor bottleneck_mid;
    std::vector<DecoderCache> decoder;  // indexed by scale
    Tensor head_in;
  };

  explicit Cunet(const CunetConfig& config);

  void init(Rng& rng);

  /// source [N, in_channels, S, S], condition [N, D] -> [N, out_channels, S, S].
  Tensor forward(const Tensor& source, const Tensor& condition, Cache* cache = nullptr) const;
  void backward(const Cache& cache, const Tensor& grad_out);

  nn::ParamList params();
  /// Parameters of every condition branch (the per-scale MLPs).
  nn::ParamList condition_params();
  const CunetConfig& config() const noexcept { return config_; }
  CondEmbed& encoder_block(int scale) { return encoder_.at(scale); }

 private:
  void check_inputs(const Tensor& source, const Tensor& condition) const;

  CunetConfig config_;
  nn::Conv2d stem_;
  std::vector<CondEmbed> encoder_;
  nn::Conv2d bottleneck_a_;
  nn::Conv2d bottleneck_b_;
  std::vector<nn::Conv2d> up_;
  std::vector<nn::Conv2d> merge_;
  nn::Conv2d head_;
};

/// Mean over all pixels and channels of the squared difference.
double synthesis_loss(const Tensor& pred, const Tensor& gt);

struct SynthesisLoss {
  double value = 0.0;
  Tensor grad;
};
SynthesisLoss synthesis_loss_with_grad(const Tensor& pred, const Tensor& gt);

struct CunetTrainOptions {
  int epochs = 30;
  int batch_size = 12;
  nn::AdamOptions adam;
  std::function<void(int epoch, double loss)> on_epoch;
};

/// Minimizes synthesis_loss of forward(sources[i], conditions[i]) against targets[i].
std::vector<double> train_cunet(Cunet& model, const Tensor& sources, const Tensor& targets,
                                const Tensor& conditions, const CunetTrainOptions& options,
                                Rng& rng);

}  // namespace cdm
