#pragma once

#include <functional>
#include <span>
#include <vector>

#include "cdm/nn/adam.hpp"
#include "cdm/nn/layers.hpp"
#include "cdm/rng.hpp"
#include "cdm/tensor.hpp"

// Masked-patch representation model: a convolutional autoencoder whose
// encoder output is the target-distribution latent.

namespace cdm {

/// Masked-cell grid over one image plane.
struct PatchMask {
  int patch_size = 1;
  int grid_h = 0;
  int grid_w = 0;
  std::vector<char> masked;  // row-major, grid_h * grid_w

  bool is_masked(int gy, int gx) const { return masked[static_cast<std::size_t>(gy) * grid_w + gx] != 0; }
  int masked_count() const;
  int height() const { return grid_h * patch_size; }
  int width() const { return grid_w * patch_size; }
};

/// Masks exactly round(ratio * cells) cells, chosen uniformly without replacement.
PatchMask sample_mask(int grid_h, int grid_w, int patch_size, double mask_ratio, Rng& rng);

/// One independent mask per (sample, channel) plane, in NC order.
std::vector<PatchMask> sample_plane_masks(int batch, int channels, int image_size, int patch_size,
                                          double mask_ratio, Rng& rng);

/// Replaces masked pixels with `fill`; the same mask is applied to every plane.
Tensor apply_mask(const Tensor& images, const PatchMask& mask, double fill);
/// Per-plane masks (N*C entries, NC order).
Tensor apply_mask(const Tensor& images, std::span<const PatchMask> plane_masks, double fill);

struct MaskedLoss {
  double value = 0.0;
  Tensor grad;  // d value / d pred
};

/// Mean over masked patches of the Euclidean norm of (pred - target) within
/// the patch. Masks are either one shared mask or one per plane.
double mrm_loss(const Tensor& pred, const Tensor& target, std::span<const PatchMask> masks);
double mrm_loss(const Tensor& pred, const Tensor& target, const PatchMask& mask);
MaskedLoss mrm_loss_with_grad(const Tensor& pred, const Tensor& target,
                              std::span<const PatchMask> masks);

struct MrmConfig {
  int channels = 2;
  int image_size = 64;
  int base_width = 16;
  int stages = 4;
  int latent_dim = 256;

  int stage_width(int i) const { return base_width << i; }
  int bottom_size() const { return image_size >> stages; }
};

struct MrmOutput {
  Tensor reconstruction;
  Tensor latent;  // [N, D]
};

class Mrm {
 public:
  struct Cache {
    std::vector<Tensor> enc_in;   // input of each encoder conv
    std::vector<Tensor> enc_pre;  // pre-activation of each encoder conv
    Tensor pooled;
    Tensor latent;
    Tensor dec_pre_seed;          // from_latent output reshaped, before SiLU
    std::vector<Tensor> dec_in;   // upsampled input of each decoder conv
    std::vector<Tensor> dec_pre;  // pre-activation of each decoder conv
  };

  explicit Mrm(const MrmConfig& config);

  void init(Rng& rng);

  MrmOutput forward(const Tensor& masked_targets, Cache* cache = nullptr) const;
  /// Encoder path only.
  Tensor encode(const Tensor& targets) const;
  /// Backpropagates a reconstruction gradient through decoder and encoder.
  void backward(const Cache& cache, const Tensor& grad_reconstruction);

  nn::ParamList params();
  const MrmConfig& config() const noexcept { return config_; }

  nn::Conv2d& output_layer() { return decoder_.back(); }
  nn::ParamList decoder_params();
  nn::ParamList encoder_params();

 private:
  Tensor encode_impl(const Tensor& x, Cache* cache) const;
  void check_input(const Tensor& x) const;

  MrmConfig config_;
  std::vector<nn::Conv2d> encoder_;
  nn::Linear to_latent_;
  nn::Linear from_latent_;
  std::vector<nn::Conv2d> decoder_;
};

struct MrmTrainOptions {
  int epochs = 20;
  int batch_size = 12;
  double mask_ratio = 0.6;
  int patch_size = 8;
  double fill = 0.0;
  nn::AdamOptions adam;
  std::function<void(int epoch, double loss)> on_epoch;
};

/// Gradient descent on the masked-patch loss. Returns mean loss per epoch.
/// Throws NumericError on a non-finite loss.
std::vector<double> train_mrm(Mrm& model, const Tensor& targets, const MrmTrainOptions& options,
                              Rng& rng);

}  // namespace cdm
