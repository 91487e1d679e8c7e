#pragma once

#include <string>
#include <vector>

#include "cdm/rng.hpp"
#include "cdm/tensor.hpp"

// Minimal layer library with hand-written backward passes.
//
// Layers are const during forward. Training code asks forward() to fill a
// Cache and hands that cache back to backward(), which accumulates parameter
// gradients and returns the gradient with respect to the layer input.

namespace cdm::nn {

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string n, std::vector<int> shape)
      : name(std::move(n)), value(shape), grad(std::move(shape)) {}
  void zero_grad() { grad.fill(0.0); }
};

using ParamList = std::vector<Param*>;

void zero_grads(const ParamList& params);

// ---------------------------------------------------------------------------
// Stateless activations and reshaping ops.

Tensor silu(const Tensor& x);
Tensor silu_backward(const Tensor& x, const Tensor& grad_out);

/// Nearest-neighbour 2x upsampling of NCHW.
Tensor upsample2x(const Tensor& x);
Tensor upsample2x_backward(const Tensor& grad_out);

/// [N, C, H, W] -> [N, C].
Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_backward(const Tensor& grad_out, int height, int width);

/// fmap[n, c, :, :] += vec[n, c].
Tensor add_broadcast(const Tensor& fmap, const Tensor& vec);
/// Gradient of add_broadcast with respect to `vec`.
Tensor sum_spatial(const Tensor& grad_out);

// ---------------------------------------------------------------------------

/// Affine map y = x W^T + b over [N, in].
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in_features, int out_features);

  void init(Rng& rng);
  Tensor forward(const Tensor& x) const;
  Tensor backward(const Tensor& x, const Tensor& grad_out);
  void collect(ParamList& out) { out.push_back(&weight); out.push_back(&bias); }

  int in_features() const noexcept { return in_; }
  int out_features() const noexcept { return out_; }

  Param weight;  // [out, in]
  Param bias;    // [out]

 private:
  int in_ = 0;
  int out_ = 0;
};

/// 2D convolution via im2col + GEMM. Square kernels, zero padding.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride,
         int padding);

  void init(Rng& rng);
  Tensor forward(const Tensor& x) const;
  Tensor backward(const Tensor& x, const Tensor& grad_out);
  void collect(ParamList& out) { out.push_back(&weight); out.push_back(&bias); }

  int out_size(int in_size) const noexcept { return (in_size + 2 * padding_ - kernel_) / stride_ + 1; }
  int in_channels() const noexcept { return in_; }
  int out_channels() const noexcept { return out_; }

  Param weight;  // [out, in * k * k]
  Param bias;    // [out]

 private:
  int in_ = 0;
  int out_ = 0;
  int kernel_ = 1;
  int stride_ = 1;
  int padding_ = 0;
};

/// Layer normalization over the last axis of [N, F] with learnable affine.
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(const std::string& name, int features);

  Tensor forward(const Tensor& x) const;
  Tensor backward(const Tensor& x, const Tensor& grad_out);
  void collect(ParamList& out) { out.push_back(&gamma); out.push_back(&beta); }

  Param gamma;
  Param beta;

  static constexpr double kEpsilon = 1e-5;
};

/// Layer normalization of a feature map over (C, H, W) per sample, with a
/// per-channel affine.
class FeatureNorm {
 public:
  FeatureNorm() = default;
  FeatureNorm(const std::string& name, int channels);

  Tensor forward(const Tensor& x) const;
  Tensor backward(const Tensor& x, const Tensor& grad_out);
  void collect(ParamList& out) { out.push_back(&gamma); out.push_back(&beta); }

  Param gamma;
  Param beta;

  static constexpr double kEpsilon = 1e-5;
};

/// LayerNorm -> SiLU -> Linear, the unit layer of the diffusion network.
class NormActLinear {
 public:
  struct Cache {
    Tensor input;
    Tensor normed;
    Tensor activated;
  };

  NormActLinear() = default;
  NormActLinear(const std::string& name, int in_features, int out_features);

  void init(Rng& rng) { linear.init(rng); }
  Tensor forward(const Tensor& x, Cache* cache = nullptr) const;
  Tensor backward(const Cache& cache, const Tensor& grad_out);
  void collect(ParamList& out) { norm.collect(out); linear.collect(out); }

  LayerNorm norm;
  Linear linear;
};

}  // namespace cdm::nn
