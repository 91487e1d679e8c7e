#include "cdm/nn/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "cdm/error.hpp"

namespace cdm::nn {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using ConstMapR = Eigen::Map<const MatR>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void uniform_init(Tensor& t, Rng& rng, double bound) {
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
}

void require_rank(const Tensor& x, int rank, const char* who) {
  if (x.rank() != rank) {
    throw InvalidArgument(std::string(who) + ": expected rank " + std::to_string(rank) +
                          ", got " + shape_string(x.shape()));
  }
}

// col is [C*k*k, Ho*Wo] for one sample.
void im2col(const double* x, int channels, int height, int width, int kernel, int stride,
            int padding, int out_h, int out_w, double* col) {
  const int plane = out_h * out_w;
  for (int c = 0; c < channels; ++c) {
    const double* xc = x + static_cast<std::size_t>(c) * height * width;
    for (int ki = 0; ki < kernel; ++ki) {
      for (int kj = 0; kj < kernel; ++kj) {
        double* row = col + static_cast<std::size_t>((c * kernel + ki) * kernel + kj) * plane;
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * stride - padding + ki;
          double* dst = row + oh * out_w;
          if (ih < 0 || ih >= height) {
            std::fill_n(dst, out_w, 0.0);
            continue;
          }
          const double* src = xc + static_cast<std::size_t>(ih) * width;
          for (int ow = 0; ow < out_w; ++ow) {
            const int iw = ow * stride - padding + kj;
            dst[ow] = (iw >= 0 && iw < width) ? src[iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* col, int channels, int height, int width, int kernel, int stride,
            int padding, int out_h, int out_w, double* x) {
  const int plane = out_h * out_w;
  for (int c = 0; c < channels; ++c) {
    double* xc = x + static_cast<std::size_t>(c) * height * width;
    for (int ki = 0; ki < kernel; ++ki) {
      for (int kj = 0; kj < kernel; ++kj) {
        const double* row =
            col + static_cast<std::size_t>((c * kernel + ki) * kernel + kj) * plane;
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * stride - padding + ki;
          if (ih < 0 || ih >= height) continue;
          double* dst = xc + static_cast<std::size_t>(ih) * width;
          const double* src = row + oh * out_w;
          for (int ow = 0; ow < out_w; ++ow) {
            const int iw = ow * stride - padding + kj;
            if (iw >= 0 && iw < width) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace

void zero_grads(const ParamList& params) {
  for (Param* p : params) p->zero_grad();
}

Tensor silu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = v * sigmoid(v);
  return y;
}

Tensor silu_backward(const Tensor& x, const Tensor& grad_out) {
  require_same_shape(x, grad_out, "silu_backward");
  Tensor g = grad_out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = sigmoid(x[i]);
    g[i] *= s * (1.0 + x[i] * (1.0 - s));
  }
  return g;
}

Tensor upsample2x(const Tensor& x) {
  require_rank(x, 4, "upsample2x");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor y({n, c, 2 * h, 2 * w});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int r = 0; r < 2 * h; ++r)
        for (int q = 0; q < 2 * w; ++q) y.at(i, ch, r, q) = x.at(i, ch, r / 2, q / 2);
  return y;
}

Tensor upsample2x_backward(const Tensor& grad_out) {
  require_rank(grad_out, 4, "upsample2x_backward");
  const int n = grad_out.dim(0), c = grad_out.dim(1), h = grad_out.dim(2) / 2,
            w = grad_out.dim(3) / 2;
  Tensor g({n, c, h, w});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int r = 0; r < 2 * h; ++r)
        for (int q = 0; q < 2 * w; ++q) g.at(i, ch, r / 2, q / 2) += grad_out.at(i, ch, r, q);
  return g;
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor y({n, c});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const double* p = &x.at(i, ch, 0, 0);
      double s = 0.0;
      for (std::size_t k = 0; k < hw; ++k) s += p[k];
      y.at(i, ch) = s / static_cast<double>(hw);
    }
  return y;
}

Tensor global_avg_pool_backward(const Tensor& grad_out, int height, int width) {
  require_rank(grad_out, 2, "global_avg_pool_backward");
  const int n = grad_out.dim(0), c = grad_out.dim(1);
  const double inv = 1.0 / (static_cast<double>(height) * width);
  Tensor g({n, c, height, width});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      std::fill_n(&g.at(i, ch, 0, 0), static_cast<std::size_t>(height) * width,
                  grad_out.at(i, ch) * inv);
  return g;
}

Tensor add_broadcast(const Tensor& fmap, const Tensor& vec) {
  require_rank(fmap, 4, "add_broadcast");
  require_rank(vec, 2, "add_broadcast");
  if (vec.dim(0) != fmap.dim(0) || vec.dim(1) != fmap.dim(1)) {
    throw InvalidArgument("add_broadcast: " + shape_string(vec.shape()) + " does not match " +
                          shape_string(fmap.shape()));
  }
  Tensor y = fmap;
  const std::size_t hw = static_cast<std::size_t>(fmap.dim(2)) * fmap.dim(3);
  for (int i = 0; i < fmap.dim(0); ++i)
    for (int ch = 0; ch < fmap.dim(1); ++ch) {
      double* p = &y.at(i, ch, 0, 0);
      const double v = vec.at(i, ch);
      for (std::size_t k = 0; k < hw; ++k) p[k] += v;
    }
  return y;
}

Tensor sum_spatial(const Tensor& grad_out) {
  require_rank(grad_out, 4, "sum_spatial");
  const int n = grad_out.dim(0), c = grad_out.dim(1);
  const std::size_t hw = static_cast<std::size_t>(grad_out.dim(2)) * grad_out.dim(3);
  Tensor g({n, c});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const double* p = &grad_out.at(i, ch, 0, 0);
      double s = 0.0;
      for (std::size_t k = 0; k < hw; ++k) s += p[k];
      g.at(i, ch) = s;
    }
  return g;
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(const std::string& name, int in_features, int out_features)
    : weight(name + ".weight", {out_features, in_features}),
      bias(name + ".bias", {out_features}),
      in_(in_features),
      out_(out_features) {
  if (in_features <= 0 || out_features <= 0) throw InvalidArgument("Linear: bad size for " + name);
}

void Linear::init(Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
  uniform_init(weight.value, rng, bound);
  uniform_init(bias.value, rng, bound);
}

Tensor Linear::forward(const Tensor& x) const {
  require_rank(x, 2, "Linear");
  if (x.dim(1) != in_) {
    throw InvalidArgument(weight.name + ": expected " + std::to_string(in_) + " features, got " +
                          std::to_string(x.dim(1)));
  }
  const int n = x.dim(0);
  Tensor y({n, out_});
  MapR ym(y.data(), n, out_);
  ym.noalias() = ConstMapR(x.data(), n, in_) * ConstMapR(weight.value.data(), out_, in_).transpose();
  ym.rowwise() += ConstVecMap(bias.value.data(), out_).transpose();
  return y;
}

Tensor Linear::backward(const Tensor& x, const Tensor& grad_out) {
  const int n = x.dim(0);
  ConstMapR gy(grad_out.data(), n, out_);
  ConstMapR xm(x.data(), n, in_);
  MapR(weight.grad.data(), out_, in_).noalias() += gy.transpose() * xm;
  VecMap(bias.grad.data(), out_) += gy.colwise().sum().transpose();
  Tensor gx({n, in_});
  MapR(gx.data(), n, in_).noalias() = gy * ConstMapR(weight.value.data(), out_, in_);
  return gx;
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride,
               int padding)
    : weight(name + ".weight", {out_channels, in_channels * kernel * kernel}),
      bias(name + ".bias", {out_channels}),
      in_(in_channels),
      out_(out_channels),
      kernel_(kernel),
      stride_(stride),
      padding_(padding) {
  if (in_channels <= 0 || out_channels <= 0 || kernel <= 0 || stride <= 0 || padding < 0) {
    throw InvalidArgument("Conv2d: bad geometry for " + name);
  }
}

void Conv2d::init(Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_ * kernel_ * kernel_));
  uniform_init(weight.value, rng, bound);
  uniform_init(bias.value, rng, bound);
}

Tensor Conv2d::forward(const Tensor& x) const {
  require_rank(x, 4, "Conv2d");
  if (x.dim(1) != in_) {
    throw InvalidArgument(weight.name + ": expected " + std::to_string(in_) + " channels, got " +
                          std::to_string(x.dim(1)));
  }
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int oh = out_size(h), ow = out_size(w);
  const int rows = in_ * kernel_ * kernel_, plane = oh * ow;
  Tensor y({n, out_, oh, ow});
  ConstMapR wm(weight.value.data(), out_, rows);
  const bool pointwise = kernel_ == 1 && stride_ == 1 && padding_ == 0;
  AlignedVector col(pointwise ? 0 : static_cast<std::size_t>(rows) * plane);
  for (int i = 0; i < n; ++i) {
    const double* xi = &x.at(i, 0, 0, 0);
    const double* cp = xi;
    if (!pointwise) {
      im2col(xi, in_, h, w, kernel_, stride_, padding_, oh, ow, col.data());
      cp = col.data();
    }
    MapR yi(&y.at(i, 0, 0, 0), out_, plane);
    yi.noalias() = wm * ConstMapR(cp, rows, plane);
    yi.colwise() += ConstVecMap(bias.value.data(), out_);
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& grad_out) {
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int oh = out_size(h), ow = out_size(w);
  const int rows = in_ * kernel_ * kernel_, plane = oh * ow;
  if (grad_out.rank() != 4 || grad_out.dim(1) != out_ || grad_out.dim(2) != oh ||
      grad_out.dim(3) != ow) {
    throw InvalidArgument(weight.name + ": gradient shape mismatch");
  }
  Tensor gx({n, in_, h, w});
  ConstMapR wm(weight.value.data(), out_, rows);
  MapR gw(weight.grad.data(), out_, rows);
  VecMap gb(bias.grad.data(), out_);
  const bool pointwise = kernel_ == 1 && stride_ == 1 && padding_ == 0;
  AlignedVector col(pointwise ? 0 : static_cast<std::size_t>(rows) * plane);
  AlignedVector gcol(pointwise ? 0 : static_cast<std::size_t>(rows) * plane);
  for (int i = 0; i < n; ++i) {
    const double* xi = &x.at(i, 0, 0, 0);
    ConstMapR gy(&grad_out.at(i, 0, 0, 0), out_, plane);
    gb += gy.rowwise().sum();
    if (pointwise) {
      gw.noalias() += gy * ConstMapR(xi, rows, plane).transpose();
      MapR(&gx.at(i, 0, 0, 0), rows, plane).noalias() = wm.transpose() * gy;
      continue;
    }
    im2col(xi, in_, h, w, kernel_, stride_, padding_, oh, ow, col.data());
    gw.noalias() += gy * ConstMapR(col.data(), rows, plane).transpose();
    MapR(gcol.data(), rows, plane).noalias() = wm.transpose() * gy;
    col2im(gcol.data(), in_, h, w, kernel_, stride_, padding_, oh, ow, &gx.at(i, 0, 0, 0));
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Normalization

namespace {

// Normalizes `count` contiguous groups of `len` values; writes x-hat into
// `xhat` and 1/sigma per group into `inv_std`.
void normalize_groups(const double* x, std::size_t count, std::size_t len, double eps,
                      double* xhat, std::vector<double>& inv_std) {
  inv_std.resize(count);
  for (std::size_t g = 0; g < count; ++g) {
    const double* p = x + g * len;
    double mean = 0.0;
    for (std::size_t k = 0; k < len; ++k) mean += p[k];
    mean /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t k = 0; k < len; ++k) var += (p[k] - mean) * (p[k] - mean);
    var /= static_cast<double>(len);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[g] = is;
    for (std::size_t k = 0; k < len; ++k) xhat[g * len + k] = (p[k] - mean) * is;
  }
}

// Given dL/dxhat per group, writes dL/dx.
void normalize_groups_backward(const double* xhat, const double* gxhat, std::size_t count,
                               std::size_t len, const std::vector<double>& inv_std, double* gx) {
  for (std::size_t g = 0; g < count; ++g) {
    const double* xh = xhat + g * len;
    const double* gh = gxhat + g * len;
    double mean_g = 0.0, mean_gx = 0.0;
    for (std::size_t k = 0; k < len; ++k) {
      mean_g += gh[k];
      mean_gx += gh[k] * xh[k];
    }
    mean_g /= static_cast<double>(len);
    mean_gx /= static_cast<double>(len);
    for (std::size_t k = 0; k < len; ++k)
      gx[g * len + k] = inv_std[g] * (gh[k] - mean_g - xh[k] * mean_gx);
  }
}

}  // namespace

LayerNorm::LayerNorm(const std::string& name, int features)
    : gamma(name + ".gamma", {features}), beta(name + ".beta", {features}) {
  gamma.value.fill(1.0);
}

Tensor LayerNorm::forward(const Tensor& x) const {
  require_rank(x, 2, "LayerNorm");
  const int n = x.dim(0), f = x.dim(1);
  if (f != static_cast<int>(gamma.value.size())) throw InvalidArgument(gamma.name + ": width mismatch");
  Tensor y(x.shape());
  std::vector<double> inv_std;
  normalize_groups(x.data(), n, f, kEpsilon, y.data(), inv_std);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < f; ++k) y.at(i, k) = y.at(i, k) * gamma.value[k] + beta.value[k];
  return y;
}

Tensor LayerNorm::backward(const Tensor& x, const Tensor& grad_out) {
  const int n = x.dim(0), f = x.dim(1);
  Tensor xhat(x.shape());
  std::vector<double> inv_std;
  normalize_groups(x.data(), n, f, kEpsilon, xhat.data(), inv_std);
  Tensor gxhat(x.shape());
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < f; ++k) {
      gamma.grad[k] += grad_out.at(i, k) * xhat.at(i, k);
      beta.grad[k] += grad_out.at(i, k);
      gxhat.at(i, k) = grad_out.at(i, k) * gamma.value[k];
    }
  Tensor gx(x.shape());
  normalize_groups_backward(xhat.data(), gxhat.data(), n, f, inv_std, gx.data());
  return gx;
}

FeatureNorm::FeatureNorm(const std::string& name, int channels)
    : gamma(name + ".gamma", {channels}), beta(name + ".beta", {channels}) {
  gamma.value.fill(1.0);
}

Tensor FeatureNorm::forward(const Tensor& x) const {
  require_rank(x, 4, "FeatureNorm");
  const int n = x.dim(0), c = x.dim(1);
  if (c != static_cast<int>(gamma.value.size())) throw InvalidArgument(gamma.name + ": channel mismatch");
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor y(x.shape());
  std::vector<double> inv_std;
  normalize_groups(x.data(), n, c * hw, kEpsilon, y.data(), inv_std);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      double* p = &y.at(i, ch, 0, 0);
      for (std::size_t k = 0; k < hw; ++k) p[k] = p[k] * gamma.value[ch] + beta.value[ch];
    }
  return y;
}

Tensor FeatureNorm::backward(const Tensor& x, const Tensor& grad_out) {
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor xhat(x.shape());
  std::vector<double> inv_std;
  normalize_groups(x.data(), n, c * hw, kEpsilon, xhat.data(), inv_std);
  Tensor gxhat(x.shape());
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const double* g = &grad_out.at(i, ch, 0, 0);
      const double* xh = &xhat.at(i, ch, 0, 0);
      double* gh = &gxhat.at(i, ch, 0, 0);
      double sg = 0.0, sb = 0.0;
      for (std::size_t k = 0; k < hw; ++k) {
        sg += g[k] * xh[k];
        sb += g[k];
        gh[k] = g[k] * gamma.value[ch];
      }
      gamma.grad[ch] += sg;
      beta.grad[ch] += sb;
    }
  Tensor gx(x.shape());
  normalize_groups_backward(xhat.data(), gxhat.data(), n, c * hw, inv_std, gx.data());
  return gx;
}

// ---------------------------------------------------------------------------

NormActLinear::NormActLinear(const std::string& name, int in_features, int out_features)
    : norm(name + ".norm", in_features), linear(name + ".linear", in_features, out_features) {}

Tensor NormActLinear::forward(const Tensor& x, Cache* cache) const {
  Tensor normed = norm.forward(x);
  Tensor activated = silu(normed);
  Tensor y = linear.forward(activated);
  if (cache) {
    cache->input = x;
    cache->normed = std::move(normed);
    cache->activated = std::move(activated);
  }
  return y;
}

Tensor NormActLinear::backward(const Cache& cache, const Tensor& grad_out) {
  Tensor g = linear.backward(cache.activated, grad_out);
  g = silu_backward(cache.normed, g);
  return norm.backward(cache.input, g);
}

}  // namespace cdm::nn
