#include "cdm/cunet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cdm/error.hpp"

namespace cdm {

int CunetConfig::width(int scale) const {
  return base_width * std::min(1 << scale, max_width_multiplier);
}

// ---------------------------------------------------------------------------

CondEmbed::CondEmbed(const std::string& name, int channels, int out_channels, int latent_dim,
                     int hidden)
    : norm(name + ".norm", channels),
      proj(name + ".proj", channels, channels, 1, 1, 0),
      mlp_in(name + ".mlp_in", latent_dim, hidden),
      mlp_out(name + ".mlp_out", hidden, channels),
      down(name + ".down", channels, out_channels, 3, 2, 1) {}

void CondEmbed::init(Rng& rng) {
  proj.init(rng);
  mlp_in.init(rng);
  mlp_out.init(rng);
  down.init(rng);
}

CondEmbed::Output CondEmbed::forward(const Tensor& feature, const Tensor& condition,
                                     Cache* cache) const {
  if (feature.rank() != 4 || feature.dim(2) % 2 != 0 || feature.dim(3) % 2 != 0) {
    throw InvalidArgument("cond_embed: feature map needs even spatial size, got " +
                          shape_string(feature.shape()));
  }
  if (condition.rank() != 2 || condition.dim(0) != feature.dim(0)) {
    throw InvalidArgument("cond_embed: condition " + shape_string(condition.shape()) +
                          " does not match feature batch " + shape_string(feature.shape()));
  }
  Tensor normed = norm.forward(feature);
  Tensor activated = nn::silu(normed);
  Tensor cond_pre = mlp_in.forward(condition);
  Tensor cond_act = nn::silu(cond_pre);
  Tensor fused = nn::add_broadcast(proj.forward(activated), mlp_out.forward(cond_act));
  Tensor down_out = down.forward(fused);
  if (cache) {
    cache->feature = feature;
    cache->normed = std::move(normed);
    cache->activated = std::move(activated);
    cache->condition = condition;
    cache->cond_pre = std::move(cond_pre);
    cache->cond_act = std::move(cond_act);
    cache->fused = fused;
  }
  return {std::move(fused), std::move(down_out)};
}

Tensor CondEmbed::backward(const Cache& cache, const Tensor& grad_fused, const Tensor& grad_down) {
  Tensor g = down.backward(cache.fused, grad_down);
  g += grad_fused;
  Tensor gc = mlp_out.backward(cache.cond_act, nn::sum_spatial(g));
  mlp_in.backward(cache.condition, nn::silu_backward(cache.cond_pre, gc));
  g = proj.backward(cache.activated, g);
  g = nn::silu_backward(cache.normed, g);
  return norm.backward(cache.feature, g);
}

void CondEmbed::collect(nn::ParamList& out) {
  norm.collect(out);
  proj.collect(out);
  mlp_in.collect(out);
  mlp_out.collect(out);
  down.collect(out);
}

nn::ParamList CondEmbed::condition_params() {
  nn::ParamList out;
  mlp_in.collect(out);
  mlp_out.collect(out);
  return out;
}

// ---------------------------------------------------------------------------

Cunet::Cunet(const CunetConfig& config) : config_(config) {
  if (config.scales < 2) throw InvalidArgument("C-UNet needs at least 2 scales");
  if (config.in_channels < 1 || config.out_channels < 1 || config.base_width < 1 ||
      config.latent_dim < 1 || config.max_width_multiplier < 1) {
    throw InvalidArgument("CunetConfig: all sizes must be positive");
  }
  if (config.image_size % (1 << config.scales) != 0) {
    throw InvalidArgument("C-UNet: image size " + std::to_string(config.image_size) +
                          " not divisible by 2^" + std::to_string(config.scales));
  }
  stem_ = nn::Conv2d("cunet.stem", config.in_channels, config.width(0), 3, 1, 1);
  for (int k = 0; k < config.scales; ++k) {
    encoder_.emplace_back("cunet.enc" + std::to_string(k), config.width(k), config.width(k + 1),
                          config.latent_dim, config.cond_hidden_width());
  }
  const int bottom = config.width(config.scales);
  bottleneck_a_ = nn::Conv2d("cunet.bottleneck_a", bottom, bottom, 3, 1, 1);
  bottleneck_b_ = nn::Conv2d("cunet.bottleneck_b", bottom, bottom, 3, 1, 1);
  for (int k = 0; k < config.scales; ++k) {
    up_.emplace_back("cunet.up" + std::to_string(k), config.width(k + 1), config.width(k), 3, 1, 1);
    merge_.emplace_back("cunet.merge" + std::to_string(k), 2 * config.width(k), config.width(k), 3,
                        1, 1);
  }
  head_ = nn::Conv2d("cunet.head", config.width(0), config.out_channels, 1, 1, 0);
}

void Cunet::init(Rng& rng) {
  stem_.init(rng);
  for (auto& e : encoder_) e.init(rng);
  bottleneck_a_.init(rng);
  bottleneck_b_.init(rng);
  for (auto& u : up_) u.init(rng);
  for (auto& m : merge_) m.init(rng);
  head_.init(rng);
}

void Cunet::check_inputs(const Tensor& source, const Tensor& condition) const {
  if (source.rank() != 4 || source.dim(1) != config_.in_channels) {
    throw InvalidArgument("C-UNet: expected " + std::to_string(config_.in_channels) +
                          "-channel NCHW source, got " + shape_string(source.shape()));
  }
  const int divisor = 1 << config_.scales;
  if (source.dim(2) != source.dim(3) || source.dim(2) % divisor != 0) {
    throw InvalidArgument("C-UNet: spatial size " + std::to_string(source.dim(2)) + "x" +
                          std::to_string(source.dim(3)) + " must be square and divisible by " +
                          std::to_string(divisor));
  }
  if (condition.rank() != 2 || condition.dim(0) != source.dim(0) ||
      condition.dim(1) != config_.latent_dim) {
    throw InvalidArgument("C-UNet: condition must be [" + std::to_string(source.dim(0)) + ", " +
                          std::to_string(config_.latent_dim) + "], got " +
                          shape_string(condition.shape()));
  }
}

Tensor Cunet::forward(const Tensor& source, const Tensor& condition, Cache* cache) const {
  check_inputs(source, condition);
  const int scales = config_.scales;
  if (cache) {
    *cache = Cache{};
    cache->input = source;
    cache->encoder.resize(scales);
    cache->decoder.resize(scales);
  }
  std::vector<Tensor> skips(scales);
  Tensor h = stem_.forward(source);
  for (int k = 0; k < scales; ++k) {
    CondEmbed::Output o = encoder_[k].forward(h, condition, cache ? &cache->encoder[k] : nullptr);
    skips[k] = std::move(o.fused);
    h = std::move(o.down);
  }
  Tensor mid_pre = bottleneck_a_.forward(nn::silu(h));
  Tensor mid = nn::silu(mid_pre);
  Tensor bottom = h + bottleneck_b_.forward(mid);
  if (cache) {
    cache->bottleneck_in = std::move(h);
    cache->bottleneck_mid_pre = std::move(mid_pre);
    cache->bottleneck_mid = std::move(mid);
  }
  h = std::move(bottom);
  for (int k = scales - 1; k >= 0; --k) {
    Tensor up_pre = up_[k].forward(h);
    Tensor cat = concat_channels(nn::upsample2x(up_pre), skips[k]);
    Tensor merge_pre = merge_[k].forward(cat);
    Tensor next = nn::silu(merge_pre);
    if (cache) {
      cache->decoder[k] = DecoderCache{std::move(h), std::move(up_pre), std::move(cat),
                                       std::move(merge_pre)};
    }
    h = std::move(next);
  }
  Tensor out = head_.forward(h);
  if (cache) cache->head_in = std::move(h);
  return out;
}

void Cunet::backward(const Cache& cache, const Tensor& grad_out) {
  const int scales = config_.scales;
  Tensor g = head_.backward(cache.head_in, grad_out);
  std::vector<Tensor> grad_skips(scales);
  for (int k = 0; k < scales; ++k) {
    const DecoderCache& dc = cache.decoder[k];
    g = nn::silu_backward(dc.merge_pre, g);
    g = merge_[k].backward(dc.concat, g);
    Tensor g_up, g_skip;
    split_channels(g, config_.width(k), g_up, g_skip);
    grad_skips[k] = std::move(g_skip);
    g = up_[k].backward(dc.input, nn::upsample2x_backward(g_up));
  }
  // Bottleneck: out = h + b(silu(a(silu(h)))).
  Tensor g_mid = bottleneck_b_.backward(cache.bottleneck_mid, g);
  g_mid = nn::silu_backward(cache.bottleneck_mid_pre, g_mid);
  g_mid = bottleneck_a_.backward(nn::silu(cache.bottleneck_in), g_mid);
  g += nn::silu_backward(cache.bottleneck_in, g_mid);
  for (int k = scales - 1; k >= 0; --k) g = encoder_[k].backward(cache.encoder[k], grad_skips[k], g);
  stem_.backward(cache.input, g);
}

nn::ParamList Cunet::params() {
  nn::ParamList out;
  stem_.collect(out);
  for (auto& e : encoder_) e.collect(out);
  bottleneck_a_.collect(out);
  bottleneck_b_.collect(out);
  for (auto& u : up_) u.collect(out);
  for (auto& m : merge_) m.collect(out);
  head_.collect(out);
  return out;
}

nn::ParamList Cunet::condition_params() {
  nn::ParamList out;
  for (auto& e : encoder_)
    for (nn::Param* p : e.condition_params()) out.push_back(p);
  return out;
}

// ---------------------------------------------------------------------------

SynthesisLoss synthesis_loss_with_grad(const Tensor& pred, const Tensor& gt) {
  require_same_shape(pred, gt, "synthesis_loss");
  if (pred.empty()) throw InvalidArgument("synthesis_loss: empty images");
  SynthesisLoss out{0.0, Tensor::zeros_like(pred)};
  const double inv = 1.0 / static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - gt[i];
    out.value += d * d;
    out.grad[i] = 2.0 * d * inv;
  }
  out.value *= inv;
  return out;
}

double synthesis_loss(const Tensor& pred, const Tensor& gt) {
  return synthesis_loss_with_grad(pred, gt).value;
}

std::vector<double> train_cunet(Cunet& model, const Tensor& sources, const Tensor& targets,
                                const Tensor& conditions, const CunetTrainOptions& options,
                                Rng& rng) {
  if (sources.rank() != 4 || sources.dim(0) == 0) throw InvalidArgument("train_cunet: empty dataset");
  if (targets.dim(0) != sources.dim(0) || conditions.dim(0) != sources.dim(0)) {
    throw InvalidArgument("train_cunet: sources, targets and conditions disagree on case count");
  }
  if (options.batch_size < 1) throw InvalidArgument("train_cunet: bad batch size");
  nn::Adam adam(model.params(), options.adam);
  const int count = sources.dim(0);
  std::vector<int> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> losses;
  Cunet::Cache cache;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    rng.shuffle(std::span<int>(order));
    double sum = 0.0;
    int batches = 0;
    for (int start = 0; start < count; start += options.batch_size) {
      const int end = std::min(count, start + options.batch_size);
      const auto rows = std::span<const int>(order).subspan(start, end - start);
      const Tensor src = sources.gather(rows);
      const Tensor tgt = targets.gather(rows);
      const Tensor cond = conditions.gather(rows);
      adam.zero_grad();
      const Tensor pred = model.forward(src, cond, &cache);
      const SynthesisLoss loss = synthesis_loss_with_grad(pred, tgt);
      if (!std::isfinite(loss.value)) {
        throw NumericError("train_cunet: non-finite loss at epoch " + std::to_string(epoch));
      }
      model.backward(cache, loss.grad);
      adam.step();
      sum += loss.value;
      ++batches;
    }
    losses.push_back(sum / batches);
    if (options.on_epoch) options.on_epoch(epoch, losses.back());
  }
  return losses;
}

}  // namespace cdm
