#include "cdm/mrm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cdm/error.hpp"

namespace cdm {

int PatchMask::masked_count() const {
  return static_cast<int>(std::count(masked.begin(), masked.end(), char{1}));
}

PatchMask sample_mask(int grid_h, int grid_w, int patch_size, double mask_ratio, Rng& rng) {
  if (grid_h < 1 || grid_w < 1 || patch_size < 1) throw InvalidArgument("sample_mask: bad geometry");
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) throw InvalidArgument("mask ratio must lie in [0, 1]");
  const int cells = grid_h * grid_w;
  const int count = static_cast<int>(std::lround(mask_ratio * cells));
  std::vector<int> order(cells);
  std::iota(order.begin(), order.end(), 0);
  // Partial Fisher-Yates: the first `count` entries are a uniform draw.
  for (int i = 0; i < count; ++i) {
    const int j = i + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cells - i)));
    std::swap(order[i], order[j]);
  }
  PatchMask mask{patch_size, grid_h, grid_w, std::vector<char>(cells, 0)};
  for (int i = 0; i < count; ++i) mask.masked[order[i]] = 1;
  return mask;
}

std::vector<PatchMask> sample_plane_masks(int batch, int channels, int image_size, int patch_size,
                                          double mask_ratio, Rng& rng) {
  if (patch_size < 1 || image_size % patch_size != 0) {
    throw InvalidArgument("patch size " + std::to_string(patch_size) + " does not tile " +
                          std::to_string(image_size));
  }
  const int grid = image_size / patch_size;
  std::vector<PatchMask> masks;
  masks.reserve(static_cast<std::size_t>(batch) * channels);
  for (int i = 0; i < batch * channels; ++i)
    masks.push_back(sample_mask(grid, grid, patch_size, mask_ratio, rng));
  return masks;
}

namespace {

// Resolves the mask for plane (n, c): either a single shared mask or NC-ordered.
const PatchMask& mask_for(std::span<const PatchMask> masks, int n, int c, int channels) {
  return masks.size() == 1 ? masks[0] : masks[static_cast<std::size_t>(n) * channels + c];
}

void check_masks(const Tensor& images, std::span<const PatchMask> masks, const char* who) {
  if (images.rank() != 4) throw InvalidArgument(std::string(who) + ": expected NCHW images");
  const std::size_t planes = static_cast<std::size_t>(images.dim(0)) * images.dim(1);
  if (masks.size() != 1 && masks.size() != planes) {
    throw InvalidArgument(std::string(who) + ": need 1 or " + std::to_string(planes) +
                          " masks, got " + std::to_string(masks.size()));
  }
  for (const PatchMask& m : masks) {
    if (m.height() != images.dim(2) || m.width() != images.dim(3)) {
      throw InvalidArgument(std::string(who) + ": mask geometry " + std::to_string(m.height()) +
                            "x" + std::to_string(m.width()) + " does not match image " +
                            shape_string(images.shape()));
    }
  }
}

}  // namespace

Tensor apply_mask(const Tensor& images, const PatchMask& mask, double fill) {
  return apply_mask(images, std::span<const PatchMask>(&mask, 1), fill);
}

Tensor apply_mask(const Tensor& images, std::span<const PatchMask> masks, double fill) {
  check_masks(images, masks, "apply_mask");
  Tensor out = images;
  const int channels = images.dim(1);
  for (int n = 0; n < images.dim(0); ++n)
    for (int c = 0; c < channels; ++c) {
      const PatchMask& m = mask_for(masks, n, c, channels);
      for (int y = 0; y < images.dim(2); ++y)
        for (int x = 0; x < images.dim(3); ++x)
          if (m.is_masked(y / m.patch_size, x / m.patch_size)) out.at(n, c, y, x) = fill;
    }
  return out;
}

MaskedLoss mrm_loss_with_grad(const Tensor& pred, const Tensor& target,
                              std::span<const PatchMask> masks) {
  require_same_shape(pred, target, "mrm_loss");
  check_masks(pred, masks, "mrm_loss");
  const int channels = pred.dim(1);
  long total_masked = 0;
  for (int n = 0; n < pred.dim(0); ++n)
    for (int c = 0; c < channels; ++c) total_masked += mask_for(masks, n, c, channels).masked_count();
  if (total_masked == 0) throw InvalidArgument("mrm_loss: no masked patches");

  MaskedLoss out{0.0, Tensor::zeros_like(pred)};
  const double inv_count = 1.0 / static_cast<double>(total_masked);
  for (int n = 0; n < pred.dim(0); ++n)
    for (int c = 0; c < channels; ++c) {
      const PatchMask& m = mask_for(masks, n, c, channels);
      const int p = m.patch_size;
      for (int gy = 0; gy < m.grid_h; ++gy)
        for (int gx = 0; gx < m.grid_w; ++gx) {
          if (!m.is_masked(gy, gx)) continue;
          double sq = 0.0;
          for (int y = gy * p; y < (gy + 1) * p; ++y)
            for (int x = gx * p; x < (gx + 1) * p; ++x) {
              const double d = pred.at(n, c, y, x) - target.at(n, c, y, x);
              sq += d * d;
            }
          const double norm = std::sqrt(sq);
          out.value += norm * inv_count;
          if (norm == 0.0) continue;  // subgradient 0 at the kink
          for (int y = gy * p; y < (gy + 1) * p; ++y)
            for (int x = gx * p; x < (gx + 1) * p; ++x)
              out.grad.at(n, c, y, x) =
                  (pred.at(n, c, y, x) - target.at(n, c, y, x)) / norm * inv_count;
        }
    }
  return out;
}

double mrm_loss(const Tensor& pred, const Tensor& target, std::span<const PatchMask> masks) {
  return mrm_loss_with_grad(pred, target, masks).value;
}

double mrm_loss(const Tensor& pred, const Tensor& target, const PatchMask& mask) {
  return mrm_loss(pred, target, std::span<const PatchMask>(&mask, 1));
}

// ---------------------------------------------------------------------------

Mrm::Mrm(const MrmConfig& config) : config_(config) {
  if (config.channels < 1 || config.base_width < 1 || config.stages < 1 || config.latent_dim < 1) {
    throw InvalidArgument("MrmConfig: all sizes must be positive");
  }
  if (config.image_size % (1 << config.stages) != 0) {
    throw InvalidArgument("MrmConfig: image size " + std::to_string(config.image_size) +
                          " not divisible by 2^" + std::to_string(config.stages));
  }
  const int last = config.stage_width(config.stages - 1);
  const int bottom = config.bottom_size();
  for (int i = 0; i < config.stages; ++i) {
    const int in = i == 0 ? config.channels : config.stage_width(i - 1);
    encoder_.emplace_back("mrm.enc" + std::to_string(i), in, config.stage_width(i), 3, 2, 1);
  }
  to_latent_ = nn::Linear("mrm.to_latent", last, config.latent_dim);
  from_latent_ = nn::Linear("mrm.from_latent", config.latent_dim, last * bottom * bottom);
  for (int j = 0; j < config.stages; ++j) {
    const int in = config.stage_width(config.stages - 1 - j);
    const int out = j == config.stages - 1 ? config.channels : config.stage_width(config.stages - 2 - j);
    decoder_.emplace_back("mrm.dec" + std::to_string(j), in, out, 3, 1, 1);
  }
}

void Mrm::init(Rng& rng) {
  for (auto& c : encoder_) c.init(rng);
  to_latent_.init(rng);
  from_latent_.init(rng);
  for (auto& c : decoder_) c.init(rng);
}

void Mrm::check_input(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != config_.channels || x.dim(2) != config_.image_size ||
      x.dim(3) != config_.image_size) {
    throw InvalidArgument("Mrm: expected [N, " + std::to_string(config_.channels) + ", " +
                          std::to_string(config_.image_size) + ", " +
                          std::to_string(config_.image_size) + "], got " + shape_string(x.shape()));
  }
}

Tensor Mrm::encode_impl(const Tensor& x, Cache* cache) const {
  Tensor h = x;
  for (const auto& conv : encoder_) {
    Tensor pre = conv.forward(h);
    if (cache) {
      cache->enc_in.push_back(std::move(h));
      cache->enc_pre.push_back(pre);
    }
    h = nn::silu(pre);
  }
  Tensor pooled = nn::global_avg_pool(h);
  Tensor latent = to_latent_.forward(pooled);
  if (cache) {
    cache->pooled = std::move(pooled);
    cache->latent = latent;
  }
  return latent;
}

Tensor Mrm::encode(const Tensor& targets) const {
  check_input(targets);
  return encode_impl(targets, nullptr);
}

MrmOutput Mrm::forward(const Tensor& masked_targets, Cache* cache) const {
  check_input(masked_targets);
  if (cache) *cache = Cache{};
  Tensor latent = encode_impl(masked_targets, cache);
  const int n = masked_targets.dim(0);
  const int bottom = config_.bottom_size();
  Tensor seed = from_latent_.forward(latent).reshaped(
      {n, config_.stage_width(config_.stages - 1), bottom, bottom});
  Tensor h = nn::silu(seed);
  if (cache) cache->dec_pre_seed = std::move(seed);
  for (std::size_t j = 0; j < decoder_.size(); ++j) {
    Tensor up = nn::upsample2x(h);
    Tensor pre = decoder_[j].forward(up);
    const bool last = j + 1 == decoder_.size();
    h = last ? pre : nn::silu(pre);
    if (cache) {
      cache->dec_in.push_back(std::move(up));
      cache->dec_pre.push_back(std::move(pre));
    }
  }
  return {std::move(h), std::move(latent)};
}

void Mrm::backward(const Cache& cache, const Tensor& grad_reconstruction) {
  Tensor g = grad_reconstruction;
  for (std::size_t k = decoder_.size(); k-- > 0;) {
    if (k + 1 != decoder_.size()) g = nn::silu_backward(cache.dec_pre[k], g);
    g = decoder_[k].backward(cache.dec_in[k], g);
    g = nn::upsample2x_backward(g);
  }
  g = nn::silu_backward(cache.dec_pre_seed, g);
  const int n = g.dim(0);
  g = from_latent_.backward(cache.latent, g.reshaped({n, static_cast<int>(g.size()) / n}));
  g = to_latent_.backward(cache.pooled, g);
  const Tensor& last_pre = cache.enc_pre.back();
  g = nn::global_avg_pool_backward(g, last_pre.dim(2), last_pre.dim(3));
  for (std::size_t k = encoder_.size(); k-- > 0;) {
    g = nn::silu_backward(cache.enc_pre[k], g);
    g = encoder_[k].backward(cache.enc_in[k], g);
  }
}

nn::ParamList Mrm::encoder_params() {
  nn::ParamList out;
  for (auto& c : encoder_) c.collect(out);
  to_latent_.collect(out);
  return out;
}

nn::ParamList Mrm::decoder_params() {
  nn::ParamList out;
  from_latent_.collect(out);
  for (auto& c : decoder_) c.collect(out);
  return out;
}

nn::ParamList Mrm::params() {
  nn::ParamList out = encoder_params();
  for (nn::Param* p : decoder_params()) out.push_back(p);
  return out;
}

// ---------------------------------------------------------------------------

std::vector<double> train_mrm(Mrm& model, const Tensor& targets, const MrmTrainOptions& options,
                              Rng& rng) {
  if (targets.rank() != 4 || targets.dim(0) == 0) throw InvalidArgument("train_mrm: empty dataset");
  if (options.batch_size < 1 || options.epochs < 0) throw InvalidArgument("train_mrm: bad options");
  const int count = targets.dim(0);
  const int channels = targets.dim(1);
  nn::Adam adam(model.params(), options.adam);
  std::vector<int> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> epoch_losses;
  Mrm::Cache cache;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    rng.shuffle(std::span<int>(order));
    double sum = 0.0;
    int batches = 0;
    for (int start = 0; start < count; start += options.batch_size) {
      const int end = std::min(count, start + options.batch_size);
      const Tensor batch = targets.gather(std::span<const int>(order).subspan(start, end - start));
      const auto masks = sample_plane_masks(end - start, channels, targets.dim(2),
                                            options.patch_size, options.mask_ratio, rng);
      const Tensor masked = apply_mask(batch, masks, options.fill);
      adam.zero_grad();
      const MrmOutput out = model.forward(masked, &cache);
      const MaskedLoss loss = mrm_loss_with_grad(out.reconstruction, batch, masks);
      if (!std::isfinite(loss.value)) {
        throw NumericError("train_mrm: non-finite loss at epoch " + std::to_string(epoch) +
                           ", batch starting at " + std::to_string(start));
      }
      model.backward(cache, loss.grad);
      adam.step();
      sum += loss.value;
      ++batches;
    }
    const double mean = sum / batches;
    epoch_losses.push_back(mean);
    if (options.on_epoch) options.on_epoch(epoch, mean);
  }
  return epoch_losses;
}

}  // namespace cdm
