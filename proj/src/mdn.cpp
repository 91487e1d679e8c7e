#include "cdm/mdn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cdm/error.hpp"

namespace cdm {

namespace {

Tensor concat_columns(const Tensor& a, const Tensor& b) {
  const int n = a.dim(0), wa = a.dim(1), wb = b.dim(1);
  Tensor out({n, wa + wb});
  for (int i = 0; i < n; ++i) {
    std::copy_n(&a.at(i, 0), wa, &out.at(i, 0));
    std::copy_n(&b.at(i, 0), wb, &out.at(i, wa));
  }
  return out;
}

void split_columns(const Tensor& x, int first_width, Tensor& first, Tensor& second) {
  const int n = x.dim(0), w = x.dim(1);
  first = Tensor({n, first_width});
  second = Tensor({n, w - first_width});
  for (int i = 0; i < n; ++i) {
    std::copy_n(&x.at(i, 0), first_width, &first.at(i, 0));
    std::copy_n(&x.at(i, first_width), w - first_width, &second.at(i, 0));
  }
}

}  // namespace

Tensor timestep_embed(int t, int dim) {
  const int ts[] = {t};
  return timestep_embed(ts, dim).reshaped({dim});
}

Tensor timestep_embed(std::span<const int> timesteps, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw InvalidArgument("timestep embedding width must be even");
  const int half = dim / 2;
  Tensor out({static_cast<int>(timesteps.size()), dim});
  for (std::size_t r = 0; r < timesteps.size(); ++r) {
    if (timesteps[r] < 0) throw InvalidArgument("timestep must be non-negative");
    for (int i = 0; i < half; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / half);
      const double arg = timesteps[r] * freq;
      out.at(static_cast<int>(r), 2 * i) = std::sin(arg);
      out.at(static_cast<int>(r), 2 * i + 1) = std::cos(arg);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

Mdn::Mdn(const MdnConfig& config) : config_(config) {
  const int d = config.latent_dim, h = config.hidden_width();
  if (d <= 0 || d % 2 != 0) throw InvalidArgument("MDN latent dimension must be even and positive");
  if (h % 2 != 0) throw InvalidArgument("MDN hidden width must be even");
  if (config.blocks < 1) throw InvalidArgument("MDN needs at least one residual block");
  if (config.time_dim <= 0 || config.time_dim % 2 != 0) {
    throw InvalidArgument("MDN timestep embedding width must be even");
  }
  decouple_a_ = nn::Linear("mdn.decouple_a", d / 2, h / 2);
  decouple_b_ = nn::Linear("mdn.decouple_b", d / 2, h / 2);
  for (int b = 0; b < config.blocks; ++b) {
    const std::string name = "mdn.block" + std::to_string(b);
    blocks_.push_back(Block{nn::NormActLinear(name + ".in", h, h),
                            nn::NormActLinear(name + ".time", config.time_dim, h),
                            nn::NormActLinear(name + ".out", h, h)});
  }
  head_ = nn::Linear("mdn.head", h, d);
}

void Mdn::init(Rng& rng) {
  decouple_a_.init(rng);
  decouple_b_.init(rng);
  for (auto& b : blocks_) {
    b.in.init(rng);
    b.time.init(rng);
    b.out.init(rng);
  }
  head_.init(rng);
}

void Mdn::split(const Tensor& y_t, Tensor& first, Tensor& second) const {
  if (y_t.rank() != 2 || y_t.dim(1) != config_.latent_dim) {
    throw InvalidArgument("MDN: expected [N, " + std::to_string(config_.latent_dim) + "], got " +
                          shape_string(y_t.shape()));
  }
  split_columns(y_t, config_.latent_dim / 2, first, second);
}

std::pair<Tensor, Tensor> Mdn::decouple(const Tensor& y_t) const {
  Tensor first, second;
  split(y_t, first, second);
  return {decouple_a_.forward(first), decouple_b_.forward(second)};
}

Tensor Mdn::forward(const Tensor& y_t, std::span<const int> timesteps, Cache* cache) const {
  Tensor first, second;
  split(y_t, first, second);
  if (static_cast<int>(timesteps.size()) != y_t.dim(0)) {
    throw InvalidArgument("MDN: one timestep per row required");
  }
  Tensor x = concat_columns(decouple_a_.forward(first), decouple_b_.forward(second));
  Tensor emb = timestep_embed(timesteps, config_.time_dim);
  if (cache) {
    cache->first_half = std::move(first);
    cache->second_half = std::move(second);
    cache->blocks.assign(blocks_.size(), BlockCache{});
  }
  for (std::size_t k = 0; k < blocks_.size(); ++k) {
    BlockCache* bc = cache ? &cache->blocks[k] : nullptr;
    Tensor mid = blocks_[k].in.forward(x, bc ? &bc->in : nullptr);
    mid += blocks_[k].time.forward(emb, bc ? &bc->time : nullptr);
    Tensor next = x + blocks_[k].out.forward(mid, bc ? &bc->out : nullptr);
    if (bc) bc->input = std::move(x);
    x = std::move(next);
  }
  Tensor y = head_.forward(x);
  if (cache) {
    cache->embedding = std::move(emb);
    cache->trunk = std::move(x);
  }
  return y;
}

Tensor Mdn::forward(const Tensor& y_t, int t) const {
  std::vector<int> ts(y_t.rank() == 2 ? y_t.dim(0) : 0, t);
  return forward(y_t, ts);
}

void Mdn::backward(const Cache& cache, const Tensor& grad_out) {
  Tensor g = head_.backward(cache.trunk, grad_out);
  for (std::size_t k = blocks_.size(); k-- > 0;) {
    const BlockCache& bc = cache.blocks[k];
    const Tensor g_mid = blocks_[k].out.backward(bc.out, g);
    blocks_[k].time.backward(bc.time, g_mid);
    g += blocks_[k].in.backward(bc.in, g_mid);
  }
  Tensor ga, gb;
  split_columns(g, config_.hidden_width() / 2, ga, gb);
  decouple_a_.backward(cache.first_half, ga);
  decouple_b_.backward(cache.second_half, gb);
}

nn::ParamList Mdn::block_params() {
  nn::ParamList out;
  for (auto& b : blocks_) {
    b.in.collect(out);
    b.time.collect(out);
    b.out.collect(out);
  }
  return out;
}

nn::ParamList Mdn::params() {
  nn::ParamList out;
  decouple_a_.collect(out);
  decouple_b_.collect(out);
  for (nn::Param* p : block_params()) out.push_back(p);
  head_.collect(out);
  return out;
}

// ---------------------------------------------------------------------------

NoiseDraw draw_training_noise(const Tensor& y0, const NoiseSchedule& schedule, Rng& rng) {
  if (y0.rank() != 2 || y0.dim(0) == 0) throw InvalidArgument("MDN training batch must be nonempty [N, D]");
  NoiseDraw draw;
  draw.timesteps.resize(y0.dim(0));
  for (int& t : draw.timesteps) t = static_cast<int>(rng.uniform_int(schedule.steps));
  draw.eps = Tensor(y0.shape());
  rng.fill_normal(draw.eps);
  draw.y_t = forward_diffuse(y0, draw.timesteps, draw.eps, schedule);
  return draw;
}

RegressionLoss x0_regression_loss(const Tensor& pred, const Tensor& y0) {
  require_same_shape(pred, y0, "x0_regression_loss");
  RegressionLoss out{0.0, Tensor::zeros_like(pred)};
  const double inv = 1.0 / static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - y0[i];
    out.value += d * d * inv;
    out.grad[i] = 2.0 * d * inv;
  }
  return out;
}

double denoising_loss(const Denoiser& denoiser, const Tensor& y0, const NoiseDraw& draw) {
  return x0_regression_loss(denoiser(draw.y_t, draw.timesteps), y0).value;
}

double mdn_loss_and_grad(Mdn& model, const Tensor& y0, const NoiseDraw& draw) {
  Mdn::Cache cache;
  const Tensor pred = model.forward(draw.y_t, draw.timesteps, &cache);
  const RegressionLoss loss = x0_regression_loss(pred, y0);
  if (!std::isfinite(loss.value)) throw NumericError("MDN: non-finite training loss");
  model.backward(cache, loss.grad);
  return loss.value;
}

double mdn_train_step(Mdn& model, nn::Adam& optimizer, const Tensor& y0_batch,
                      const NoiseSchedule& schedule, Rng& rng) {
  const NoiseDraw draw = draw_training_noise(y0_batch, schedule, rng);
  optimizer.zero_grad();
  const double loss = mdn_loss_and_grad(model, y0_batch, draw);
  optimizer.step();
  return loss;
}

std::vector<double> train_mdn(Mdn& model, const Tensor& latents, const NoiseSchedule& schedule,
                              const MdnTrainOptions& options, Rng& rng) {
  if (latents.rank() != 2 || latents.dim(0) == 0) throw InvalidArgument("train_mdn: no latents");
  if (options.batch_size < 1) throw InvalidArgument("train_mdn: bad batch size");
  nn::Adam adam(model.params(), options.adam);
  const int count = latents.dim(0);
  std::vector<int> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> losses;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    rng.shuffle(std::span<int>(order));
    double sum = 0.0;
    int batches = 0;
    for (int start = 0; start < count; start += options.batch_size) {
      const int end = std::min(count, start + options.batch_size);
      const Tensor batch = latents.gather(std::span<const int>(order).subspan(start, end - start));
      sum += mdn_train_step(model, adam, batch, schedule, rng);
      ++batches;
    }
    losses.push_back(sum / batches);
    if (options.on_epoch) options.on_epoch(epoch, losses.back());
  }
  return losses;
}

Tensor ddim_sample(const Denoiser& denoiser, const NoiseSchedule& schedule, int n_sampling,
                   int count, int dim, Rng& rng) {
  const TimestepSubsequence seq = make_ddim_timesteps(schedule.steps, n_sampling);
  Tensor y({count, dim});
  rng.fill_normal(y);
  std::vector<int> ts(count);
  for (std::size_t i = 0; i < seq.steps.size(); ++i) {
    const int t = seq.steps[i];
    const int t_prev = i + 1 < seq.steps.size() ? seq.steps[i + 1] : kTerminalStep;
    std::fill(ts.begin(), ts.end(), t);
    const Tensor y0_hat = denoiser(y, ts);
    y = ddim_step(y, y0_hat, t, t_prev, schedule);
  }
  return y;
}

Tensor mdn_sample(const Mdn& model, const NoiseSchedule& schedule, int n_sampling, int count,
                  Rng& rng) {
  const Denoiser denoiser = [&model](const Tensor& y_t, std::span<const int> ts) {
    return model.forward(y_t, ts);
  };
  return ddim_sample(denoiser, schedule, n_sampling, count, model.config().latent_dim, rng);
}

}  // namespace cdm
