#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <tuple>

#include "cdm/error.hpp"
#include "cdm/mrm.hpp"
#include "golden.hpp"
#include "support/phantoms.hpp"
#include "support/gradcheck.hpp"

namespace cdm {
namespace {

using testing::random_tensor;
using testing::uniform_tensor;

MrmConfig toy_config() {
  MrmConfig c;
  c.channels = 2;
  c.image_size = 8;
  c.base_width = 2;
  c.stages = 2;
  c.latent_dim = 4;
  return c;
}

// Per-patch norms accumulated pixel by pixel, then averaged over masked cells.
double brute_force_loss(const Tensor& pred, const Tensor& target, const std::vector<PatchMask>& m) {
  std::map<std::tuple<int, int, int, int>, double> sq;
  const int N = pred.dim(0), C = pred.dim(1), H = pred.dim(2), W = pred.dim(3);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const PatchMask& mask = m.size() == 1 ? m[0] : m[n * C + c];
          const int p = mask.patch_size;
          if (!mask.masked[(y / p) * mask.grid_w + x / p]) continue;
          const double d = pred.at(n, c, y, x) - target.at(n, c, y, x);
          sq[{n, c, y / p, x / p}] += d * d;
        }
  double total = 0.0;
  for (const auto& [key, v] : sq) total += std::sqrt(v);
  return total / static_cast<double>(sq.size());
}

TEST(SampleMask, ExactCounts) {
  Rng rng(3);
  EXPECT_EQ(sample_mask(4, 4, 2, 0.0, rng).masked_count(), 0);
  EXPECT_EQ(sample_mask(4, 4, 2, 1.0, rng).masked_count(), 16);
  EXPECT_EQ(sample_mask(4, 4, 2, 0.5, rng).masked_count(), 8);
  EXPECT_EQ(sample_mask(8, 8, 8, 0.6, rng).masked_count(), 38);
  EXPECT_THROW(sample_mask(0, 4, 2, 0.5, rng), InvalidArgument);
  EXPECT_THROW(sample_mask(4, 4, 2, 1.5, rng), InvalidArgument);
}

TEST(SampleMask, DeterministicGivenSeed) {
  Rng a(9), b(9);
  EXPECT_EQ(sample_mask(8, 8, 4, 0.6, a).masked, sample_mask(8, 8, 4, 0.6, b).masked);
}

TEST(SampleMask, RoughlyUniformCoverage) {
  Rng rng(17);
  std::vector<int> hits(16, 0);
  const int trials = 4000;
  for (int i = 0; i < trials; ++i) {
    const auto m = sample_mask(4, 4, 1, 0.25, rng);
    for (int k = 0; k < 16; ++k) hits[k] += m.masked[k];
  }
  // Each cell is masked with probability 1/4.
  for (int h : hits) EXPECT_NEAR(h / double(trials), 0.25, 0.04);
}

TEST(ApplyMask, RatioZeroAndOne) {
  Rng rng(1);
  const Tensor x = uniform_tensor({2, 2, 8, 8}, rng);
  EXPECT_EQ(apply_mask(x, sample_mask(4, 4, 2, 0.0, rng), 0.0), x);
  const Tensor all = apply_mask(x, sample_mask(4, 4, 2, 1.0, rng), 0.0);
  for (double v : all.values()) EXPECT_EQ(v, 0.0);
}

TEST(ApplyMask, SinglePatchLocality) {
  Rng rng(2);
  const Tensor x = uniform_tensor({1, 1, 6, 6}, rng, 1.0, 2.0);
  PatchMask m{2, 3, 3, std::vector<char>(9, 0)};
  m.masked[0] = 1;
  const Tensor y = apply_mask(x, m, -7.0);
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 6; ++c) {
      if (r < 2 && c < 2) EXPECT_EQ(y.at(0, 0, r, c), -7.0);
      else EXPECT_EQ(y.at(0, 0, r, c), x.at(0, 0, r, c));
    }
}

TEST(ApplyMask, IdempotentAndPerPlane) {
  Rng rng(4);
  const Tensor x = uniform_tensor({2, 2, 8, 8}, rng);
  const auto masks = sample_plane_masks(2, 2, 8, 2, 0.5, rng);
  const Tensor once = apply_mask(x, masks, 0.25);
  EXPECT_EQ(apply_mask(once, masks, 0.25), once);
  // Planes use their own masks.
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 2; ++c) {
      const PatchMask& m = masks[n * 2 + c];
      for (int y = 0; y < 8; ++y)
        for (int xx = 0; xx < 8; ++xx) {
          const bool hidden = m.is_masked(y / 2, xx / 2);
          EXPECT_EQ(once.at(n, c, y, xx), hidden ? 0.25 : x.at(n, c, y, xx));
        }
    }
  EXPECT_THROW(apply_mask(x, sample_mask(2, 2, 2, 0.5, rng), 0.0), InvalidArgument);
}

TEST(MrmLoss, ZeroWhenEqual) {
  Rng rng(5);
  const Tensor x = uniform_tensor({1, 2, 8, 8}, rng);
  EXPECT_EQ(mrm_loss(x, x, sample_mask(4, 4, 2, 0.5, rng)), 0.0);
}

TEST(MrmLoss, PythagoreanPatch) {
  Tensor pred({1, 1, 4, 4}, 0.0), target({1, 1, 4, 4}, 0.0);
  pred.at(0, 0, 2, 2) = 3.0;
  pred.at(0, 0, 2, 3) = 4.0;
  PatchMask m{2, 2, 2, {0, 0, 0, 1}};
  EXPECT_DOUBLE_EQ(mrm_loss(pred, target, m), 5.0);
}

TEST(MrmLoss, MatchesBruteForce) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor pred = random_tensor({2, 2, 8, 8}, rng);
    const Tensor target = random_tensor({2, 2, 8, 8}, rng);
    const auto masks = sample_plane_masks(2, 2, 8, 2, rng.uniform(0.1, 0.9), rng);
    EXPECT_NEAR(mrm_loss(pred, target, masks), brute_force_loss(pred, target, masks), 1e-10);
  }
}

TEST(MrmLoss, RejectsEmptyMask) {
  const Tensor x({1, 1, 4, 4}, 0.0);
  EXPECT_THROW(mrm_loss(x, x, PatchMask{2, 2, 2, {0, 0, 0, 0}}), InvalidArgument);
}

TEST(MrmLoss, IgnoresUnmaskedTargets) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor pred = random_tensor({1, 2, 8, 8}, rng);
    Tensor target = random_tensor({1, 2, 8, 8}, rng);
    const auto masks = sample_plane_masks(1, 2, 8, 2, 0.5, rng);
    const double before = mrm_loss(pred, target, masks);
    for (int c = 0; c < 2; ++c)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
          if (!masks[c].is_masked(y / 2, x / 2)) target.at(0, c, y, x) += 100.0 * rng.normal();
    EXPECT_EQ(mrm_loss(pred, target, masks), before);
  }
}

TEST(MrmLoss, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  Tensor pred = random_tensor({1, 2, 4, 4}, rng);
  const Tensor target = random_tensor({1, 2, 4, 4}, rng);
  const auto masks = sample_plane_masks(1, 2, 4, 2, 0.5, rng);
  const auto analytic = mrm_loss_with_grad(pred, target, masks).grad;
  const auto check = testing::check_input_gradient(
      pred, analytic, [&] { return mrm_loss(pred, target, masks); });
  EXPECT_LT(check.max_rel_error, 1e-3) << check.worst;
}

TEST(Mrm, ShapesAndEncodeAgreement) {
  Mrm model(toy_config());
  Rng rng(10);
  model.init(rng);
  const Tensor x = uniform_tensor({3, 2, 8, 8}, rng, -1, 1);
  const auto out = model.forward(x);
  EXPECT_EQ(out.reconstruction.shape(), x.shape());
  EXPECT_EQ(out.latent.shape(), (std::vector<int>{3, 4}));
  EXPECT_EQ(model.encode(x), out.latent);
  EXPECT_EQ(model.encode(x), model.encode(x));
  EXPECT_THROW(model.forward(Tensor({1, 3, 8, 8})), InvalidArgument);
}

TEST(Mrm, ZeroDecoderGivesZeroReconstruction) {
  Mrm model(toy_config());
  Rng rng(11);
  model.init(rng);
  for (nn::Param* p : model.decoder_params()) p->value.fill(0.0);
  const auto out = model.forward(uniform_tensor({2, 2, 8, 8}, rng, -1, 1));
  for (double v : out.reconstruction.values()) EXPECT_EQ(v, 0.0);
}

TEST(Mrm, ZeroEncoderGivesZeroLatent) {
  Mrm model(toy_config());
  Rng rng(12);
  model.init(rng);
  for (nn::Param* p : model.encoder_params()) p->value.fill(0.0);
  const Tensor z = model.encode(uniform_tensor({2, 2, 8, 8}, rng, -1, 1));
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
}

TEST(Mrm, OutputLayerLinearity) {
  Mrm model(toy_config());
  Rng rng(13);
  model.init(rng);
  const Tensor x = uniform_tensor({1, 2, 8, 8}, rng, -1, 1);
  auto& head = model.output_layer();
  const Tensor bias = head.bias.value;
  auto minus_bias = [&](const Tensor& r) {
    Tensor out = r;
    for (int c = 0; c < 2; ++c)
      for (int y = 0; y < 8; ++y)
        for (int xx = 0; xx < 8; ++xx) out.at(0, c, y, xx) -= bias[c];
    return out;
  };
  const Tensor base = minus_bias(model.forward(x).reconstruction);
  head.weight.value *= 2.5;
  const Tensor scaled = minus_bias(model.forward(x).reconstruction);
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(scaled[i], 2.5 * base[i], 1e-12);
}

TEST(Mrm, LatentsSeparateCases) {
  Mrm model(toy_config());
  Rng rng(14);
  model.init(rng);
  const Tensor x = uniform_tensor({2, 2, 8, 8}, rng, -1, 1);
  const Tensor z = model.encode(x);
  EXPECT_NE(z.slice(0, 1).storage(), z.slice(1, 2).storage());
  // Changing one patch changes the latent.
  for (int trial = 0; trial < 10; ++trial) {
    Tensor y = x.slice(0, 1);
    const int gy = static_cast<int>(rng.uniform_int(4)), gx = static_cast<int>(rng.uniform_int(4));
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 2; ++c) y.at(0, 0, gy * 2 + r, gx * 2 + c) += 0.5;
    EXPECT_NE(model.encode(y).storage(), z.slice(0, 1).storage());
  }
}

TEST(Mrm, GradientMatchesFiniteDifferences) {
  Mrm model(toy_config());
  Rng rng(15);
  model.init(rng);
  const Tensor target = uniform_tensor({2, 2, 8, 8}, rng, -1, 1);
  const auto masks = sample_plane_masks(2, 2, 8, 2, 0.5, rng);
  const Tensor masked = apply_mask(target, masks, 0.0);
  auto loss = [&] { return mrm_loss(model.forward(masked).reconstruction, target, masks); };
  Mrm::Cache cache;
  nn::zero_grads(model.params());
  const auto out = model.forward(masked, &cache);
  model.backward(cache, mrm_loss_with_grad(out.reconstruction, target, masks).grad);
  const auto check = testing::check_param_gradients(model.params(), loss);
  EXPECT_GT(check.checked, 100);
  EXPECT_LT(check.max_rel_error, 1e-3) << check.worst;
}

TEST(Mrm, GoldenForward) {
  MrmConfig c;
  c.channels = 2;
  c.image_size = 16;
  c.base_width = 4;
  c.stages = 2;
  c.latent_dim = 8;
  Mrm model(c);
  Rng rng(2024);
  model.init(rng);
  const Tensor x = uniform_tensor({1, 2, 16, 16}, rng, -1, 1);
  const auto out = model.forward(x);
  testing::expect_golden("mrm.reconstruction", out.reconstruction, golden::kMrmReconstruction);
  testing::expect_golden("mrm.latent", out.latent, golden::kMrmLatent);
}

TEST(TrainMrm, ZeroLearningRateKeepsParameters) {
  Mrm model(toy_config());
  Rng rng(16);
  model.init(rng);
  std::vector<Tensor> before;
  for (nn::Param* p : model.params()) before.push_back(p->value);
  MrmTrainOptions opts;
  opts.epochs = 1;
  opts.batch_size = 1;
  opts.patch_size = 2;
  opts.adam.learning_rate = 0.0;
  train_mrm(model, uniform_tensor({1, 2, 8, 8}, rng, -1, 1), opts, rng);
  const auto after = model.params();
  for (std::size_t i = 0; i < after.size(); ++i) EXPECT_EQ(after[i]->value, before[i]);
}

TEST(TrainMrm, LossHalvesOnTinyRun) {
  MrmConfig c = toy_config();
  c.image_size = 16;
  c.base_width = 4;
  c.latent_dim = 8;
  Mrm model(c);
  Rng rng(17);
  model.init(rng);
  const Tensor data = testing::phantom_targets(8, 16, 170);
  MrmTrainOptions opts;
  opts.epochs = 20;
  opts.batch_size = 4;
  opts.patch_size = 4;
  opts.adam.learning_rate = 1e-2;
  const auto losses = train_mrm(model, data, opts, rng);
  ASSERT_EQ(losses.size(), 20u);
  EXPECT_LE(losses.back(), 0.5 * losses.front());
}

TEST(TrainMrm, RejectsEmptyDataset) {
  Mrm model(toy_config());
  Rng rng(18);
  EXPECT_THROW(train_mrm(model, Tensor({0, 2, 8, 8}), MrmTrainOptions{}, rng), InvalidArgument);
}

}  // namespace
}  // namespace cdm
