#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>

#include "cdm/error.hpp"
#include "cdm/mdn.hpp"
#include "golden.hpp"
#include "support/gradcheck.hpp"

namespace cdm {
namespace {

using testing::random_tensor;

MdnConfig toy_config() {
  MdnConfig c;
  c.latent_dim = 4;
  c.hidden = 8;
  c.blocks = 1;
  c.time_dim = 4;
  return c;
}

TEST(TimestepEmbed, ZeroTime) {
  const Tensor e = timestep_embed(0, 16);
  ASSERT_EQ(e.shape(), (std::vector<int>{16}));
  for (int i = 0; i < 16; i += 2) {
    EXPECT_EQ(e[i], 0.0);
    EXPECT_EQ(e[i + 1], 1.0);
  }
}

TEST(TimestepEmbed, FormulaOracle) {
  // mpmath, tests/oracle/derive_values.py
  const double want[8] = {0.6569865987187890904,  0.75390225434330463814, 0.64421768723769105367,
                          0.76484218728448842626, 0.069942847337532763977, 0.99755100025327957462,
                          0.0069999428334733915033, 0.99997550010004150327};
  const Tensor e = timestep_embed(7, 8);
  for (int i = 0; i < 8; ++i) EXPECT_NEAR(e[i], want[i], 1e-14) << i;
  EXPECT_EQ(timestep_embed(7, 8), e);
}

TEST(TimestepEmbed, BatchedRowsMatch) {
  const std::vector<int> ts = {0, 3, 999};
  const Tensor b = timestep_embed(ts, 6);
  for (int r = 0; r < 3; ++r) EXPECT_EQ(b.slice(r, r + 1).reshaped({6}), timestep_embed(ts[r], 6));
}

TEST(TimestepEmbed, RejectsOddWidthAndNegativeTime) {
  EXPECT_THROW(timestep_embed(1, 7), InvalidArgument);
  EXPECT_THROW(timestep_embed(-1, 8), InvalidArgument);
}

TEST(Mdn, ShapeContractAndOddDimension) {
  Mdn model(MdnConfig{});
  Rng rng(1);
  model.init(rng);
  const Tensor y = random_tensor({3, 256}, rng);
  EXPECT_EQ(model.forward(y, 10).shape(), y.shape());
  MdnConfig odd;
  odd.latent_dim = 5;
  EXPECT_THROW(Mdn{odd}, InvalidArgument);
  EXPECT_THROW(model.forward(Tensor({1, 254}), 1), InvalidArgument);
}

TEST(Mdn, ZeroBlocksReduceToDecoupledHead) {
  MdnConfig c = toy_config();
  c.blocks = 2;
  Mdn model(c);
  Rng rng(2);
  model.init(rng);
  for (nn::Param* p : model.block_params()) p->value.fill(0.0);
  const Tensor y = random_tensor({2, 4}, rng);
  const auto [a, b] = model.decouple(y);
  // Rebuild head(concat(a, b)) from the parameter list.
  nn::Param* head_w = nullptr;
  nn::Param* head_b = nullptr;
  for (nn::Param* p : model.params()) {
    if (p->name == "mdn.head.weight") head_w = p;
    if (p->name == "mdn.head.bias") head_b = p;
  }
  ASSERT_TRUE(head_w && head_b);
  const int h = a.dim(1) + b.dim(1);
  const Tensor out = model.forward(y, 17);
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 4; ++o) {
      double v = head_b->value[o];
      for (int i = 0; i < h; ++i) {
        const double x = i < a.dim(1) ? a.at(n, i) : b.at(n, i - a.dim(1));
        v += head_w->value[static_cast<std::size_t>(o) * h + i] * x;
      }
      EXPECT_NEAR(out.at(n, o), v, 1e-12);
    }
}

TEST(Mdn, DecouplingIndependence) {
  Mdn model(MdnConfig{});
  Rng rng(3);
  model.init(rng);
  const Tensor y = random_tensor({2, 256}, rng);
  Tensor y2 = y;
  for (int n = 0; n < 2; ++n)
    for (int d = 128; d < 256; ++d) y2.at(n, d) += rng.normal();
  EXPECT_EQ(model.decouple(y).first, model.decouple(y2).first);
  EXPECT_NE(model.decouple(y).second, model.decouple(y2).second);
  Tensor y3 = y;
  for (int n = 0; n < 2; ++n)
    for (int d = 0; d < 128; ++d) y3.at(n, d) -= rng.normal();
  EXPECT_EQ(model.decouple(y).second, model.decouple(y3).second);
}

TEST(Mdn, FiniteOnLargeInputs) {
  Mdn model(MdnConfig{});
  Rng rng(4);
  model.init(rng);
  Tensor y({4, 256});
  for (double& v : y.values()) v = rng.uniform(-1e3, 1e3);
  EXPECT_TRUE(model.forward(y, 999).all_finite());
}

TEST(Mdn, GoldenForward) {
  Mdn model(toy_config());
  Rng rng(2024);
  model.init(rng);
  const Tensor y = random_tensor({2, 4}, rng);
  testing::expect_golden("mdn.output", model.forward(y, 5), golden::kMdnOutput);
}

TEST(MdnLoss, PerfectStubGivesZero) {
  const auto s = make_linear_schedule(1000, 1e-4, 0.02);
  Rng rng(5);
  const Tensor y0 = random_tensor({6, 4}, rng);
  const NoiseDraw draw = draw_training_noise(y0, s, rng);
  const Denoiser perfect = [&](const Tensor&, std::span<const int>) { return y0; };
  EXPECT_EQ(denoising_loss(perfect, y0, draw), 0.0);
}

TEST(MdnLoss, GradientMatchesFiniteDifferences) {
  Mdn model(toy_config());
  Rng rng(6);
  model.init(rng);
  const auto s = make_linear_schedule(1000, 1e-4, 0.02);
  const Tensor y0 = random_tensor({3, 4}, rng);
  const NoiseDraw draw = draw_training_noise(y0, s, rng);
  nn::zero_grads(model.params());
  mdn_loss_and_grad(model, y0, draw);
  const Denoiser net = [&](const Tensor& y, std::span<const int> ts) { return model.forward(y, ts); };
  const auto check = testing::check_param_gradients(
      model.params(), [&] { return denoising_loss(net, y0, draw); }, 64);
  EXPECT_GT(check.checked, 50);
  EXPECT_LT(check.max_rel_error, 1e-3) << check.worst;
}

TEST(MdnTrainStep, ZeroLearningRate) {
  Mdn model(toy_config());
  Rng rng(7);
  model.init(rng);
  std::vector<Tensor> before;
  for (nn::Param* p : model.params()) before.push_back(p->value);
  nn::AdamOptions o;
  o.learning_rate = 0.0;
  nn::Adam adam(model.params(), o);
  const double loss = mdn_train_step(model, adam, random_tensor({4, 4}, rng),
                                     make_linear_schedule(100, 1e-4, 0.02), rng);
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_GT(loss, 0.0);
  const auto after = model.params();
  for (std::size_t i = 0; i < after.size(); ++i) EXPECT_EQ(after[i]->value, before[i]);
}

TEST(DdimSample, ConstantStubConverges) {
  const auto s = make_linear_schedule(1000, 1e-4, 0.02);
  Rng rng(8);
  const Tensor c = random_tensor({1, 6}, rng);
  const Denoiser stub = [&](const Tensor& y, std::span<const int>) {
    Tensor out(y.shape());
    for (int n = 0; n < y.dim(0); ++n)
      for (int d = 0; d < 6; ++d) out.at(n, d) = c.at(0, d);
    return out;
  };
  for (int n : {1, 10, 30}) {
    const Tensor y = ddim_sample(stub, s, n, 3, 6, rng);
    for (int r = 0; r < 3; ++r)
      for (int d = 0; d < 6; ++d) EXPECT_NEAR(y.at(r, d), c.at(0, d), 1e-5);
  }
}

TEST(MdnSample, DeterministicGivenSeed) {
  Mdn model(toy_config());
  Rng init(9);
  model.init(init);
  const auto s = make_linear_schedule(1000, 1e-4, 0.02);
  Rng a(42), b(42);
  EXPECT_EQ(mdn_sample(model, s, 10, 2, a), mdn_sample(model, s, 10, 2, b));
}

TEST(MdnSample, CostScalesWithSteps) {
  Mdn model(MdnConfig{});
  Rng init(10);
  model.init(init);
  const auto s = make_linear_schedule(1000, 1e-4, 0.02);
  auto time_n = [&](int n) {
    std::vector<double> t;
    for (int r = 0; r < 5; ++r) {
      Rng rng(1);
      const auto start = std::chrono::steady_clock::now();
      mdn_sample(model, s, n, 4, rng);
      t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    }
    std::sort(t.begin(), t.end());
    return t[2];
  };
  const double ratio = time_n(30) / time_n(10);
  EXPECT_GE(ratio, 2.0);
  EXPECT_LE(ratio, 4.0);
}

TEST(TrainMdn, PointMassLatents) {
  MdnConfig c;
  c.latent_dim = 8;
  c.hidden = 64;
  c.blocks = 2;
  c.time_dim = 16;
  Mdn model(c);
  Rng rng(11);
  model.init(rng);
  const Tensor v({1, 8}, {0.5, -0.3, 1.2, 0.0, -1.0, 0.7, 0.25, -0.6});
  Tensor data({32, 8});
  for (int n = 0; n < 32; ++n)
    for (int d = 0; d < 8; ++d) data.at(n, d) = v.at(0, d);
  const auto s = make_linear_schedule(1000, 1e-4, 0.02);
  MdnTrainOptions opts;
  opts.epochs = 150;
  opts.batch_size = 16;
  opts.adam.learning_rate = 1e-3;
  train_mdn(model, data, s, opts, rng);
  const Tensor samples = mdn_sample(model, s, 30, 16, rng);
  double worst = 0.0;
  for (int n = 0; n < 16; ++n)
    for (int d = 0; d < 8; ++d) worst = std::max(worst, std::abs(samples.at(n, d) - v.at(0, d)));
  EXPECT_LE(worst, 0.05);
}

}  // namespace
}  // namespace cdm
