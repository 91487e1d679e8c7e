#include <gtest/gtest.h>

#include <cstdint>
#include <fstream>
#include <sstream>

#include "cdm/checkpoint.hpp"
#include "cdm/data.hpp"
#include "cdm/error.hpp"
#include "cdm/pipeline.hpp"
#include "support/tempdir.hpp"
#include "support/tiny_config.hpp"

namespace cdm {
namespace {

using testing::tiny_config;

CaseSet tiny_cases(int count, std::uint64_t seed) {
  const auto spec = data::PhantomSpec::standard(16);
  std::vector<data::CaseRecord> recs;
  for (int i = 0; i < count; ++i)
    recs.push_back(data::generate_phantom_case(spec, derive_seed(seed, i), "c" + std::to_string(i)));
  return make_case_set(recs);
}

class TrainedPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    train_ = new CaseSet(tiny_cases(8, 1));
    test_ = new CaseSet(tiny_cases(3, 2));
    bundle_ = new CheckpointBundle;
    bundle_->config = tiny_config();
    run_stage_mrm(tiny_config(), *train_, *bundle_);
    run_stage_mdn(tiny_config(), *train_, *bundle_);
    run_stage_cunet(tiny_config(), *train_, *bundle_);
  }
  static void TearDownTestSuite() {
    delete train_;
    delete test_;
    delete bundle_;
  }

  static CaseSet* train_;
  static CaseSet* test_;
  static CheckpointBundle* bundle_;
};

CaseSet* TrainedPipeline::train_ = nullptr;
CaseSet* TrainedPipeline::test_ = nullptr;
CheckpointBundle* TrainedPipeline::bundle_ = nullptr;

TEST(CaseSet, StacksSourcesAndTargets) {
  const CaseSet s = tiny_cases(3, 4);
  EXPECT_EQ(s.size(), 3);
  EXPECT_EQ(s.sources.shape(), (std::vector<int>{3, 2, 16, 16}));
  EXPECT_EQ(s.targets.shape(), (std::vector<int>{3, 2, 16, 16}));
}

TEST(StageOrder, DownstreamStagesRequireUpstream) {
  const CaseSet train = tiny_cases(4, 3);
  CheckpointBundle b;
  b.config = tiny_config();
  EXPECT_THROW(run_stage_mdn(tiny_config(), train, b), StageOrderError);
  EXPECT_THROW(run_stage_cunet(tiny_config(), train, b), StageOrderError);
  EXPECT_THROW(synthesize(b, train.sources, 1), StageOrderError);
  run_stage_mrm(tiny_config(), train, b);
  TrainConfig sampled = tiny_config();
  sampled.cunet_condition = ConditionSource::kSampled;
  EXPECT_THROW(run_stage_cunet(sampled, train, b), StageOrderError);
  EXPECT_NO_THROW(run_stage_cunet(tiny_config(), train, b));
  EXPECT_THROW(synthesize(b, train.sources, 1), StageOrderError);
}

TEST(StageOrder, ArchitectureChangeIsRejected) {
  const CaseSet train = tiny_cases(4, 3);
  CheckpointBundle b;
  b.config = tiny_config();
  run_stage_mrm(tiny_config(), train, b);
  TrainConfig wider = tiny_config();
  wider.mdn_hidden = 32;
  EXPECT_THROW(run_stage_mdn(wider, train, b), InvalidArgument);
}

TEST(StageOrder, RetrainingMrmClearsDownstream) {
  const CaseSet train = tiny_cases(4, 3);
  CheckpointBundle b = testing::random_bundle(tiny_config(), 3);
  run_stage_mrm(tiny_config(), train, b);
  EXPECT_TRUE(b.has_mrm());
  EXPECT_FALSE(b.has_mdn());
  EXPECT_FALSE(b.has_cunet());
}

TEST(Stages, RepeatRunsGiveIdenticalBundles) {
  const CaseSet train = tiny_cases(4, 5);
  CheckpointBundle a, b;
  a.config = b.config = tiny_config();
  for (CheckpointBundle* x : {&a, &b}) {
    run_stage_mrm(tiny_config(), train, *x);
    run_stage_mdn(tiny_config(), train, *x);
    run_stage_cunet(tiny_config(), train, *x);
  }
  EXPECT_EQ(encode_checkpoint(a), encode_checkpoint(b));
}

// Reductions over unaligned buffers sum in an address-dependent order.
TEST(Tensor, StorageIsCacheLineAligned) {
  for (int n : {1, 3, 7, 33}) {
    const Tensor t({n, 5});
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(t.data()) % 64, 0u);
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(t.slice(1, n).data()) % 64, 0u);
  }
}

TEST(Stages, LossCurveIsWritten) {
  const CaseSet train = tiny_cases(4, 5);
  CheckpointBundle b;
  b.config = tiny_config();
  testing::TempDir dir;
  int lines = 0;
  StageOptions opts;
  opts.loss_csv = dir / "mrm.csv";
  opts.log = [&](const std::string&) { ++lines; };
  run_stage_mrm(tiny_config(), train, b, opts);
  EXPECT_EQ(lines, tiny_config().mrm_epochs);
  std::ifstream in(opts.loss_csv);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "epoch,loss");
}

TEST_F(TrainedPipeline, SynthesisIsDeterministicAndInRange) {
  const auto before = encode_checkpoint(*bundle_);
  const Tensor a = synthesize(*bundle_, test_->sources, 11);
  const Tensor b = synthesize(*bundle_, test_->sources, 11);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.shape(), test_->targets.shape());
  for (double v : a.values()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
  EXPECT_NE(synthesize(*bundle_, test_->sources, 12), a);
  EXPECT_EQ(encode_checkpoint(*bundle_), before);
  EXPECT_THROW(synthesize(*bundle_, Tensor({1, 2, 8, 8}), 1), InvalidArgument);
}

TEST_F(TrainedPipeline, SynthesisDoesNotDependOnBatchComposition) {
  const Tensor all = synthesize(*bundle_, test_->sources, 11);
  const Tensor first = synthesize(*bundle_, test_->sources.slice(0, 1), 11);
  EXPECT_EQ(all.slice(0, 1), first);
}

TEST_F(TrainedPipeline, SampledConditionsHaveLatentShape) {
  const Tensor z = sample_conditions(*bundle_, 5, 3, 9);
  EXPECT_EQ(z.shape(), (std::vector<int>{5, 8}));
  EXPECT_TRUE(z.all_finite());
  EXPECT_EQ(encode_targets(*bundle_, test_->targets).shape(), (std::vector<int>{3, 8}));
}

TEST_F(TrainedPipeline, EvaluateReportShape) {
  const auto r = evaluate(*bundle_, *test_);
  EXPECT_EQ(r.cases.size() + r.aggregates.size(), static_cast<std::size_t>(test_->size()) * 2 + 3);
  double sum = 0.0;
  for (const auto& row : r.cases)
    if (row.modality == "T1c") sum += row.ssim;
  EXPECT_NEAR(r.aggregate("T1c").ssim, sum / test_->size(), 1e-9);
  EXPECT_NEAR(r.aggregate("avg").psnr, (r.aggregate("T1c").psnr + r.aggregate("T2f").psnr) / 2, 1e-9);
}

TEST(Score, GroundTruthIsPerfect) {
  const CaseSet s = tiny_cases(3, 6);
  const auto r = score(s, s.targets);
  for (const auto& row : r.cases) {
    EXPECT_EQ(row.mae, 0.0);
    EXPECT_EQ(row.ssim, 1.0);
    EXPECT_EQ(row.psnr, metrics::kInfinitePsnr);
  }
  EXPECT_EQ(r.infinite_psnr_excluded, 6);
  EXPECT_THROW(score(CaseSet{}, Tensor({0, 2, 16, 16})), InvalidArgument);
}

TEST(Score, IdentityBaselineUsesSources) {
  const CaseSet s = tiny_cases(3, 7);
  const auto r = evaluate_identity_baseline(s);
  EXPECT_EQ(r.cases.size(), 6u);
  EXPECT_GT(r.aggregate("T1c").mae, 0.0);
}

TEST_F(TrainedPipeline, BenchmarkRowsAndCsv) {
  const BenchResult one = benchmark_sampling(*bundle_, *test_, {5}, 1);
  ASSERT_EQ(one.rows.size(), 1u);
  EXPECT_EQ(one.rows[0].n_sampling, 5);
  EXPECT_GT(one.rows[0].fps, 0.0);
  EXPECT_NEAR(one.rows[0].fps * one.rows[0].seconds_per_image, 1.0, 1e-9);

  const BenchResult r = benchmark_sampling(*bundle_, *test_, {10, 400}, 3);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_GT(r.rows[1].seconds_per_image, r.rows[0].seconds_per_image);
  EXPECT_GT(r.cost_ratio(), 0.0);

  std::istringstream in(format_bench_csv(r));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "n_sampling,seconds_per_image,fps,psnr_avg");
  std::getline(in, line);
  EXPECT_EQ(line.rfind("10,", 0), 0u);
  std::string rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_NE(rest.find("# mdn_to_30_cunet_forward_ratio="), std::string::npos);
}

TEST(LossCsv, Layout) {
  EXPECT_EQ(format_loss_csv({0.5, 0.25}), "epoch,loss\n1,0.5\n2,0.25\n");
}

}  // namespace
}  // namespace cdm
