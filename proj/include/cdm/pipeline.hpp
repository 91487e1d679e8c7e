#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cdm/checkpoint.hpp"
#include "cdm/data.hpp"
#include "cdm/metrics.hpp"
#include "cdm/run_config.hpp"
#include "cdm/tensor.hpp"

// Three-stage training (representation model, latent diffusion, conditioned
// UNet) and two-phase inference.

namespace cdm {

/// Source and target images of a set of cases.
struct CaseSet {
  std::vector<std::string> case_ids;
  Tensor sources;  // [N, 2, S, S] T1 and T2, unit range
  Tensor targets;  // [N, 2, S, S] T1c and T2f, unit range

  int size() const { return static_cast<int>(case_ids.size()); }
};

CaseSet make_case_set(std::span<const data::CaseRecord> cases);
/// Loads the cases of one split listed in the directory's manifest.
CaseSet load_case_set(const std::filesystem::path& data_dir, data::Split split);

using LogFn = std::function<void(const std::string&)>;

struct StageOptions {
  std::filesystem::path loss_csv;  // empty: no loss curve written
  LogFn log;                       // per-epoch progress, may be empty
};

/// Trains the representation model on the target modalities of `train`.
/// Clears any MDN and C-UNet in the bundle, which depended on the old encoder.
void run_stage_mrm(const TrainConfig& config, const CaseSet& train, CheckpointBundle& bundle,
                   const StageOptions& options = {});
/// Trains the diffusion network on frozen-encoder latents. Requires MRM.
/// Clears any C-UNet in the bundle.
void run_stage_mdn(const TrainConfig& config, const CaseSet& train, CheckpointBundle& bundle,
                   const StageOptions& options = {});
/// Trains the conditioned UNet. Requires MRM, and MDN when the config asks for
/// sampled conditions.
void run_stage_cunet(const TrainConfig& config, const CaseSet& train, CheckpointBundle& bundle,
                     const StageOptions& options = {});

/// Latents of the target modalities from the frozen encoder, [N, D].
Tensor encode_targets(const CheckpointBundle& bundle, const Tensor& targets_unit);

/// `count` conditions sampled from the MDN and mapped back to encoder space.
Tensor sample_conditions(const CheckpointBundle& bundle, int count, int n_sampling,
                         std::uint64_t seed);

/// Synthesizes T1c and T2f from T1 and T2 (unit range, [N, 2, S, S]). One
/// latent is sampled per image. Output is clamped to [0, 1].
Tensor synthesize(const CheckpointBundle& bundle, const Tensor& sources_unit, std::uint64_t seed,
                  int n_sampling);
Tensor synthesize(const CheckpointBundle& bundle, const Tensor& sources_unit, std::uint64_t seed);

/// Per-case metrics of `predicted` against `cases.targets`, plus aggregates.
metrics::MetricReport score(const CaseSet& cases, const Tensor& predicted);

metrics::MetricReport evaluate(const CheckpointBundle& bundle, const CaseSet& test,
                               int n_sampling = 0);
/// Copies T1 as the T1c prediction and T2 as the T2f prediction.
metrics::MetricReport evaluate_identity_baseline(const CaseSet& test);

struct BenchRow {
  int n_sampling = 0;
  double seconds_per_image = 0.0;
  double fps = 0.0;
  double psnr_avg = 0.0;
};

struct BenchResult {
  std::vector<BenchRow> rows;
  int cost_n_sampling = 30;
  double mdn_seconds_per_image = 0.0;  // one latent sampled with cost_n_sampling steps
  double cunet_forward_seconds = 0.0;  // one C-UNet forward pass on one image
  double cost_ratio() const;           // mdn / (cost_n_sampling * cunet)
};

/// Times full synthesis of the test set for each n (median of repetitions)
/// and scores it; also times the MDN sampler against C-UNet forward passes.
BenchResult benchmark_sampling(const CheckpointBundle& bundle, const CaseSet& test,
                               const std::vector<int>& n_values, int repetitions);

/// Columns n_sampling,seconds_per_image,fps,psnr_avg; the cost comparison
/// follows as `#` comment lines.
std::string format_bench_csv(const BenchResult& result);

std::string format_loss_csv(const std::vector<double>& losses);

}  // namespace cdm
