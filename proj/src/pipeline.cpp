#include "cdm/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <sstream>

#include "cdm/binary_io.hpp"
#include "cdm/error.hpp"
#include "cdm/schedules.hpp"

namespace cdm {

namespace {

constexpr int kChunk = 16;

Tensor to_signed(const Tensor& unit) {
  return data::normalize_for_network({unit, data::ValueRange::kUnit}).pixels;
}

Tensor to_unit_clamped(const Tensor& signed_pixels) {
  Tensor out = data::denormalize({signed_pixels, data::ValueRange::kSigned}).pixels;
  for (double& v : out.values()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

// Rows [begin, end) of a batch-major tensor.
Tensor rows(const Tensor& x, int begin, int end) { return x.slice(begin, end); }

void copy_rows(Tensor& dst, int begin, const Tensor& src) {
  const std::size_t per = src.size() / static_cast<std::size_t>(src.dim(0));
  std::copy(src.storage().begin(), src.storage().end(),
            dst.values().begin() + static_cast<std::ptrdiff_t>(per * begin));
}

void check_train_set(const CaseSet& train, const TrainConfig& config) {
  if (train.size() == 0) throw InvalidArgument("training split is empty");
  if (train.targets.rank() != 4 || train.targets.dim(2) != config.image_size) {
    throw InvalidArgument("training images " + shape_string(train.targets.shape()) +
                          " do not match image_size " + std::to_string(config.image_size));
  }
}

void check_bundle_config(const TrainConfig& config, const CheckpointBundle& bundle) {
  config.validate();
  const bool any = bundle.has_mrm() || bundle.has_mdn() || bundle.has_cunet();
  if (any && !bundle.config.same_architecture(config)) {
    throw InvalidArgument("config does not match the architecture stored in the checkpoint");
  }
}

std::function<void(int, double)> epoch_logger(const StageOptions& options, const char* stage,
                                              int epochs) {
  if (!options.log) return {};
  return [log = options.log, stage, epochs](int epoch, double loss) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s epoch %d/%d loss %.6g", stage, epoch + 1, epochs, loss);
    log(buf);
  };
}

void write_losses(const StageOptions& options, const std::vector<double>& losses) {
  if (!options.loss_csv.empty()) io::write_text_file(options.loss_csv, format_loss_csv(losses));
}

NoiseSchedule schedule_of(const TrainConfig& c) {
  return make_linear_schedule(c.diffusion_steps, c.beta_start, c.beta_end);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <class F>
double time_seconds(F&& f) {
  const auto start = std::chrono::steady_clock::now();
  f();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

CaseSet make_case_set(std::span<const data::CaseRecord> cases) {
  CaseSet set;
  for (const auto& c : cases) set.case_ids.push_back(c.case_id);
  set.sources = data::stack_modalities(cases, data::kSourceModalities);
  set.targets = data::stack_modalities(cases, data::kTargetModalities);
  return set;
}

CaseSet load_case_set(const std::filesystem::path& data_dir, data::Split split) {
  const auto manifest = data::read_manifest(data_dir);
  const auto cases = data::load_cases(data_dir, manifest.ids(split));
  return make_case_set(cases);
}

// ---------------------------------------------------------------------------

void run_stage_mrm(const TrainConfig& config, const CaseSet& train, CheckpointBundle& bundle,
                   const StageOptions& options) {
  check_bundle_config(config, bundle);
  check_train_set(train, config);
  Mrm model(config.mrm());
  Rng init_rng(derive_seed(config.mrm_seed, 0));
  model.init(init_rng);
  MrmTrainOptions opts;
  opts.epochs = config.mrm_epochs;
  opts.batch_size = config.batch_size;
  opts.mask_ratio = config.mask_ratio;
  opts.patch_size = config.patch_size;
  opts.adam = config.adam(config.mrm_learning_rate);
  opts.on_epoch = epoch_logger(options, "mrm", config.mrm_epochs);
  Rng rng(derive_seed(config.mrm_seed, 1));
  const auto losses = train_mrm(model, to_signed(train.targets), opts, rng);
  write_losses(options, losses);
  bundle.config = config;
  bundle.mrm = std::move(model);
  bundle.mdn.reset();
  bundle.latent.reset();
  bundle.cunet.reset();
}

void run_stage_mdn(const TrainConfig& config, const CaseSet& train, CheckpointBundle& bundle,
                   const StageOptions& options) {
  if (!bundle.has_mrm()) throw StageOrderError("stage mdn requires a trained mrm stage");
  check_bundle_config(config, bundle);
  check_train_set(train, config);
  const Tensor latents = encode_targets(bundle, train.targets);
  LatentNormalizer normalizer = LatentNormalizer::fit(latents);
  Mdn model(config.mdn());
  Rng init_rng(derive_seed(config.mdn_seed, 0));
  model.init(init_rng);
  MdnTrainOptions opts;
  opts.epochs = config.mdn_epochs;
  opts.batch_size = config.batch_size;
  opts.adam = config.adam(config.mdn_learning_rate);
  opts.on_epoch = epoch_logger(options, "mdn", config.mdn_epochs);
  Rng rng(derive_seed(config.mdn_seed, 1));
  const auto losses =
      train_mdn(model, normalizer.normalize(latents), schedule_of(config), opts, rng);
  write_losses(options, losses);
  bundle.config = config;
  bundle.mdn = std::move(model);
  bundle.latent = std::move(normalizer);
  bundle.cunet.reset();
}

void run_stage_cunet(const TrainConfig& config, const CaseSet& train, CheckpointBundle& bundle,
                     const StageOptions& options) {
  if (!bundle.has_mrm()) throw StageOrderError("stage cunet requires a trained mrm stage");
  if (config.cunet_condition == ConditionSource::kSampled && !bundle.has_mdn()) {
    throw StageOrderError("stage cunet with sampled conditions requires a trained mdn stage");
  }
  check_bundle_config(config, bundle);
  check_train_set(train, config);
  bundle.config = config;
  const Tensor conditions =
      config.cunet_condition == ConditionSource::kEncoder
          ? encode_targets(bundle, train.targets)
          : sample_conditions(bundle, train.size(), config.n_sampling,
                              derive_seed(config.cunet_seed, 2));
  Cunet model(config.cunet());
  Rng init_rng(derive_seed(config.cunet_seed, 0));
  model.init(init_rng);
  CunetTrainOptions opts;
  opts.epochs = config.cunet_epochs;
  opts.batch_size = config.batch_size;
  opts.adam = config.adam(config.cunet_learning_rate);
  opts.on_epoch = epoch_logger(options, "cunet", config.cunet_epochs);
  Rng rng(derive_seed(config.cunet_seed, 1));
  const auto losses = train_cunet(model, to_signed(train.sources), to_signed(train.targets),
                                  conditions, opts, rng);
  write_losses(options, losses);
  bundle.cunet = std::move(model);
}

// ---------------------------------------------------------------------------

Tensor encode_targets(const CheckpointBundle& bundle, const Tensor& targets_unit) {
  if (!bundle.has_mrm()) throw StageOrderError("encoding requires a trained mrm stage");
  const int n = targets_unit.dim(0);
  Tensor out({n, bundle.config.latent_dim}, 0.0);
  for (int b = 0; b < n; b += kChunk) {
    const int e = std::min(n, b + kChunk);
    copy_rows(out, b, bundle.mrm->encode(to_signed(rows(targets_unit, b, e))));
  }
  return out;
}

Tensor sample_conditions(const CheckpointBundle& bundle, int count, int n_sampling,
                         std::uint64_t seed) {
  if (!bundle.has_mdn()) throw StageOrderError("sampling requires a trained mdn stage");
  Rng rng(seed);
  const Tensor z = mdn_sample(*bundle.mdn, schedule_of(bundle.config), n_sampling, count, rng);
  return bundle.latent->denormalize(z);
}

Tensor synthesize(const CheckpointBundle& bundle, const Tensor& sources_unit, std::uint64_t seed,
                  int n_sampling) {
  if (!bundle.complete()) {
    throw StageOrderError("synthesis requires all three stages (mrm, mdn, cunet)");
  }
  if (sources_unit.rank() != 4 || sources_unit.dim(1) != 2 ||
      sources_unit.dim(2) != bundle.config.image_size ||
      sources_unit.dim(3) != bundle.config.image_size) {
    throw InvalidArgument("synthesize: sources " + shape_string(sources_unit.shape()) +
                          " do not match [N, 2, " + std::to_string(bundle.config.image_size) + ", " +
                          std::to_string(bundle.config.image_size) + "]");
  }
  const int n = sources_unit.dim(0);
  const Tensor conditions = sample_conditions(bundle, n, n_sampling, seed);
  Tensor out({n, 2, bundle.config.image_size, bundle.config.image_size}, 0.0);
  for (int b = 0; b < n; b += kChunk) {
    const int e = std::min(n, b + kChunk);
    const Tensor pred =
        bundle.cunet->forward(to_signed(rows(sources_unit, b, e)), rows(conditions, b, e));
    copy_rows(out, b, to_unit_clamped(pred));
  }
  return out;
}

Tensor synthesize(const CheckpointBundle& bundle, const Tensor& sources_unit, std::uint64_t seed) {
  return synthesize(bundle, sources_unit, seed, bundle.config.n_sampling);
}

// ---------------------------------------------------------------------------

metrics::MetricReport score(const CaseSet& cases, const Tensor& predicted) {
  if (cases.size() == 0) throw InvalidArgument("evaluation split is empty");
  require_same_shape(predicted, cases.targets, "score");
  metrics::MetricReport report;
  const std::vector<std::string> names = {data::modality_name(data::Modality::kT1c),
                                          data::modality_name(data::Modality::kT2f)};
  for (int i = 0; i < cases.size(); ++i) {
    for (int c = 0; c < 2; ++c) {
      const Tensor p = plane(predicted, i, c);
      const Tensor t = plane(cases.targets, i, c);
      report.cases.push_back(
          {cases.case_ids[i], names[c], metrics::psnr(p, t), metrics::ssim(p, t), metrics::mae(p, t)});
    }
  }
  metrics::aggregate(report, names);
  return report;
}

metrics::MetricReport evaluate(const CheckpointBundle& bundle, const CaseSet& test,
                               int n_sampling) {
  if (test.size() == 0) throw InvalidArgument("evaluation split is empty");
  const int n = n_sampling > 0 ? n_sampling : bundle.config.n_sampling;
  return score(test, synthesize(bundle, test.sources, bundle.config.sample_seed, n));
}

metrics::MetricReport evaluate_identity_baseline(const CaseSet& test) {
  return score(test, test.sources);
}

// ---------------------------------------------------------------------------

double BenchResult::cost_ratio() const {
  return mdn_seconds_per_image / (cost_n_sampling * cunet_forward_seconds);
}

BenchResult benchmark_sampling(const CheckpointBundle& bundle, const CaseSet& test,
                               const std::vector<int>& n_values, int repetitions) {
  if (n_values.empty()) throw InvalidArgument("benchmark needs at least one n_sampling value");
  if (repetitions < 1) throw InvalidArgument("benchmark repetitions must be positive");
  if (test.size() == 0) throw InvalidArgument("evaluation split is empty");
  if (!bundle.complete()) throw StageOrderError("benchmark requires all three stages");
  for (int n : n_values) {
    if (n < 1 || n > bundle.config.diffusion_steps) {
      throw InvalidArgument("n_sampling " + std::to_string(n) + " outside [1, " +
                            std::to_string(bundle.config.diffusion_steps) + "]");
    }
  }
  BenchResult result;
  for (int n : n_values) {
    std::vector<double> times;
    Tensor predicted;
    for (int r = 0; r < repetitions; ++r) {
      times.push_back(time_seconds(
          [&] { predicted = synthesize(bundle, test.sources, bundle.config.sample_seed, n); }));
    }
    BenchRow row;
    row.n_sampling = n;
    row.seconds_per_image = median(times) / test.size();
    row.fps = 1.0 / row.seconds_per_image;
    row.psnr_avg = score(test, predicted).aggregate("avg").psnr;
    result.rows.push_back(row);
  }

  // Per-image costs with batch size one.
  const int reps = std::max(repetitions, 5);
  const NoiseSchedule schedule = schedule_of(bundle.config);
  const Tensor one_source = to_signed(rows(test.sources, 0, 1));
  const Tensor one_condition = encode_targets(bundle, rows(test.targets, 0, 1));
  std::vector<double> mdn_times, cunet_times;
  for (int r = 0; r < reps; ++r) {
    Rng rng(bundle.config.sample_seed);
    mdn_times.push_back(
        time_seconds([&] { mdn_sample(*bundle.mdn, schedule, result.cost_n_sampling, 1, rng); }));
    cunet_times.push_back(time_seconds([&] { bundle.cunet->forward(one_source, one_condition); }));
  }
  result.mdn_seconds_per_image = median(mdn_times);
  result.cunet_forward_seconds = median(cunet_times);
  return result;
}

std::string format_bench_csv(const BenchResult& result) {
  std::ostringstream out;
  out << "n_sampling,seconds_per_image,fps,psnr_avg\n";
  for (const auto& r : result.rows) {
    out << r.n_sampling << ',' << metrics::format_number(r.seconds_per_image) << ','
        << metrics::format_number(r.fps) << ',' << metrics::format_number(r.psnr_avg) << '\n';
  }
  out << "# mdn_seconds_per_image_n" << result.cost_n_sampling << '='
      << metrics::format_number(result.mdn_seconds_per_image) << '\n';
  out << "# cunet_forward_seconds=" << metrics::format_number(result.cunet_forward_seconds) << '\n';
  out << "# mdn_to_" << result.cost_n_sampling
      << "_cunet_forward_ratio=" << metrics::format_number(result.cost_ratio()) << '\n';
  return out.str();
}

std::string format_loss_csv(const std::vector<double>& losses) {
  std::ostringstream out;
  out << "epoch,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i)
    out << i + 1 << ',' << metrics::format_number(losses[i]) << '\n';
  return out.str();
}

}  // namespace cdm
