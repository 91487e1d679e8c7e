// cdm: data generation, staged training, synthesis, evaluation and
// sampling benchmarks for the conditioned latent-diffusion synthesizer.
//
// Exit codes: 0 success, 1 I/O, 2 arguments or validation, 3 stage order.
// Logs go to stderr; stdout carries only the path of the final artifact.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "cdm/binary_io.hpp"
#include "cdm/checkpoint.hpp"
#include "cdm/data.hpp"
#include "cdm/error.hpp"
#include "cdm/pipeline.hpp"
#include "cdm/run_config.hpp"

namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kIo = 1, kUsage = 2, kOrder = 3 };

void log(const std::string& msg) { std::cerr << "[cdm] " << msg << '\n'; }

fs::path loss_path(const fs::path& checkpoint, const char* stage) {
  return checkpoint.parent_path() / (checkpoint.stem().string() + "_loss_" + stage + ".csv");
}

// --- gen-data ---------------------------------------------------------------

struct GenArgs {
  fs::path out;
  int cases = 0;
  int size = 64;
  std::uint64_t seed = 0;
};

int cmd_gen_data(const GenArgs& a) {
  if (a.cases < 2) throw cdm::InvalidArgument("--cases must be at least 2");
  const auto spec = cdm::data::PhantomSpec::standard(a.size);
  const auto manifest = cdm::data::generate_dataset(a.out, a.cases, spec, a.seed);
  log("wrote " + std::to_string(a.cases) + " cases (" +
      std::to_string(manifest.ids(cdm::data::Split::kTrain).size()) + " train, " +
      std::to_string(manifest.ids(cdm::data::Split::kTest).size()) + " test)");
  std::cout << (a.out / cdm::data::kManifestFileName).string() << '\n';
  return kOk;
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  fs::path config;
  std::string stage = "all";
  fs::path data;
  fs::path checkpoint;
};

int cmd_train(const TrainArgs& a) {
  cdm::TrainConfig config;
  if (!a.config.empty()) config = cdm::read_config(a.config);
  config.validate();

  cdm::CheckpointBundle bundle;
  if (fs::exists(a.checkpoint)) {
    bundle = cdm::load_checkpoint(a.checkpoint);
    log("loaded " + a.checkpoint.string());
  } else {
    bundle.config = config;
  }
  // Order is checked before any data is touched.
  if ((a.stage == "mdn" || a.stage == "cunet") && !bundle.has_mrm()) {
    throw cdm::StageOrderError("stage " + a.stage + " requires the mrm stage in " +
                               a.checkpoint.string());
  }

  const auto train = cdm::load_case_set(a.data, cdm::data::Split::kTrain);
  log("training on " + std::to_string(train.size()) + " cases");
  auto opts = [&](const char* stage) {
    cdm::StageOptions o;
    o.loss_csv = loss_path(a.checkpoint, stage);
    o.log = log;
    return o;
  };
  const bool all = a.stage == "all";
  if (all || a.stage == "mrm") cdm::run_stage_mrm(config, train, bundle, opts("mrm"));
  if (all || a.stage == "mdn") cdm::run_stage_mdn(config, train, bundle, opts("mdn"));
  if (all || a.stage == "cunet") cdm::run_stage_cunet(config, train, bundle, opts("cunet"));
  cdm::save_checkpoint(bundle, a.checkpoint);
  std::cout << a.checkpoint.string() << '\n';
  return kOk;
}

// --- synthesize -------------------------------------------------------------

struct SynthArgs {
  fs::path checkpoint;
  fs::path data;
  std::string case_id;
  std::uint64_t seed = 0;
  bool seed_given = false;
  fs::path out;
};

int cmd_synthesize(const SynthArgs& a) {
  const auto bundle = cdm::load_checkpoint(a.checkpoint);
  const auto manifest = cdm::data::read_manifest(a.data);
  if (!manifest.contains(a.case_id)) {
    throw cdm::InvalidArgument("unknown case id '" + a.case_id + "'");
  }
  if (!bundle.complete()) throw cdm::StageOrderError("checkpoint lacks a trained stage");
  const std::vector<cdm::data::CaseRecord> cases = {cdm::data::read_case(a.data, a.case_id)};
  const auto set = cdm::make_case_set(cases);
  const std::uint64_t seed = a.seed_given ? a.seed : bundle.config.sample_seed;
  const cdm::Tensor out = cdm::synthesize(bundle, set.sources, seed);

  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw cdm::IoError("cannot create " + a.out.string() + ": " + ec.message());
  for (int c = 0; c < 2; ++c) {
    const std::string name = a.case_id + "_" +
                             cdm::data::modality_name(cdm::data::kTargetModalities[c]);
    const cdm::Tensor p = cdm::plane(out, 0, c);
    cdm::data::write_pgm16(a.out / (name + ".pgm"), p);
    cdm::data::write_raw_f32(a.out / (name + ".f32"), p);
  }
  log("synthesized " + a.case_id + " with seed " + std::to_string(seed));
  std::cout << a.out.string() << '\n';
  return kOk;
}

// --- evaluate / bench -------------------------------------------------------

struct EvalArgs {
  fs::path checkpoint;
  fs::path data;
  fs::path report;
  fs::path baseline;
  int n_sampling = 0;
};

cdm::CaseSet load_test_set(const fs::path& data) {
  auto test = cdm::load_case_set(data, cdm::data::Split::kTest);
  if (test.size() == 0) throw cdm::InvalidArgument("test split of " + data.string() + " is empty");
  return test;
}

int cmd_evaluate(const EvalArgs& a) {
  const auto bundle = cdm::load_checkpoint(a.checkpoint);
  const auto test = load_test_set(a.data);
  const auto report = cdm::evaluate(bundle, test, a.n_sampling);
  cdm::metrics::write_report_csv(report, a.report);
  const auto& avg = report.aggregate("avg");
  log("avg psnr " + cdm::metrics::format_number(avg.psnr) + " ssim " +
      cdm::metrics::format_number(avg.ssim) + " mae " + cdm::metrics::format_number(avg.mae));
  if (report.infinite_psnr_excluded > 0) {
    log(std::to_string(report.infinite_psnr_excluded) + " identical images left out of PSNR means");
  }
  if (!a.baseline.empty()) {
    cdm::metrics::write_report_csv(cdm::evaluate_identity_baseline(test), a.baseline);
  }
  std::cout << a.report.string() << '\n';
  return kOk;
}

struct BenchArgs {
  fs::path checkpoint;
  fs::path data;
  std::vector<int> n_values = {10, 20, 30, 40};
  int repetitions = 3;
  fs::path report;
};

int cmd_bench(const BenchArgs& a) {
  const auto bundle = cdm::load_checkpoint(a.checkpoint);
  const auto test = load_test_set(a.data);
  const auto result = cdm::benchmark_sampling(bundle, test, a.n_values, a.repetitions);
  cdm::io::write_text_file(a.report, cdm::format_bench_csv(result));
  log("mdn/cunet cost ratio " + cdm::metrics::format_number(result.cost_ratio()));
  std::cout << a.report.string() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditioned latent-diffusion MRI modality synthesis"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic phantom dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--cases", gen.cases, "Number of cases")->required();
  gen_cmd->add_option("--size", gen.size, "Image side length")->check(CLI::Range(16, 4096));
  gen_cmd->add_option("--seed", gen.seed, "Generator seed");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Run training stages");
  train_cmd->add_option("--config", train.config, "key=value config file")->check(CLI::ExistingFile);
  train_cmd->add_option("--stage", train.stage, "Stage to run")
      ->check(CLI::IsMember({"mrm", "mdn", "cunet", "all"}));
  train_cmd->add_option("--data", train.data, "Dataset directory")->required();
  train_cmd->add_option("--checkpoint", train.checkpoint, "Checkpoint file (updated)")->required();

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synthesize", "Synthesize T1c and T2f for one case");
  synth_cmd->add_option("--checkpoint", synth.checkpoint, "Checkpoint file")->required();
  synth_cmd->add_option("--data", synth.data, "Dataset directory")->required();
  synth_cmd->add_option("--case", synth.case_id, "Case id")->required();
  auto* seed_opt = synth_cmd->add_option("--seed", synth.seed, "Sampling seed");
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("evaluate", "Score synthesis on the test split");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval.data, "Dataset directory")->required();
  eval_cmd->add_option("--report", eval.report, "Metric CSV to write")->required();
  eval_cmd->add_option("--baseline", eval.baseline, "Also write the identity-baseline CSV here");
  eval_cmd->add_option("--n", eval.n_sampling, "Sampling steps (default: from checkpoint)")
      ->check(CLI::PositiveNumber);

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "Time synthesis across sampling step counts");
  bench_cmd->add_option("--checkpoint", bench.checkpoint, "Checkpoint file")->required();
  bench_cmd->add_option("--data", bench.data, "Dataset directory")->required();
  bench_cmd->add_option("--n", bench.n_values, "Comma-separated step counts")->delimiter(',');
  bench_cmd->add_option("--repetitions", bench.repetitions, "Timed runs per step count")
      ->check(CLI::Range(1, 1000));
  bench_cmd->add_option("--report", bench.report, "Bench CSV to write")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) return cmd_train(train);
    if (*synth_cmd) {
      synth.seed_given = seed_opt->count() > 0;
      return cmd_synthesize(synth);
    }
    if (*eval_cmd) return cmd_evaluate(eval);
    if (*bench_cmd) return cmd_bench(bench);
  } catch (const cdm::InvalidArgument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const cdm::StageOrderError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOrder;
  } catch (const cdm::IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  }
  return kUsage;
}
