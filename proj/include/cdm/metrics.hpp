#pragma once

#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "cdm/tensor.hpp"

namespace cdm::metrics {

/// Returned by psnr() for identical inputs.
inline constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

/// 10 log10(max^2 / MSE) over all elements; kInfinitePsnr when MSE is 0.
double psnr(const Tensor& a, const Tensor& b, double max_value = 1.0);

/// Mean of |a - b| over all elements.
double mae(const Tensor& a, const Tensor& b);

/// Single-channel SSIM with an 11x11 Gaussian window (sigma 1.5), averaged
/// over all valid window positions. C1 = 0.01^2, C2 = 0.03^2 (unit range).
/// Inputs are [H, W] planes.
double ssim(const Tensor& a, const Tensor& b);

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

/// Normalized 1D Gaussian taps of the SSIM window.
std::vector<double> ssim_gaussian_taps();

struct MetricRow {
  std::string case_id;
  std::string modality;  // "T1c", "T2f" or "avg"
  double psnr = 0.0;
  double ssim = 0.0;
  double mae = 0.0;
};

struct MetricReport {
  std::vector<MetricRow> cases;       // one row per (case, modality)
  std::vector<MetricRow> aggregates;  // per-modality means and their average ("avg")
  int infinite_psnr_excluded = 0;     // per-case rows left out of the PSNR means

  const MetricRow& aggregate(const std::string& modality) const;
};

/// Builds aggregate rows as arithmetic means of the per-case rows. Infinite
/// PSNR rows are excluded from the PSNR mean and counted.
void aggregate(MetricReport& report, const std::vector<std::string>& modalities);

/// CSV with header "case_id,modality,psnr,ssim,mae"; aggregates use case_id "mean".
std::string format_report_csv(const MetricReport& report);
void write_report_csv(const MetricReport& report, const std::filesystem::path& path);

std::string format_number(double v);

}  // namespace cdm::metrics
