#include "cdm/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <span>
#include <sstream>

#include "cdm/binary_io.hpp"
#include "cdm/error.hpp"

namespace cdm::metrics {

double psnr(const Tensor& a, const Tensor& b, double max_value) {
  require_same_shape(a, b, "psnr");
  if (!(max_value > 0.0)) throw InvalidArgument("psnr: max_value must be positive");
  if (a.empty()) throw InvalidArgument("psnr: empty images");
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
  const double mse = sq / static_cast<double>(a.size());
  if (mse == 0.0) return kInfinitePsnr;
  return 10.0 * std::log10(max_value * max_value / mse);
}

double mae(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mae");
  if (a.empty()) throw InvalidArgument("mae: empty images");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

std::vector<double> ssim_gaussian_taps() {
  std::vector<double> taps(kSsimWindow);
  const int half = kSsimWindow / 2;
  double sum = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - half;
    taps[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    sum += taps[i];
  }
  for (double& t : taps) t /= sum;
  return taps;
}

namespace {

// Separable 'valid' filtering of an [H, W] field.
std::vector<double> filter_valid(std::span<const double> x, int h, int w,
                                 const std::vector<double>& taps) {
  const int k = static_cast<int>(taps.size());
  const int oh = h - k + 1, ow = w - k + 1;
  std::vector<double> rows(static_cast<std::size_t>(h) * ow, 0.0);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < ow; ++j) {
      double s = 0.0;
      for (int t = 0; t < k; ++t) s += taps[t] * x[static_cast<std::size_t>(i) * w + j + t];
      rows[static_cast<std::size_t>(i) * ow + j] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow, 0.0);
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j) {
      double s = 0.0;
      for (int t = 0; t < k; ++t) s += taps[t] * rows[static_cast<std::size_t>(i + t) * ow + j];
      out[static_cast<std::size_t>(i) * ow + j] = s;
    }
  return out;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "ssim");
  if (a.rank() != 2) throw InvalidArgument("ssim expects single-channel [H, W] planes");
  const int h = a.dim(0), w = a.dim(1);
  if (h < kSsimWindow || w < kSsimWindow) {
    throw InvalidArgument("ssim: image " + std::to_string(h) + "x" + std::to_string(w) +
                          " smaller than the " + std::to_string(kSsimWindow) + "x" +
                          std::to_string(kSsimWindow) + " window");
  }
  const auto taps = ssim_gaussian_taps();
  const std::span<const double> av = a.values();
  const std::span<const double> bv = b.values();
  std::vector<double> aa(av.size()), bb(av.size()), ab(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    aa[i] = av[i] * av[i];
    bb[i] = bv[i] * bv[i];
    ab[i] = av[i] * bv[i];
  }
  const auto mu_a = filter_valid(av, h, w, taps);
  const auto mu_b = filter_valid(bv, h, w, taps);
  const auto e_aa = filter_valid(aa, h, w, taps);
  const auto e_bb = filter_valid(bb, h, w, taps);
  const auto e_ab = filter_valid(ab, h, w, taps);
  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = e_aa[i] - ma * ma, vb = e_bb[i] - mb * mb, cov = e_ab[i] - ma * mb;
    total += ((2.0 * ma * mb + kSsimC1) * (2.0 * cov + kSsimC2)) /
             ((ma * ma + mb * mb + kSsimC1) * (va + vb + kSsimC2));
  }
  return total / static_cast<double>(mu_a.size());
}

// ---------------------------------------------------------------------------

const MetricRow& MetricReport::aggregate(const std::string& modality) const {
  for (const auto& r : aggregates)
    if (r.modality == modality) return r;
  throw InvalidArgument("no aggregate row for modality " + modality);
}

void aggregate(MetricReport& report, const std::vector<std::string>& modalities) {
  report.aggregates.clear();
  report.infinite_psnr_excluded = 0;
  MetricRow avg{"mean", "avg", 0.0, 0.0, 0.0};
  int used = 0;
  for (const auto& m : modalities) {
    MetricRow row{"mean", m, 0.0, 0.0, 0.0};
    int count = 0, finite = 0;
    for (const auto& r : report.cases) {
      if (r.modality != m) continue;
      ++count;
      row.ssim += r.ssim;
      row.mae += r.mae;
      if (std::isinf(r.psnr)) {
        ++report.infinite_psnr_excluded;
      } else {
        row.psnr += r.psnr;
        ++finite;
      }
    }
    if (count == 0) continue;
    row.ssim /= count;
    row.mae /= count;
    row.psnr = finite > 0 ? row.psnr / finite : kInfinitePsnr;
    avg.psnr += row.psnr;
    avg.ssim += row.ssim;
    avg.mae += row.mae;
    ++used;
    report.aggregates.push_back(row);
  }
  if (used > 0) {
    avg.psnr /= used;
    avg.ssim /= used;
    avg.mae /= used;
    report.aggregates.push_back(avg);
  }
}

std::string format_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string format_report_csv(const MetricReport& report) {
  std::ostringstream out;
  out << "case_id,modality,psnr,ssim,mae\n";
  auto emit = [&](const MetricRow& r) {
    out << r.case_id << ',' << r.modality << ',' << format_number(r.psnr) << ','
        << format_number(r.ssim) << ',' << format_number(r.mae) << '\n';
  };
  for (const auto& r : report.cases) emit(r);
  for (const auto& r : report.aggregates) emit(r);
  return out.str();
}

void write_report_csv(const MetricReport& report, const std::filesystem::path& path) {
  io::write_text_file(path, format_report_csv(report));
}

}  // namespace cdm::metrics
