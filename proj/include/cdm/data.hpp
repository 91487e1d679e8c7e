#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cdm/tensor.hpp"

// Synthetic multi-modal phantom dataset, its on-disk formats and the value
// range conventions used between data, networks and metrics.

namespace cdm::data {

enum class Modality : int { kT1 = 0, kT2 = 1, kT1c = 2, kT2f = 3 };
inline constexpr int kModalityCount = 4;
inline constexpr std::array<Modality, 2> kSourceModalities{Modality::kT1, Modality::kT2};
inline constexpr std::array<Modality, 2> kTargetModalities{Modality::kT1c, Modality::kT2f};

const char* modality_name(Modality m);

/// One 2D slice with all four modalities, values in [0, 1].
struct CaseRecord {
  std::string case_id;
  int image_size = 0;
  std::array<std::vector<float>, kModalityCount> images;
  std::vector<std::uint8_t> tumor_mask;  // 0/1 per pixel, row-major

  const std::vector<float>& image(Modality m) const { return images[static_cast<int>(m)]; }
  std::vector<float>& image(Modality m) { return images[static_cast<int>(m)]; }
  bool has_tumor() const;

  friend bool operator==(const CaseRecord&, const CaseRecord&) = default;
};

/// Monotone piecewise-linear map from tissue value to intensity.
struct TransferFunction {
  std::vector<double> x;  // strictly increasing knots spanning [0, 1]
  std::vector<double> y;  // intensities in [0, 1]

  double operator()(double v) const;
  bool is_monotone() const;
};

struct PhantomSpec {
  int image_size = 64;
  int min_ellipses = 3;
  int max_ellipses = 6;
  double tumor_probability = 0.5;
  std::array<TransferFunction, kModalityCount> transfer;

  /// Default contrasts: T1 and T1c rise with tissue value, T2 and T2f fall.
  static PhantomSpec standard(int image_size = 64, double tumor_probability = 0.5);
  void validate() const;
};

/// Tumor-free anatomy shared by all modalities.
struct Anatomy {
  int image_size = 0;
  std::vector<double> tissue;  // tissue value per pixel, in [0, 1]
  std::vector<double> head;    // soft head-support weight per pixel, in [0, 1]
};

Anatomy phantom_anatomy(const PhantomSpec& spec, std::uint64_t seed);

/// Renders the four modalities of one case. Deterministic in (spec, seed).
CaseRecord generate_phantom_case(const PhantomSpec& spec, std::uint64_t seed,
                                 std::string case_id = "case");

// ---------------------------------------------------------------------------
// Case file: "CDMC" | u16 version | u16 image_size | u8 modality count (4) |
// 4 x row-major float32 planes | tumor mask packed 8 pixels per byte, MSB
// first | CRC32 of all preceding bytes. All integers little-endian.

inline constexpr std::uint16_t kCaseFormatVersion = 1;
inline constexpr std::size_t kCaseHeaderBytes = 9;

std::size_t case_file_size(int image_size);
std::vector<std::uint8_t> encode_case(const CaseRecord& record);
CaseRecord decode_case(std::span<const std::uint8_t> bytes, std::string case_id);

std::filesystem::path case_path(const std::filesystem::path& directory, const std::string& case_id);
std::filesystem::path write_case(const CaseRecord& record, const std::filesystem::path& directory);
CaseRecord read_case(const std::filesystem::path& directory, const std::string& case_id);

// ---------------------------------------------------------------------------
// Manifest

enum class Split { kUnassigned, kTrain, kTest };
const char* split_name(Split s);

struct ManifestEntry {
  std::string case_id;
  Split split = Split::kUnassigned;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
  int version = 1;
  int image_size = 64;
  std::uint64_t seed = 0;
  double train_fraction = 0.7;
  std::vector<ManifestEntry> cases;

  std::vector<std::string> ids(Split split) const;
  bool contains(const std::string& case_id) const;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

inline constexpr const char* kManifestFileName = "manifest.txt";

/// Case-level split: round(train_fraction * n) train cases (at least one of
/// each), chosen by a seeded shuffle.
DatasetManifest split_dataset(DatasetManifest manifest, std::uint64_t seed);

std::string format_manifest(const DatasetManifest& manifest);
DatasetManifest parse_manifest(const std::string& text);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& directory);
DatasetManifest read_manifest(const std::filesystem::path& directory);

/// Generates `count` cases plus a split manifest into `directory`.
DatasetManifest generate_dataset(const std::filesystem::path& directory, int count,
                                 const PhantomSpec& spec, std::uint64_t seed);

std::vector<CaseRecord> load_cases(const std::filesystem::path& directory,
                                   const std::vector<std::string>& ids);

// ---------------------------------------------------------------------------
// Value ranges

enum class ValueRange { kUnit, kSigned };  // [0, 1] vs [-1, 1]

struct ImageBatch {
  Tensor pixels;
  ValueRange range = ValueRange::kUnit;
};

/// x -> 2x - 1. Inputs outside [0, 1] are clamped and counted.
ImageBatch normalize_for_network(const ImageBatch& unit, std::size_t* clamped = nullptr);
/// x -> (x + 1) / 2.
ImageBatch denormalize(const ImageBatch& network);

/// Stacks the given modalities of each case into [N, k, S, S], unit range.
Tensor stack_modalities(std::span<const CaseRecord> cases, std::span<const Modality> modalities);

/// 16-bit binary PGM of a [H, W] plane with values in [0, 1].
void write_pgm16(const std::filesystem::path& path, const Tensor& plane);
/// Raw little-endian float32 dump of a [H, W] plane.
void write_raw_f32(const std::filesystem::path& path, const Tensor& plane);

}  // namespace cdm::data
