#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "cdm/cunet.hpp"
#include "cdm/mdn.hpp"
#include "cdm/mrm.hpp"
#include "cdm/run_config.hpp"
#include "cdm/tensor.hpp"

namespace cdm {

/// Affine map between encoder latents and the standardized space the MDN
/// models: z = (y - mean) / scale.
struct LatentNormalizer {
  Tensor mean;         // [D]
  double scale = 1.0;  // positive

  static LatentNormalizer fit(const Tensor& latents);
  Tensor normalize(const Tensor& latents) const;
  Tensor denormalize(const Tensor& z) const;
};

struct CheckpointBundle {
  TrainConfig config;
  std::optional<Mrm> mrm;
  std::optional<Mdn> mdn;
  std::optional<LatentNormalizer> latent;  // present together with mdn
  std::optional<Cunet> cunet;

  bool has_mrm() const { return mrm.has_value(); }
  bool has_mdn() const { return mdn.has_value(); }
  bool has_cunet() const { return cunet.has_value(); }
  bool complete() const { return has_mrm() && has_mdn() && has_cunet(); }
};

// File: "CDMB" | u16 version | u16 section count | sections.
// Section: 4-byte tag | u64 payload length | payload | CRC32 of tag, length
// and payload. Tags: CONF (config text), FLAG (three stage bytes), MRM_,
// MDN_, LATN, CUNT (parameter tables).

inline constexpr std::uint16_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const CheckpointBundle& bundle);
/// Throws FormatError on bad magic, version, checksum, or parameter shapes
/// that do not match the stored config.
CheckpointBundle decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const CheckpointBundle& bundle, const std::filesystem::path& path);
CheckpointBundle load_checkpoint(const std::filesystem::path& path);

}  // namespace cdm
