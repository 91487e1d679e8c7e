#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "cdm/cunet.hpp"
#include "cdm/mdn.hpp"
#include "cdm/mrm.hpp"
#include "cdm/nn/adam.hpp"

namespace cdm {

/// Source of the condition fed to the C-UNet while it trains.
enum class ConditionSource {
  kEncoder,  // latent of the case's own targets, from the frozen encoder
  kSampled,  // a fresh MDN sample, as at inference
};

struct TrainConfig {
  // Shapes
  int image_size = 64;
  int latent_dim = 256;
  int mrm_base_width = 16;
  int mrm_stages = 4;
  int mdn_hidden = 1024;
  int mdn_blocks = 3;
  int mdn_time_dim = 128;
  int cunet_base_width = 32;
  int cunet_scales = 4;

  // Diffusion
  int diffusion_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int n_sampling = 30;

  // Masked-patch pretext
  double mask_ratio = 0.6;
  int patch_size = 8;

  // Optimization
  int batch_size = 12;
  double weight_decay = 1e-5;
  int mrm_epochs = 20;
  double mrm_learning_rate = 1e-4;
  int mdn_epochs = 200;
  double mdn_learning_rate = 1e-4;
  int cunet_epochs = 30;
  double cunet_learning_rate = 1e-4;
  ConditionSource cunet_condition = ConditionSource::kEncoder;

  // Seeds
  std::uint64_t mrm_seed = 1;
  std::uint64_t mdn_seed = 2;
  std::uint64_t cunet_seed = 3;
  std::uint64_t sample_seed = 4;

  /// Throws InvalidArgument naming the first offending field.
  void validate() const;
  /// True when both configs produce networks with identical parameter shapes.
  bool same_architecture(const TrainConfig& other) const;

  MrmConfig mrm() const;
  MdnConfig mdn() const;
  CunetConfig cunet() const;
  nn::AdamOptions adam(double learning_rate) const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// key=value lines, one per field, in declaration order.
std::string format_config(const TrainConfig& config);
/// Accepts `#` comments and blank lines; keys may appear in any order and
/// missing keys keep their defaults. Unknown keys, duplicate keys and
/// malformed values throw InvalidArgument naming the line number.
TrainConfig parse_config(const std::string& text);
TrainConfig read_config(const std::filesystem::path& path);
void write_config(const TrainConfig& config, const std::filesystem::path& path);

}  // namespace cdm
