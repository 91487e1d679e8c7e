#include "cdm/run_config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>
#include <string_view>
#include <vector>

#include "cdm/binary_io.hpp"
#include "cdm/error.hpp"

namespace cdm {

namespace {

void require(bool ok, const char* field, const char* rule) {
  if (!ok) throw InvalidArgument(std::string("config: ") + field + " " + rule);
}

}  // namespace

void TrainConfig::validate() const {
  require(image_size > 0, "image_size", "must be positive");
  require(latent_dim > 0 && latent_dim % 2 == 0, "latent_dim", "must be positive and even");
  require(mrm_base_width > 0, "mrm_base_width", "must be positive");
  require(mrm_stages > 0, "mrm_stages", "must be positive");
  require(mrm_stages < 31 && image_size % (1 << mrm_stages) == 0, "image_size",
          "must be divisible by 2^mrm_stages");
  require(mdn_hidden > 0 && mdn_hidden % 2 == 0, "mdn_hidden", "must be positive and even");
  require(mdn_blocks > 0, "mdn_blocks", "must be positive");
  require(mdn_time_dim > 0 && mdn_time_dim % 2 == 0, "mdn_time_dim", "must be positive and even");
  require(cunet_base_width > 0, "cunet_base_width", "must be positive");
  require(cunet_scales > 0, "cunet_scales", "must be positive");
  require(cunet_scales < 31 && image_size % (1 << cunet_scales) == 0, "image_size",
          "must be divisible by 2^cunet_scales");
  require(diffusion_steps > 0, "diffusion_steps", "must be positive");
  require(beta_start > 0.0 && beta_start < 1.0, "beta_start", "must lie in (0, 1)");
  require(beta_end > 0.0 && beta_end < 1.0, "beta_end", "must lie in (0, 1)");
  require(beta_start <= beta_end, "beta_start", "must not exceed beta_end");
  require(n_sampling > 0, "n_sampling", "must be positive");
  require(n_sampling <= diffusion_steps, "n_sampling", "must not exceed diffusion_steps");
  require(mask_ratio > 0.0 && mask_ratio < 1.0, "mask_ratio", "must lie in (0, 1)");
  require(patch_size > 0 && image_size % patch_size == 0, "patch_size",
          "must be positive and divide image_size");
  require(batch_size > 0, "batch_size", "must be positive");
  require(weight_decay >= 0.0 && std::isfinite(weight_decay), "weight_decay",
          "must be finite and non-negative");
  require(mrm_epochs > 0, "mrm_epochs", "must be positive");
  require(mdn_epochs > 0, "mdn_epochs", "must be positive");
  require(cunet_epochs > 0, "cunet_epochs", "must be positive");
  require(mrm_learning_rate > 0.0 && std::isfinite(mrm_learning_rate), "mrm_learning_rate",
          "must be positive");
  require(mdn_learning_rate > 0.0 && std::isfinite(mdn_learning_rate), "mdn_learning_rate",
          "must be positive");
  require(cunet_learning_rate > 0.0 && std::isfinite(cunet_learning_rate), "cunet_learning_rate",
          "must be positive");
}

bool TrainConfig::same_architecture(const TrainConfig& o) const {
  return image_size == o.image_size && latent_dim == o.latent_dim &&
         mrm_base_width == o.mrm_base_width && mrm_stages == o.mrm_stages &&
         mdn_hidden == o.mdn_hidden && mdn_blocks == o.mdn_blocks &&
         mdn_time_dim == o.mdn_time_dim && cunet_base_width == o.cunet_base_width &&
         cunet_scales == o.cunet_scales && diffusion_steps == o.diffusion_steps &&
         beta_start == o.beta_start && beta_end == o.beta_end;
}

MrmConfig TrainConfig::mrm() const {
  MrmConfig c;
  c.channels = 2;
  c.image_size = image_size;
  c.base_width = mrm_base_width;
  c.stages = mrm_stages;
  c.latent_dim = latent_dim;
  return c;
}

MdnConfig TrainConfig::mdn() const {
  MdnConfig c;
  c.latent_dim = latent_dim;
  c.hidden = mdn_hidden;
  c.blocks = mdn_blocks;
  c.time_dim = mdn_time_dim;
  return c;
}

CunetConfig TrainConfig::cunet() const {
  CunetConfig c;
  c.in_channels = 2;
  c.out_channels = 2;
  c.image_size = image_size;
  c.base_width = cunet_base_width;
  c.scales = cunet_scales;
  c.latent_dim = latent_dim;
  return c;
}

nn::AdamOptions TrainConfig::adam(double learning_rate) const {
  nn::AdamOptions o;
  o.learning_rate = learning_rate;
  o.weight_decay = weight_decay;
  return o;
}

// ---------------------------------------------------------------------------

namespace {

struct Field {
  const char* key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, std::string_view)> set;
};

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_integer(std::string_view s) {
  T v{};
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw std::invalid_argument("not an integer");
  return v;
}

double parse_double(std::string_view s) {
  // from_chars for double is missing from older libstdc++.
  const std::string str(s);
  std::size_t used = 0;
  const double v = std::stod(str, &used);
  if (used != str.size() || !std::isfinite(v)) throw std::invalid_argument("not a finite number");
  return v;
}

template <class T>
Field int_field(const char* key, T TrainConfig::*member) {
  return {key, [member](const TrainConfig& c) { return std::to_string(c.*member); },
          [member](TrainConfig& c, std::string_view v) { c.*member = parse_integer<T>(v); }};
}

Field double_field(const char* key, double TrainConfig::*member) {
  return {key, [member](const TrainConfig& c) { return fmt_double(c.*member); },
          [member](TrainConfig& c, std::string_view v) { c.*member = parse_double(v); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> all = {
      int_field("image_size", &TrainConfig::image_size),
      int_field("latent_dim", &TrainConfig::latent_dim),
      int_field("mrm_base_width", &TrainConfig::mrm_base_width),
      int_field("mrm_stages", &TrainConfig::mrm_stages),
      int_field("mdn_hidden", &TrainConfig::mdn_hidden),
      int_field("mdn_blocks", &TrainConfig::mdn_blocks),
      int_field("mdn_time_dim", &TrainConfig::mdn_time_dim),
      int_field("cunet_base_width", &TrainConfig::cunet_base_width),
      int_field("cunet_scales", &TrainConfig::cunet_scales),
      int_field("diffusion_steps", &TrainConfig::diffusion_steps),
      double_field("beta_start", &TrainConfig::beta_start),
      double_field("beta_end", &TrainConfig::beta_end),
      int_field("n_sampling", &TrainConfig::n_sampling),
      double_field("mask_ratio", &TrainConfig::mask_ratio),
      int_field("patch_size", &TrainConfig::patch_size),
      int_field("batch_size", &TrainConfig::batch_size),
      double_field("weight_decay", &TrainConfig::weight_decay),
      int_field("mrm_epochs", &TrainConfig::mrm_epochs),
      double_field("mrm_learning_rate", &TrainConfig::mrm_learning_rate),
      int_field("mdn_epochs", &TrainConfig::mdn_epochs),
      double_field("mdn_learning_rate", &TrainConfig::mdn_learning_rate),
      int_field("cunet_epochs", &TrainConfig::cunet_epochs),
      double_field("cunet_learning_rate", &TrainConfig::cunet_learning_rate),
      {"cunet_condition",
       [](const TrainConfig& c) {
         return std::string(c.cunet_condition == ConditionSource::kEncoder ? "encoder" : "sampled");
       },
       [](TrainConfig& c, std::string_view v) {
         if (v == "encoder") c.cunet_condition = ConditionSource::kEncoder;
         else if (v == "sampled") c.cunet_condition = ConditionSource::kSampled;
         else throw std::invalid_argument("expected encoder or sampled");
       }},
      int_field("mrm_seed", &TrainConfig::mrm_seed),
      int_field("mdn_seed", &TrainConfig::mdn_seed),
      int_field("cunet_seed", &TrainConfig::cunet_seed),
      int_field("sample_seed", &TrainConfig::sample_seed),
  };
  return all;
}

std::string_view trim(std::string_view s) {
  const auto ws = " \t\r";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

}  // namespace

std::string format_config(const TrainConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + "=" + f.get(config) + "\n";
  return out;
}

TrainConfig parse_config(const std::string& text) {
  TrainConfig config;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto where = "config line " + std::to_string(line_no) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw InvalidArgument(where + "expected key=value");
    const std::string key(trim(line.substr(0, eq)));
    const std::string_view value = trim(line.substr(eq + 1));
    const Field* field = nullptr;
    for (const auto& f : fields())
      if (key == f.key) field = &f;
    if (field == nullptr) throw InvalidArgument(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw InvalidArgument(where + "duplicate key '" + key + "'");
    try {
      field->set(config, value);
    } catch (const std::exception& e) {
      throw InvalidArgument(where + "bad value for " + key + ": '" + std::string(value) + "'");
    }
  }
  return config;
}

TrainConfig read_config(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return parse_config(std::string(bytes.begin(), bytes.end()));
}

void write_config(const TrainConfig& config, const std::filesystem::path& path) {
  io::write_text_file(path, format_config(config));
}

}  // namespace cdm
