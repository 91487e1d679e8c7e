#include "cdm/checkpoint.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cdm/binary_io.hpp"
#include "cdm/error.hpp"

namespace cdm {

LatentNormalizer LatentNormalizer::fit(const Tensor& latents) {
  if (latents.rank() != 2 || latents.dim(0) == 0) {
    throw InvalidArgument("LatentNormalizer::fit expects a nonempty [N, D] batch");
  }
  const int n = latents.dim(0), d = latents.dim(1);
  LatentNormalizer out;
  out.mean = Tensor({d}, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out.mean[j] += latents.at(i, j);
  for (int j = 0; j < d; ++j) out.mean[j] /= n;
  double var = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      const double c = latents.at(i, j) - out.mean[j];
      var += c * c;
    }
  var /= static_cast<double>(n) * d;
  out.scale = var > 1e-24 ? std::sqrt(var) : 1.0;
  return out;
}

Tensor LatentNormalizer::normalize(const Tensor& latents) const {
  if (latents.rank() != 2 || latents.dim(1) != mean.dim(0)) {
    throw InvalidArgument("latent normalize: shape " + shape_string(latents.shape()));
  }
  Tensor z = latents;
  for (int i = 0; i < z.dim(0); ++i)
    for (int j = 0; j < z.dim(1); ++j) z.at(i, j) = (z.at(i, j) - mean[j]) / scale;
  return z;
}

Tensor LatentNormalizer::denormalize(const Tensor& z) const {
  if (z.rank() != 2 || z.dim(1) != mean.dim(0)) {
    throw InvalidArgument("latent denormalize: shape " + shape_string(z.shape()));
  }
  Tensor y = z;
  for (int i = 0; i < y.dim(0); ++i)
    for (int j = 0; j < y.dim(1); ++j) y.at(i, j) = y.at(i, j) * scale + mean[j];
  return y;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'C', 'D', 'M', 'B'};

void write_tensor(io::ByteWriter& w, const std::string& name, const Tensor& t) {
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.text(name);
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (double v : t.storage()) w.f64(v);
}

std::vector<std::uint8_t> param_table(nn::ParamList params) {
  io::ByteWriter w;
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const nn::Param* p : params) write_tensor(w, p->name, p->value);
  return w.take();
}

std::vector<std::uint8_t> latent_table(const LatentNormalizer& n) {
  io::ByteWriter w;
  write_tensor(w, "latent.mean", n.mean);
  w.f64(n.scale);
  return w.take();
}

void put_section(io::ByteWriter& out, const char (&tag)[5], std::span<const std::uint8_t> payload) {
  io::ByteWriter s;
  s.raw(std::span(reinterpret_cast<const std::uint8_t*>(tag), 4));
  s.u64(payload.size());
  s.raw(payload);
  s.crc_trailer();
  const auto bytes = s.take();
  out.raw(bytes);
}

Tensor read_tensor_into(io::ByteReader& r, const std::string& expected_name,
                        const std::vector<int>& expected_shape) {
  const std::uint16_t name_len = r.u16();
  const std::string name = r.text(name_len);
  if (name != expected_name) {
    throw FormatError(FormatError::Kind::kBadField,
                      "checkpoint parameter '" + name + "' where '" + expected_name + "' expected");
  }
  const int rank = r.u8();
  std::vector<int> shape(rank);
  for (int& d : shape) d = static_cast<int>(r.u32());
  if (shape != expected_shape) {
    throw FormatError(FormatError::Kind::kBadDimensions,
                      "checkpoint parameter '" + name + "' has shape " +
                          shape_string(shape) + ", config implies " +
                          shape_string(expected_shape));
  }
  Tensor t(shape, 0.0);
  for (double& v : t.values()) v = r.f64();
  return t;
}

void load_param_table(std::span<const std::uint8_t> payload, nn::ParamList params,
                      const char* what) {
  io::ByteReader r(payload);
  const std::uint32_t count = r.u32();
  if (count != params.size()) {
    throw FormatError(FormatError::Kind::kBadDimensions,
                      std::string(what) + ": " + std::to_string(count) +
                          " parameters stored, config implies " + std::to_string(params.size()));
  }
  for (nn::Param* p : params) p->value = read_tensor_into(r, p->name, p->value.shape());
  if (r.remaining() != 0) {
    throw FormatError(FormatError::Kind::kBadDimensions, std::string(what) + ": trailing bytes");
  }
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const CheckpointBundle& bundle) {
  if (bundle.has_mdn() != bundle.latent.has_value()) {
    throw InvalidArgument("checkpoint: MDN parameters and latent statistics must travel together");
  }
  // params() is non-const; encode from copies so the bundle stays untouched.
  CheckpointBundle b = bundle;
  std::uint16_t sections = 2;
  if (b.mrm) ++sections;
  if (b.mdn) sections += 2;
  if (b.cunet) ++sections;

  io::ByteWriter out;
  out.raw(std::span(reinterpret_cast<const std::uint8_t*>(kMagic), 4));
  out.u16(kCheckpointVersion);
  out.u16(sections);
  const std::string conf = format_config(b.config);
  put_section(out, "CONF", std::span(reinterpret_cast<const std::uint8_t*>(conf.data()), conf.size()));
  const std::uint8_t flags[3] = {b.has_mrm(), b.has_mdn(), b.has_cunet()};
  put_section(out, "FLAG", flags);
  if (b.mrm) put_section(out, "MRM_", param_table(b.mrm->params()));
  if (b.mdn) {
    put_section(out, "MDN_", param_table(b.mdn->params()));
    put_section(out, "LATN", latent_table(*b.latent));
  }
  if (b.cunet) put_section(out, "CUNT", param_table(b.cunet->params()));
  return out.take();
}

CheckpointBundle decode_checkpoint(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  if (bytes.size() < 8 || !std::equal(kMagic, kMagic + 4, bytes.begin())) {
    throw FormatError(FormatError::Kind::kBadMagic, "not a checkpoint file (bad magic)");
  }
  r.raw(4);
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion) {
    throw FormatError(FormatError::Kind::kBadVersion,
                      "unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint16_t count = r.u16();

  struct Section {
    std::string tag;
    std::span<const std::uint8_t> payload;
  };
  std::vector<Section> sections;
  for (std::uint16_t i = 0; i < count; ++i) {
    const std::size_t start = r.position();
    if (r.remaining() < 12) throw FormatError(FormatError::Kind::kChecksum, "checkpoint truncated");
    const std::string tag = r.text(4);
    const std::uint64_t length = r.u64();
    if (length > r.remaining() || r.remaining() - length < 4) {
      throw FormatError(FormatError::Kind::kChecksum, "checkpoint truncated in section " + tag);
    }
    const auto payload = r.raw(static_cast<std::size_t>(length));
    const std::uint32_t stored = r.u32();
    const std::uint32_t actual = io::crc32(bytes.subspan(start, 12 + length));
    if (stored != actual) {
      throw FormatError(FormatError::Kind::kChecksum, "checkpoint section " + tag + " CRC mismatch");
    }
    sections.push_back({tag, payload});
  }
  if (r.remaining() != 0) {
    throw FormatError(FormatError::Kind::kBadField, "checkpoint has trailing bytes");
  }
  auto find = [&](const char* tag) -> const Section* {
    const Section* hit = nullptr;
    for (const auto& s : sections) {
      if (s.tag != tag) continue;
      if (hit) throw FormatError(FormatError::Kind::kBadField, std::string("duplicate section ") + tag);
      hit = &s;
    }
    return hit;
  };

  const Section* conf = find("CONF");
  const Section* flag = find("FLAG");
  if (!conf || !flag || flag->payload.size() != 3) {
    throw FormatError(FormatError::Kind::kBadField, "checkpoint lacks CONF or FLAG section");
  }
  CheckpointBundle b;
  try {
    b.config = parse_config(std::string(conf->payload.begin(), conf->payload.end()));
    b.config.validate();
  } catch (const InvalidArgument& e) {
    throw FormatError(FormatError::Kind::kBadField, std::string("checkpoint config: ") + e.what());
  }
  const Section* mrm = find("MRM_");
  const Section* mdn = find("MDN_");
  const Section* latn = find("LATN");
  const Section* cunet = find("CUNT");
  const bool want[3] = {flag->payload[0] != 0, flag->payload[1] != 0, flag->payload[2] != 0};
  if (want[0] != (mrm != nullptr) || want[1] != (mdn != nullptr) || want[1] != (latn != nullptr) ||
      want[2] != (cunet != nullptr)) {
    throw FormatError(FormatError::Kind::kBadField, "checkpoint stage flags disagree with sections");
  }
  if (mrm) {
    b.mrm.emplace(b.config.mrm());
    load_param_table(mrm->payload, b.mrm->params(), "MRM");
  }
  if (mdn) {
    b.mdn.emplace(b.config.mdn());
    load_param_table(mdn->payload, b.mdn->params(), "MDN");
    io::ByteReader lr(latn->payload);
    LatentNormalizer n;
    n.mean = read_tensor_into(lr, "latent.mean", {b.config.latent_dim});
    n.scale = lr.f64();
    if (!(n.scale > 0.0) || lr.remaining() != 0) {
      throw FormatError(FormatError::Kind::kBadField, "checkpoint latent statistics are invalid");
    }
    b.latent = std::move(n);
  }
  if (cunet) {
    b.cunet.emplace(b.config.cunet());
    load_param_table(cunet->payload, b.cunet->params(), "C-UNet");
  }
  return b;
}

void save_checkpoint(const CheckpointBundle& bundle, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(bundle));
}

CheckpointBundle load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

}  // namespace cdm
