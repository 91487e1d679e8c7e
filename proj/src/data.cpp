#include "cdm/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "cdm/binary_io.hpp"
#include "cdm/error.hpp"
#include "cdm/rng.hpp"

namespace cdm::data {

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::kT1: return "T1";
    case Modality::kT2: return "T2";
    case Modality::kT1c: return "T1c";
    case Modality::kT2f: return "T2f";
  }
  return "?";
}

bool CaseRecord::has_tumor() const {
  return std::any_of(tumor_mask.begin(), tumor_mask.end(), [](std::uint8_t v) { return v != 0; });
}

// ---------------------------------------------------------------------------
// Phantom generation

double TransferFunction::operator()(double v) const {
  v = std::clamp(v, x.front(), x.back());
  const auto it = std::upper_bound(x.begin(), x.end(), v);
  if (it == x.end()) return y.back();
  const std::size_t hi = static_cast<std::size_t>(it - x.begin());
  const std::size_t lo = hi - 1;
  const double f = (v - x[lo]) / (x[hi] - x[lo]);
  return y[lo] + f * (y[hi] - y[lo]);
}

bool TransferFunction::is_monotone() const {
  bool up = true, down = true;
  for (std::size_t i = 1; i < y.size(); ++i) {
    up = up && y[i] >= y[i - 1];
    down = down && y[i] <= y[i - 1];
  }
  return up || down;
}

PhantomSpec PhantomSpec::standard(int image_size, double tumor_probability) {
  PhantomSpec s;
  s.image_size = image_size;
  s.tumor_probability = tumor_probability;
  const std::vector<double> knots{0.0, 0.25, 0.5, 0.75, 1.0};
  s.transfer[0] = {knots, {0.10, 0.35, 0.55, 0.72, 0.80}};  // T1
  s.transfer[1] = {knots, {0.90, 0.65, 0.42, 0.30, 0.22}};  // T2
  s.transfer[2] = {knots, {0.15, 0.20, 0.50, 0.60, 0.95}};  // T1c
  s.transfer[3] = {knots, {0.08, 0.28, 0.38, 0.44, 0.50}};  // T2f
  return s;
}

void PhantomSpec::validate() const {
  if (image_size < 4) throw InvalidArgument("phantom image size must be at least 4");
  if (min_ellipses < 0 || max_ellipses < min_ellipses) throw InvalidArgument("bad ellipse count range");
  if (!(tumor_probability >= 0.0 && tumor_probability <= 1.0)) {
    throw InvalidArgument("tumor probability must lie in [0, 1]");
  }
  for (const auto& t : transfer) {
    if (t.x.size() < 2 || t.x.size() != t.y.size() || t.x.front() != 0.0 || t.x.back() != 1.0) {
      throw InvalidArgument("transfer function knots must span [0, 1]");
    }
    for (std::size_t i = 1; i < t.x.size(); ++i)
      if (!(t.x[i] > t.x[i - 1])) throw InvalidArgument("transfer knots must increase");
    for (double v : t.y)
      if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("transfer outputs must lie in [0, 1]");
    if (!t.is_monotone()) throw InvalidArgument("transfer function must be monotone");
  }
}

namespace {

constexpr double kEdge = 0.02;  // soft boundary width, normalized units

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct Ellipse {
  double cx, cy, a, b, theta;

  // Normalized radius: < 1 inside.
  double radius(double u, double v) const {
    const double du = u - cx, dv = v - cy;
    const double c = std::cos(theta), s = std::sin(theta);
    const double x = (c * du + s * dv) / a, y = (-s * du + c * dv) / b;
    return std::sqrt(x * x + y * y);
  }
  double weight(double u, double v) const {
    return sigmoid((1.0 - radius(u, v)) * std::min(a, b) / kEdge);
  }
};

double coord(int i, int size) { return 2.0 * (i + 0.5) / size - 1.0; }

// The anatomy draws consume the stream first so that tumor draws never
// perturb a case's anatomy.
Anatomy draw_anatomy(const PhantomSpec& spec, Rng& rng, Ellipse& head) {
  const int s = spec.image_size;
  head = {rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(0.70, 0.85),
          rng.uniform(0.80, 0.92), rng.uniform(-0.2, 0.2)};
  const int count = spec.min_ellipses +
                    static_cast<int>(rng.uniform_int(spec.max_ellipses - spec.min_ellipses + 1));
  std::vector<std::pair<Ellipse, double>> inner;
  for (int k = 0; k < count; ++k) {
    const double rho = 0.6 * std::sqrt(rng.uniform());
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    Ellipse e{head.cx + rho * head.a * std::cos(phi), head.cy + rho * head.b * std::sin(phi),
              rng.uniform(0.10, 0.35), rng.uniform(0.10, 0.35), rng.uniform(0.0, std::numbers::pi)};
    inner.emplace_back(e, rng.uniform(0.05, 0.95));
  }
  Anatomy a;
  a.image_size = s;
  a.tissue.assign(static_cast<std::size_t>(s) * s, 0.6);
  a.head.assign(static_cast<std::size_t>(s) * s, 0.0);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j) {
      const double u = coord(j, s), v = coord(i, s);
      const std::size_t p = static_cast<std::size_t>(i) * s + j;
      a.head[p] = head.weight(u, v);
      double t = 0.6;
      for (const auto& [e, value] : inner) {
        const double w = e.weight(u, v);
        t = t * (1.0 - w) + value * w;
      }
      a.tissue[p] = std::clamp(t, 0.0, 1.0);
    }
  return a;
}

}  // namespace

Anatomy phantom_anatomy(const PhantomSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  Ellipse head{};
  return draw_anatomy(spec, rng, head);
}

CaseRecord generate_phantom_case(const PhantomSpec& spec, std::uint64_t seed, std::string case_id) {
  spec.validate();
  Rng rng(seed);
  Ellipse head{};
  const Anatomy anatomy = draw_anatomy(spec, rng, head);
  const int s = spec.image_size;
  const std::size_t pixels = static_cast<std::size_t>(s) * s;

  CaseRecord rec;
  rec.case_id = std::move(case_id);
  rec.image_size = s;
  rec.tumor_mask.assign(pixels, 0);
  std::array<std::vector<double>, kModalityCount> img;
  for (int m = 0; m < kModalityCount; ++m) {
    img[m].resize(pixels);
    for (std::size_t p = 0; p < pixels; ++p)
      img[m][p] = anatomy.head[p] * spec.transfer[m](anatomy.tissue[p]);
  }

  if (rng.uniform() < spec.tumor_probability) {
    const double rho = 0.45 * std::sqrt(rng.uniform());
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double r = rng.uniform(0.12, 0.20);
    const Ellipse core{head.cx + rho * head.a * std::cos(phi), head.cy + rho * head.b * std::sin(phi),
                       r * rng.uniform(0.85, 1.15), r * rng.uniform(0.85, 1.15),
                       rng.uniform(0.0, std::numbers::pi)};
    const double edema_scale = rng.uniform(1.5, 1.9);
    const double sharp = std::min(core.a, core.b) / kEdge;
    std::size_t nearest = 0;
    double nearest_d = 1e300;
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < s; ++j) {
        const std::size_t p = static_cast<std::size_t>(i) * s + j;
        const double d = core.radius(coord(j, s), coord(i, s));
        const double w_core = sigmoid((1.0 - d) * sharp) * anatomy.head[p];
        const double w_edema = sigmoid((edema_scale - d) * sharp) * anatomy.head[p];
        const double w_rim = sigmoid((d - 0.65) * sharp);
        auto blend = [](double x, double target, double w) { return x * (1.0 - w) + target * w; };

        img[0][p] = blend(img[0][p] * (1.0 - 0.2 * w_edema), 0.22, w_core);
        img[1][p] = blend(blend(img[1][p], 0.72, w_edema), 0.85, w_core);
        img[2][p] = blend(img[2][p] * (1.0 - 0.2 * w_edema), 0.18 + 0.77 * w_rim, w_core);
        img[3][p] = blend(blend(img[3][p], 0.78, w_edema), 0.92, w_core);
        if (d < 1.0) rec.tumor_mask[p] = 1;
        if (d < nearest_d) {
          nearest_d = d;
          nearest = p;
        }
      }
    if (!rec.has_tumor()) rec.tumor_mask[nearest] = 1;  // sub-pixel tumor at tiny sizes
  }

  for (int m = 0; m < kModalityCount; ++m) {
    rec.images[m].resize(pixels);
    for (std::size_t p = 0; p < pixels; ++p)
      rec.images[m][p] = static_cast<float>(std::clamp(img[m][p], 0.0, 1.0));
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Case files

std::size_t case_file_size(int image_size) {
  const std::size_t pixels = static_cast<std::size_t>(image_size) * image_size;
  return kCaseHeaderBytes + kModalityCount * pixels * 4 + (pixels + 7) / 8 + 4;
}

std::vector<std::uint8_t> encode_case(const CaseRecord& record) {
  const int s = record.image_size;
  if (s <= 0 || s > 65535) throw InvalidArgument("case image size out of range");
  const std::size_t pixels = static_cast<std::size_t>(s) * s;
  for (const auto& im : record.images)
    if (im.size() != pixels) throw InvalidArgument("case image planes disagree with image size");
  if (record.tumor_mask.size() != pixels) throw InvalidArgument("tumor mask geometry mismatch");

  io::ByteWriter w;
  w.text("CDMC");
  w.u16(kCaseFormatVersion);
  w.u16(static_cast<std::uint16_t>(s));
  w.u8(kModalityCount);
  for (const auto& im : record.images)
    for (float v : im) w.f32(v);
  for (std::size_t p = 0; p < pixels; p += 8) {
    std::uint8_t byte = 0;
    for (std::size_t b = 0; b < 8 && p + b < pixels; ++b)
      if (record.tumor_mask[p + b]) byte |= static_cast<std::uint8_t>(0x80u >> b);
    w.u8(byte);
  }
  w.crc_trailer();
  return w.take();
}

CaseRecord decode_case(std::span<const std::uint8_t> bytes, std::string case_id) {
  using K = FormatError::Kind;
  if (bytes.size() < kCaseHeaderBytes + 4) {
    throw FormatError(K::kChecksum, "case file too short (" + std::to_string(bytes.size()) + " bytes)");
  }
  const std::size_t body = bytes.size() - 4;
  io::ByteReader trailer(bytes.subspan(body));
  if (trailer.u32() != io::crc32(bytes.first(body))) {
    throw FormatError(K::kChecksum, "case file checksum mismatch");
  }
  io::ByteReader r(bytes.first(body));
  if (r.text(4) != "CDMC") throw FormatError(K::kBadMagic, "not a case file (bad magic)");
  const std::uint16_t version = r.u16();
  if (version != kCaseFormatVersion) {
    throw FormatError(K::kBadVersion, "unsupported case format version " + std::to_string(version));
  }
  const int s = r.u16();
  const int modalities = r.u8();
  if (modalities != kModalityCount) {
    throw FormatError(K::kBadField, "expected 4 modalities, found " + std::to_string(modalities));
  }
  if (s == 0 || bytes.size() != case_file_size(s)) {
    throw FormatError(K::kBadDimensions, "image size " + std::to_string(s) +
                                             " inconsistent with file length " +
                                             std::to_string(bytes.size()));
  }
  CaseRecord rec;
  rec.case_id = std::move(case_id);
  rec.image_size = s;
  const std::size_t pixels = static_cast<std::size_t>(s) * s;
  for (auto& im : rec.images) {
    im.resize(pixels);
    for (float& v : im) v = r.f32();
  }
  rec.tumor_mask.assign(pixels, 0);
  for (std::size_t p = 0; p < pixels; p += 8) {
    const std::uint8_t byte = r.u8();
    for (std::size_t b = 0; b < 8 && p + b < pixels; ++b)
      rec.tumor_mask[p + b] = (byte >> (7 - b)) & 1u;
  }
  return rec;
}

std::filesystem::path case_path(const std::filesystem::path& directory, const std::string& case_id) {
  return directory / (case_id + ".cdmc");
}

std::filesystem::path write_case(const CaseRecord& record, const std::filesystem::path& directory) {
  const auto path = case_path(directory, record.case_id);
  io::write_file(path, encode_case(record));
  return path;
}

CaseRecord read_case(const std::filesystem::path& directory, const std::string& case_id) {
  return decode_case(io::read_file(case_path(directory, case_id)), case_id);
}

// ---------------------------------------------------------------------------
// Manifest

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kTest: return "test";
    case Split::kUnassigned: return "unassigned";
  }
  return "?";
}

std::vector<std::string> DatasetManifest::ids(Split split) const {
  std::vector<std::string> out;
  for (const auto& e : cases)
    if (e.split == split) out.push_back(e.case_id);
  return out;
}

bool DatasetManifest::contains(const std::string& case_id) const {
  return std::any_of(cases.begin(), cases.end(),
                     [&](const ManifestEntry& e) { return e.case_id == case_id; });
}

DatasetManifest split_dataset(DatasetManifest manifest, std::uint64_t seed) {
  const int n = static_cast<int>(manifest.cases.size());
  if (n < 2) throw InvalidArgument("split_dataset needs at least 2 cases, got " + std::to_string(n));
  const int train = std::clamp(static_cast<int>(std::lround(manifest.train_fraction * n)), 1, n - 1);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<int>(order));
  for (int i = 0; i < n; ++i) manifest.cases[order[i]].split = i < train ? Split::kTrain : Split::kTest;
  manifest.seed = seed;
  return manifest;
}

std::string format_manifest(const DatasetManifest& m) {
  std::ostringstream out;
  out << "# cdm dataset manifest\n";
  out << "version=" << m.version << "\n";
  out << "image_size=" << m.image_size << "\n";
  out << "seed=" << m.seed << "\n";
  out.precision(17);
  out << "train_fraction=" << m.train_fraction << "\n";
  for (const auto& e : m.cases) out << "case=" << e.case_id << "," << split_name(e.split) << "\n";
  return out.str();
}

DatasetManifest parse_manifest(const std::string& text) {
  using K = FormatError::Kind;
  DatasetManifest m;
  m.cases.clear();
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& why) {
    throw FormatError(K::kBadField, "manifest line " + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected key=value");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    try {
      if (key == "version") {
        m.version = std::stoi(value);
      } else if (key == "image_size") {
        m.image_size = std::stoi(value);
      } else if (key == "seed") {
        m.seed = std::stoull(value);
      } else if (key == "train_fraction") {
        m.train_fraction = std::stod(value);
      } else if (key == "case") {
        const auto comma = value.find(',');
        if (comma == std::string::npos || comma == 0) fail("expected case=<id>,<split>");
        const std::string split = value.substr(comma + 1);
        ManifestEntry e{value.substr(0, comma), Split::kUnassigned};
        if (split == "train") e.split = Split::kTrain;
        else if (split == "test") e.split = Split::kTest;
        else if (split != "unassigned") fail("unknown split '" + split + "'");
        m.cases.push_back(std::move(e));
      } else {
        fail("unknown key '" + key + "'");
      }
    } catch (const std::logic_error&) {
      fail("bad value for '" + key + "'");
    }
  }
  if (m.version != 1) throw FormatError(K::kBadVersion, "unsupported manifest version");
  return m;
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& directory) {
  io::write_text_file(directory / kManifestFileName, format_manifest(manifest));
}

DatasetManifest read_manifest(const std::filesystem::path& directory) {
  const auto bytes = io::read_file(directory / kManifestFileName);
  return parse_manifest(std::string(bytes.begin(), bytes.end()));
}

DatasetManifest generate_dataset(const std::filesystem::path& directory, int count,
                                 const PhantomSpec& spec, std::uint64_t seed) {
  if (count < 2) throw InvalidArgument("dataset needs at least 2 cases");
  std::error_code ec;
  std::filesystem::create_directories(directory, ec);
  if (ec) throw IoError("cannot create " + directory.string() + ": " + ec.message());
  DatasetManifest m;
  m.image_size = spec.image_size;
  for (int i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "case_%04d", i);
    write_case(generate_phantom_case(spec, derive_seed(seed, static_cast<std::uint64_t>(i)), id),
               directory);
    m.cases.push_back({id, Split::kUnassigned});
  }
  m = split_dataset(std::move(m), seed);
  write_manifest(m, directory);
  return m;
}

std::vector<CaseRecord> load_cases(const std::filesystem::path& directory,
                                   const std::vector<std::string>& ids) {
  std::vector<CaseRecord> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(read_case(directory, id));
  return out;
}

// ---------------------------------------------------------------------------

ImageBatch normalize_for_network(const ImageBatch& unit, std::size_t* clamped) {
  if (unit.range != ValueRange::kUnit) throw InvalidArgument("normalize_for_network expects [0, 1] images");
  ImageBatch out{unit.pixels, ValueRange::kSigned};
  std::size_t count = 0;
  for (double& v : out.pixels.values()) {
    if (v < 0.0 || v > 1.0) {
      v = std::clamp(v, 0.0, 1.0);
      ++count;
    }
    v = 2.0 * v - 1.0;
  }
  if (clamped) *clamped += count;
  return out;
}

ImageBatch denormalize(const ImageBatch& network) {
  if (network.range != ValueRange::kSigned) throw InvalidArgument("denormalize expects [-1, 1] images");
  ImageBatch out{network.pixels, ValueRange::kUnit};
  for (double& v : out.pixels.values()) v = (v + 1.0) * 0.5;
  return out;
}

Tensor stack_modalities(std::span<const CaseRecord> cases, std::span<const Modality> modalities) {
  if (cases.empty()) throw InvalidArgument("stack_modalities: no cases");
  const int s = cases.front().image_size;
  const std::size_t pixels = static_cast<std::size_t>(s) * s;
  Tensor out({static_cast<int>(cases.size()), static_cast<int>(modalities.size()), s, s});
  for (std::size_t n = 0; n < cases.size(); ++n) {
    if (cases[n].image_size != s) throw InvalidArgument("stack_modalities: mixed image sizes");
    for (std::size_t k = 0; k < modalities.size(); ++k) {
      const auto& im = cases[n].image(modalities[k]);
      double* dst = &out.at(static_cast<int>(n), static_cast<int>(k), 0, 0);
      for (std::size_t p = 0; p < pixels; ++p) dst[p] = im[p];
    }
  }
  return out;
}

void write_pgm16(const std::filesystem::path& path, const Tensor& plane) {
  if (plane.rank() != 2) throw InvalidArgument("write_pgm16 expects a [H, W] plane");
  io::ByteWriter w;
  w.text("P5\n" + std::to_string(plane.dim(1)) + " " + std::to_string(plane.dim(0)) + "\n65535\n");
  for (double v : plane.values()) {
    const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
    w.u8(static_cast<std::uint8_t>(q >> 8));  // PGM samples are big-endian
    w.u8(static_cast<std::uint8_t>(q & 0xFF));
  }
  io::write_file(path, w.bytes());
}

void write_raw_f32(const std::filesystem::path& path, const Tensor& plane) {
  io::ByteWriter w;
  for (double v : plane.values()) w.f32(static_cast<float>(v));
  io::write_file(path, w.bytes());
}

}  // namespace cdm::data
