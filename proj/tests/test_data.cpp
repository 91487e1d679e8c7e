#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

#include "cdm/binary_io.hpp"
#include "cdm/data.hpp"
#include "cdm/error.hpp"
#include "cdm/rng.hpp"
#include "support/tempdir.hpp"

namespace cdm::data {
namespace {

using testing::TempDir;

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

FormatError::Kind decode_error(std::span<const std::uint8_t> bytes) {
  try {
    decode_case(bytes, "x");
  } catch (const FormatError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "decode_case accepted corrupt bytes";
  return FormatError::Kind::kBadField;
}

// Overwrites the trailer so that only the header field under test is wrong.
void refresh_crc(std::vector<std::uint8_t>& bytes) {
  const std::uint32_t crc = io::crc32(std::span<const std::uint8_t>(bytes.data(), bytes.size() - 4));
  for (int i = 0; i < 4; ++i) bytes[bytes.size() - 4 + i] = static_cast<std::uint8_t>(crc >> (8 * i));
}

TEST(TransferFunction, StandardContrastsAreMonotone) {
  const PhantomSpec spec = PhantomSpec::standard();
  for (const auto& t : spec.transfer) {
    EXPECT_TRUE(t.is_monotone());
    EXPECT_GE(t(0.0), 0.0);
    EXPECT_LE(t(1.0), 1.0);
  }
  EXPECT_LT(spec.transfer[0](0.1), spec.transfer[0](0.9));
  EXPECT_GT(spec.transfer[1](0.1), spec.transfer[1](0.9));
  PhantomSpec bad = spec;
  bad.tumor_probability = 1.5;
  EXPECT_THROW(bad.validate(), InvalidArgument);
}

TEST(Phantom, DeterministicGivenSeed) {
  const PhantomSpec spec = PhantomSpec::standard(32);
  EXPECT_EQ(generate_phantom_case(spec, 11), generate_phantom_case(spec, 11));
  EXPECT_NE(generate_phantom_case(spec, 11).image(Modality::kT1),
            generate_phantom_case(spec, 12).image(Modality::kT1));
}

TEST(Phantom, NoTumorRendersAnatomyOnly) {
  const PhantomSpec spec = PhantomSpec::standard(32, 0.0);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const CaseRecord rec = generate_phantom_case(spec, seed);
    EXPECT_FALSE(rec.has_tumor());
    const Anatomy a = phantom_anatomy(spec, seed);
    const auto& t1c = rec.image(Modality::kT1c);
    for (std::size_t p = 0; p < t1c.size(); ++p) {
      const double want = a.head[p] * spec.transfer[static_cast<int>(Modality::kT1c)](a.tissue[p]);
      ASSERT_FLOAT_EQ(t1c[p], static_cast<float>(want)) << "seed " << seed << " pixel " << p;
    }
  }
}

TEST(Phantom, ThousandCasesRangeAndTumorFrequency) {
  const PhantomSpec spec = PhantomSpec::standard(32, 0.5);
  int tumors = 0;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const CaseRecord rec = generate_phantom_case(spec, derive_seed(77, i));
    for (const auto& plane : rec.images)
      for (float v : plane) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    tumors += rec.has_tumor();
  }
  EXPECT_NEAR(tumors / 1000.0, 0.5, 0.05);
}

TEST(Phantom, TumorIsHyperintenseInT2f) {
  const PhantomSpec spec = PhantomSpec::standard(32, 1.0);
  for (std::uint64_t i = 0; i < 200; ++i) {
    const std::uint64_t seed = derive_seed(5, i);
    const CaseRecord rec = generate_phantom_case(spec, seed);
    const Anatomy a = phantom_anatomy(spec, seed);
    const auto& t2f = rec.image(Modality::kT2f);
    double in = 0, out = 0;
    int n_in = 0, n_out = 0;
    for (std::size_t p = 0; p < t2f.size(); ++p) {
      if (rec.tumor_mask[p]) {
        in += t2f[p];
        ++n_in;
      } else if (a.head[p] > 0.5) {
        out += t2f[p];
        ++n_out;
      }
    }
    ASSERT_GT(n_in, 0);
    ASSERT_GT(n_out, 0);
    EXPECT_GT(in / n_in, out / n_out) << "seed index " << i;
  }
}

TEST(CaseFile, RoundTripAndExactSize) {
  const CaseRecord rec = generate_phantom_case(PhantomSpec::standard(64, 1.0), 3, "case_0003");
  const auto bytes = encode_case(rec);
  EXPECT_EQ(bytes.size(), 66061u);  // tests/oracle/derive_values.py
  EXPECT_EQ(case_file_size(64), 66061u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CDMC");
  EXPECT_EQ(decode_case(bytes, "case_0003"), rec);

  TempDir dir;
  const auto path = write_case(rec, dir.path());
  EXPECT_EQ(path, case_path(dir.path(), "case_0003"));
  EXPECT_EQ(read_bytes(path), bytes);
  EXPECT_EQ(read_case(dir.path(), "case_0003"), rec);
  EXPECT_THROW(read_case(dir.path(), "missing"), IoError);
}

TEST(CaseFile, OddSizePacksMask) {
  const CaseRecord rec = generate_phantom_case(PhantomSpec::standard(17, 1.0), 9);
  EXPECT_EQ(decode_case(encode_case(rec), "case"), rec);
  EXPECT_EQ(encode_case(rec).size(), case_file_size(17));
}

TEST(CaseFile, CorruptionIsDetected) {
  const auto good = encode_case(generate_phantom_case(PhantomSpec::standard(16), 4));
  using K = FormatError::Kind;

  auto truncated = good;
  truncated.resize(good.size() - 10);
  EXPECT_EQ(decode_error(truncated), K::kChecksum);

  auto flipped = good;
  flipped[100] ^= 0x01;
  EXPECT_EQ(decode_error(flipped), K::kChecksum);

  auto magic = good;
  magic[0] = 'X';
  refresh_crc(magic);
  EXPECT_EQ(decode_error(magic), K::kBadMagic);

  auto version = good;
  version[4] = 2;
  refresh_crc(version);
  EXPECT_EQ(decode_error(version), K::kBadVersion);

  auto count = good;
  count[8] = 3;
  refresh_crc(count);
  EXPECT_EQ(decode_error(count), K::kBadField);

  auto size = good;
  size[6] = 15;
  refresh_crc(size);
  EXPECT_EQ(decode_error(size), K::kBadDimensions);
}

TEST(ValueRange, NormalizeEndpointsAndRoundTrip) {
  const ImageBatch unit{Tensor({1, 3}, {0.0, 0.5, 1.0}), ValueRange::kUnit};
  const ImageBatch net = normalize_for_network(unit);
  EXPECT_EQ(net.range, ValueRange::kSigned);
  EXPECT_EQ(net.pixels[0], -1.0);
  EXPECT_EQ(net.pixels[1], 0.0);
  EXPECT_EQ(net.pixels[2], 1.0);

  Rng rng(1);
  Tensor x({64});
  for (double& v : x.values()) v = rng.uniform();
  const ImageBatch back = denormalize(normalize_for_network({x, ValueRange::kUnit}));
  EXPECT_EQ(back.range, ValueRange::kUnit);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(back.pixels[i], x[i], 1e-7);

  EXPECT_THROW(normalize_for_network(net), InvalidArgument);
}

TEST(ValueRange, OutOfRangeIsClampedAndCounted) {
  std::size_t clamped = 0;
  const ImageBatch out =
      normalize_for_network({Tensor({4}, {-0.2, 0.3, 1.4, 1.0}), ValueRange::kUnit}, &clamped);
  EXPECT_EQ(clamped, 2u);
  EXPECT_EQ(out.pixels[0], -1.0);
  EXPECT_EQ(out.pixels[2], 1.0);
}

DatasetManifest manifest_of(int n) {
  DatasetManifest m;
  for (int i = 0; i < n; ++i) m.cases.push_back({"c" + std::to_string(i), Split::kUnassigned});
  return m;
}

TEST(Split, SeventyThirtyAtCaseLevel) {
  const DatasetManifest m = split_dataset(manifest_of(10), 1);
  EXPECT_EQ(m.ids(Split::kTrain).size(), 7u);
  EXPECT_EQ(m.ids(Split::kTest).size(), 3u);
  for (const auto& id : m.ids(Split::kTrain))
    for (const auto& other : m.ids(Split::kTest)) EXPECT_NE(id, other);
  const DatasetManifest two = split_dataset(manifest_of(2), 1);
  EXPECT_EQ(two.ids(Split::kTrain).size(), 1u);
  EXPECT_EQ(two.ids(Split::kTest).size(), 1u);
  EXPECT_THROW(split_dataset(manifest_of(1), 1), InvalidArgument);
}

TEST(Split, SeedDetermines) {
  EXPECT_EQ(split_dataset(manifest_of(1000), 5), split_dataset(manifest_of(1000), 5));
  EXPECT_NE(split_dataset(manifest_of(1000), 5).ids(Split::kTest),
            split_dataset(manifest_of(1000), 6).ids(Split::kTest));
}

TEST(Manifest, RoundTrip) {
  DatasetManifest m = split_dataset(manifest_of(12), 9);
  m.image_size = 32;
  EXPECT_EQ(parse_manifest(format_manifest(m)), m);
  TempDir dir;
  write_manifest(m, dir.path());
  EXPECT_EQ(read_manifest(dir.path()), m);
}

TEST(Manifest, ParseErrorsNameTheLine) {
  const std::string good = format_manifest(split_dataset(manifest_of(3), 1));
  auto expect_kind = [](const std::string& text, FormatError::Kind kind, const std::string& fragment) {
    try {
      parse_manifest(text);
      ADD_FAILURE() << "accepted: " << text;
    } catch (const FormatError& e) {
      EXPECT_EQ(e.kind(), kind);
      EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
  };
  expect_kind(good + "case=c9,validation\n", FormatError::Kind::kBadField, "line 9");
  expect_kind(good + "bogus\n", FormatError::Kind::kBadField, "line 9");
  expect_kind("version=2\n", FormatError::Kind::kBadVersion, "");
}

TEST(Dataset, GenerationIsByteIdentical) {
  TempDir a_dir;
  const auto a = a_dir / "a";
  const auto b = a_dir / "b";
  const PhantomSpec spec = PhantomSpec::standard(16);
  const DatasetManifest ma = generate_dataset(a, 6, spec, 21);
  const DatasetManifest mb = generate_dataset(b, 6, spec, 21);
  EXPECT_EQ(ma, mb);
  EXPECT_EQ(read_bytes(a / kManifestFileName), read_bytes(b / kManifestFileName));
  for (const auto& e : ma.cases) EXPECT_EQ(read_bytes(case_path(a, e.case_id)), read_bytes(case_path(b, e.case_id)));
  EXPECT_EQ(load_cases(a, ma.ids(Split::kTest)).size(), 2u);
  EXPECT_THROW(generate_dataset(a_dir / "c", 1, spec, 21), InvalidArgument);
}

TEST(Stack, ModalityOrderAndShape) {
  std::vector<CaseRecord> cases = {generate_phantom_case(PhantomSpec::standard(8), 1),
                                   generate_phantom_case(PhantomSpec::standard(8), 2)};
  const Tensor t = stack_modalities(cases, kTargetModalities);
  EXPECT_EQ(t.shape(), (std::vector<int>{2, 2, 8, 8}));
  EXPECT_EQ(t.at(1, 1, 3, 4), static_cast<double>(cases[1].image(Modality::kT2f)[3 * 8 + 4]));
}

TEST(Export, PgmHeaderAndSize) {
  TempDir dir;
  Tensor plane({3, 5}, 0.5);
  plane.at(0, 0) = 1.0;
  write_pgm16(dir / "x.pgm", plane);
  const auto bytes = read_bytes(dir / "x.pgm");
  const std::string header = "P5\n5 3\n65535\n";
  ASSERT_EQ(bytes.size(), header.size() + 2 * 15);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + header.size()), header);
  EXPECT_EQ(bytes[header.size()], 0xFF);
  EXPECT_EQ(bytes[header.size() + 1], 0xFF);
  write_raw_f32(dir / "x.f32", plane);
  EXPECT_EQ(std::filesystem::file_size(dir / "x.f32"), 60u);
}

}  // namespace
}  // namespace cdm::data
