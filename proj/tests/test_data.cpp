#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "clae/data.hpp"
#include "clae/eval.hpp"

using namespace clae;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("clae_test_data_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> record(unsigned char label, std::size_t salt = 0) {
  std::vector<unsigned char> r(3073);
  r[0] = label;
  for (std::size_t k = 0; k < 3072; ++k) r[1 + k] = static_cast<unsigned char>((k + salt) % 256);
  return r;
}

}  // namespace

TEST(Cifar, OneRecordMatchesIndexArithmetic) {
  const fs::path p = temp_file("one.bin");
  write_bytes(p, record(7));
  const Dataset ds = load_cifar10(p);
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.labels[0], 7);
  EXPECT_EQ(ds.shape, (ImageShape{3, 32, 32}));
  for (std::size_t k = 0; k < 3072; ++k) EXPECT_EQ(ds.images.at(0, k), static_cast<double>(k % 256) / 255.0);
  // channel-major: red plane first, then green, then blue
  const std::size_t c = 2, y = 5, x = 9;
  EXPECT_EQ(ds.images.at(0, c * 1024 + y * 32 + x), static_cast<double>((c * 1024 + y * 32 + x) % 256) / 255.0);
}

TEST(Cifar, CountsRecords) {
  const fs::path p = temp_file("five.bin");
  std::vector<unsigned char> bytes;
  for (unsigned char i = 0; i < 5; ++i) {
    const auto r = record(i, i);
    bytes.insert(bytes.end(), r.begin(), r.end());
  }
  write_bytes(p, bytes);
  const Dataset ds = load_cifar10(p);
  EXPECT_EQ(ds.size(), 5u);
  EXPECT_EQ(ds.labels, (std::vector<int>{0, 1, 2, 3, 4}));
  EXPECT_EQ(ds.images.at(3, 0), 3.0 / 255.0);
  EXPECT_EQ(load_cifar10(p, 2).size(), 2u);
}

TEST(Cifar, TruncatedFileIsFormatError) {
  const fs::path p = temp_file("short.bin");
  auto r = record(1);
  r.pop_back();
  ASSERT_EQ(r.size(), 3072u);
  write_bytes(p, r);
  EXPECT_THROW(load_cifar10(p), FormatError);
  write_bytes(p, {});
  EXPECT_THROW(load_cifar10(p), FormatError);
}

TEST(Cifar, BadLabelAndMissingFile) {
  const fs::path p = temp_file("label.bin");
  write_bytes(p, record(10));
  EXPECT_THROW(load_cifar10(p), FormatError);
  EXPECT_THROW(load_cifar10(temp_file("absent.bin")), IoError);
}

TEST(Cifar, WriteReadRoundTrip) {
  const fs::path p = temp_file("rt.bin");
  write_bytes(p, record(4, 17));
  const Dataset a = load_cifar10(p);
  const fs::path q = temp_file("rt2.bin");
  write_cifar10(q, a);
  const Dataset b = load_cifar10(q);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(fs::file_size(p), fs::file_size(q));
}

TEST(Synthetic, ZeroNoiseClassesAreConstant) {
  SyntheticSpec spec;
  spec.classes = 5;
  spec.per_class = 4;
  spec.noise = 0.0;
  const Dataset ds = make_synthetic(spec, 3);
  ASSERT_EQ(ds.size(), 20u);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(ds.labels[i], static_cast<int>(i % 5));
    const auto a = ds.image(i), b = ds.image(i % 5);
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  }
  for (int k = 1; k < 5; ++k) {
    const auto a = ds.image(0), b = ds.image(static_cast<std::size_t>(k));
    EXPECT_FALSE(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST(Synthetic, DeterministicPerSeedAndInRange) {
  SyntheticSpec spec;
  spec.per_class = 10;
  const Dataset a = make_synthetic(spec, 8), b = make_synthetic(spec, 8), c = make_synthetic(spec, 9);
  EXPECT_EQ(a.images, b.images);
  EXPECT_NE(a.images, c.images);
  for (double v : a.images.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Synthetic, FourClassesAreLinearlySeparable) {
  SyntheticSpec spec;
  spec.classes = 4;
  spec.per_class = 100;
  spec.noise = 0.05;
  const Dataset train = make_synthetic(spec, 1);
  const Dataset test = make_synthetic(spec, 2);
  const FeatureBank tr = make_feature_bank(train.images, train.labels, 4);
  const FeatureBank te = make_feature_bank(test.images, test.labels, 4);
  EXPECT_GE(linear_probe(tr, te, 50, 0.5).accuracy, 0.99);
}

TEST(Synthetic, RejectsBadSpec) {
  SyntheticSpec spec;
  spec.classes = 1;
  EXPECT_THROW(make_synthetic(spec, 0), ContractViolation);
}

TEST(Augment, IdentityPolicyIsBitwiseNoop) {
  Rng rng(1);
  const ImageShape shape{3, 6, 6};
  std::vector<double> img(shape.size());
  for (double& v : img) v = rng.uniform();
  Rng aug(2);
  EXPECT_EQ(augment(img, shape, AugmentPolicy::identity(), aug), img);
}

TEST(Augment, DoubleFlipRestores) {
  Rng rng(1);
  const ImageShape shape{3, 5, 7};
  std::vector<double> img(shape.size());
  for (double& v : img) v = rng.uniform();
  AugmentPolicy pol = AugmentPolicy::identity();
  pol.flip = true;
  AugmentParams p;
  p.flip = true;
  const auto once = apply_augment(img, shape, pol, p);
  EXPECT_NE(once, img);
  EXPECT_EQ(once[0], img[6]);
  EXPECT_EQ(apply_augment(once, shape, pol, p), img);
}

TEST(Augment, CropOffsetIndexOracle) {
  const ImageShape shape{3, 6, 6};
  std::vector<double> img(shape.size());
  for (std::size_t k = 0; k < img.size(); ++k) img[k] = static_cast<double>(k + 1) / 200.0;
  AugmentPolicy pol = AugmentPolicy::identity();
  pol.crop = true;
  pol.pad = 2;
  AugmentParams p;
  p.crop_x = p.crop_y = 2;  // centred crop of the padded image
  EXPECT_EQ(apply_augment(img, shape, pol, p), img);
  p.crop_x = 3;
  p.crop_y = 0;
  const auto out = apply_augment(img, shape, pol, p);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 6; ++y)
      for (std::size_t x = 0; x < 6; ++x) {
        const long sy = static_cast<long>(y) - 2, sx = static_cast<long>(x) + 1;
        const double want = sy >= 0 && sx < 6 ? img[(c * 6 + sy) * 6 + sx] : 0.0;
        EXPECT_EQ(out[(c * 6 + y) * 6 + x], want);
      }
}

TEST(Augment, RotationQuarterTurn) {
  const ImageShape shape{1, 2, 2};
  AugmentPolicy pol = AugmentPolicy::identity();
  pol.rotation = true;
  AugmentParams p;
  p.quarter_turns = 1;
  // [[a b] [c d]] turned clockwise is [[c a] [d b]]
  EXPECT_EQ(apply_augment(std::vector<double>{0.1, 0.2, 0.3, 0.4}, shape, pol, p),
            (std::vector<double>{0.3, 0.1, 0.4, 0.2}));
  p.quarter_turns = 4;
  EXPECT_EQ(apply_augment(std::vector<double>{0.1, 0.2, 0.3, 0.4}, shape, pol, p),
            (std::vector<double>{0.1, 0.2, 0.3, 0.4}));
}

TEST(Augment, GrayscaleReplicatesLuminance) {
  const ImageShape shape{3, 1, 1};
  AugmentPolicy pol = AugmentPolicy::identity();
  pol.grayscale = true;
  AugmentParams p;
  p.grayscale = true;
  const auto out = apply_augment(std::vector<double>{1.0, 0.5, 0.0}, shape, pol, p);
  const double g = 0.299 + 0.587 * 0.5;
  for (double v : out) EXPECT_NEAR(v, g, 1e-15);
}

TEST(Augment, FullPolicyStaysInRangeAndShape) {
  Rng rng(4);
  const ImageShape shape{3, 8, 8};
  AugmentPolicy pol;
  pol.rotation = true;
  pol.brightness = 0.9;
  for (int t = 0; t < 200; ++t) {
    std::vector<double> img(shape.size());
    for (double& v : img) v = rng.uniform();
    const auto out = augment(img, shape, pol, rng);
    ASSERT_EQ(out.size(), img.size());
    for (double v : out) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Augment, FixedDrawCountWhateverFires) {
  const ImageShape shape{3, 4, 4};
  const std::vector<double> img(shape.size(), 0.5);
  AugmentPolicy full;
  full.rotation = true;
  for (const AugmentPolicy& pol : {full, AugmentPolicy::identity()}) {
    Rng a(9), b(9);
    augment(img, shape, pol, a);
    for (int i = 0; i < 8; ++i) b.next_u64();
    EXPECT_TRUE(a == b);
  }
}

TEST(Augment, IndependentStreamsGiveDistinctViews) {
  Rng rng(1);
  const ImageShape shape{3, 8, 8};
  std::vector<double> img(shape.size());
  for (double& v : img) v = rng.uniform();
  Rng s1 = Rng::stream(1, "augment"), s2 = Rng::stream(2, "augment"), s1b = Rng::stream(1, "augment");
  const auto p = augment(img, shape, AugmentPolicy{}, s1);
  EXPECT_NE(p, augment(img, shape, AugmentPolicy{}, s2));
  EXPECT_EQ(p, augment(img, shape, AugmentPolicy{}, s1b));
}
