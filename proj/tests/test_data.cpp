#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>

#include <unistd.h>

#include "cct/data.hpp"

using namespace cct;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  auto d = fs::temp_directory_path() / ("cct_test_data_" + tag + "_" + std::to_string(::getpid()));
  fs::create_directories(d);
  return d;
}

// Byte-valued synthetic split so that encode/decode round trips are exact.
DatasetSplit synthetic(std::int64_t n, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t classes,
                       const std::string& name, std::uint64_t seed) {
  Rng rng(seed);
  DatasetSplit s;
  s.name = name;
  s.class_count = classes;
  s.images = Tensor<float>::empty({n, C, H, W});
  for (auto& v : s.images.data()) v = detail::byte_to_unit(static_cast<std::uint8_t>(rng.below(256)));
  for (std::int64_t i = 0; i < n; ++i) s.labels.push_back(i % classes);
  std::tie(s.mean, s.std) = dataset_stats(name);
  return s;
}

std::vector<std::uint8_t> random_cifar_bytes(CifarVariant v, std::int64_t records, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::uint8_t> out;
  for (std::int64_t r = 0; r < records; ++r) {
    if (v == CifarVariant::cifar100) out.push_back(static_cast<std::uint8_t>(rng.below(20)));
    out.push_back(static_cast<std::uint8_t>(rng.below(v == CifarVariant::cifar10 ? 10 : 100)));
    for (int i = 0; i < 3072; ++i) out.push_back(static_cast<std::uint8_t>(rng.below(256)));
  }
  return out;
}

const char* data_root() { return std::getenv("CCT_DATA_ROOT"); }

}  // namespace

TEST(Idx, RoundTripThroughFiles) {
  const auto dir = temp_dir("idx");
  const auto s = synthetic(12, 1, 28, 28, 10, "mnist", 1);
  write_idx(s, dir / "img", dir / "lab");
  const auto r = load_idx(dir / "img", dir / "lab");
  ASSERT_EQ(r.images.shape(), (Shape{12, 1, 28, 28}));
  EXPECT_EQ(r.labels, s.labels);
  for (std::int64_t i = 0; i < s.images.numel(); ++i) EXPECT_EQ(r.images.data()[i], s.images.data()[i]);
  fs::remove_all(dir);
}

TEST(Idx, TruncatedFileIsFormatError) {
  const auto dir = temp_dir("trunc");
  write_idx(synthetic(3, 1, 28, 28, 10, "mnist", 2), dir / "img", dir / "lab");
  fs::resize_file(dir / "img", fs::file_size(dir / "img") - 1);
  try {
    load_idx(dir / "img", dir / "lab");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format);
    EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(Idx, BadMagicIsFormatError) {
  const auto dir = temp_dir("magic");
  write_idx(synthetic(3, 1, 28, 28, 10, "mnist", 3), dir / "img", dir / "lab");
  try {
    load_idx(dir / "lab", dir / "lab");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format);
  }
  fs::remove_all(dir);
}

TEST(Idx, MissingFileIsIoError) {
  try {
    load_idx("/nonexistent/a", "/nonexistent/b");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
  }
}

TEST(Idx, PublishedMnistHeaders) {
  if (data_root() == nullptr || !fs::exists(fs::path(data_root()) / "mnist")) GTEST_SKIP() << "no MNIST files";
  auto [train, test] = load_mnist_dir(fs::path(data_root()) / "mnist");
  EXPECT_EQ(train.images.shape(), (Shape{60000, 1, 28, 28}));
  EXPECT_EQ(test.size(), 10000);
  for (auto l : train.labels) ASSERT_TRUE(l >= 0 && l < 10);
  const auto [lo, hi] = std::minmax_element(train.images.data().begin(), train.images.data().end());
  EXPECT_GE(*lo, 0.0f);
  EXPECT_LE(*hi, 1.0f);
}

TEST(Cifar, DecodeEncodeIsBitFaithful) {
  for (auto v : {CifarVariant::cifar10, CifarVariant::cifar100}) {
    const auto bytes = random_cifar_bytes(v, 5, 4);
    const auto s = decode_cifar(bytes, v);
    EXPECT_EQ(s.images.shape(), (Shape{5, 3, 32, 32}));
    std::vector<std::uint8_t> coarse;
    if (v == CifarVariant::cifar100)
      for (std::size_t r = 0; r < 5; ++r) coarse.push_back(bytes[r * 3074]);
    EXPECT_EQ(encode_cifar(s, v, coarse), bytes);
  }
}

TEST(Cifar, FineLabelsForHundredClasses) {
  auto bytes = random_cifar_bytes(CifarVariant::cifar100, 1, 5);
  bytes[0] = 3;
  bytes[1] = 77;
  const auto s = decode_cifar(bytes, CifarVariant::cifar100);
  EXPECT_EQ(s.labels[0], 77);
  EXPECT_EQ(s.class_count, 100);
}

TEST(Cifar, RecordSizeMismatchIsFormatError) {
  auto bytes = random_cifar_bytes(CifarVariant::cifar10, 2, 6);
  bytes.pop_back();
  try {
    decode_cifar(bytes, CifarVariant::cifar10);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format);
  }
}

TEST(Cifar, LoadsBatchDirectoryLayout) {
  const auto dir = temp_dir("cifar") / "cifar-10-batches-bin";
  fs::create_directories(dir);
  for (int b = 1; b <= 5; ++b) detail::write_bytes(dir / ("data_batch_" + std::to_string(b) + ".bin"),
                                                   random_cifar_bytes(CifarVariant::cifar10, 4, 10 + b));
  detail::write_bytes(dir / "test_batch.bin", random_cifar_bytes(CifarVariant::cifar10, 3, 20));
  auto [train, test] = load_cifar(dir.parent_path(), CifarVariant::cifar10);
  EXPECT_EQ(train.size(), 20);
  EXPECT_EQ(test.size(), 3);
  EXPECT_EQ(train.mean.size(), 3u);
  fs::remove_all(dir.parent_path());
}

TEST(Cifar, PublishedSplitSizes) {
  if (data_root() == nullptr || !fs::exists(fs::path(data_root()) / "cifar10")) GTEST_SKIP() << "no CIFAR-10 files";
  auto [train, test] = load_cifar(fs::path(data_root()) / "cifar10", CifarVariant::cifar10);
  EXPECT_EQ(train.size(), 50000);
  EXPECT_EQ(test.size(), 10000);
  std::map<std::int64_t, std::int64_t> counts;
  for (auto l : train.labels) ++counts[l];
  for (const auto& [label, c] : counts) EXPECT_EQ(c, 5000) << label;
}

TEST(Subsample, ExactCountsAndDeterminism) {
  const auto s = synthetic(200, 1, 8, 8, 10, "mnist", 7);
  const auto a = subsample_per_class(s, 5, 42), b = subsample_per_class(s, 5, 42);
  EXPECT_EQ(a.size(), 50);
  EXPECT_EQ(a.labels, b.labels);
  for (std::int64_t i = 0; i < a.images.numel(); ++i) ASSERT_EQ(a.images.data()[i], b.images.data()[i]);
  std::map<std::int64_t, int> counts;
  for (auto l : a.labels) ++counts[l];
  for (const auto& [label, c] : counts) EXPECT_EQ(c, 5);
  EXPECT_NE(subsample_per_class(s, 5, 43).labels, a.labels);
}

TEST(Subsample, FullClassSizeIsPermutation) {
  const auto s = synthetic(60, 1, 8, 8, 10, "mnist", 8);
  const auto a = subsample_per_class(s, 6, 0);
  auto la = a.labels, ls = s.labels;
  std::sort(la.begin(), la.end());
  std::sort(ls.begin(), ls.end());
  EXPECT_EQ(la, ls);
}

TEST(Subsample, TooManyIsConfigError) {
  try {
    subsample_per_class(synthetic(60, 1, 8, 8, 10, "mnist", 9), 7, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
  }
}

TEST(Resize, SameSizeIsBitwiseIdentity) {
  const auto s = synthetic(3, 3, 32, 32, 10, "cifar10", 10);
  const auto r = resize(s, 32);
  for (std::int64_t i = 0; i < s.images.numel(); ++i) EXPECT_EQ(r.images.data()[i], s.images.data()[i]);
}

TEST(Resize, ConstantStaysConstant) {
  auto s = synthetic(1, 1, 28, 28, 10, "mnist", 11);
  for (auto& v : s.images.data()) v = 0.37f;
  for (std::int64_t size : {8, 17, 32, 64, 128}) {
    const auto r = resize(s, size);
    for (float v : r.images.data()) EXPECT_NEAR(v, 0.37f, 1e-6);
  }
}

TEST(Resize, DownUpRoundTripOnSmoothImages) {
  auto s = synthetic(2, 3, 32, 32, 10, "cifar10", 12);
  for (std::int64_t i = 0; i < 2 * 3; ++i)
    for (std::int64_t y = 0; y < 32; ++y)
      for (std::int64_t x = 0; x < 32; ++x)
        s.images.data()[(i * 32 + y) * 32 + x] =
            static_cast<float>(0.5 + 0.25 * std::sin(0.2 * y + i) * std::cos(0.15 * x - i));
  const auto back = resize(resize(s, 16), 32);
  double mae = 0;
  for (std::int64_t i = 0; i < s.images.numel(); ++i) mae += std::abs(back.images.data()[i] - s.images.data()[i]);
  EXPECT_LT(mae / static_cast<double>(s.images.numel()), 0.1);
  EXPECT_EQ(back.labels, s.labels);
}

TEST(Resize, OutOfRangeIsConfigError) {
  try {
    resize(synthetic(1, 1, 28, 28, 10, "mnist", 13), 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
  }
}

TEST(Batches, PartitionCoversEverySampleOnce) {
  const auto s = synthetic(103, 1, 8, 8, 10, "mnist", 14);
  BatchStream stream(s, 16, 5, AugmentPolicy::for_dataset("cifar10"), 3);
  std::vector<std::int64_t> seen, labels;
  std::int64_t batches = 0;
  while (auto b = stream.next()) {
    ++batches;
    EXPECT_EQ(b->images.size(0), static_cast<std::int64_t>(b->labels.size()));
    seen.insert(seen.end(), b->indices.begin(), b->indices.end());
    labels.insert(labels.end(), b->labels.begin(), b->labels.end());
  }
  EXPECT_EQ(batches, 7);
  std::sort(seen.begin(), seen.end());
  for (std::int64_t i = 0; i < 103; ++i) EXPECT_EQ(seen[static_cast<std::size_t>(i)], i);
  auto ref = s.labels;
  std::sort(ref.begin(), ref.end());
  std::sort(labels.begin(), labels.end());
  EXPECT_EQ(labels, ref);
}

TEST(Batches, ShuffleIsKeyedBySeedAndEpoch) {
  const auto s = synthetic(50, 1, 8, 8, 10, "mnist", 15);
  EXPECT_EQ(BatchStream(s, 8, 1, {}, 0).order(), BatchStream(s, 8, 1, {}, 0).order());
  EXPECT_NE(BatchStream(s, 8, 1, {}, 0).order(), BatchStream(s, 8, 1, {}, 1).order());
  EXPECT_NE(BatchStream(s, 8, 1, {}, 0).order(), BatchStream(s, 8, 2, {}, 0).order());
}

TEST(Batches, DisabledPolicyGivesNormalizedSlices) {
  const auto s = synthetic(20, 1, 8, 8, 10, "mnist", 16);
  BatchStream stream(s, 6, 9, AugmentPolicy::none(), 0);
  auto b = *stream.next();
  for (std::int64_t j = 0; j < 6; ++j) {
    const auto idx = b.indices[static_cast<std::size_t>(j)];
    for (std::int64_t p = 0; p < 64; ++p)
      EXPECT_FLOAT_EQ(b.images.data()[j * 64 + p], (s.images.data()[idx * 64 + p] - 0.1307f) / 0.3081f);
  }
}

TEST(Batches, PrefetchDoesNotChangeResults) {
  const auto s = synthetic(40, 3, 32, 32, 10, "cifar10", 17);
  const auto policy = AugmentPolicy::for_dataset("cifar10");
  BatchStream a(s, 7, 3, policy, 2, true, true), b(s, 7, 3, policy, 2, true, false);
  while (auto x = a.next()) {
    auto y = b.next();
    ASSERT_TRUE(y.has_value());
    for (std::int64_t i = 0; i < x->images.numel(); ++i) ASSERT_EQ(x->images.data()[i], y->images.data()[i]);
  }
}

TEST(Augment, CropKeepsShapeAndStaysWithinPadding) {
  // A single bright pixel at the centre moves by at most `pad` in each direction.
  auto s = synthetic(64, 1, 32, 32, 10, "mnist", 18);
  s.mean = {0.0f};
  s.std = {1.0f};
  for (auto& v : s.images.data()) v = 0;
  for (std::int64_t i = 0; i < 64; ++i) s.images.data()[i * 1024 + 16 * 32 + 16] = 1;
  AugmentPolicy policy{true, 4, 0.0};
  BatchStream stream(s, 64, 0, policy, 0, false);
  auto b = *stream.next();
  ASSERT_EQ(b.images.shape(), (Shape{64, 1, 32, 32}));
  std::set<std::pair<std::int64_t, std::int64_t>> offsets;
  for (std::int64_t i = 0; i < 64; ++i) {
    std::int64_t found = 0;
    for (std::int64_t y = 0; y < 32; ++y)
      for (std::int64_t x = 0; x < 32; ++x)
        if (b.images.data()[i * 1024 + y * 32 + x] == 1.0f) {
          ++found;
          EXPECT_LE(std::abs(y - 16), 4);
          EXPECT_LE(std::abs(x - 16), 4);
          offsets.insert({y - 16 + 4, x - 16 + 4});
        }
    EXPECT_EQ(found, 1);
  }
  for (const auto& [oy, ox] : offsets) {
    EXPECT_GE(oy, 0);
    EXPECT_LE(oy, 8);
    EXPECT_GE(ox, 0);
    EXPECT_LE(ox, 8);
  }
  EXPECT_GT(offsets.size(), 10u);
}

TEST(Augment, DigitsAreNeverFlipped) {
  EXPECT_EQ(AugmentPolicy::for_dataset("mnist").hflip_prob, 0.0);
  EXPECT_EQ(AugmentPolicy::for_dataset("cifar10").hflip_prob, 0.5);
}

TEST(Stats, PublishedChannelStatistics) {
  const auto [mean, std] = dataset_stats("cifar10");
  EXPECT_FLOAT_EQ(mean[0], 0.4914f);
  EXPECT_FLOAT_EQ(mean[1], 0.4822f);
  EXPECT_FLOAT_EQ(mean[2], 0.4465f);
  try {
    dataset_stats("imagenet");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
  }
}
