#include <gtest/gtest.h>

#include "cct/tokenizer.hpp"

using namespace cct;
using TD = Tensor<double>;

namespace {

const TokenizerSpec kConv1{TokenizerKind::conv, 3, 1};
const TokenizerSpec kConv2{TokenizerKind::conv, 3, 2};

TokenizerSpec patch(std::int64_t p) { return {TokenizerKind::patch, p, 1}; }

}  // namespace

TEST(SequenceLength, PatchAndConvCounts) {
  EXPECT_EQ(sequence_length(patch(16), 32, 32), 4);
  EXPECT_EQ(sequence_length(patch(4), 32, 32), 64);
  EXPECT_EQ(sequence_length(kConv1, 32, 32), 256);
  EXPECT_EQ(sequence_length(kConv2, 32, 32), 64);
  EXPECT_EQ(sequence_length(kConv2, 28, 28), 49);
  EXPECT_EQ(sequence_length(kConv2, 64, 64), 256);
}

TEST(SequenceLength, IndivisiblePatchIsTokenizeError) {
  try {
    sequence_length(patch(8), 28, 28);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::tokenize);
  }
}

TEST(SequenceLength, CollapsedExtentIsTokenizeError) {
  try {
    sequence_length(TokenizerSpec{TokenizerKind::conv, 9, 9}, 32, 32);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::tokenize);
  }
}

TEST(SequenceLength, ConvTwoBlocksQuartersTwice) {
  for (std::int64_t s = 16; s <= 64; s += 4) EXPECT_EQ(sequence_length(kConv2, s, s), (s / 4) * (s / 4)) << s;
}

TEST(ConvTokenizer, OutputMatchesPredictedLength) {
  Rng rng(0);
  ConvTokenizer<double> tok(3, 2, 1, 16, rng);
  auto y = tok(TD::zeros({2, 1, 28, 28}));
  EXPECT_EQ(y.shape(), (Shape{2, 49, 16}));
}

TEST(ConvTokenizer, ParameterCountIgnoresImageSize) {
  Rng rng(1);
  ConvTokenizer<double> tok(3, 2, 3, 32, rng);
  ParamList<double> ps;
  tok.collect(ps, "t");
  std::int64_t n = 0;
  for (const auto& p : ps) n += p.value.numel();
  EXPECT_EQ(n, 64 * 3 * 9 + 32 * 64 * 9);
  EXPECT_EQ(tok(TD::zeros({1, 3, 16, 16})).size(1), 16);
  EXPECT_EQ(tok(TD::zeros({1, 3, 48, 48})).size(1), 144);
}

TEST(ConvTokenizer, HasNoBias) {
  // Zero input gives exactly zero tokens since there is no bias term.
  Rng rng(2);
  ConvTokenizer<double> tok(3, 1, 3, 8, rng);
  const auto y = tok(TD::zeros({1, 3, 8, 8}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(ConvTokenizer, RowMajorTokenOrder) {
  // 1x1 kernel with unit weight: token t reads the pooled window of pixel (t / w, t % w).
  Rng rng(3);
  ConvTokenizer<double> tok(1, 1, 1, 1, rng);
  tok.weights[0].data()[0] = 1.0;
  for (std::int64_t py = 0; py < 8; ++py)
    for (std::int64_t px = 0; px < 8; ++px) {
      auto img = TD::zeros({1, 1, 8, 8});
      img.at({0, 0, py, px}) = 1.0;
      auto y = tok(img);
      ASSERT_EQ(y.size(1), 16);
      // Pool 3x3 stride 2 pad 1: output (oy, ox) covers rows 2*oy-1 .. 2*oy+1.
      for (std::int64_t t = 0; t < 16; ++t) {
        const std::int64_t oy = t / 4, ox = t % 4;
        const bool covers = py >= 2 * oy - 1 && py <= 2 * oy + 1 && px >= 2 * ox - 1 && px <= 2 * ox + 1;
        EXPECT_EQ(y.at({0, t, 0}), covers ? 1.0 : 0.0) << py << "," << px << " token " << t;
      }
    }
}

TEST(PatchTokenizer, TopLeftToBottomRightOrder) {
  Rng rng(4);
  PatchTokenizer<double> tok(4, 1, 1, rng);
  for (auto& w : tok.proj.weight.data()) w = 1.0;
  auto img = TD::zeros({1, 1, 8, 8});
  img.at({0, 0, 5, 2}) = 1.0;  // patch row 1, col 0 -> token 2
  auto y = tok(img);
  ASSERT_EQ(y.shape(), (Shape{1, 4, 1}));
  for (std::int64_t t = 0; t < 4; ++t) EXPECT_EQ(y.at({0, t, 0}), t == 2 ? 1.0 : 0.0);
}

TEST(PatchTokenizer, ChannelMajorFlattening) {
  Rng rng(5);
  PatchTokenizer<double> tok(2, 2, 1, rng);
  auto& w = tok.proj.weight;
  for (std::int64_t i = 0; i < 8; ++i) w.data()[i] = static_cast<double>(i);
  auto img = TD::zeros({1, 2, 2, 2});
  img.at({0, 1, 0, 1}) = 1.0;  // channel 1, row 0, col 1 -> feature 1*4 + 0*2 + 1 = 5
  EXPECT_DOUBLE_EQ(tok(img).item(), 5.0);
}
