#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cct/layers.hpp"

namespace cct {

enum class TokenizerKind { patch, conv };

/// Geometry of the image-to-sequence front end.
struct TokenizerSpec {
  TokenizerKind kind = TokenizerKind::conv;
  std::int64_t kernel = 3;  // patch size P, or conv kernel k
  std::int64_t blocks = 1;  // conv blocks (ignored for patch)

  // Conv block constants: conv stride 1, padding k/2; pool 3x3, stride 2, padding 1.
  static constexpr std::int64_t pool_kernel = 3;
  static constexpr std::int64_t pool_stride = 2;
  static constexpr std::int64_t pool_padding = 1;
  static constexpr std::int64_t hidden_channels = 64;

  std::int64_t conv_padding() const { return kernel / 2; }
};

/// Spatial extents after the token front end, without running it.
inline std::pair<std::int64_t, std::int64_t> token_grid(const TokenizerSpec& spec, std::int64_t H, std::int64_t W) {
  if (H <= 0 || W <= 0) fail(ErrorKind::tokenize, "image extent must be positive");
  if (spec.kind == TokenizerKind::patch) {
    const auto P = spec.kernel;
    if (P <= 0 || H % P != 0 || W % P != 0)
      fail(ErrorKind::tokenize, "image " + std::to_string(H) + "x" + std::to_string(W) +
                                    " is not divisible by patch size " + std::to_string(P));
    return {H / P, W / P};
  }
  if (spec.blocks < 1 || spec.kernel < 1) fail(ErrorKind::config, "conv tokenizer needs >= 1 block and kernel >= 1");
  std::int64_t h = H, w = W;
  for (std::int64_t b = 0; b < spec.blocks; ++b) {
    if (h < spec.kernel || w < spec.kernel)
      fail(ErrorKind::tokenize, "spatial extent collapsed to " + std::to_string(h) + "x" + std::to_string(w) +
                                    " before conv block " + std::to_string(b + 1) + " (kernel " +
                                    std::to_string(spec.kernel) + ")");
    h = pooled_extent(h, spec.kernel, 1, spec.conv_padding());
    w = pooled_extent(w, spec.kernel, 1, spec.conv_padding());
    h = pooled_extent(h, TokenizerSpec::pool_kernel, TokenizerSpec::pool_stride, TokenizerSpec::pool_padding);
    w = pooled_extent(w, TokenizerSpec::pool_kernel, TokenizerSpec::pool_stride, TokenizerSpec::pool_padding);
    if (h <= 0 || w <= 0) fail(ErrorKind::tokenize, "spatial extent collapsed to zero");
  }
  return {h, w};
}

inline std::int64_t sequence_length(const TokenizerSpec& spec, std::int64_t H, std::int64_t W) {
  const auto [h, w] = token_grid(spec, H, W);
  return h * w;
}

/// Non-overlapping P x P patches, ordered top-left to bottom-right, each
/// flattened channel-major and linearly projected to d.
template <class T>
class PatchTokenizer {
 public:
  PatchTokenizer() = default;
  PatchTokenizer(std::int64_t patch, std::int64_t channels, std::int64_t dim, Rng& rng)
      : patch_(patch), proj(patch * patch * channels, dim, true, rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    const std::int64_t b = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3), P = patch_;
    token_grid({TokenizerKind::patch, P, 1}, H, W);
    auto patches = permute(reshape(x, {b, C, H / P, P, W / P, P}), {0, 2, 4, 1, 3, 5});
    return proj(reshape(patches, {b, (H / P) * (W / P), C * P * P}));
  }

  std::int64_t patch() const { return patch_; }

  void collect(ParamList<T>& out, const std::string& prefix) const { proj.collect(out, prefix + ".proj"); }

 private:
  std::int64_t patch_ = 16;

 public:
  Linear<T> proj;
};

/// Stack of MaxPool(ReLU(Conv2d(x))) blocks. Earlier blocks use 64 filters, the
/// final one d. Output tokens are the final feature map flattened row-major.
template <class T>
class ConvTokenizer {
 public:
  ConvTokenizer() = default;
  ConvTokenizer(std::int64_t kernel, std::int64_t blocks, std::int64_t channels, std::int64_t dim, Rng& rng)
      : spec_{TokenizerKind::conv, kernel, blocks} {
    if (blocks < 1) fail(ErrorKind::config, "conv tokenizer needs at least one block");
    std::int64_t in = channels;
    for (std::int64_t i = 0; i < blocks; ++i) {
      const std::int64_t out = i + 1 == blocks ? dim : TokenizerSpec::hidden_channels;
      weights.push_back(trunc_normal<T>({out, in, kernel, kernel}, rng));
      in = out;
    }
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    token_grid(spec_, x.size(2), x.size(3));
    Tensor<T> h = x;
    for (const auto& w : weights) {
      // max and relu commute, so pooling first gives the same values and
      // gradients as MaxPool(ReLU(.)) on a quarter of the elements.
      h = conv2d(h, w, 1, spec_.conv_padding());
      h = relu(maxpool2d(h, TokenizerSpec::pool_kernel, TokenizerSpec::pool_stride, TokenizerSpec::pool_padding));
    }
    const std::int64_t b = h.size(0), d = h.size(1), n = h.size(2) * h.size(3);
    return transpose(reshape(h, {b, d, n}), 1, 2);
  }

  const TokenizerSpec& spec() const { return spec_; }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < weights.size(); ++i)
      out.push_back({prefix + ".conv" + std::to_string(i) + ".weight", weights[i], true});
  }

  std::vector<Tensor<T>> weights;

 private:
  TokenizerSpec spec_;
};

}  // namespace cct
