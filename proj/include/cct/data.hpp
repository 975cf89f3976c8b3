#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <future>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <zlib.h>

#include "cct/rng.hpp"
#include "cct/tensor.hpp"

namespace cct {

/// Decoded images in [0, 1] plus labels and the channel statistics used for
/// normalization.
struct DatasetSplit {
  std::string name;
  Tensor<float> images;  // [N, C, H, W]
  std::vector<std::int64_t> labels;
  std::int64_t class_count = 0;
  std::vector<float> mean;
  std::vector<float> std;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  std::int64_t channels() const { return images.size(1); }
  std::int64_t height() const { return images.size(2); }
  std::int64_t width() const { return images.size(3); }

  void validate() const {
    if (images.size(0) != size()) fail(ErrorKind::format, name + ": image/label count mismatch");
    for (auto l : labels)
      if (l < 0 || l >= class_count) fail(ErrorKind::format, name + ": label " + std::to_string(l) + " out of range");
    if (static_cast<std::int64_t>(mean.size()) != channels() || static_cast<std::int64_t>(std.size()) != channels())
      fail(ErrorKind::format, name + ": normalization stats do not match channel count");
  }
};

/// Published per-channel statistics. Fixed configuration, never computed at runtime.
inline std::pair<std::vector<float>, std::vector<float>> dataset_stats(const std::string& dataset) {
  if (dataset == "mnist") return {{0.1307f}, {0.3081f}};
  if (dataset == "fashion-mnist") return {{0.2860f}, {0.3530f}};
  if (dataset == "cifar10") return {{0.4914f, 0.4822f, 0.4465f}, {0.2470f, 0.2435f, 0.2616f}};
  if (dataset == "cifar100") return {{0.5071f, 0.4865f, 0.4409f}, {0.2673f, 0.2564f, 0.2762f}};
  fail(ErrorKind::config, "unknown dataset '" + dataset + "' (mnist|fashion-mnist|cifar10|cifar100)");
}

namespace detail {

/// Reads a whole file, transparently inflating gzip input.
inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorKind::io, "file not found: " + path.string());
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (f == nullptr) fail(ErrorKind::io, "cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> buf{};
  for (;;) {
    const int n = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
    if (n < 0) {
      gzclose(f);
      fail(ErrorKind::format, "corrupt compressed stream in " + path.string());
    }
    if (n == 0) break;
    out.insert(out.end(), buf.begin(), buf.begin() + n);
  }
  gzclose(f);
  return out;
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off, const std::string& what) {
  if (off + 4 > b.size())
    fail(ErrorKind::format, what + ": truncated header at byte offset " + std::to_string(off));
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void write_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::io, "cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) fail(ErrorKind::io, "write failed for " + path.string());
}

inline float byte_to_unit(std::uint8_t v) { return static_cast<float>(v) / 255.0f; }
inline std::uint8_t unit_to_byte(float v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0f), 0L, 255L));
}

inline std::optional<std::filesystem::path> find_first(const std::filesystem::path& dir,
                                                       std::initializer_list<const char*> names) {
  for (const char* n : names) {
    for (const char* ext : {"", ".gz"}) {
      auto p = dir / (std::string(n) + ext);
      if (std::filesystem::exists(p)) return p;
    }
  }
  return std::nullopt;
}

}  // namespace detail

/// Decodes an IDX image/label file pair (magic 0x00000803 / 0x00000801).
inline DatasetSplit load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                             const std::string& name = "mnist", std::int64_t class_count = 10) {
  const auto img = detail::read_bytes(images_path);
  const auto lab = detail::read_bytes(labels_path);
  const std::string iw = images_path.string(), lw = labels_path.string();
  if (detail::read_be32(img, 0, iw) != 0x00000803u)
    fail(ErrorKind::format, iw + ": bad IDX image magic at byte offset 0");
  if (detail::read_be32(lab, 0, lw) != 0x00000801u)
    fail(ErrorKind::format, lw + ": bad IDX label magic at byte offset 0");
  const std::int64_t n = detail::read_be32(img, 4, iw);
  const std::int64_t rows = detail::read_be32(img, 8, iw);
  const std::int64_t cols = detail::read_be32(img, 12, iw);
  const std::int64_t nl = detail::read_be32(lab, 4, lw);
  if (n != nl) fail(ErrorKind::format, iw + ": " + std::to_string(n) + " images but " + std::to_string(nl) + " labels");
  if (n <= 0 || rows <= 0 || cols <= 0) fail(ErrorKind::format, iw + ": empty dimensions in header");
  const std::size_t need = 16 + static_cast<std::size_t>(n * rows * cols);
  if (img.size() != need)
    fail(ErrorKind::format, iw + ": expected " + std::to_string(need) + " bytes, file ends at byte offset " +
                                std::to_string(img.size()));
  if (lab.size() != 8 + static_cast<std::size_t>(n))
    fail(ErrorKind::format, lw + ": expected " + std::to_string(8 + n) + " bytes, file ends at byte offset " +
                                std::to_string(lab.size()));
  DatasetSplit s;
  s.name = name;
  s.class_count = class_count;
  s.images = Tensor<float>::empty({n, 1, rows, cols});
  auto px = s.images.data();
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = detail::byte_to_unit(img[16 + i]);
  s.labels.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    s.labels[static_cast<std::size_t>(i)] = lab[8 + static_cast<std::size_t>(i)];
    if (s.labels[static_cast<std::size_t>(i)] >= class_count)
      fail(ErrorKind::format, lw + ": label out of range at byte offset " + std::to_string(8 + i));
  }
  std::tie(s.mean, s.std) = dataset_stats(name);
  return s;
}

/// Writes a split as an IDX pair (single-channel only).
inline void write_idx(const DatasetSplit& s, const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path) {
  if (s.channels() != 1) fail(ErrorKind::format, "IDX images are single-channel");
  std::vector<std::uint8_t> img, lab;
  detail::write_be32(img, 0x803);
  detail::write_be32(img, static_cast<std::uint32_t>(s.size()));
  detail::write_be32(img, static_cast<std::uint32_t>(s.height()));
  detail::write_be32(img, static_cast<std::uint32_t>(s.width()));
  for (float v : s.images.data()) img.push_back(detail::unit_to_byte(v));
  detail::write_be32(lab, 0x801);
  detail::write_be32(lab, static_cast<std::uint32_t>(s.size()));
  for (auto l : s.labels) lab.push_back(static_cast<std::uint8_t>(l));
  detail::write_bytes(images_path, img);
  detail::write_bytes(labels_path, lab);
}

/// Train and test splits of an IDX dataset directory (MNIST or Fashion-MNIST).
inline std::pair<DatasetSplit, DatasetSplit> load_mnist_dir(const std::filesystem::path& dir,
                                                            const std::string& name = "mnist") {
  auto ti = detail::find_first(dir, {"train-images-idx3-ubyte", "train-images.idx3-ubyte"});
  auto tl = detail::find_first(dir, {"train-labels-idx1-ubyte", "train-labels.idx1-ubyte"});
  auto vi = detail::find_first(dir, {"t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"});
  auto vl = detail::find_first(dir, {"t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"});
  if (!ti || !tl || !vi || !vl) fail(ErrorKind::io, "IDX files (train-/t10k- images and labels) not found in " + dir.string());
  return {load_idx(*ti, *tl, name), load_idx(*vi, *vl, name)};
}

enum class CifarVariant { cifar10, cifar100 };

namespace detail {

inline std::int64_t cifar_record_size(CifarVariant v) { return v == CifarVariant::cifar10 ? 3073 : 3074; }

inline void decode_cifar_into(const std::vector<std::uint8_t>& bytes, CifarVariant v, const std::string& what,
                              std::vector<float>& pixels, std::vector<std::int64_t>& labels) {
  const auto rec = static_cast<std::size_t>(cifar_record_size(v));
  if (bytes.empty() || bytes.size() % rec != 0)
    fail(ErrorKind::format, what + ": size " + std::to_string(bytes.size()) + " is not a multiple of the " +
                                std::to_string(rec) + "-byte record; trailing record starts at byte offset " +
                                std::to_string(bytes.size() - bytes.size() % rec));
  const std::size_t label_bytes = rec - 3072;
  for (std::size_t off = 0; off < bytes.size(); off += rec) {
    labels.push_back(bytes[off + label_bytes - 1]);  // cifar100: fine label is the second byte
    for (std::size_t i = 0; i < 3072; ++i) pixels.push_back(byte_to_unit(bytes[off + label_bytes + i]));
  }
}

}  // namespace detail

/// Decodes raw CIFAR binary records. For CIFAR-100 the coarse label byte is
/// taken from `coarse_labels` when re-encoding; decoding keeps fine labels.
inline DatasetSplit decode_cifar(const std::vector<std::uint8_t>& bytes, CifarVariant v, const std::string& what = "cifar") {
  std::vector<float> pixels;
  std::vector<std::int64_t> labels;
  detail::decode_cifar_into(bytes, v, what, pixels, labels);
  DatasetSplit s;
  s.name = v == CifarVariant::cifar10 ? "cifar10" : "cifar100";
  s.class_count = v == CifarVariant::cifar10 ? 10 : 100;
  const auto n = static_cast<std::int64_t>(labels.size());
  s.images = Tensor<float>::from({n, 3, 32, 32}, std::move(pixels));
  s.labels = std::move(labels);
  for (auto l : s.labels)
    if (l >= s.class_count) fail(ErrorKind::format, what + ": label " + std::to_string(l) + " out of range");
  std::tie(s.mean, s.std) = dataset_stats(s.name);
  return s;
}

/// Re-encodes a CIFAR split into binary records. CIFAR-100 coarse labels are
/// not retained by decoding, so they must be supplied to reproduce source bytes.
inline std::vector<std::uint8_t> encode_cifar(const DatasetSplit& s, CifarVariant v,
                                              const std::vector<std::uint8_t>& coarse_labels = {}) {
  if (s.channels() != 3 || s.height() != 32 || s.width() != 32) fail(ErrorKind::format, "CIFAR records are 3x32x32");
  std::vector<std::uint8_t> out;
  out.reserve(static_cast<std::size_t>(s.size() * detail::cifar_record_size(v)));
  const auto px = s.images.data();
  for (std::int64_t i = 0; i < s.size(); ++i) {
    if (v == CifarVariant::cifar100)
      out.push_back(coarse_labels.empty() ? 0 : coarse_labels[static_cast<std::size_t>(i)]);
    out.push_back(static_cast<std::uint8_t>(s.labels[static_cast<std::size_t>(i)]));
    for (std::size_t j = 0; j < 3072; ++j) out.push_back(detail::unit_to_byte(px[static_cast<std::size_t>(i) * 3072 + j]));
  }
  return out;
}

/// Loads the standard CIFAR binary distribution from `dir` (or its
/// cifar-10-batches-bin / cifar-100-binary subdirectory).
inline std::pair<DatasetSplit, DatasetSplit> load_cifar(const std::filesystem::path& dir, CifarVariant v) {
  namespace fs = std::filesystem;
  const fs::path sub = dir / (v == CifarVariant::cifar10 ? "cifar-10-batches-bin" : "cifar-100-binary");
  const fs::path root = fs::exists(sub) ? sub : dir;
  std::vector<fs::path> train_files;
  fs::path test_file;
  if (v == CifarVariant::cifar10) {
    for (int i = 1; i <= 5; ++i) train_files.push_back(root / ("data_batch_" + std::to_string(i) + ".bin"));
    test_file = root / "test_batch.bin";
  } else {
    train_files.push_back(root / "train.bin");
    test_file = root / "test.bin";
  }
  auto load = [&](const std::vector<fs::path>& files) {
    std::vector<float> pixels;
    std::vector<std::int64_t> labels;
    for (const auto& f : files) detail::decode_cifar_into(detail::read_bytes(f), v, f.string(), pixels, labels);
    DatasetSplit s;
    s.name = v == CifarVariant::cifar10 ? "cifar10" : "cifar100";
    s.class_count = v == CifarVariant::cifar10 ? 10 : 100;
    const auto n = static_cast<std::int64_t>(labels.size());
    s.images = Tensor<float>::from({n, 3, 32, 32}, std::move(pixels));
    s.labels = std::move(labels);
    std::tie(s.mean, s.std) = dataset_stats(s.name);
    s.validate();
    return s;
  };
  return {load(train_files), load({test_file})};
}

/// Loads (train, test) for a dataset name from its directory.
inline std::pair<DatasetSplit, DatasetSplit> load_dataset(const std::string& dataset, const std::filesystem::path& dir) {
  if (dataset == "mnist" || dataset == "fashion-mnist") return load_mnist_dir(dir, dataset);
  if (dataset == "cifar10") return load_cifar(dir, CifarVariant::cifar10);
  if (dataset == "cifar100") return load_cifar(dir, CifarVariant::cifar100);
  dataset_stats(dataset);  // throws the config error
  return {};
}

/// New split made of the given sample indices, in that order.
inline DatasetSplit select(const DatasetSplit& s, const std::vector<std::int64_t>& indices) {
  DatasetSplit out = s;
  const std::int64_t per = s.channels() * s.height() * s.width();
  const auto n = static_cast<std::int64_t>(indices.size());
  out.images = Tensor<float>::empty({n, s.channels(), s.height(), s.width()});
  out.labels.resize(indices.size());
  for (std::int64_t i = 0; i < n; ++i) {
    const auto src = indices[static_cast<std::size_t>(i)];
    std::copy_n(s.images.ptr() + src * per, per, out.images.ptr() + i * per);
    out.labels[static_cast<std::size_t>(i)] = s.labels[static_cast<std::size_t>(src)];
  }
  return out;
}

/// Exactly k samples per class, drawn uniformly without replacement with a
/// seeded stream, then shuffled.
inline DatasetSplit subsample_per_class(const DatasetSplit& s, std::int64_t k, std::uint64_t seed) {
  std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(s.class_count));
  for (std::int64_t i = 0; i < s.size(); ++i) by_class[static_cast<std::size_t>(s.labels[static_cast<std::size_t>(i)])].push_back(i);
  std::int64_t smallest = s.size();
  for (const auto& c : by_class) smallest = std::min<std::int64_t>(smallest, static_cast<std::int64_t>(c.size()));
  if (k < 1 || k > smallest)
    fail(ErrorKind::config, "samples per class " + std::to_string(k) + " outside [1, " + std::to_string(smallest) + "]");
  std::vector<std::int64_t> chosen;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    Rng rng(derive_key(seed, 0x5a3b1e, c));
    rng.shuffle(std::span<std::int64_t>(by_class[c]));
    chosen.insert(chosen.end(), by_class[c].begin(), by_class[c].begin() + k);
  }
  Rng rng(derive_key(seed, 0x5a3b1f));
  rng.shuffle(std::span<std::int64_t>(chosen));
  return select(s, chosen);
}

/// Bilinear resize to size x size (half-pixel centers, align_corners = false).
inline DatasetSplit resize(const DatasetSplit& s, std::int64_t size) {
  if (size < 8 || size > 128) fail(ErrorKind::config, "resize target " + std::to_string(size) + " outside [8, 128]");
  const std::int64_t N = s.size(), C = s.channels(), H = s.height(), W = s.width();
  DatasetSplit out = s;
  out.images = Tensor<float>::empty({N, C, size, size});
  struct Tap {
    std::int64_t i0, i1;
    float w;
  };
  auto taps = [size](std::int64_t in) {
    std::vector<Tap> t(static_cast<std::size_t>(size));
    const double scale = static_cast<double>(in) / static_cast<double>(size);
    for (std::int64_t o = 0; o < size; ++o) {
      const double src = std::max(0.0, (static_cast<double>(o) + 0.5) * scale - 0.5);
      const auto i0 = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(src)), in - 1);
      t[static_cast<std::size_t>(o)] = {i0, std::min<std::int64_t>(i0 + 1, in - 1), static_cast<float>(src - static_cast<double>(i0))};
    }
    return t;
  };
  const auto ty = taps(H), tx = taps(W);
  const float* src = s.images.ptr();
  float* dst = out.images.ptr();
  for (std::int64_t p = 0; p < N * C; ++p) {
    const float* plane = src + p * H * W;
    float* o = dst + p * size * size;
    for (std::int64_t y = 0; y < size; ++y) {
      const auto& a = ty[static_cast<std::size_t>(y)];
      for (std::int64_t x = 0; x < size; ++x) {
        const auto& b = tx[static_cast<std::size_t>(x)];
        const float top = (1.0f - b.w) * plane[a.i0 * W + b.i0] + b.w * plane[a.i0 * W + b.i1];
        const float bot = (1.0f - b.w) * plane[a.i1 * W + b.i0] + b.w * plane[a.i1 * W + b.i1];
        o[y * size + x] = (1.0f - a.w) * top + a.w * bot;
      }
    }
  }
  return out;
}

/// Training-time augmentation: zero-pad then random crop, then horizontal flip.
struct AugmentPolicy {
  bool enabled = false;
  std::int64_t pad = 4;
  double hflip_prob = 0.5;

  static AugmentPolicy none() { return {false, 0, 0.0}; }
  /// Default policy for a dataset: pad-4 crop everywhere, flips except for digits.
  static AugmentPolicy for_dataset(const std::string& dataset) {
    return {true, 4, dataset == "mnist" ? 0.0 : 0.5};
  }
};

struct Batch {
  Tensor<float> images;  // normalized [b, C, H, W]
  std::vector<std::int64_t> labels;
  std::vector<std::int64_t> indices;  // source sample indices
};

/// Mini-batch stream over one epoch. Shuffling is keyed by (seed, epoch) and
/// augmentation by (seed, epoch, sample index), so results do not depend on
/// prefetching or batch boundaries. The final partial batch is emitted.
class BatchStream {
 public:
  BatchStream(const DatasetSplit& split, std::int64_t batch_size, std::uint64_t seed, AugmentPolicy policy,
              std::int64_t epoch, bool shuffle = true, bool prefetch = true)
      : split_(&split), batch_size_(batch_size), seed_(seed), policy_(policy), epoch_(epoch), prefetch_(prefetch) {
    if (batch_size < 1) fail(ErrorKind::config, "batch size must be >= 1");
    if (policy.hflip_prob < 0.0 || policy.hflip_prob > 1.0) fail(ErrorKind::config, "hflip probability outside [0, 1]");
    if (policy.pad < 0) fail(ErrorKind::config, "crop padding must be >= 0");
    order_.resize(static_cast<std::size_t>(split.size()));
    for (std::int64_t i = 0; i < split.size(); ++i) order_[static_cast<std::size_t>(i)] = i;
    if (shuffle) {
      Rng rng(derive_key(seed, 0x5bffe1, epoch));
      rng.shuffle(std::span<std::int64_t>(order_));
    }
  }

  std::int64_t batch_count() const { return (split_->size() + batch_size_ - 1) / batch_size_; }
  const std::vector<std::int64_t>& order() const { return order_; }

  std::optional<Batch> next() {
    if (next_ >= batch_count()) return std::nullopt;
    Batch b;
    if (pending_.valid()) {
      b = pending_.get();
    } else {
      b = make_batch(next_);
    }
    ++next_;
    if (prefetch_ && next_ < batch_count()) {
      const std::int64_t i = next_;
      pending_ = std::async(std::launch::async, [this, i] { return make_batch(i); });
    }
    return b;
  }

  Batch make_batch(std::int64_t bi) const {
    const DatasetSplit& s = *split_;
    const std::int64_t begin = bi * batch_size_, end = std::min(s.size(), begin + batch_size_), n = end - begin;
    const std::int64_t C = s.channels(), H = s.height(), W = s.width(), per = C * H * W;
    Batch b;
    b.images = Tensor<float>::empty({n, C, H, W});
    float* dst = b.images.ptr();
    for (std::int64_t j = 0; j < n; ++j) {
      const std::int64_t idx = order_[static_cast<std::size_t>(begin + j)];
      b.indices.push_back(idx);
      b.labels.push_back(s.labels[static_cast<std::size_t>(idx)]);
      const float* src = s.images.ptr() + idx * per;
      float* out = dst + j * per;
      std::int64_t dy = 0, dx = 0;
      bool flip = false;
      if (policy_.enabled) {
        Rng rng(derive_key(seed_, 0xa06, epoch_, idx));
        dy = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(2 * policy_.pad + 1))) - policy_.pad;
        dx = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(2 * policy_.pad + 1))) - policy_.pad;
        flip = rng.bernoulli(policy_.hflip_prob);
      }
      for (std::int64_t c = 0; c < C; ++c) {
        const float m = s.mean[static_cast<std::size_t>(c)], inv = 1.0f / s.std[static_cast<std::size_t>(c)];
        for (std::int64_t y = 0; y < H; ++y) {
          const std::int64_t sy = y + dy;
          for (std::int64_t x = 0; x < W; ++x) {
            const std::int64_t cx = flip ? W - 1 - x : x;
            const std::int64_t sx = cx + dx;
            const float v = (sy >= 0 && sy < H && sx >= 0 && sx < W) ? src[(c * H + sy) * W + sx] : 0.0f;
            out[(c * H + y) * W + x] = (v - m) * inv;
          }
        }
      }
    }
    return b;
  }

 private:
  const DatasetSplit* split_;
  std::int64_t batch_size_;
  std::uint64_t seed_;
  AugmentPolicy policy_;
  std::int64_t epoch_;
  bool prefetch_;
  std::vector<std::int64_t> order_;
  std::int64_t next_ = 0;
  std::future<Batch> pending_;
};

}  // namespace cct
