#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "cct/tokenizer.hpp"

namespace cct {

enum class Family { vit, vit_lite, cvt, cct };
enum class PeKind { learnable, sinusoidal, none };
enum class Pooling { seqpool, class_token };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::vit: return "vit";
    case Family::vit_lite: return "vit-lite";
    case Family::cvt: return "cvt";
    case Family::cct: return "cct";
  }
  return "?";
}
inline std::string to_string(PeKind k) {
  switch (k) {
    case PeKind::learnable: return "learnable";
    case PeKind::sinusoidal: return "sinusoidal";
    case PeKind::none: return "none";
  }
  return "?";
}
inline std::string to_string(Pooling p) { return p == Pooling::seqpool ? "seqpool" : "class-token"; }

inline PeKind parse_pe_kind(const std::string& s) {
  if (s == "learnable") return PeKind::learnable;
  if (s == "sinusoidal") return PeKind::sinusoidal;
  if (s == "none") return PeKind::none;
  fail(ErrorKind::config, "unknown positional embedding '" + s + "' (learnable|sinusoidal|none)");
}
inline Pooling parse_pooling(const std::string& s) {
  if (s == "seqpool") return Pooling::seqpool;
  if (s == "class-token") return Pooling::class_token;
  fail(ErrorKind::config, "unknown pooling '" + s + "' (seqpool|class-token)");
}

/// Encoder backbone sizes.
struct Backbone {
  std::int64_t layers;
  std::int64_t heads;
  std::int64_t mlp_ratio;
  std::int64_t dim;
};

/// Backbones by depth: the compact variants plus the ViT-Base encoder for 12 layers.
inline std::optional<Backbone> backbone_for_layers(std::int64_t layers) {
  switch (layers) {
    case 2: return Backbone{2, 2, 1, 128};
    case 4: return Backbone{4, 2, 1, 128};
    case 6: return Backbone{6, 4, 2, 256};
    case 7: return Backbone{7, 4, 2, 256};
    case 12: return Backbone{12, 12, 4, 768};
    case 14: return Backbone{14, 6, 3, 384};
    default: return std::nullopt;
  }
}

/// Parsed FAMILY-L/K[xB] name.
struct ModelName {
  Family family;
  std::int64_t layers;
  std::int64_t kernel;
  std::int64_t blocks;
};

inline ModelName parse_model_name(const std::string& raw) {
  std::string s;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    // U+00D7 multiplication sign in UTF-8
    if (i + 1 < raw.size() && static_cast<unsigned char>(raw[i]) == 0xC3 &&
        static_cast<unsigned char>(raw[i + 1]) == 0x97) {
      s += 'x';
      ++i;
      continue;
    }
    s += static_cast<char>(std::tolower(static_cast<unsigned char>(raw[i])));
  }
  static const std::regex re(R"(^(vit-lite|vit|cvt|cct)-([0-9]+)/([0-9]+)(?:x([0-9]+))?$)");
  std::smatch m;
  if (!std::regex_match(s, m, re))
    fail(ErrorKind::config, "cannot parse model name '" + raw + "' (expected (vit-lite|cvt|cct)-<L>/<K>[x<B>])");
  ModelName n{};
  const std::string fam = m[1];
  n.family = fam == "vit-lite" ? Family::vit_lite : fam == "vit" ? Family::vit : fam == "cvt" ? Family::cvt : Family::cct;
  n.layers = std::stoll(m[2]);
  n.kernel = std::stoll(m[3]);
  n.blocks = m[4].matched ? std::stoll(m[4]) : 1;
  if (n.family != Family::cct && m[4].matched)
    fail(ErrorKind::config, "'" + raw + "': only cct models take a conv block count");
  if (n.kernel < 1 || n.blocks < 1) fail(ErrorKind::config, "'" + raw + "': kernel and block count must be positive");
  if (!backbone_for_layers(n.layers))
    fail(ErrorKind::config, "'" + raw + "': no backbone with " + std::to_string(n.layers) + " layers (2, 4, 6, 7, 12, 14)");
  return n;
}

/// Fully resolved architecture.
struct ModelConfig {
  std::string name;
  Family family = Family::cct;
  Backbone backbone{2, 2, 1, 128};
  TokenizerSpec tokenizer;
  PeKind pe = PeKind::learnable;
  Pooling pooling = Pooling::seqpool;
  std::int64_t num_classes = 10;
  std::int64_t channels = 3;
  std::int64_t image_h = 32;  // size the learnable PE table is built for
  std::int64_t image_w = 32;
  DropoutRates rates = DropoutRates::untuned();

  std::int64_t dim() const { return backbone.dim; }
  bool has_class_token() const { return pooling == Pooling::class_token; }
  /// Tokens produced by the tokenizer for an H x W image.
  std::int64_t sequence_length(std::int64_t H, std::int64_t W) const { return cct::sequence_length(tokenizer, H, W); }
  /// Rows in the learnable PE table (tokens at the build size, plus class token).
  std::int64_t pe_rows() const { return sequence_length(image_h, image_w) + (has_class_token() ? 1 : 0); }
};

struct ModelOptions {
  std::optional<PeKind> pe;
  std::optional<Pooling> pooling;
  DropoutRates rates = DropoutRates::untuned();
  std::int64_t channels = 3;
};

/// Resolves a model name plus options into a validated configuration.
inline ModelConfig make_config(const std::string& name, std::int64_t num_classes, std::int64_t H, std::int64_t W,
                               const ModelOptions& opt = {}) {
  const ModelName n = parse_model_name(name);
  ModelConfig c;
  c.name = name;
  c.family = n.family;
  c.backbone = *backbone_for_layers(n.layers);
  c.tokenizer = n.family == Family::cct ? TokenizerSpec{TokenizerKind::conv, n.kernel, n.blocks}
                                        : TokenizerSpec{TokenizerKind::patch, n.kernel, 1};
  c.pooling = opt.pooling.value_or(n.family == Family::cvt || n.family == Family::cct ? Pooling::seqpool
                                                                                       : Pooling::class_token);
  c.pe = opt.pe.value_or(PeKind::learnable);
  if (num_classes < 1) fail(ErrorKind::config, "num_classes must be positive");
  c.num_classes = num_classes;
  if (opt.channels < 1) fail(ErrorKind::config, "channel count must be positive");
  c.channels = opt.channels;
  c.image_h = H;
  c.image_w = W;
  c.rates = opt.rates;
  try {
    c.sequence_length(H, W);
  } catch (const Error& e) {
    fail(ErrorKind::config, "'" + name + "' at " + std::to_string(H) + "x" + std::to_string(W) + ": " + e.what());
  }
  return c;
}

/// Fixed sine/cosine table: PE[pos, 2i] = sin(pos / 10000^(2i/d)),
/// PE[pos, 2i+1] = cos(pos / 10000^(2i/d)).
template <class T>
Tensor<T> sinusoidal_table(std::int64_t n, std::int64_t d) {
  auto t = Tensor<T>::empty({n, d});
  for (std::int64_t pos = 0; pos < n; ++pos)
    for (std::int64_t j = 0; j < d; ++j) {
      const std::int64_t i2 = j - (j % 2);
      const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i2) / static_cast<double>(d));
      t.data()[pos * d + j] = static_cast<T>(j % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return t;
}

template <class T>
class PositionalEmbedding {
 public:
  PositionalEmbedding() = default;
  PositionalEmbedding(PeKind kind, std::int64_t rows, std::int64_t dim, Rng& rng) : kind_(kind), dim_(dim) {
    if (kind == PeKind::learnable) table = trunc_normal<T>({rows, dim}, rng);
  }

  PeKind kind() const { return kind_; }

  /// Embedding rows for a sequence of length n. Undefined tensor for kind none.
  Tensor<T> rows(std::int64_t n) const {
    switch (kind_) {
      case PeKind::none: return {};
      case PeKind::sinusoidal: {
        std::lock_guard lock(cache_->mutex);
        auto it = cache_->tables.find(n);
        if (it == cache_->tables.end()) it = cache_->tables.emplace(n, sinusoidal_table<T>(n, dim_)).first;
        return it->second;
      }
      case PeKind::learnable:
        if (n > table.size(0))
          fail(ErrorKind::config, "learnable positional embedding has " + std::to_string(table.size(0)) +
                                      " rows but the input needs " + std::to_string(n) +
                                      "; use an image no larger than the training size, or --pos-emb sinusoidal/none");
        return n == table.size(0) ? table : narrow(table, 0, 0, n);
    }
    return {};
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    if (table.defined()) out.push_back({prefix + ".table", table, false});
  }

  Tensor<T> table;

 private:
  PeKind kind_ = PeKind::none;
  std::int64_t dim_ = 0;
  struct Cache {
    std::map<std::int64_t, Tensor<T>> tables;
    std::mutex mutex;
  };
  std::shared_ptr<Cache> cache_ = std::make_shared<Cache>();
};

/// Attention weights over the sequence: softmax(g(x)) with g: R^d -> R, as [b, 1, n].
template <class T>
Tensor<T> seqpool_weights(const Tensor<T>& x, const Linear<T>& g) {
  const std::int64_t b = x.size(0), n = x.size(1);
  return softmax(reshape(g(x), {b, 1, n}), -1);
}

/// Sequence pooling: z = softmax(g(x_L)^T) x_L, mapping [b, n, d] -> [b, d].
template <class T>
Tensor<T> seqpool(const Tensor<T>& x, const Linear<T>& g) {
  const std::int64_t b = x.size(0), d = x.size(2);
  return reshape(matmul(seqpool_weights(x, g), x), {b, d});
}

/// ViT-Lite / CVT / CCT classifier.
template <class T>
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    Rng rng(seed);
    const auto d = cfg_.dim();
    if (cfg_.tokenizer.kind == TokenizerKind::conv)
      conv_tok_ = ConvTokenizer<T>(cfg_.tokenizer.kernel, cfg_.tokenizer.blocks, cfg_.channels, d, rng);
    else
      patch_tok_ = PatchTokenizer<T>(cfg_.tokenizer.kernel, cfg_.channels, d, rng);
    if (cfg_.has_class_token()) class_token = trunc_normal<T>({1, 1, d}, rng);
    pe_ = PositionalEmbedding<T>(cfg_.pe, cfg_.pe_rows(), d, rng);
    embed_norm = LayerNorm<T>(d);
    for (std::int64_t i = 0; i < cfg_.backbone.layers; ++i)
      blocks.emplace_back(d, cfg_.backbone.heads, cfg_.backbone.mlp_ratio, cfg_.rates, rng);
    final_norm = LayerNorm<T>(d);
    if (cfg_.pooling == Pooling::seqpool) pool = Linear<T>(d, 1, true, rng);
    head = Linear<T>(d, cfg_.num_classes, true, rng);
  }

  const ModelConfig& config() const { return cfg_; }

  /// Image [b, C, H, W] -> tokens [b, n, d].
  Tensor<T> tokenize(const Tensor<T>& x) const {
    if (x.ndim() != 4 || x.size(1) != cfg_.channels)
      fail(ErrorKind::dimension, "model expects [b, " + std::to_string(cfg_.channels) + ", H, W], got " +
                                     shape_str(x.shape()));
    return cfg_.tokenizer.kind == TokenizerKind::conv ? conv_tok_(x) : patch_tok_(x);
  }

  /// Prepends the class token (if any), adds the positional embedding and
  /// applies the embedding layer norm. `add_pe = false` skips the addition.
  Tensor<T> embed(const Tensor<T>& tokens, bool add_pe = true) const {
    Tensor<T> h = tokens;
    if (cfg_.has_class_token()) {
      auto cls = broadcast_to(class_token, {tokens.size(0), 1, cfg_.dim()});
      h = concat<T>({cls, h}, 1);
    }
    if (add_pe) {
      auto pe = pe_.rows(h.size(1));
      if (pe.defined()) h = add(h, pe);
    }
    return embed_norm(h);
  }

  /// Embedded sequence -> logits [b, classes].
  Tensor<T> encode_and_classify(const Tensor<T>& embedded, const ForwardContext& ctx) const {
    Tensor<T> h = embedded;
    for (const auto& blk : blocks) h = blk(h, ctx);
    h = final_norm(h);
    Tensor<T> z = cfg_.pooling == Pooling::seqpool ? seqpool(h, pool)
                                                   : reshape(narrow(h, 1, 0, 1), {h.size(0), cfg_.dim()});
    return head(z);
  }

  Tensor<T> classify_tokens(const Tensor<T>& tokens, const ForwardContext& ctx, bool add_pe = true) const {
    return encode_and_classify(embed(tokens, add_pe), ctx);
  }

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx = {}) const {
    return classify_tokens(tokenize(x), ctx);
  }

  /// Parameters in a fixed order with stable names.
  ParamList<T> parameters() const {
    ParamList<T> out;
    if (cfg_.tokenizer.kind == TokenizerKind::conv)
      conv_tok_.collect(out, "tokenizer");
    else
      patch_tok_.collect(out, "tokenizer");
    if (class_token.defined()) out.push_back({"class_token", class_token, false});
    pe_.collect(out, "pos_embed");
    embed_norm.collect(out, "embed_norm");
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(out, "blocks." + std::to_string(i));
    final_norm.collect(out, "final_norm");
    if (cfg_.pooling == Pooling::seqpool) pool.collect(out, "seqpool");
    head.collect(out, "head");
    return out;
  }

  const PositionalEmbedding<T>& positional_embedding() const { return pe_; }

  Tensor<T> class_token;
  LayerNorm<T> embed_norm;
  std::vector<EncoderBlock<T>> blocks;
  LayerNorm<T> final_norm;
  Linear<T> pool;
  Linear<T> head;

 private:
  ModelConfig cfg_;
  ConvTokenizer<T> conv_tok_;
  PatchTokenizer<T> patch_tok_;
  PositionalEmbedding<T> pe_;
};

template <class T>
std::int64_t count_params(const Model<T>& model) {
  std::int64_t n = 0;
  for (const auto& p : model.parameters()) n += p.value.numel();
  return n;
}

/// Learnable scalar count from the configuration alone (no allocation).
inline std::int64_t count_params(const ModelConfig& c) {
  const std::int64_t d = c.dim(), hidden = c.backbone.mlp_ratio * d;
  std::int64_t n = 0;
  if (c.tokenizer.kind == TokenizerKind::conv) {
    std::int64_t in = c.channels;
    const std::int64_t k = c.tokenizer.kernel;
    for (std::int64_t b = 0; b < c.tokenizer.blocks; ++b) {
      const std::int64_t out = b + 1 == c.tokenizer.blocks ? d : TokenizerSpec::hidden_channels;
      n += out * in * k * k;
      in = out;
    }
  } else {
    const std::int64_t P = c.tokenizer.kernel;
    n += P * P * c.channels * d + d;
  }
  if (c.has_class_token()) n += d;
  if (c.pe == PeKind::learnable) n += c.pe_rows() * d;
  n += 2 * d;  // embedding norm
  const std::int64_t block = 2 * d                       // ln1
                             + 3 * d * d + 3 * d         // qkv
                             + d * d + d                 // proj
                             + 2 * d                     // ln2
                             + d * hidden + hidden       // fc1
                             + hidden * d + d;           // fc2
  n += c.backbone.layers * block;
  n += 2 * d;  // final norm
  if (c.pooling == Pooling::seqpool) n += d + 1;
  n += d * c.num_classes + c.num_classes;
  return n;
}

/// Multiply-accumulate counts. `layers` covers convolutions and every linear
/// layer; `attention` the two token-mixing products (QK^T and AV).
struct MacReport {
  std::int64_t layers = 0;
  std::int64_t attention = 0;
  std::int64_t total() const { return layers + attention; }
};

inline MacReport count_macs(const ModelConfig& c, std::int64_t H, std::int64_t W) {
  MacReport r;
  const std::int64_t d = c.dim(), hidden = c.backbone.mlp_ratio * d;
  if (c.tokenizer.kind == TokenizerKind::conv) {
    std::int64_t h = H, w = W, in = c.channels;
    const std::int64_t k = c.tokenizer.kernel;
    for (std::int64_t b = 0; b < c.tokenizer.blocks; ++b) {
      const std::int64_t out = b + 1 == c.tokenizer.blocks ? d : TokenizerSpec::hidden_channels;
      h = pooled_extent(h, k, 1, c.tokenizer.conv_padding());
      w = pooled_extent(w, k, 1, c.tokenizer.conv_padding());
      r.layers += k * k * in * out * h * w;
      h = pooled_extent(h, TokenizerSpec::pool_kernel, TokenizerSpec::pool_stride, TokenizerSpec::pool_padding);
      w = pooled_extent(w, TokenizerSpec::pool_kernel, TokenizerSpec::pool_stride, TokenizerSpec::pool_padding);
      in = out;
    }
  } else {
    const std::int64_t P = c.tokenizer.kernel;
    r.layers += c.sequence_length(H, W) * P * P * c.channels * d;
  }
  const std::int64_t n = c.sequence_length(H, W) + (c.has_class_token() ? 1 : 0);
  const std::int64_t per_layer = n * (3 * d * d + d * d + d * hidden + hidden * d);
  r.layers += c.backbone.layers * per_layer;
  r.attention += c.backbone.layers * 2 * n * n * d;
  if (c.pooling == Pooling::seqpool) r.layers += n * d;
  r.layers += d * c.num_classes;
  return r;
}

}  // namespace cct
