#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cct/ops.hpp"
#include "cct/rng.hpp"

namespace cct {

/// A named learnable tensor. `decay` marks whether AdamW weight decay applies.
template <class T>
struct Param {
  std::string name;
  Tensor<T> value;
  bool decay = true;
};

template <class T>
using ParamList = std::vector<Param<T>>;

/// Per-call forward settings. Dropout masks are drawn from `rng` in train mode.
struct ForwardContext {
  bool train = false;
  Rng* rng = nullptr;
};

/// Truncated normal (std, clipped at +-2 std) leaf tensor that requires grad.
template <class T>
Tensor<T> trunc_normal(Shape shape, Rng& rng, double std = 0.02) {
  auto t = Tensor<T>::empty(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(std));
  t.set_requires_grad();
  return t;
}

template <class T>
Tensor<T> param_full(Shape shape, T value) {
  auto t = Tensor<T>::full(std::move(shape), value);
  t.set_requires_grad();
  return t;
}

inline void check_rate(double rate, const char* what) {
  if (!(rate >= 0.0 && rate < 1.0))
    fail(ErrorKind::config, std::string(what) + " rate must lie in [0, 1), got " + std::to_string(rate));
}

/// Inverted dropout: zeroes elements with probability `rate` and scales the rest
/// by 1/(1-rate). Identity in eval mode or at rate 0.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, const ForwardContext& ctx) {
  check_rate(rate, "dropout");
  if (!ctx.train || rate == 0.0) return x;
  if (ctx.rng == nullptr) fail(ErrorKind::contract, "dropout in train mode needs an rng stream");
  auto mask = Tensor<T>::empty(x.shape());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& m : mask.data()) m = ctx.rng->bernoulli(rate) ? T(0) : keep_scale;
  return mul(x, mask);
}

/// Drops the whole residual branch per sample (leading axis) with probability
/// `rate`; survivors are scaled by 1/(1-rate).
template <class T>
Tensor<T> stochastic_depth(const Tensor<T>& x, double rate, const ForwardContext& ctx) {
  check_rate(rate, "stochastic depth");
  if (!ctx.train || rate == 0.0) return x;
  if (ctx.rng == nullptr) fail(ErrorKind::contract, "stochastic depth in train mode needs an rng stream");
  Shape ms(x.shape().size(), 1);
  ms[0] = x.size(0);
  auto mask = Tensor<T>::empty(ms);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& m : mask.data()) m = ctx.rng->bernoulli(rate) ? T(0) : keep_scale;
  return mul(x, mask);
}

template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, bool with_bias, Rng& rng)
      : weight(trunc_normal<T>({out, in}, rng)) {
    if (with_bias) bias = param_full<T>({out}, T(0));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

  std::int64_t in_features() const { return weight.size(1); }
  std::int64_t out_features() const { return weight.size(0); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight, true});
    if (bias.defined()) out.push_back({prefix + ".bias", bias, false});
  }

  Tensor<T> weight;
  Tensor<T> bias;
};

template <class T>
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::int64_t d) : gamma(param_full<T>({d}, T(1))), beta(param_full<T>({d}, T(0))) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return layernorm(x, gamma, beta, T(1e-5)); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", gamma, false});
    out.push_back({prefix + ".bias", beta, false});
  }

  Tensor<T> gamma;
  Tensor<T> beta;
};

/// Dropout knobs of one encoder block (MLP dropout, attention-weight dropout,
/// stochastic depth).
struct DropoutRates {
  double mlp = 0.1;
  double attn = 0.0;
  double stochastic_depth = 0.0;

  static DropoutRates untuned() { return {0.1, 0.0, 0.0}; }
  static DropoutRates tuned() { return {0.0, 0.1, 0.1}; }
  static DropoutRates none() { return {0.0, 0.0, 0.0}; }
};

/// Multi-headed self-attention with a fused qkv projection.
template <class T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::int64_t dim, std::int64_t heads, double attn_dropout, Rng& rng)
      : heads_(heads), attn_dropout_(attn_dropout) {
    if (heads <= 0 || dim % heads != 0)
      fail(ErrorKind::config, "embedding dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                                  " heads");
    check_rate(attn_dropout, "attention dropout");
    qkv = Linear<T>(dim, 3 * dim, true, rng);
    proj = Linear<T>(dim, dim, true, rng);
  }

  /// x[b, n, d] -> [b, n, d]
  Tensor<T> operator()(const Tensor<T>& x, const ForwardContext& ctx) const {
    const std::int64_t b = x.size(0), n = x.size(1), d = x.size(2), hd = d / heads_;
    auto packed = permute(reshape(qkv(x), {b, n, 3, heads_, hd}), {2, 0, 3, 1, 4});  // [3, b, h, n, hd]
    auto q = reshape(narrow(packed, 0, 0, 1), {b, heads_, n, hd});
    auto k = reshape(narrow(packed, 0, 1, 1), {b, heads_, n, hd});
    auto v = reshape(narrow(packed, 0, 2, 1), {b, heads_, n, hd});
    auto scores = matmul(scale(q, static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)))), transpose(k, -1, -2));
    auto attn = dropout(softmax(scores, -1), attn_dropout_, ctx);
    auto ctx_out = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {b, n, d});
    return proj(ctx_out);
  }

  std::int64_t heads() const { return heads_; }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    qkv.collect(out, prefix + ".qkv");
    proj.collect(out, prefix + ".proj");
  }

  Linear<T> qkv;
  Linear<T> proj;

 private:
  std::int64_t heads_ = 1;
  double attn_dropout_ = 0;
};

template <class T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::int64_t dim, std::int64_t hidden, double drop, Rng& rng)
      : fc1(dim, hidden, true, rng), fc2(hidden, dim, true, rng), drop_(drop) {
    check_rate(drop, "mlp dropout");
  }

  Tensor<T> operator()(const Tensor<T>& x, const ForwardContext& ctx) const {
    auto h = dropout(gelu(fc1(x)), drop_, ctx);
    return dropout(fc2(h), drop_, ctx);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }

  Linear<T> fc1;
  Linear<T> fc2;

 private:
  double drop_ = 0;
};

/// Pre-norm transformer encoder block:
///   x += SD(MSA(LN(x)));  x += SD(MLP(LN(x)))
template <class T>
class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(std::int64_t dim, std::int64_t heads, std::int64_t mlp_ratio, const DropoutRates& rates, Rng& rng)
      : ln1(dim),
        attn(dim, heads, rates.attn, rng),
        ln2(dim),
        mlp(dim, mlp_ratio * dim, rates.mlp, rng),
        sd_rate_(rates.stochastic_depth) {
    check_rate(sd_rate_, "stochastic depth");
  }

  Tensor<T> operator()(const Tensor<T>& x, const ForwardContext& ctx) const {
    auto h = add(x, stochastic_depth(attn(ln1(x), ctx), sd_rate_, ctx));
    return add(h, stochastic_depth(mlp(ln2(h), ctx), sd_rate_, ctx));
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    ln1.collect(out, prefix + ".ln1");
    attn.collect(out, prefix + ".attn");
    ln2.collect(out, prefix + ".ln2");
    mlp.collect(out, prefix + ".mlp");
  }

  LayerNorm<T> ln1;
  MultiHeadAttention<T> attn;
  LayerNorm<T> ln2;
  Mlp<T> mlp;

 private:
  double sd_rate_ = 0;
};

}  // namespace cct
