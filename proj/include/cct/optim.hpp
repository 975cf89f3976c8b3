#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "cct/layers.hpp"

namespace cct {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 3e-2;
};

/// AdamW with decoupled weight decay:
///   p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)
/// Decay is skipped for params flagged `decay = false` (norms, biases, tokens, PE).
template <class T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(ParamList<T> params, AdamWOptions opt) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_) {
      m_.emplace_back(static_cast<std::size_t>(p.value.numel()), T(0));
      v_.emplace_back(static_cast<std::size_t>(p.value.numel()), T(0));
    }
  }

  std::int64_t step_count() const { return t_; }
  const AdamWOptions& options() const { return opt_; }
  const ParamList<T>& params() const { return params_; }

  /// One update at learning rate `lr`. Params without an accumulated gradient
  /// are treated as having gradient zero (decay still applies).
  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(opt_.beta1), b2 = static_cast<T>(opt_.beta2);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      auto data = p.value.data();
      auto grad = p.value.grad();
      if (!grad.empty() && grad.size() != data.size())
        fail(ErrorKind::dimension, "adamw: gradient size mismatch for " + p.name);
      if (m_[k].size() != data.size()) fail(ErrorKind::dimension, "adamw: state size mismatch for " + p.name);
      const T decay = p.decay ? static_cast<T>(1.0 - lr * opt_.weight_decay) : T(1);
      const T step = static_cast<T>(lr / bc1);
      const T inv_bc2 = static_cast<T>(1.0 / bc2);
      const T eps = static_cast<T>(opt_.eps);
      T* m = m_[k].data();
      T* v = v_[k].data();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const T g = grad.empty() ? T(0) : grad[i];
        m[i] = b1 * m[i] + (T(1) - b1) * g;
        v[i] = b2 * v[i] + (T(1) - b2) * g * g;
        data[i] = data[i] * decay - step * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  // State access for checkpointing.
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  void set_step_count(std::int64_t t) { t_ = t; }

 private:
  ParamList<T> params_;
  AdamWOptions opt_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  std::int64_t t_ = 0;
};

/// Linear warmup from 0 to base_lr, then cosine annealing to min_lr.
struct LrSchedule {
  double base_lr = 5e-4;
  double min_lr = 0.0;
  std::int64_t warmup_epochs = 10;
  std::int64_t total_epochs = 200;
  std::int64_t steps_per_epoch = 1;
  bool per_epoch = false;  // hold the rate constant within an epoch

  void validate() const {
    if (total_epochs < 1 || steps_per_epoch < 1) fail(ErrorKind::config, "schedule needs positive epochs and steps");
    if (warmup_epochs < 0 || warmup_epochs >= total_epochs)
      fail(ErrorKind::config, "warmup epochs (" + std::to_string(warmup_epochs) + ") must be below total epochs (" +
                                  std::to_string(total_epochs) + ")");
  }

  std::int64_t warmup_steps() const { return warmup_epochs * steps_per_epoch; }
  std::int64_t total_steps() const { return total_epochs * steps_per_epoch; }

  /// Rate at a global step (0-based count of completed updates before this one
  /// is applied uses step + 1; see Trainer).
  double lr_at(std::int64_t step) const {
    double pos = static_cast<double>(step);
    double warm = static_cast<double>(warmup_steps());
    double total = static_cast<double>(total_steps());
    if (per_epoch) {
      pos = static_cast<double>(step / steps_per_epoch);
      warm = static_cast<double>(warmup_epochs);
      total = static_cast<double>(total_epochs);
    }
    if (pos < warm) return base_lr * pos / warm;
    const double progress = std::min(1.0, (pos - warm) / std::max(1.0, total - warm));
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }
};

/// Mean over the batch of cross-entropy against the smoothed target
/// (1 - eps) * onehot + eps / K. Backward: (softmax - target) / b.
template <class T>
Tensor<T> smoothed_cross_entropy(const Tensor<T>& logits, std::span<const std::int64_t> labels, double smoothing = 0.1) {
  if (logits.ndim() != 2) fail(ErrorKind::dimension, "cross entropy expects [b, K] logits, got " + shape_str(logits.shape()));
  const std::int64_t b = logits.size(0), K = logits.size(1);
  if (static_cast<std::int64_t>(labels.size()) != b)
    fail(ErrorKind::dimension, "cross entropy: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(b));
  if (smoothing < 0.0 || smoothing > 1.0) fail(ErrorKind::config, "label smoothing must lie in [0, 1]");
  for (auto l : labels)
    if (l < 0 || l >= K) fail(ErrorKind::config, "label " + std::to_string(l) + " outside [0, " + std::to_string(K) + ")");

  const T on = static_cast<T>(1.0 - smoothing + smoothing / static_cast<double>(K));
  const T off = static_cast<T>(smoothing / static_cast<double>(K));
  std::vector<T> probs(static_cast<std::size_t>(b * K));
  T total = T(0);
  const T* x = logits.ptr();
  for (std::int64_t r = 0; r < b; ++r) {
    const T* row = x + r * K;
    T mx = row[0];
    for (std::int64_t j = 1; j < K; ++j) mx = std::max(mx, row[j]);
    T z = T(0);
    for (std::int64_t j = 0; j < K; ++j) z += std::exp(row[j] - mx);
    const T logz = std::log(z) + mx;
    T loss = T(0);
    for (std::int64_t j = 0; j < K; ++j) {
      const T logp = row[j] - logz;
      probs[static_cast<std::size_t>(r * K + j)] = std::exp(logp);
      loss -= (j == labels[static_cast<std::size_t>(r)] ? on : off) * logp;
    }
    total += loss;
  }
  auto out = Tensor<T>::scalar(total / static_cast<T>(b));
  if (auto* tape = detail::recording_tape({&logits})) {
    std::vector<std::int64_t> lab(labels.begin(), labels.end());
    detail::record(tape, "smoothed_cross_entropy", out, {&logits},
                   [L = logits.impl().get(), O = out.impl().get(), probs = std::move(probs), lab = std::move(lab), b, K, on,
                    off]() {
                     const T g = O->grad[0] / static_cast<T>(b);
                     T* gl = L->grad_buffer();
                     for (std::int64_t r = 0; r < b; ++r)
                       for (std::int64_t j = 0; j < K; ++j) {
                         const T target = j == lab[static_cast<std::size_t>(r)] ? on : off;
                         gl[r * K + j] += g * (probs[static_cast<std::size_t>(r * K + j)] - target);
                       }
                   });
  }
  return out;
}

}  // namespace cct
