#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "cct/rng.hpp"
#include "cct/tensor.hpp"

namespace cct {

/// Largest |analytic - numeric| / max(1, |numeric|) over the checked coordinates.
struct GradCheckResult {
  double max_error = 0;
  std::int64_t worst_index = -1;
  std::int64_t checked = 0;
};

namespace detail {

inline std::vector<std::int64_t> pick_coords(std::int64_t n, std::int64_t max_coords, std::uint64_t seed) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  if (max_coords <= 0 || max_coords >= n) return idx;
  Rng rng(seed);
  rng.shuffle(std::span<std::int64_t>(idx));
  idx.resize(static_cast<std::size_t>(max_coords));
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline double scalar_of(const Tensor<double>& y) {
  if (y.numel() != 1) fail(ErrorKind::contract, "grad_check: function must be scalar-valued, got " + shape_str(y.shape()));
  return y.item();
}

inline void update(GradCheckResult& r, double analytic, double numeric, std::int64_t index) {
  const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
  if (err > r.max_error || r.worst_index < 0) {
    r.max_error = std::max(r.max_error, err);
    r.worst_index = index;
  }
  ++r.checked;
}

}  // namespace detail

/// Compares reverse-mode gradients of scalar f at x with central differences
/// (f(x+h) - f(x-h)) / 2h. `max_coords` > 0 checks a seeded random subset.
inline GradCheckResult grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                                  const Tensor<double>& x, double h = 1e-5, std::int64_t max_coords = 0,
                                  std::uint64_t seed = 0) {
  auto input = x.detach();
  input.set_requires_grad();
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    auto y = f(input);
    detail::scalar_of(y);
    backward(y);
  }
  const auto analytic = input.grad_tensor();
  tape.clear();

  GradCheckResult r;
  NoGrad<double> no_grad;
  auto probe = x.detach();
  for (auto i : detail::pick_coords(x.numel(), max_coords, seed)) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + h;
    const double fp = detail::scalar_of(f(probe));
    probe.data()[i] = orig - h;
    const double fm = detail::scalar_of(f(probe));
    probe.data()[i] = orig;
    detail::update(r, analytic.data()[i], (fp - fm) / (2 * h), i);
  }
  return r;
}

/// Same check for a closure over existing leaf tensors (e.g. model parameters),
/// perturbing their buffers in place. Coordinates are indexed by concatenation.
inline GradCheckResult grad_check_params(const std::function<Tensor<double>()>& loss_fn,
                                         std::vector<Tensor<double>> params, double h = 1e-5,
                                         std::int64_t max_coords_per_param = 0, std::uint64_t seed = 0) {
  for (auto& p : params) {
    p.zero_grad();
    p.set_requires_grad();
  }
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    auto y = loss_fn();
    detail::scalar_of(y);
    backward(y);
  }
  std::vector<Tensor<double>> analytic;
  for (auto& p : params) analytic.push_back(p.grad_tensor());
  tape.clear();

  GradCheckResult r;
  NoGrad<double> no_grad;
  std::int64_t base = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    for (auto i : detail::pick_coords(p.numel(), max_coords_per_param, seed + k)) {
      const double orig = p.data()[i];
      p.data()[i] = orig + h;
      const double fp = detail::scalar_of(loss_fn());
      p.data()[i] = orig - h;
      const double fm = detail::scalar_of(loss_fn());
      p.data()[i] = orig;
      detail::update(r, analytic[k].data()[i], (fp - fm) / (2 * h), base + i);
    }
    base += p.numel();
    p.zero_grad();
  }
  return r;
}

}  // namespace cct
