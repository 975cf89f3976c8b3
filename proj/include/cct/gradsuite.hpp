#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cct/gradcheck.hpp"
#include "cct/model.hpp"
#include "cct/optim.hpp"

namespace cct {

struct GradSuiteRow {
  std::string name;
  double max_error = 0;
  double tolerance = 0;
  std::int64_t checked = 0;
  bool pass() const { return max_error < tolerance; }
};

namespace detail {

inline Tensor<double> rand_tensor(Shape s, Rng& rng, double scale = 1.0) {
  auto t = Tensor<double>::empty(std::move(s));
  for (auto& v : t.data()) v = rng.normal() * scale;
  return t;
}

/// Contracts y with a fixed pseudo-random weight so every output element
/// receives a distinct upstream gradient.
inline Tensor<double> probe_loss(const Tensor<double>& y, std::uint64_t seed = 77) {
  Rng rng(seed);
  return sum(mul(y, rand_tensor(y.shape(), rng)));
}

}  // namespace detail

/// Finite-difference checks of every differentiable kernel and composite layer
/// at 64-bit precision on small random shapes.
inline std::vector<GradSuiteRow> run_gradient_suite(std::uint64_t seed = 1) {
  using detail::probe_loss;
  using detail::rand_tensor;
  using D = double;
  constexpr double kernel_tol = 1e-5, model_tol = 1e-4;
  Rng rng(seed);
  std::vector<GradSuiteRow> rows;
  auto run = [&](const std::string& name, double tol, const std::function<Tensor<D>()>& f,
                 std::vector<Tensor<D>> leaves, std::int64_t max_coords = 0) {
    const auto r = grad_check_params(f, std::move(leaves), 1e-5, max_coords, seed);
    rows.push_back({name, r.max_error, tol, r.checked});
  };

  {
    auto a = rand_tensor({2, 3, 4}, rng), b = rand_tensor({3, 1}, rng);
    run("add_broadcast", kernel_tol, [=] { return probe_loss(add(a, b)); }, {a, b});
    run("sub_broadcast", kernel_tol, [=] { return probe_loss(sub(a, b)); }, {a, b});
    run("mul_broadcast", kernel_tol, [=] { return probe_loss(mul(a, b)); }, {a, b});
    run("scale", kernel_tol, [=] { return probe_loss(scale(a, 1.7)); }, {a});
    run("sum", kernel_tol, [=] { return scale(sum(mul(a, a)), 0.5); }, {a});
    run("mean", kernel_tol, [=] { return mean(mul(a, a)); }, {a});
  }
  {
    auto x = rand_tensor({3, 5}, rng);
    for (auto& v : x.data())
      if (std::abs(v) < 1e-3) v += 0.01;  // keep away from the relu kink
    run("relu", kernel_tol, [=] { return probe_loss(relu(x)); }, {x});
    run("gelu", kernel_tol, [=] { return probe_loss(gelu(x)); }, {x});
  }
  {
    auto x = rand_tensor({2, 3, 4}, rng);
    run("reshape", kernel_tol, [=] { return probe_loss(reshape(x, {4, -1})); }, {x});
    run("permute", kernel_tol, [=] { return probe_loss(permute(x, {2, 0, 1})); }, {x});
    run("transpose", kernel_tol, [=] { return probe_loss(transpose(x, 0, 2)); }, {x});
    run("narrow", kernel_tol, [=] { return probe_loss(narrow(x, 2, 1, 2)); }, {x});
    auto y = rand_tensor({2, 1, 4}, rng);
    run("concat", kernel_tol, [=] { return probe_loss(concat<D>({x, y}, 1)); }, {x, y});
    auto z = rand_tensor({1, 3, 1}, rng);
    run("broadcast_to", kernel_tol, [=] { return probe_loss(broadcast_to(z, {2, 3, 4})); }, {z});
  }
  {
    auto a = rand_tensor({2, 3, 4, 5}, rng), b = rand_tensor({3, 5, 2}, rng);
    run("matmul_batched", kernel_tol, [=] { return probe_loss(matmul(a, b)); }, {a, b});
    auto x = rand_tensor({2, 3, 4}, rng), w = rand_tensor({5, 4}, rng), bias = rand_tensor({5}, rng);
    run("linear", kernel_tol, [=] { return probe_loss(linear(x, w, bias)); }, {x, w, bias});
  }
  {
    auto x = rand_tensor({2, 3, 7, 6}, rng), w = rand_tensor({4, 3, 3, 3}, rng);
    run("conv2d", kernel_tol, [=] { return probe_loss(conv2d(x, w, 1, 1)); }, {x, w});
    run("conv2d_stride2", kernel_tol, [=] { return probe_loss(conv2d(x, w, 2, 0)); }, {x, w});
    run("maxpool2d", kernel_tol, [=] { return probe_loss(maxpool2d(x, 3, 2, 1)); }, {x});
  }
  {
    auto x = rand_tensor({3, 4, 6}, rng);
    run("softmax_last", kernel_tol, [=] { return probe_loss(softmax(x, -1)); }, {x});
    run("softmax_mid", kernel_tol, [=] { return probe_loss(softmax(x, 1)); }, {x});
    auto g = rand_tensor({6}, rng), b = rand_tensor({6}, rng);
    run("layernorm", kernel_tol, [=] { return probe_loss(layernorm(x, g, b, 1e-5)); }, {x, g, b});
  }
  {
    auto logits = rand_tensor({4, 5}, rng);
    const std::vector<std::int64_t> labels{0, 3, 4, 1};
    run("smoothed_cross_entropy", kernel_tol, [=] { return smoothed_cross_entropy(logits, labels, 0.1); }, {logits});
  }
  {
    Rng init(seed + 11);
    MultiHeadAttention<D> attn(8, 2, 0.0, init);
    auto x = rand_tensor({2, 5, 8}, rng);
    ParamList<D> ps;
    attn.collect(ps, "attn");
    std::vector<Tensor<D>> leaves{x};
    for (auto& p : ps) leaves.push_back(p.value);
    run("attention", kernel_tol, [=] { return probe_loss(attn(x, {})); }, leaves);

    EncoderBlock<D> block(8, 2, 2, DropoutRates::none(), init);
    ParamList<D> bs;
    block.collect(bs, "block");
    std::vector<Tensor<D>> bl{x};
    for (auto& p : bs) bl.push_back(p.value);
    run("encoder_block", kernel_tol, [=] { return probe_loss(block(x, {})); }, bl);

    Linear<D> g(8, 1, true, init);
    run("seqpool", kernel_tol, [=] { return probe_loss(seqpool(x, g)); }, {x, g.weight, g.bias});
  }
  {
    // Dropout with a fixed mask: reseeding per call makes the map deterministic.
    auto x = rand_tensor({3, 6}, rng);
    run("dropout_fixed_mask", kernel_tol,
        [=] {
          Rng r(5);
          ForwardContext ctx{true, &r};
          return probe_loss(dropout(stochastic_depth(x, 0.3, ctx), 0.4, ctx));
        },
        {x});
  }
  {
    ModelOptions opt;
    opt.rates = DropoutRates::none();
    Model<D> model(make_config("cct-2/3x2", 10, 16, 16, opt), seed);
    auto img = rand_tensor({2, 3, 16, 16}, rng);
    const std::vector<std::int64_t> labels{3, 7};
    std::vector<Tensor<D>> leaves{img};
    for (auto& p : model.parameters()) leaves.push_back(p.value);
    run("cct-2/3x2_end_to_end", model_tol,
        [&model, img, labels] { return smoothed_cross_entropy(model.forward(img), labels, 0.1); }, leaves, 4);
  }
  return rows;
}

}  // namespace cct
