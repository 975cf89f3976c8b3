// Acceptance gate: one PASS/FAIL/SKIP line per criterion.
//
//   cct_acceptance --tier fast                   criteria 1-4 and 9 (ctest)
//   cct_acceptance --tier slow --data-root DIR   criteria 5-8 (hours)
//   cct_acceptance --tier all  --data-root DIR
//   --only 5,6 restricts a run to the listed criteria.
//
// Criterion 5 can verify a finished run instead of retraining with
// --mnist-checkpoint <last.cctk>; the checkpoint's stored configuration must
// match the criterion's recipe and its weights are re-evaluated here.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "support.hpp"

using namespace cct;
using namespace cct::testing;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and thresholds.
constexpr double kParamTol = 0.02;
constexpr double kMacTol = 0.10;
constexpr double kMacRatioLo = 3.0, kMacRatioHi = 3.6;
constexpr double kCountSeconds = 1.0;
constexpr double kGradSeconds = 120.0;
constexpr double kInvariantSeconds = 300.0;
constexpr double kOptimSeconds = 1.0;
constexpr double kPermTol = 1e-4;
constexpr double kSeqPoolTol = 1e-6;
constexpr double kMnistThreshold = 98.0;
constexpr double kCifarThreshold = 55.0;
constexpr double kSweepMargin = 1.0;
constexpr std::int64_t kMnistEpochs = 15, kCifarEpochs = 15, kAblationEpochs = 20, kSweepEpochs = 20;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Line {
  int id;
  std::string name;
  std::string status;
  std::string detail;
  double seconds;
};

std::vector<Line> g_lines;

void report(int id, const std::string& name, const std::string& status, const std::string& detail, double seconds) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2fs", seconds);
  std::cout << status << " " << id << " " << name << " [" << buf << "] " << detail << std::endl;
  g_lines.push_back({id, name, status, detail, seconds});
}

void run(int id, const std::string& name, double budget_seconds, const std::function<Outcome()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const Error& e) {
    o = {false, std::string("error[") + std::string(error_kind_name(e.kind())) + "]: " + e.what()};
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (budget_seconds > 0 && s > budget_seconds) {
    o.pass = false;
    o.detail += "; exceeded runtime budget " + std::to_string(budget_seconds) + "s";
  }
  report(id, name, o.pass ? "PASS" : "FAIL", o.detail, s);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

bool within(double v, double target, double rel) { return std::abs(v - target) <= rel * target; }

// --- 1 ---------------------------------------------------------------------
Outcome count_oracle() {
  struct Row {
    const char* model;
    std::int64_t size;
    double target;
  };
  const Row rows[] = {{"cct-2/3x2", 32, 0.28e6},  {"cct-7/3x2", 32, 3.85e6},     {"cct-7/3x1", 32, 3.76e6},
                      {"cvt-7/4", 32, 3.72e6},    {"vit-lite-7/16", 32, 3.89e6}, {"vit-12/16", 224, 85.63e6}};
  Outcome o{true, ""};
  for (const auto& r : rows) {
    const auto n = static_cast<double>(count_params(make_config(r.model, 10, r.size, r.size)));
    const bool ok = within(n, r.target, kParamTol);
    o.pass &= ok;
    o.detail += std::string(r.model) + "=" + fmt("%.4gM", n / 1e6) + (ok ? " " : "(out of range) ");
  }
  return o;
}

// --- 2 ---------------------------------------------------------------------
Outcome mac_oracle() {
  const auto a = static_cast<double>(count_macs(make_config("cct-7/3x1", 10, 32, 32), 32, 32).layers);
  const auto b = static_cast<double>(count_macs(make_config("cct-7/3x2", 10, 32, 32), 32, 32).layers);
  const double ratio = a / b;
  const bool ok = within(a, 0.95e9, kMacTol) && within(b, 0.28e9, kMacTol) && ratio >= kMacRatioLo && ratio <= kMacRatioHi;
  return {ok, "cct-7/3x1=" + fmt("%.3fG", a / 1e9) + " cct-7/3x2=" + fmt("%.3fG", b / 1e9) + " ratio=" + fmt("%.3f", ratio)};
}

// --- 3 ---------------------------------------------------------------------
Outcome gradient_suite() {
  const auto rows = run_gradient_suite(1);
  Outcome o{true, ""};
  double worst_kernel = 0, model_err = 0;
  std::string failed;
  for (const auto& r : rows) {
    if (r.name.rfind("cct", 0) == 0) model_err = std::max(model_err, r.max_error);
    else worst_kernel = std::max(worst_kernel, r.max_error);
    if (!r.pass()) {
      o.pass = false;
      failed += r.name + " ";
    }
  }
  o.detail = std::to_string(rows.size()) + " checks, worst kernel " + fmt("%.2e", worst_kernel) + " (tol 1e-5), end-to-end " +
             fmt("%.2e", model_err) + " (tol 1e-4)";
  if (!failed.empty()) o.detail += "; failed: " + failed;
  return o;
}

// --- 4 ---------------------------------------------------------------------
Outcome structural_invariants() {
  std::vector<std::string> failures;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };
  using TD = Tensor<double>;
  Rng rng(11);
  auto rand = [&](Shape s) {
    auto t = TD::empty(std::move(s));
    for (auto& v : t.data()) v = rng.normal();
    return t;
  };

  // SeqPool weights normalized.
  {
    Linear<double> g(8, 1, true, rng);
    const auto w = seqpool_weights(rand({4, 9, 8}), g);
    for (std::int64_t b = 0; b < 4; ++b) {
      double s = 0;
      for (std::int64_t i = 0; i < 9; ++i) s += w.at({b, 0, i});
      check(std::abs(s - 1.0) <= kSeqPoolTol, "seqpool weights sum");
    }
  }
  // Permutation invariance with pe=none, and pe=none equals the skipped addition.
  for (auto pool : {Pooling::seqpool, Pooling::class_token}) {
    ModelOptions o;
    o.pe = PeKind::none;
    o.pooling = pool;
    o.channels = 1;
    Model<double> m(make_config("cct-2/3x2", 10, 16, 16, o), 5);
    const auto tokens = m.tokenize(rand({2, 1, 16, 16}));
    const std::int64_t n = tokens.size(1);
    std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span<std::int64_t>(perm));
    std::vector<TD> rows;
    for (auto p : perm) rows.push_back(narrow(tokens, 1, p, 1));
    const auto a = m.classify_tokens(tokens, {}), b = m.classify_tokens(concat(rows, 1), {});
    for (std::int64_t i = 0; i < a.numel(); ++i)
      check(std::abs(a.data()[i] - b.data()[i]) <= kPermTol * std::max(1.0, std::abs(a.data()[i])), "permutation invariance");
    const auto skipped = m.classify_tokens(tokens, {}, false);
    for (std::int64_t i = 0; i < a.numel(); ++i) check(a.data()[i] == skipped.data()[i], "pe=none equals skipped addition");
  }
  // Eval-mode determinism with every dropout knob enabled.
  {
    ModelOptions o;
    o.channels = 1;
    o.rates = DropoutRates::tuned();
    Model<double> m(make_config("cct-2/3x2", 10, 16, 16, o), 6);
    const auto x = rand({3, 1, 16, 16});
    const auto a = m.forward(x), b = m.forward(x);
    for (std::int64_t i = 0; i < a.numel(); ++i) check(a.data()[i] == b.data()[i], "eval determinism");
  }
  // Checkpoint round trip and resume equivalence on a synthetic split.
  const auto dir = temp_dir("acceptance");
  const auto train = blobs(64, 16, 1), test = blobs(30, 16, 2);
  auto cfg_for = [&](const std::string& tag) {
    RunConfig c;
    c.epochs = 4;
    c.batch_size = 16;
    c.seed = 3;
    c.tuned = true;
    c.out = (dir / tag / "metrics.csv").string();
    c.checkpoint = (dir / tag / "ckpt").string();
    return c;
  };
  train_run(cfg_for("full"), train, test);
  {
    const auto ck = Checkpoint::load(dir / "full" / "ckpt" / "last.cctk");
    ck.save(dir / "resaved.cctk");
    check(read_file(dir / "full" / "ckpt" / "last.cctk") == read_file(dir / "resaved.cctk"), "checkpoint round trip");
  }
  auto first = cfg_for("split");
  first.stop_after = 2;
  train_run(first, train, test);
  fs::copy_file(dir / "split" / "ckpt" / "last.cctk", dir / "resume.cctk");
  auto second = cfg_for("split");
  second.resume = (dir / "resume.cctk").string();
  train_run(second, train, test);
  const auto full_rows = metrics_without_time(dir / "full" / "metrics.csv");
  check(full_rows.size() == 5, "full run metrics rows");
  check(full_rows == metrics_without_time(dir / "split" / "metrics.csv"), "resume equivalence (2+2 == 4)");
  fs::remove_all(dir);

  Outcome o{failures.empty(), ""};
  if (failures.empty()) {
    o.detail = "seqpool normalization, permutation invariance, pe=none, eval determinism, checkpoint round trip, resume 2+2==4";
  } else {
    std::sort(failures.begin(), failures.end());
    failures.erase(std::unique(failures.begin(), failures.end()), failures.end());
    for (const auto& f : failures) o.detail += f + "; ";
  }
  return o;
}

// --- 9 ---------------------------------------------------------------------
Outcome optimizer_oracles() {
  std::vector<std::string> failures;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };
  auto single = [](double v) { return ParamList<double>{{"p", param_full<double>({1}, v), true}}; };
  {
    auto ps = single(0.0);
    AdamW<double> opt(ps, {0.9, 0.999, 0.0, 0.0});
    ps[0].value.impl()->grad_buffer()[0] = 1.0;
    opt.step(0.1);
    check(std::abs(ps[0].value.data()[0] + 0.1) < 1e-12, "first step");
  }
  {
    auto ps = single(2.0);
    AdamW<double> opt(ps, {0.9, 0.999, 1e-8, 0.03});
    opt.step(0.1);
    check(ps[0].value.data()[0] == 2.0 * (1 - 0.003), "decoupled decay");
  }
  {
    LrSchedule s{5e-4, 0.0, 10, 200, 50, false};
    check(s.lr_at(s.warmup_steps()) == 5e-4, "junction value");
    check(std::abs(s.lr_at(s.warmup_steps() - 1) - 5e-4 * (1.0 - 1.0 / 500)) < 1e-15, "warmup ramp");
    check(std::abs(s.lr_at(500 + 4750) - 2.5e-4) < 1e-15, "cosine midpoint");
  }
  {
    const std::vector<std::int64_t> labels = {4};
    const double l = smoothed_cross_entropy(Tensor<double>::zeros({1, 10}), labels, 0.1).item();
    check(std::abs(l - std::log(10.0)) < 1e-12, "uniform logits ln 10");
  }
  Outcome o{failures.empty(), "AdamW first step, decoupled decay, warmup/cosine junction, CE ln 10"};
  if (!failures.empty()) {
    o.detail = "";
    for (const auto& f : failures) o.detail += f + "; ";
  }
  return o;
}

// --- slow tier -------------------------------------------------------------
struct SlowOptions {
  fs::path data_root;
  fs::path work_dir;
  std::string mnist_checkpoint;
  std::int64_t threads = 0;
};

RunConfig recipe(const std::string& dataset, const fs::path& dir, std::int64_t epochs, std::uint64_t seed) {
  RunConfig c;
  c.model = "cct-2/3x2";
  c.dataset = dataset;
  c.data_dir = dir.string();
  c.epochs = epochs;
  c.batch_size = 128;
  c.seed = seed;
  return c;
}

fs::path dataset_dir(const SlowOptions& s, const std::string& name) {
  const auto d = s.data_root / name;
  if (s.data_root.empty() || !fs::exists(d))
    fail(ErrorKind::io, name + " data not found under " + (s.data_root.empty() ? "<no --data-root>" : s.data_root.string()));
  return d;
}

Outcome mnist_training(const SlowOptions& s) {
  const auto dir = dataset_dir(s, "mnist");
  auto want = recipe("mnist", dir, kMnistEpochs, 0);
  if (!s.mnist_checkpoint.empty()) {
    const auto ck = Checkpoint::load(s.mnist_checkpoint);
    RunConfig got;
    auto model = model_from_checkpoint<float>(ck, &got);
    // The stored run must follow the criterion's recipe.
    const bool same = got.model == want.model && got.dataset == "mnist" && got.epochs == kMnistEpochs &&
                      got.batch_size == 128 && got.lr == want.lr && got.weight_decay == want.weight_decay &&
                      got.label_smoothing == want.label_smoothing && got.pos_emb == want.pos_emb && !got.tuned &&
                      got.samples_per_class == 0 && got.limit_train == 0 && got.image_size == 0 &&
                      static_cast<std::int64_t>(ck.epoch) == kMnistEpochs;
    if (!same) return {false, "checkpoint does not follow the 15-epoch default recipe (epoch " + std::to_string(ck.epoch) + ")"};
    auto [train, test] = load_mnist_dir(dir);
    const auto r = evaluate(model, test);
    return {r.acc >= kMnistThreshold, "re-evaluated final-epoch checkpoint: top-1 " + fmt("%.2f%%", r.acc) + " (threshold " +
                                          fmt("%.1f%%", kMnistThreshold) + ")"};
  }
  auto data = load_run_data(want);
  want.checkpoint = (s.work_dir / "mnist").string();
  want.out = (s.work_dir / "mnist" / "metrics.csv").string();
  const auto r = train_run(want, data.train, data.test, &std::cerr);
  const double final_acc = r.history.back().val_acc;
  return {final_acc >= kMnistThreshold, "final top-1 " + fmt("%.2f%%", final_acc) + " (best " + fmt("%.2f%%", r.best_val_acc) +
                                            ", threshold " + fmt("%.1f%%", kMnistThreshold) + ")"};
}

Outcome cifar_smoke(const SlowOptions& s) {
  auto c = recipe("cifar10", dataset_dir(s, "cifar10"), kCifarEpochs, 0);
  auto data = load_run_data(c);
  c.out = (s.work_dir / "cifar10" / "metrics.csv").string();
  const auto r = train_run(c, data.train, data.test, &std::cerr);
  const double final_acc = r.history.back().val_acc;
  return {final_acc >= kCifarThreshold, "final top-1 " + fmt("%.2f%%", final_acc) + " (threshold " + fmt("%.0f%%", kCifarThreshold) + ")"};
}

Outcome pe_ablation_direction(const SlowOptions& s) {
  auto base = recipe("cifar10", dataset_dir(s, "cifar10"), kAblationEpochs, 0);
  auto data = load_run_data(base);
  double gap_cct = 0, gap_vit = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    base.seed = seed;
    ExperimentOptions opt;
    opt.models = {"cct-2/3x2", "vit-lite-2/4"};
    const auto rows = run_experiment(ExperimentKind::pe_ablation, base, data.train, data.test, opt,
                                     (s.work_dir / ("pe_ablation_seed" + std::to_string(seed) + ".csv")).string(), &std::cerr);
    // rows: model x {learnable, sinusoidal, none}
    for (const auto& r : rows)
      if (r.status != "ok") return {false, r.setting + " " + r.status + ": " + r.note};
    gap_cct += (rows[0].best_val_acc - rows[2].best_val_acc) / 3.0;
    gap_vit += (rows[3].best_val_acc - rows[5].best_val_acc) / 3.0;
  }
  return {gap_cct < gap_vit, "mean learnable-none gap: cct-2/3x2 " + fmt("%.2f", gap_cct) + " vs vit-lite-2/4 " + fmt("%.2f", gap_vit)};
}

Outcome samples_monotonic(const SlowOptions& s) {
  auto base = recipe("cifar10", dataset_dir(s, "cifar10"), kSweepEpochs, 0);
  auto data = load_run_data(base);
  ExperimentOptions opt;
  opt.values = {500, 1000, 2000, 5000};
  const auto rows = run_experiment(ExperimentKind::samples_sweep, base, data.train, data.test, opt,
                                   (s.work_dir / "samples_sweep.csv").string(), &std::cerr);
  std::string detail;
  bool ok = true;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].status != "ok") return {false, rows[i].setting + " " + rows[i].status + ": " + rows[i].note};
    detail += rows[i].setting + "=" + fmt("%.2f", rows[i].best_val_acc) + " ";
    if (i > 0 && rows[i].best_val_acc + kSweepMargin < rows[i - 1].best_val_acc) ok = false;
  }
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance gate"};
  std::string tier = "fast";
  SlowOptions slow;
  std::string data_root, work_dir = (fs::temp_directory_path() / "cct_acceptance_runs").string();
  app.add_option("--tier", tier, "fast | slow | all")->check(CLI::IsMember({"fast", "slow", "all"}));
  app.add_option("--data-root", data_root, "directory with mnist/ and cifar10/")->envname("CCT_DATA_ROOT");
  app.add_option("--work-dir", work_dir, "where slow-tier runs write metrics");
  app.add_option("--mnist-checkpoint", slow.mnist_checkpoint, "verify criterion 5 from a finished run's last.cctk");
  app.add_option("--threads", slow.threads, "worker threads (0: all cores)");
  std::vector<int> only;
  app.add_option("--only", only, "run just these criterion numbers")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  slow.data_root = data_root;
  slow.work_dir = work_dir;
  if (slow.threads > 0) set_num_threads(static_cast<int>(slow.threads));

  const bool fast = tier != "slow", heavy = tier != "fast";
  auto selected = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  auto criterion = [&](int id, const char* name, bool in_tier, double budget, const std::function<Outcome()>& fn) {
    if (!in_tier) report(id, name, "SKIP", "not in this tier", 0.0);
    else if (!selected(id)) report(id, name, "SKIP", "not selected", 0.0);
    else run(id, name, budget, fn);
  };
  if (heavy) fs::create_directories(slow.work_dir);

  criterion(1, "count-oracle", fast, kCountSeconds, count_oracle);
  criterion(2, "mac-oracle", fast, kCountSeconds, mac_oracle);
  criterion(3, "gradient-suite", fast, kGradSeconds, gradient_suite);
  criterion(4, "structural-invariants", fast, kInvariantSeconds, structural_invariants);
  criterion(5, "mnist-15-epochs", heavy, 0, [&] { return mnist_training(slow); });
  criterion(6, "cifar10-smoke", heavy, 0, [&] { return cifar_smoke(slow); });
  criterion(7, "pe-ablation-direction", heavy, 0, [&] { return pe_ablation_direction(slow); });
  criterion(8, "samples-per-class-monotonic", heavy, 0, [&] { return samples_monotonic(slow); });
  criterion(9, "optimizer-oracles", fast, kOptimSeconds, optimizer_oracles);

  int failed = 0;
  for (const auto& l : g_lines) failed += l.status == "FAIL";
  std::cout << (failed ? "FAILED " : "OK ") << failed << " failing criteria" << std::endl;
  return failed ? 1 : 0;
}
