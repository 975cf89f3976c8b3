#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "cct/trainer.hpp"

namespace cct {

enum class ExperimentKind { pe_ablation, samples_sweep, resolution_sweep };

inline ExperimentKind parse_experiment_kind(const std::string& s) {
  if (s == "pe-ablation") return ExperimentKind::pe_ablation;
  if (s == "samples-sweep") return ExperimentKind::samples_sweep;
  if (s == "resolution-sweep") return ExperimentKind::resolution_sweep;
  fail(ErrorKind::config, "unknown experiment '" + s + "' (pe-ablation|samples-sweep|resolution-sweep)");
}

struct ExperimentOptions {
  std::vector<std::string> models;    // pe-ablation; empty: the run's model
  std::vector<std::int64_t> values;   // sweep points; empty: defaults
  bool inference_only = false;        // resolution sweep: train once, evaluate at each size
  std::string checkpoint;             // resolution sweep (inference): trained weights to evaluate
};

/// One result line. `stderr_pct` is the binomial standard error of the
/// accuracy on the evaluation split, the noise bound for comparisons.
struct ExperimentRow {
  std::string setting;
  double best_val_acc = 0;
  std::int64_t params = 0;
  double wall_seconds = 0;
  double stderr_pct = 0;
  std::string status = "ok";
  std::string note;
};

inline const char* experiment_header() { return "setting,best_val_acc,params,wall_seconds,stderr_pct,status,note"; }

inline std::string experiment_row(const ExperimentRow& r) {
  std::string note = r.note;
  for (auto& c : note)
    if (c == ',' || c == '\n') c = ';';
  char buf[160];
  std::snprintf(buf, sizeof buf, ",%.4f,%lld,%.3f,%.4f,", r.best_val_acc, static_cast<long long>(r.params),
                r.wall_seconds, r.stderr_pct);
  return r.setting + buf + r.status + "," + note;
}

inline double accuracy_stderr(double acc_pct, std::int64_t n) {
  if (n <= 0) return 0;
  const double p = acc_pct / 100.0;
  return 100.0 * std::sqrt(p * (1 - p) / static_cast<double>(n));
}

/// Runs a sweep on already-loaded splits. Rows are streamed to `out_csv` if
/// non-empty. Failures of individual settings become error rows.
inline std::vector<ExperimentRow> run_experiment(ExperimentKind kind, const RunConfig& base, const DatasetSplit& train,
                                                 const DatasetSplit& test, const ExperimentOptions& opt = {},
                                                 const std::string& out_csv = {}, std::ostream* log = nullptr) {
  std::vector<ExperimentRow> rows;
  std::ofstream csv;
  if (!out_csv.empty()) {
    const std::filesystem::path p(out_csv);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    csv.open(p);
    if (!csv) fail(ErrorKind::io, "cannot write " + out_csv);
    csv << experiment_header() << "\n";
  }
  auto emit = [&](ExperimentRow r) {
    if (csv.is_open()) {
      csv << experiment_row(r) << "\n";
      csv.flush();
    }
    if (log) *log << experiment_row(r) << std::endl;
    rows.push_back(std::move(r));
  };
  // Trains with `cfg` on prepared splits, reporting the best epoch over repeats.
  auto train_row = [&](const std::string& setting, RunConfig cfg, const DatasetSplit& tr, const DatasetSplit& te) {
    ExperimentRow r;
    r.setting = setting;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      cfg.resume.clear();
      cfg.checkpoint.clear();
      cfg.out.clear();
      for (std::int64_t rep = 0; rep < cfg.repeats; ++rep) {
        RunConfig c = cfg;
        c.seed = cfg.seed + static_cast<std::uint64_t>(rep);
        const auto res = train_run(c, tr, te, log);
        if (rep == 0 || res.best_val_acc > r.best_val_acc) r.best_val_acc = res.best_val_acc;
        r.params = res.params;
      }
      r.stderr_pct = accuracy_stderr(r.best_val_acc, te.size());
    } catch (const Error& e) {
      r.status = std::string("error[") + std::string(error_kind_name(e.kind())) + "]";
      r.note = e.what();
    }
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    emit(std::move(r));
  };

  switch (kind) {
    case ExperimentKind::pe_ablation: {
      const auto models = opt.models.empty() ? std::vector<std::string>{base.model} : opt.models;
      for (const auto& m : models)
        for (const char* pe : {"learnable", "sinusoidal", "none"}) {
          RunConfig c = base;
          c.model = m;
          c.pos_emb = pe;
          train_row("model=" + m + ";pe=" + pe, c, train, test);
        }
      break;
    }
    case ExperimentKind::samples_sweep: {
      const auto ks = opt.values.empty() ? std::vector<std::int64_t>{500, 1000, 2000, 3000, 4000, 5000} : opt.values;
      for (auto k : ks) {
        RunConfig c = base;
        c.samples_per_class = 0;
        try {
          const auto sub = subsample_per_class(train, k, base.seed);
          train_row("samples_per_class=" + std::to_string(k), c, sub, test);
        } catch (const Error& e) {
          ExperimentRow r;
          r.setting = "samples_per_class=" + std::to_string(k);
          r.status = std::string("error[") + std::string(error_kind_name(e.kind())) + "]";
          r.note = e.what();
          emit(std::move(r));
        }
      }
      break;
    }
    case ExperimentKind::resolution_sweep: {
      const auto sizes = opt.values.empty() ? std::vector<std::int64_t>{16, 24, 32, 48, 64} : opt.values;
      if (!opt.inference_only) {
        for (auto s : sizes) {
          RunConfig c = base;
          c.image_size = 0;
          try {
            train_row("train_size=" + std::to_string(s), c, resize(train, s), resize(test, s));
          } catch (const Error& e) {
            ExperimentRow r;
            r.setting = "train_size=" + std::to_string(s);
            r.status = std::string("error[") + std::string(error_kind_name(e.kind())) + "]";
            r.note = e.what();
            emit(std::move(r));
          }
        }
        break;
      }
      // Inference-only: one model trained at the native size, evaluated at each size.
      std::optional<Model<float>> model;
      if (!opt.checkpoint.empty()) {
        model.emplace(model_from_checkpoint<float>(Checkpoint::load(opt.checkpoint)));
      } else {
        RunConfig c = base;
        c.image_size = 0;
        c.out.clear();
        c.resume.clear();
        const auto dir = std::filesystem::temp_directory_path() /
                         ("cct_sweep_" + std::to_string(derive_key(base.seed, 0x5eef) % 1000000007ULL));
        c.checkpoint = dir.string();
        c.precision = 32;
        train_run(c, train, test, log);
        model.emplace(model_from_checkpoint<float>(Checkpoint::load(dir / "best.cctk")));
        std::filesystem::remove_all(dir);
      }
      const auto params = count_params(*model);
      for (auto s : sizes) {
        ExperimentRow r;
        r.setting = "eval_size=" + std::to_string(s);
        r.params = params;
        const auto t0 = std::chrono::steady_clock::now();
        try {
          const auto ev = evaluate(*model, resize(test, s));
          r.best_val_acc = ev.acc;
          r.stderr_pct = accuracy_stderr(ev.acc, ev.count);
        } catch (const Error& e) {
          r.status = std::string("error[") + std::string(error_kind_name(e.kind())) + "]";
          r.note = e.what();
        }
        r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        emit(std::move(r));
      }
      break;
    }
  }
  return rows;
}

}  // namespace cct
