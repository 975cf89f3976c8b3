#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cct/checkpoint.hpp"
#include "cct/config.hpp"
#include "cct/data.hpp"
#include "cct/model.hpp"
#include "cct/optim.hpp"
#include "cct/parallel.hpp"

namespace cct {

struct EpochMetrics {
  std::int64_t epoch = 0;
  double train_loss = 0;
  double train_acc = 0;
  double val_loss = 0;
  double val_acc = 0;
  double lr = 0;
  double wall_seconds = 0;
};

inline const char* metrics_header() { return "epoch,train_loss,train_acc,val_loss,val_acc,lr,wall_seconds"; }

inline std::string metrics_row(const EpochMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%.6f,%.4f,%.6f,%.4f,%.6e,%.3f", static_cast<long long>(m.epoch), m.train_loss,
                m.train_acc, m.val_loss, m.val_acc, m.lr, m.wall_seconds);
  return buf;
}

struct TrainResult {
  std::vector<EpochMetrics> history;
  double best_val_acc = 0;
  std::int64_t best_epoch = 0;
  std::int64_t params = 0;
  double wall_seconds = 0;
};

struct EvalResult {
  double loss = 0;  // plain cross-entropy
  double acc = 0;   // top-1, percent
  std::int64_t count = 0;
};

struct PreparedData {
  DatasetSplit train;
  DatasetSplit test;
};

/// Applies the run's subsampling, caps and resizing to loaded splits.
inline PreparedData prepare_data(const RunConfig& cfg, DatasetSplit train, DatasetSplit test) {
  if (cfg.samples_per_class > 0) train = subsample_per_class(train, cfg.samples_per_class, cfg.seed);
  auto cap = [](DatasetSplit s, std::int64_t n) {
    if (n <= 0 || n >= s.size()) return s;
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    return select(s, idx);
  };
  train = cap(std::move(train), cfg.limit_train);
  test = cap(std::move(test), cfg.limit_test);
  if (cfg.image_size > 0 && cfg.image_size != train.height()) {
    train = resize(train, cfg.image_size);
    test = resize(test, cfg.image_size);
  }
  return {std::move(train), std::move(test)};
}

/// Checks every name in the configuration before any data is read.
inline void check_run_names(const RunConfig& cfg) {
  cfg.validate();
  parse_model_name(cfg.model);
  parse_pe_kind(cfg.pos_emb);
  if (!cfg.pool.empty()) parse_pooling(cfg.pool);
  dataset_stats(cfg.dataset);
}

inline PreparedData load_run_data(const RunConfig& cfg) {
  if (cfg.data_dir.empty()) fail(ErrorKind::io, "no --data-dir given for dataset " + cfg.dataset);
  auto [train, test] = load_dataset(cfg.dataset, cfg.data_dir);
  return prepare_data(cfg, std::move(train), std::move(test));
}

inline ModelOptions model_options(const RunConfig& cfg, std::int64_t channels) {
  ModelOptions o;
  o.pe = parse_pe_kind(cfg.pos_emb);
  if (!cfg.pool.empty()) o.pooling = parse_pooling(cfg.pool);
  o.rates = cfg.tuned ? DropoutRates::tuned() : DropoutRates::untuned();
  o.channels = channels;
  return o;
}

inline ModelConfig model_config_for(const RunConfig& cfg, const DatasetSplit& train) {
  return make_config(cfg.model, train.class_count, train.height(), train.width(), model_options(cfg, train.channels()));
}

inline AugmentPolicy augment_policy(const RunConfig& cfg) {
  if (!cfg.augment) return AugmentPolicy::none();
  auto p = AugmentPolicy::for_dataset(cfg.dataset);
  if (cfg.hflip >= 0) p.hflip_prob = cfg.hflip;
  return p;
}

/// Unaugmented full-split loss and top-1 accuracy in eval mode.
template <class T>
EvalResult evaluate(const Model<T>& model, const DatasetSplit& split, std::int64_t batch_size = 256) {
  if (split.class_count != model.config().num_classes)
    fail(ErrorKind::config, "dataset has " + std::to_string(split.class_count) + " classes but the model predicts " +
                                std::to_string(model.config().num_classes));
  NoGrad<T> no_grad;
  BatchStream stream(split, batch_size, 0, AugmentPolicy::none(), 0, false, false);
  EvalResult r;
  double loss_sum = 0;
  std::int64_t correct = 0;
  while (auto b = stream.next()) {
    Tensor<T> x;
    if constexpr (std::is_same_v<T, float>) x = b->images;
    else x = b->images.template cast<T>();
    const auto logits = model.forward(x);
    const std::int64_t n = logits.size(0), K = logits.size(1);
    loss_sum += static_cast<double>(smoothed_cross_entropy(logits, b->labels, 0.0).item()) * static_cast<double>(n);
    const T* p = logits.ptr();
    for (std::int64_t i = 0; i < n; ++i) {
      std::int64_t arg = 0;
      for (std::int64_t j = 1; j < K; ++j)
        if (p[i * K + j] > p[i * K + arg]) arg = j;
      correct += arg == b->labels[static_cast<std::size_t>(i)];
    }
    r.count += n;
  }
  r.loss = r.count ? loss_sum / static_cast<double>(r.count) : 0.0;
  r.acc = r.count ? 100.0 * static_cast<double>(correct) / static_cast<double>(r.count) : 0.0;
  return r;
}

/// Stores model parameters under "param/<name>".
template <class T>
void store_parameters(Checkpoint& ck, const Model<T>& model) {
  for (const auto& p : model.parameters()) ck.put("param/" + p.name, p.value);
}

template <class T>
void load_parameters(const Checkpoint& ck, Model<T>& model) {
  for (auto& p : model.parameters()) {
    if (!ck.has("param/" + p.name)) fail(ErrorKind::format, "checkpoint lacks parameter '" + p.name + "'");
    if (ck.at("param/" + p.name).dtype != dtype_of<T>())
      fail(ErrorKind::config, "checkpoint precision differs from --precision");
    ck.load_into("param/" + p.name, p.value);
  }
}

/// Rebuilds the model a checkpoint was trained with and loads its weights.
template <class T>
Model<T> model_from_checkpoint(const Checkpoint& ck, RunConfig* cfg_out = nullptr) {
  const auto cfg = RunConfig::from_text(ck.get_text("config"));
  const auto classes = ck.get_i64("model.classes"), channels = ck.get_i64("model.channels");
  const auto h = ck.get_i64("model.image_h"), w = ck.get_i64("model.image_w");
  Model<T> model(make_config(cfg.model, classes, h, w, model_options(cfg, channels)), cfg.seed);
  load_parameters(ck, model);
  if (cfg_out) *cfg_out = cfg;
  return model;
}

namespace detail {

inline std::vector<std::string> read_metrics_rows(const std::filesystem::path& path, std::int64_t up_to_epoch) {
  std::vector<std::string> rows;
  std::ifstream is(path);
  std::string line;
  bool header = true;
  while (std::getline(is, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    if (std::stoll(line.substr(0, line.find(','))) <= up_to_epoch) rows.push_back(line);
  }
  return rows;
}

}  // namespace detail

/// Warmup + cosine AdamW training with label smoothing. Validation runs on the
/// test split after every epoch. Writes metrics/checkpoints when configured.
template <class T>
TrainResult train_model(const RunConfig& cfg, const DatasetSplit& train, const DatasetSplit& test,
                        std::ostream* log = nullptr) {
  cfg.validate();
  train.validate();
  test.validate();
  if (train.class_count != test.class_count) fail(ErrorKind::config, "train/test class counts differ");
  const auto t_start = std::chrono::steady_clock::now();

  const ModelConfig mcfg = model_config_for(cfg, train);
  Model<T> model(mcfg, cfg.seed);
  AdamWOptions aopt;
  aopt.weight_decay = cfg.weight_decay;
  AdamW<T> opt(model.parameters(), aopt);

  LrSchedule sched;
  sched.base_lr = cfg.lr;
  sched.min_lr = cfg.min_lr;
  sched.warmup_epochs = cfg.resolved_warmup();
  sched.total_epochs = cfg.epochs;
  sched.steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  sched.per_epoch = cfg.per_epoch_lr;
  sched.validate();

  Rng drop_rng(derive_key(cfg.seed, 0xd50));
  std::int64_t global_step = 0, start_epoch = 1;
  double elapsed_before = 0;
  TrainResult result;
  result.params = count_params(model);

  auto params = model.parameters();
  if (!cfg.resume.empty()) {
    const auto ck = Checkpoint::load(cfg.resume);
    if (ck.model != cfg.model) fail(ErrorKind::config, "checkpoint is for model '" + ck.model + "', not '" + cfg.model + "'");
    load_parameters(ck, model);
    for (std::size_t k = 0; k < params.size(); ++k) {
      opt.first_moments()[k] = ck.get<T>("adamw.m/" + params[k].name);
      opt.second_moments()[k] = ck.get<T>("adamw.v/" + params[k].name);
    }
    opt.set_step_count(ck.get_i64("adamw.step"));
    global_step = ck.get_i64("schedule.step");
    drop_rng.set_state(ck.get_text("rng.dropout"));
    result.best_val_acc = ck.get_f64("best.val_acc");
    result.best_epoch = ck.get_i64("best.epoch");
    elapsed_before = ck.get_f64("elapsed_seconds");
    start_epoch = static_cast<std::int64_t>(ck.epoch) + 1;
  }

  std::ofstream csv;
  if (!cfg.out.empty()) {
    const std::filesystem::path out(cfg.out);
    if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
    std::vector<std::string> kept;
    if (!cfg.resume.empty() && std::filesystem::exists(out)) kept = detail::read_metrics_rows(out, start_epoch - 1);
    csv.open(out, std::ios::trunc);
    if (!csv) fail(ErrorKind::io, "cannot write metrics file " + out.string());
    csv << metrics_header() << "\n";
    for (const auto& r : kept) csv << r << "\n";
    csv.flush();
  }

  auto save = [&](const std::filesystem::path& path, std::int64_t epoch, double elapsed) {
    Checkpoint ck;
    ck.model = cfg.model;
    ck.epoch = static_cast<std::uint32_t>(epoch);
    ck.put_text("config", cfg.to_text());
    ck.put_i64("model.classes", mcfg.num_classes);
    ck.put_i64("model.channels", mcfg.channels);
    ck.put_i64("model.image_h", mcfg.image_h);
    ck.put_i64("model.image_w", mcfg.image_w);
    store_parameters(ck, model);
    for (std::size_t k = 0; k < params.size(); ++k) {
      ck.put("adamw.m/" + params[k].name, opt.first_moments()[k]);
      ck.put("adamw.v/" + params[k].name, opt.second_moments()[k]);
    }
    ck.put_i64("adamw.step", opt.step_count());
    ck.put_i64("schedule.step", global_step);
    ck.put_text("rng.dropout", drop_rng.state());
    ck.put_f64("best.val_acc", result.best_val_acc);
    ck.put_i64("best.epoch", result.best_epoch);
    ck.put_f64("elapsed_seconds", elapsed);
    ck.save(path);
  };

  const AugmentPolicy policy = augment_policy(cfg);
  const std::int64_t last_epoch = cfg.stop_after > 0 ? std::min(cfg.stop_after, cfg.epochs) : cfg.epochs;
  for (std::int64_t epoch = start_epoch; epoch <= last_epoch; ++epoch) {
    BatchStream stream(train, cfg.batch_size, cfg.seed, policy, epoch, true, cfg.prefetch);
    double loss_sum = 0, lr = 0;
    std::int64_t correct = 0, seen = 0, step_in_epoch = 0;
    while (auto b = stream.next()) {
      ++global_step;
      ++step_in_epoch;
      lr = sched.lr_at(global_step);
      Tensor<T> x;
      if constexpr (std::is_same_v<T, float>) x = b->images;
      else x = b->images.template cast<T>();
      Tape<T> tape;
      TapeScope<T> scope(tape);
      const ForwardContext ctx{true, &drop_rng};
      const auto logits = model.forward(x, ctx);
      auto loss = smoothed_cross_entropy(logits, b->labels, cfg.label_smoothing);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) {
        std::ostringstream os;
        os << "non-finite loss at epoch " << epoch << ", step " << global_step << " (batch " << step_in_epoch
           << "), lr " << lr;
        fail(ErrorKind::numeric, os.str());
      }
      tape.backward(loss);
      opt.step(lr);
      opt.zero_grad();

      const std::int64_t n = logits.size(0), K = logits.size(1);
      const T* p = logits.ptr();
      for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t arg = 0;
        for (std::int64_t j = 1; j < K; ++j)
          if (p[i * K + j] > p[i * K + arg]) arg = j;
        correct += arg == b->labels[static_cast<std::size_t>(i)];
      }
      loss_sum += lv * static_cast<double>(n);
      seen += n;
      if (log && cfg.verbose && step_in_epoch % 50 == 0)
        *log << "  epoch " << epoch << " step " << step_in_epoch << "/" << stream.batch_count() << " loss "
             << loss_sum / static_cast<double>(seen) << std::endl;
    }
    const auto val = evaluate(model, test);
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(seen);
    m.train_acc = 100.0 * static_cast<double>(correct) / static_cast<double>(seen);
    m.val_loss = val.loss;
    m.val_acc = val.acc;
    m.lr = lr;
    m.wall_seconds = elapsed_before + std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    result.history.push_back(m);
    const bool best = m.val_acc > result.best_val_acc || result.best_epoch == 0;
    if (best) {
      result.best_val_acc = m.val_acc;
      result.best_epoch = epoch;
    }
    if (csv.is_open()) {
      csv << metrics_row(m) << "\n";
      csv.flush();
    }
    if (log) *log << cfg.model << " " << metrics_row(m) << std::endl;
    if (!cfg.checkpoint.empty()) {
      const std::filesystem::path dir(cfg.checkpoint);
      save(dir / "last.cctk", epoch, m.wall_seconds);
      if (best) save(dir / "best.cctk", epoch, m.wall_seconds);
    }
  }
  result.wall_seconds =
      elapsed_before + std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return result;
}

/// Dispatches on the configured precision.
inline TrainResult train_run(const RunConfig& cfg, const DatasetSplit& train, const DatasetSplit& test,
                             std::ostream* log = nullptr) {
  return cfg.precision == 64 ? train_model<double>(cfg, train, test, log) : train_model<float>(cfg, train, test, log);
}

}  // namespace cct
