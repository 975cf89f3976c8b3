#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cct/error.hpp"

namespace cct {

/// Everything needed to reproduce one training run. Serialized as flat
/// key=value text (stored inside checkpoints; also the --config file format).
struct RunConfig {
  std::string model = "cct-2/3x2";
  std::string dataset = "mnist";
  std::string data_dir;
  std::int64_t epochs = 200;
  std::int64_t stop_after = 0;  // > 0: end this invocation after that epoch (schedule still spans `epochs`)
  std::int64_t batch_size = 128;
  double lr = 5e-4;
  double min_lr = 0.0;
  double weight_decay = 3e-2;
  std::int64_t warmup_epochs = -1;  // < 0: derived from epochs, see resolved_warmup()
  bool per_epoch_lr = false;
  double label_smoothing = 0.1;
  std::string pos_emb = "learnable";
  std::string pool;  // empty: family default
  bool tuned = false;
  std::uint64_t seed = 0;
  std::int64_t image_size = 0;         // 0: native resolution
  std::int64_t samples_per_class = 0;  // 0: full training split
  std::int64_t limit_train = 0;        // 0: no cap (first N after subsampling)
  std::int64_t limit_test = 0;
  bool augment = true;
  double hflip = -1;  // < 0: dataset default
  std::string checkpoint;  // directory for last.cctk / best.cctk
  std::string resume;      // checkpoint file to continue from
  std::int64_t threads = 0;
  std::int64_t repeats = 1;
  std::string out;  // metrics CSV
  int precision = 32;
  bool prefetch = true;
  bool verbose = false;

  /// Reference schedule warms up for 10 of 200 epochs; shorter runs keep the
  /// same fraction (at least one epoch, always fewer than `epochs`).
  std::int64_t resolved_warmup() const {
    if (warmup_epochs >= 0) return warmup_epochs;
    const auto w = std::max<std::int64_t>(1, std::llround(10.0 * static_cast<double>(epochs) / 200.0));
    return std::min(w, epochs - 1);
  }

  void validate() const {
    auto positive = [](std::int64_t v, const char* what) {
      if (v < 1) fail(ErrorKind::config, std::string(what) + " must be positive, got " + std::to_string(v));
    };
    positive(epochs, "epochs");
    positive(batch_size, "batch-size");
    positive(repeats, "repeats");
    if (!(lr > 0)) fail(ErrorKind::config, "lr must be positive");
    if (min_lr < 0 || min_lr > lr) fail(ErrorKind::config, "min-lr must lie in [0, lr]");
    if (weight_decay < 0) fail(ErrorKind::config, "weight-decay must be non-negative");
    if (label_smoothing < 0 || label_smoothing >= 1) fail(ErrorKind::config, "label-smoothing must lie in [0, 1)");
    if (resolved_warmup() >= epochs && epochs > 0)
      fail(ErrorKind::config, "warmup-epochs must be below epochs");
    if (precision != 32 && precision != 64) fail(ErrorKind::config, "precision must be 32 or 64");
    if (image_size != 0 && (image_size < 8 || image_size > 128)) fail(ErrorKind::config, "image-size must lie in [8, 128]");
    if (stop_after < 0) fail(ErrorKind::config, "stop-after must be non-negative");
    if (samples_per_class < 0 || limit_train < 0 || limit_test < 0 || threads < 0)
      fail(ErrorKind::config, "counts must be non-negative");
    if (hflip > 1) fail(ErrorKind::config, "hflip must lie in [0, 1]");
  }

  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "model=" << model << "\n"
       << "dataset=" << dataset << "\n"
       << "data-dir=" << data_dir << "\n"
       << "epochs=" << epochs << "\n"
       << "batch-size=" << batch_size << "\n"
       << "lr=" << lr << "\n"
       << "min-lr=" << min_lr << "\n"
       << "weight-decay=" << weight_decay << "\n"
       << "warmup-epochs=" << warmup_epochs << "\n"
       << "per-epoch-lr=" << per_epoch_lr << "\n"
       << "label-smoothing=" << label_smoothing << "\n"
       << "pos-emb=" << pos_emb << "\n"
       << "pool=" << pool << "\n"
       << "tuned=" << tuned << "\n"
       << "seed=" << seed << "\n"
       << "image-size=" << image_size << "\n"
       << "samples-per-class=" << samples_per_class << "\n"
       << "limit-train=" << limit_train << "\n"
       << "limit-test=" << limit_test << "\n"
       << "augment=" << augment << "\n"
       << "hflip=" << hflip << "\n"
       << "precision=" << precision << "\n";
    return os.str();
  }

  /// Applies one key=value pair. Unknown keys are a config error.
  void set(const std::string& key, const std::string& value) {
    auto to_i = [&] {
      try {
        std::size_t pos = 0;
        const auto v = std::stoll(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return static_cast<std::int64_t>(v);
      } catch (const std::exception&) {
        fail(ErrorKind::config, "'" + key + "' expects an integer, got '" + value + "'");
      }
    };
    auto to_d = [&] {
      try {
        std::size_t pos = 0;
        const auto v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
      } catch (const std::exception&) {
        fail(ErrorKind::config, "'" + key + "' expects a number, got '" + value + "'");
      }
    };
    auto to_b = [&] {
      if (value == "1" || value == "true" || value == "yes" || value == "on") return true;
      if (value == "0" || value == "false" || value == "no" || value == "off") return false;
      fail(ErrorKind::config, "'" + key + "' expects a boolean, got '" + value + "'");
    };
    if (key == "model") model = value;
    else if (key == "dataset") dataset = value;
    else if (key == "data-dir") data_dir = value;
    else if (key == "epochs") epochs = to_i();
    else if (key == "stop-after") stop_after = to_i();
    else if (key == "batch-size") batch_size = to_i();
    else if (key == "lr") lr = to_d();
    else if (key == "min-lr") min_lr = to_d();
    else if (key == "weight-decay") weight_decay = to_d();
    else if (key == "warmup-epochs") warmup_epochs = to_i();
    else if (key == "per-epoch-lr") per_epoch_lr = to_b();
    else if (key == "label-smoothing") label_smoothing = to_d();
    else if (key == "pos-emb") pos_emb = value;
    else if (key == "pool") pool = value;
    else if (key == "tuned") tuned = to_b();
    else if (key == "seed") seed = static_cast<std::uint64_t>(to_i());
    else if (key == "image-size") image_size = to_i();
    else if (key == "samples-per-class") samples_per_class = to_i();
    else if (key == "limit-train") limit_train = to_i();
    else if (key == "limit-test") limit_test = to_i();
    else if (key == "augment") augment = to_b();
    else if (key == "hflip") hflip = to_d();
    else if (key == "precision") precision = static_cast<int>(to_i());
    else if (key == "checkpoint") checkpoint = value;
    else if (key == "resume") resume = value;
    else if (key == "threads") threads = to_i();
    else if (key == "repeats") repeats = to_i();
    else if (key == "out") out = value;
    else if (key == "prefetch") prefetch = to_b();
    else if (key == "verbose") verbose = to_b();
    else fail(ErrorKind::config, "unknown configuration key '" + key + "'");
  }

  /// Parses key=value lines; blank lines and '#' comments are skipped.
  void apply_text(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) fail(ErrorKind::config, "line " + std::to_string(lineno) + ": expected key=value");
      auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        const auto b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  static RunConfig from_text(const std::string& text) {
    RunConfig c;
    c.apply_text(text);
    return c;
  }
};

}  // namespace cct
